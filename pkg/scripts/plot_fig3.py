"""Text summary of a fig3.csv: mean success per arm at each eval step.

    python scripts/plot_fig3.py runs/fig3-fig3_desk/fig3.csv
"""
import sys
from collections import defaultdict

import numpy as np

from dualgoal.harness import read_metrics


def main(path):
    curves = defaultdict(lambda: defaultdict(list))
    for row in read_metrics(path):
        curves[(row["puzzle"], row["arm"])][int(row["step"])].append(float(row["success_rate"]))
    for (puzzle, arm), by_step in sorted(curves.items()):
        print(f"{puzzle} {arm}")
        for step in sorted(by_step):
            v = np.asarray(by_step[step])
            bar = "#" * int(round(40 * v.mean()))
            print(f"  {step:>8}  {v.mean():.3f} +- {v.std():.3f}  {bar}")


if __name__ == "__main__":
    main(sys.argv[1])
