"""Original vs ideal-dual success curves on Lights Out.

    python scripts/reproduce_fig3.py                       # reduced network, ~30 min on one core
    python scripts/reproduce_fig3.py configs/puzzle_4x5.txt  # full-size network (very slow on CPU)

Writes fig3.csv, fig3_summary.csv and one run directory per (puzzle, arm, seed).
"""
import sys
from pathlib import Path

from dualgoal.config import ExperimentConfig
from dualgoal.harness import reproduce_fig3

ROOT = Path(__file__).resolve().parent.parent


def main(argv):
    cfg_path = Path(argv[0]) if argv else ROOT / "configs" / "fig3_desk.txt"
    out = Path(argv[1]) if len(argv) > 1 else ROOT / "runs" / f"fig3-{cfg_path.stem}"
    cfg = ExperimentConfig.load(cfg_path)
    summary = reproduce_fig3(cfg, out)
    for row in summary:
        print(f"{row['puzzle']:<12} {row['arm']:<11} final {row['final_success']:.3f}  auc {row['auc']:.3f}")
    print(f"curves in {out / 'fig3.csv'}")


if __name__ == "__main__":
    main(sys.argv[1:])
