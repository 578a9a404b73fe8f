"""Exhaustive checks of the dual-representation results on small puzzles.

    python scripts/verify_theorems.py [gamma]
"""
import sys

from dualgoal.env import ExBcmpSpec, PuzzleSpec
from dualgoal.verify import check_distance_value_identity, check_noise_invariance, check_sufficiency


def main(argv):
    gamma = float(argv[0]) if argv else 0.95
    reports = []
    for shape in ((1, 1), (1, 2), (2, 2), (2, 3), (3, 3)):
        spec = PuzzleSpec(*shape)
        reports.append(check_sufficiency(spec, gamma))
        reports.append(check_distance_value_identity(spec, gamma, n_goals=8))
    for noise in (2, 6):
        reports.append(check_noise_invariance(ExBcmpSpec(PuzzleSpec(2, 2), noise), gamma, samples=100, seed=0))
    for r in reports:
        print(r.to_text())
    ok = all(r.passed for r in reports)
    print("all checks passed" if ok else "some checks FAILED")
    return 0 if ok else 3


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
