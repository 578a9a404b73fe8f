"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the "acceptance criteria" section of the pytest
summary. Run standalone with ``python tests/test_acceptance.py``.

Criterion 7 at full scale (four seeds of the [1024]x4 network for 1e5 steps
per arm) needs roughly 200 CPU-hours here; it runs only with
``DGRD_FULL_FIG3=1``. The reduced-network variant runs by default.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from dualgoal.cli import main as cli_main
from dualgoal.config import ExperimentConfig
from dualgoal.data import RelabelRatios, collect_dataset
from dualgoal.env import ExBcmpSpec, PuzzleSpec, emit, to_bits
from dualgoal.gcdqn import greedy_actions, original_encoder, rollout_lengths, train_dqn
from dualgoal.harness import reproduce_fig3
from dualgoal.nn import expectile_loss
from dualgoal.oracle import UNREACHABLE, bfs_distances, value_iteration
from dualgoal.repr_iql import ReprTrainConfig, encode_goal, fit_table, train_repr, value
from dualgoal.verify import check_distance_value_identity, check_noise_invariance, check_sufficiency

from .conftest import ACCEPTANCE_LINES
from .gradcheck import expectile_gradcheck, mlp_gradcheck

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
GAMMA = 0.95


def record(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def skip(n: int, name: str, reason: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n} SKIP {name}: {reason}")
    pytest.skip(reason)


def test_c1_sufficiency():
    t0 = time.perf_counter()
    reports = [check_sufficiency(PuzzleSpec(*shape), GAMMA) for shape in ((1, 1), (2, 2), (2, 3))]
    elapsed = time.perf_counter() - t0
    pairs = {r.instance.split()[0]: r.pairs_checked for r in reports}
    bad = sum(len(r.violations) for r in reports)
    record(1, "greedy dual policy is optimal", bad == 0 and elapsed < 10,
           f"pairs {pairs}, violations {bad}, {elapsed:.2f}s (limit 10s)")


def test_c2_noise_invariance():
    t0 = time.perf_counter()
    r = check_noise_invariance(ExBcmpSpec(PuzzleSpec(2, 2), 6), GAMMA, samples=100, seed=0)
    elapsed = time.perf_counter() - t0
    rate = r.notes["control_differ_rate"]
    record(2, "ideal dual rep ignores noise", r.passed and rate >= 0.95 and elapsed < 10,
           f"{r.pairs_checked} same-latent pairs, {len(r.violations)} violations, "
           f"control differ rate {rate:.3f} (need >= 0.95), {elapsed:.2f}s")


def test_c3_distance_value_identity():
    t0 = time.perf_counter()
    r = check_distance_value_identity(PuzzleSpec(2, 3), GAMMA, tol=1e-9, n_goals=8, seed=0)
    elapsed = time.perf_counter() - t0
    err = r.notes["max_abs_error"]
    record(3, "value iteration matches closed forms", r.passed and err < 1e-9 and elapsed < 10,
           f"sup error {err:.2e} over {r.pairs_checked} pairs (tol 1e-9), {elapsed:.2f}s")


def test_c4_gradients():
    t0 = time.perf_counter()
    mlp = max(mlp_gradcheck(seed, (5, 7, 3)) for seed in range(20))
    exp = max(expectile_gradcheck(seed) for seed in range(20))
    elapsed = time.perf_counter() - t0
    record(4, "analytic gradients match finite differences", mlp < 1e-4 and exp < 1e-4 and elapsed < 30,
           f"worst rel error mlp {mlp:.2e}, expectile {exp:.2e} (tol 1e-4), 20 seeds, {elapsed:.2f}s")


def test_c5_expectile_identities():
    rng = np.random.default_rng(0)
    u = rng.standard_normal(1000) * 3
    half = expectile_loss(u, 0.5)[0] == 0.5 * np.mean(u * u)
    plus = expectile_loss(np.array([1.0]), 0.7)[0] == 0.7
    minus = expectile_loss(np.array([-1.0]), 0.7)[0] == (1.0 - 0.7)
    record(5, "expectile identities", half and plus and minus,
           f"kappa=0.5 half squared error exact: {half}; kappa=0.7 u=1 -> 0.7: {plus}; u=-1 -> 0.3: {minus}")


# -- criterion 6: exhaustive optimality on 1x2 --------------------------------

SPEC_1X2 = PuzzleSpec(1, 2)
C6_STEPS = 20_000


def full_support_1x2():
    return collect_dataset(SPEC_1X2, 400, 10, 0, starts=np.arange(SPEC_1X2.n_states))


def test_c6a_dqn_optimal_on_1x2():
    t0 = time.perf_counter()
    enc = original_encoder(SPEC_1X2.width)
    model = train_dqn(full_support_1x2(), enc, enc, C6_STEPS, hidden=(32, 32), batch_size=256, lr=3e-4,
                      tau=0.05, gamma=GAMMA, ratios=RelabelRatios(0.2, 0.0, 0.5, 0.3), seed=0)
    elapsed = time.perf_counter() - t0
    s, g = (a.ravel().astype(np.uint64) for a in np.meshgrid(np.arange(4), np.arange(4), indexing="ij"))
    got = rollout_lengths(SPEC_1X2, lambda x, y: greedy_actions(model, enc, x, y), s, g, SPEC_1X2.n_actions)
    want = np.array([bfs_distances(SPEC_1X2, int(gg)).dist[int(ss)] for ss, gg in zip(s, g)], dtype=np.int64)
    want[want == UNREACHABLE] = -1
    mismatched = int(np.sum(got != want))
    record(6, "1x2 DQN greedy policy is BFS-optimal", mismatched == 0 and elapsed < 300,
           f"{16 - mismatched}/16 pairs match BFS step counts (unreachable pairs must fail), "
           f"{C6_STEPS} steps, {elapsed:.0f}s (limit 300s)")


def test_c6b_factored_value_matches_vstar():
    t0 = time.perf_counter()
    cfg = ReprTrainConfig(gamma=GAMMA, kappa=0.7, batch_size=256, learning_rate=1e-4, gradient_steps=C6_STEPS,
                          target_update_rate=0.05, hidden=(32, 32), n_dim=16, seed=0)
    model, _ = train_repr(full_support_1x2(), cfg)
    elapsed = time.perf_counter() - t0
    s, g = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    f = value(model, to_bits(s.ravel().astype(np.uint64), 2), to_bits(g.ravel().astype(np.uint64), 2)).reshape(4, 4)
    vstar = np.stack([value_iteration(SPEC_1X2, gg, GAMMA).value for gg in range(4)], axis=1)
    err = float(np.abs(f - vstar).max())
    record(6, "1x2 factored f matches V*", err < 0.1 and elapsed < 300,
           f"max |f - V*| = {err:.3f} over 16 pairs (tol 0.1), {C6_STEPS} steps, {elapsed:.0f}s (limit 300s)")


# -- criterion 7: original vs ideal dual -------------------------------------------

def _fig3_check(cfg: ExperimentConfig, out: Path, label: str, limit_s: float):
    t0 = time.perf_counter()
    summary = reproduce_fig3(cfg, out)
    elapsed = time.perf_counter() - t0
    rows = {r["arm"]: r for r in summary if r["puzzle"] == "puzzle-4x5"}
    dual, orig = rows["ideal_dual"], rows["original"]
    gap = dual["final_success"] - orig["final_success"]
    ok = dual["auc"] > orig["auc"] and gap >= 0.10 and elapsed < limit_s
    record(7, f"dual beats original ({label})", ok,
           f"AUC dual {dual['auc']:.3f} vs original {orig['auc']:.3f}; final dual {dual['final_success']:.3f} "
           f"vs original {orig['final_success']:.3f} (gap {gap:+.3f}, need >= +0.100); "
           f"{len(cfg.fig3_seeds)} seeds, {cfg.gradient_steps} steps, {elapsed / 60:.1f} min")


def test_c7_fig3_full_scale(tmp_path):
    if os.environ.get("DGRD_FULL_FIG3") != "1":
        skip(7, "dual beats original (full-size hyperparameters)",
             "needs ~200 CPU-hours at [1024]x4, batch 1024; set DGRD_FULL_FIG3=1 to run")
    cfg = ExperimentConfig.load(CONFIGS / "puzzle_4x5.txt", {"fig3_puzzles": "4x5"})
    _fig3_check(cfg, tmp_path / "fig3-full", "full-size hyperparameters", limit_s=2 * 3600)


def test_c7_fig3_desk_scale(tmp_path):
    cfg = ExperimentConfig.load(CONFIGS / "fig3_desk.txt")
    _fig3_check(cfg, tmp_path / "fig3-desk", "reduced network [256,256], batch 256", limit_s=2 * 3600)


# -- criterion 8 ---------------------------------------------------------------

def test_c8_inner_product_fits_table():
    table = np.random.default_rng(0).uniform(0.0, 5.0, size=(8, 8))
    t0 = time.perf_counter()
    _, history = fit_table(table, n_dim=16, hidden=(64,), steps=50_000, lr=1e-3, seed=0, target_mse=1e-3)
    elapsed = time.perf_counter() - t0
    step, mse = history[-1]
    record(8, "N=16 inner product fits a random 8x8 table", mse < 1e-3 and step <= 50_000 and elapsed < 120,
           f"MSE {mse:.4e} after {step} steps (need < 1e-3 within 50000), {elapsed:.1f}s")


# -- criterion 9 -------------------------------------------------------------------

def cosine_distance(a, b):
    return 1.0 - float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_c9_learned_noise_robustness():
    spec = ExBcmpSpec(PuzzleSpec(2, 2), 4)
    ds = collect_dataset(spec.base, 2000, 25, 0, noise_bits=4)
    t0 = time.perf_counter()
    ratios = []
    for seed in range(4):
        cfg = ReprTrainConfig(batch_size=256, learning_rate=1e-3, gradient_steps=5000, hidden=(64, 64),
                              n_dim=16, target_update_rate=0.02, seed=seed)
        model, _ = train_repr(ds, cfg)
        rng = np.random.default_rng(100 + seed)
        same, diff = [], []
        for _ in range(200):
            z = int(rng.integers(16))
            g1, g2 = emit(spec, z, rng), emit(spec, z, rng)
            while g2 == g1:
                g2 = emit(spec, z, rng)
            z2 = int(rng.integers(15))
            z2 += z2 >= z
            e1 = encode_goal(model, g1, spec.width)
            same.append(cosine_distance(e1, encode_goal(model, g2, spec.width)))
            diff.append(cosine_distance(e1, encode_goal(model, emit(spec, z2, rng), spec.width)))
        ratios.append(float(np.median(same) / np.median(diff)))
    elapsed = time.perf_counter() - t0
    ok = all(r <= 0.2 for r in ratios) and elapsed < 600
    record(9, "learned goal encodings ignore noise", ok,
           f"median same/different cosine-distance ratio per seed {[round(r, 3) for r in ratios]} "
           f"(need <= 0.2 on every seed), 200 pairs each, {elapsed:.0f}s")


# -- criterion 10 ------------------------------------------------------------------

def test_c10_determinism(tmp_path):
    args = ["--n_x=2", "--n_y=3", "--n_traj=100", "--traj_len=10", "--hidden=32,32", "--batch_size=64",
            "--gradient_steps=60", "--eval_every=20", "--n_tasks=3", "--episodes_per_task=3",
            "--scramble_presses=4", "--goal_presses=3", "--n_landmarks=8", "--repr_dim=8",
            "--learning_rate=0.001", "--encoder=learned_dual"]
    dirs = []
    for name in ("first", "second"):
        d = tmp_path / name
        assert cli_main(["gen-data", *args, f"--run_dir={d}"]) == 0
        assert cli_main(["train", *args, f"--run_dir={d}", "--phase=both"]) == 0
        dirs.append(d)
    files = ["dataset.dgrd", "metrics.csv", "policy_eval_tasks.csv", "repr.ckpt", "policy.ckpt"]
    differing = [f for f in files if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes()]
    record(10, "repeated runs are bit-identical", not differing,
           f"compared {', '.join(files)}; differing: {differing or 'none'}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
