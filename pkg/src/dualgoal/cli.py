"""Command-line entry point: ``dualgoal <command> [--config FILE] [--key=value ...]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime fault,
3 a theorem check failed.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .binfmt import FormatError
from .config import FULL_BUDGET_STEPS, PHASES, ConfigError, ExperimentConfig
from .env import ContractError, ExBcmpSpec
from .nn import NonFiniteError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

FAULTS = ("none", "distance")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualgoal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="flat key = value config file")
        sp.add_argument("--full-budget", action="store_true",
                        help=f"train for {FULL_BUDGET_STEPS:,} gradient steps instead of the desk budget")
        return sp

    g = common(sub.add_parser("gen-data", help="collect the random-press dataset"))
    g.add_argument("--out", type=Path, help="dataset path (default: dataset_path key or <run_dir>/dataset.dgrd)")

    v = common(sub.add_parser("verify", help="run the exhaustive theorem checks"))
    v.add_argument("--jsonl", type=Path, help="also write structured records here")
    v.add_argument("--inject-fault", choices=FAULTS, default="none", help=argparse.SUPPRESS)

    t = common(sub.add_parser("train", help="train the representation and/or the policy"))
    t.add_argument("--phase", choices=PHASES, default="policy")

    e = common(sub.add_parser("eval", help="evaluate a trained policy checkpoint"))
    e.add_argument("--checkpoint", type=Path, help="default: <run_dir>/policy.ckpt")

    f = common(sub.add_parser("reproduce-fig3", help="original vs ideal-dual curves on the configured puzzles"))
    f.add_argument("--out", type=Path, help="output directory")

    i = sub.add_parser("inspect-dataset", help="summarize a dataset file")
    i.add_argument("path", type=Path)
    return p


def parse_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    it = iter(extra)
    for arg in it:
        if not arg.startswith("--"):
            raise UsageError(f"unexpected argument {arg!r}; overrides look like --key=value")
        body = arg[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise UsageError(f"override {arg} needs a value")
            key = body
        out[key] = value
    return out


def load_config(args, overrides: dict[str, str]) -> ExperimentConfig:
    if getattr(args, "full_budget", False):
        overrides = {"gradient_steps": str(FULL_BUDGET_STEPS), **overrides}
    if args.config is not None:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_strings(overrides)


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    from .harness import RunContext, gen_data

    if args.out is not None:
        path = args.out
    elif cfg.dataset_path:
        path = Path(cfg.dataset_path)
    else:
        path = RunContext.create(cfg, "run").run_dir / "dataset.dgrd"
    ds = gen_data(cfg, path)
    print(f"wrote {path}: {cfg.spec.name}, {ds.n_traj} trajectories x {ds.traj_len} steps "
          f"= {ds.n_transitions} transitions, noise_bits={ds.noise_bits}")
    return EXIT_OK


def corrupted_distances(spec, goal, cap):
    """Fault-injection hook: reverses distances so the greedy policy walks away from the goal."""
    from .oracle import UNREACHABLE, DistanceField, bfs_distances

    d = bfs_distances(spec, goal, cap).dist.copy()
    reach = d != UNREACHABLE
    d[reach] = d[reach].max() - d[reach]
    return DistanceField(spec, goal, d)


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    from .oracle import bfs_distances
    from .verify import check_distance_value_identity, check_noise_invariance, check_sufficiency

    distance_fn = corrupted_distances if args.inject_fault == "distance" else bfs_distances
    noise = cfg.noise_bits or cfg.verify_noise_bits
    reports = [
        check_sufficiency(cfg.spec, cfg.gamma, cfg.verify_cap, distance_fn=distance_fn),
        check_noise_invariance(ExBcmpSpec(cfg.spec, noise), cfg.gamma, cfg.verify_samples, cfg.seed,
                               cfg.n_landmarks, cap=cfg.verify_cap),
        check_distance_value_identity(cfg.spec, cfg.gamma, 1e-9, 8, cfg.seed, cfg.verify_cap),
    ]
    for r in reports:
        print(r.to_text())
    if args.jsonl is not None:
        args.jsonl.write_text("".join(line + "\n" for r in reports for line in r.to_records()))
    ok = all(r.passed for r in reports)
    print("all checks passed" if ok else "theorem check FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_train(cfg: ExperimentConfig, args) -> int:
    from .harness import RunContext, train

    ctx = RunContext.create(cfg, "run")
    train(ctx, args.phase)
    print(f"run directory: {ctx.run_dir}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    from .gcdqn import evaluate
    from .harness import MetricsWriter, RunContext, build_encoders, eval_tasks, load_or_fail_dataset, load_policy

    ctx = RunContext.create(cfg, "run")
    ckpt = args.checkpoint or ctx.run_dir / "policy.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"policy checkpoint {ckpt} not found")
    dataset = load_or_fail_dataset(ctx)
    repr_path = Path(cfg.repr_checkpoint) if cfg.repr_checkpoint else ctx.run_dir / "repr.ckpt"
    goal_enc, state_enc = build_encoders(cfg, dataset, repr_path)
    model = load_policy(ckpt, state_enc, cfg.learning_rate, cfg.target_update_rate)
    tasks = eval_tasks(cfg)
    res = evaluate(model, goal_enc, tasks, cfg.episodes_per_task, cfg.spec, cfg.noise_bits,
                   np.random.default_rng([cfg.eval_seed, cfg.seed]))
    writer = MetricsWriter(ctx.run_dir / "metrics.csv")
    for i, rate in enumerate(res.per_task):
        writer.append(run_id=ctx.run_id, phase="eval", step=0, task_id=i, success_rate=rate)
        print(f"task {i}: start={tasks[i].start:#x} goal={tasks[i].goal:#x} success={rate:.3f}")
    print(f"mean success {res.mean:.3f}")
    return EXIT_OK


def cmd_reproduce_fig3(cfg: ExperimentConfig, args) -> int:
    from .harness import default_run_dir, reproduce_fig3

    out = args.out or (Path(cfg.run_dir) if cfg.run_dir else default_run_dir("fig3", cfg))
    summary = reproduce_fig3(cfg, out)
    print(f"{'puzzle':<12}{'arm':<12}{'seeds':>6}{'final':>10}{'auc':>10}")
    for row in summary:
        print(f"{row['puzzle']:<12}{row['arm']:<12}{row['seeds']:>6}{row['final_success']:>10.3f}{row['auc']:>10.3f}")
    print(f"curves: {out / 'fig3.csv'}")
    return EXIT_OK


def cmd_inspect_dataset(args) -> int:
    from .data import load_dataset

    ds = load_dataset(args.path)
    latent = ds.latent(ds.states)
    counts = np.bincount(ds.actions.ravel(), minlength=ds.spec.n_actions)
    print(f"puzzle: {ds.spec.name}  noise_bits: {ds.noise_bits}")
    print(f"trajectories: {ds.n_traj}  length: {ds.traj_len}  transitions: {ds.n_transitions}")
    print(f"distinct observations: {ds.distinct_states().size}  distinct latent states: {np.unique(latent).size}")
    print(f"action counts: min {counts.min()} max {counts.max()}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "verify": cmd_verify,
    "train": cmd_train,
    "eval": cmd_eval,
    "reproduce-fig3": cmd_reproduce_fig3,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "inspect-dataset":
            if extra:
                raise UsageError(f"inspect-dataset takes no overrides, got {extra}")
            return cmd_inspect_dataset(args)
        cfg = load_config(args, parse_overrides(extra))
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, ContractError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, NonFiniteError, ValueError, KeyError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
