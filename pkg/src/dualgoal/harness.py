"""Experiment orchestration: run directories, metrics CSVs, phase runners, original-vs-dual sweep."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from . import __version__
from .config import ExperimentConfig
from .data import TransitionDataset, collect_dataset, load_dataset, save_dataset
from .env import ExBcmpSpec, PuzzleSpec
from .gcdqn import (
    GcDqnModel,
    GoalEncoder,
    evaluate,
    ideal_dual_encoder,
    learned_dual_encoder,
    make_eval_tasks,
    original_encoder,
    train_dqn,
)
from .nn import NonFiniteError, load_checkpoint, save_checkpoint
from .oracle import LandmarkSet, LandmarkTable, sample_landmarks
from .repr_iql import ReprTrainConfig, export_representation, import_representation, train_repr

RUN_ROOT_ENV = "DGRD_RUN_ROOT"
METRICS_VERSION = "dgrd-metrics v1"
METRICS_COLUMNS = (
    "run_id", "phase", "step", "task_id", "success_rate",
    "td_loss", "mean_q", "value_loss", "critic_loss", "mean_v",
)
FIG3_COLUMNS = ("puzzle", "arm", "seed", "step", "success_rate")


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def run_id(command: str, config: ExperimentConfig) -> str:
    """Stable id from the config minus its output paths, so relocated reruns match byte for byte."""
    return f"{command}-{config.replace(run_dir='', dataset_path='', repr_checkpoint='').digest()[:12]}"


def default_run_dir(command: str, config: ExperimentConfig) -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs")) / run_id(command, config)


# -- metrics ------------------------------------------------------------------

class MetricsWriter:
    """Append-only CSV with a versioned header comment; one flushed line per row.

    Wall-clock times go to a sibling ``timing.csv`` so the metrics file itself is
    bit-reproducible.
    """

    def __init__(self, path, columns=METRICS_COLUMNS, version=METRICS_VERSION):
        self.path = Path(path)
        self.columns = tuple(columns)
        self.timing = self.path.with_name("timing.csv")
        self._t0 = time.perf_counter()
        if not self.path.exists():
            self.path.write_text(f"# {version}\n" + ",".join(self.columns) + "\n")
        else:
            _drop_partial_line(self.path)
        if not self.timing.exists():
            self.timing.write_text("run_id,phase,step,wall_seconds\n")

    def append(self, **row) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown metrics columns {sorted(unknown)}")
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([_fmt(row.get(c, "")) for c in self.columns])
        with self.path.open("a") as fh:
            fh.write(buf.getvalue())
            fh.flush()
        if "step" in row:
            with self.timing.open("a") as fh:
                fh.write(f"{row.get('run_id', '')},{row.get('phase', '')},{row['step']},"
                         f"{time.perf_counter() - self._t0:.3f}\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _drop_partial_line(path: Path) -> None:
    raw = path.read_bytes()
    if raw and not raw.endswith(b"\n"):
        path.write_bytes(raw[: raw.rfind(b"\n") + 1])


def read_metrics(path) -> list[dict[str, str]]:
    """Rows of a metrics CSV; comment lines and a partial final line are ignored."""
    raw = Path(path).read_text()
    if raw and not raw.endswith("\n"):
        raw = raw[: raw.rfind("\n") + 1]
    lines = [ln for ln in raw.splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- run directories ------------------------------------------------------------

@dataclass
class RunContext:
    config: ExperimentConfig
    run_dir: Path
    run_id: str

    @classmethod
    def create(cls, config: ExperimentConfig, command: str) -> "RunContext":
        run_dir = Path(config.run_dir) if config.run_dir else default_run_dir(command, config)
        run_dir.mkdir(parents=True, exist_ok=True)
        config.save(run_dir / "config.txt")
        return cls(config, run_dir, run_id(command, config))

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"config_hash": self.config.digest(), "version": version_string()}

    def update_manifest(self, **entries) -> None:
        m = self.manifest()
        m.update(entries)
        self.manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- phases -------------------------------------------------------------------------

def gen_data(config: ExperimentConfig, path) -> TransitionDataset:
    ds = collect_dataset(config.spec, config.n_traj, config.traj_len, config.data_seed, config.noise_bits)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    manifest = {
        "config_hash": config.digest(),
        "data_seed": config.data_seed,
        "n_traj": ds.n_traj,
        "traj_len": ds.traj_len,
        "transitions": ds.n_transitions,
        "puzzle": config.spec.name,
        "noise_bits": config.noise_bits,
        "sha256": file_sha256(path),
        "version": version_string(),
    }
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ds


def resolve_dataset_path(ctx: RunContext) -> Path:
    return Path(ctx.config.dataset_path) if ctx.config.dataset_path else ctx.run_dir / "dataset.dgrd"


def repr_config(config: ExperimentConfig, seed: int | None = None) -> ReprTrainConfig:
    return ReprTrainConfig(
        gamma=config.gamma,
        kappa=config.kappa,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        gradient_steps=config.total_repr_steps,
        target_update_rate=config.target_update_rate,
        ratios=config.repr_ratios,
        n_dim=config.repr_dim,
        aggregator=config.aggregator,
        hidden=config.hidden,
        layer_norm=config.layer_norm,
        seed=config.seed if seed is None else seed,
        expectile_residual_sign=config.expectile_residual_sign,
    )


def run_repr_phase(ctx: RunContext, dataset: TransitionDataset) -> Path:
    cfg = ctx.config
    rcfg = repr_config(cfg)
    writer = MetricsWriter(ctx.run_dir / "metrics.csv")
    ckpt = ctx.run_dir / "repr.ckpt"
    acc = _Accumulator()

    def on_step(step, model, diag):
        acc.add(value_loss=diag.value_loss, critic_loss=diag.critic_loss, mean_v=diag.mean_v, mean_q=diag.mean_q)
        if step % cfg.eval_every == 0 or step == rcfg.gradient_steps:
            writer.append(run_id=ctx.run_id, phase="repr", step=step, task_id="all", **acc.flush())
            export_representation(model, ckpt, cfg.spec, cfg.noise_bits, seed=cfg.seed, step=step)

    model, _ = train_repr(dataset, rcfg, callback=on_step)
    export_representation(model, ckpt, cfg.spec, cfg.noise_bits, seed=cfg.seed, step=rcfg.gradient_steps)
    ctx.update_manifest(repr_checkpoint=str(ckpt.name), repr_checkpoint_sha256=file_sha256(ckpt))
    return ckpt


class _Accumulator:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.n = 0

    def add(self, **values):
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + v
        self.n += 1

    def flush(self) -> dict[str, float]:
        out = {k: v / max(self.n, 1) for k, v in self.sums.items()}
        self.sums, self.n = {}, 0
        return out


def build_encoders(
    config: ExperimentConfig,
    dataset: TransitionDataset,
    repr_path=None,
    table: LandmarkTable | None = None,
) -> tuple[GoalEncoder, GoalEncoder]:
    """(goal encoder, state encoder) for the configured encoder kind."""
    width = dataset.obs_width
    raw = original_encoder(width)
    if config.encoder == "original":
        return raw, raw
    if config.encoder == "ideal_dual":
        if table is None:
            table = landmark_table(config, dataset)
        dual = ideal_dual_encoder(table, config.spec.n_states - 1)
        return dual, (dual if config.use_dual_state else raw)
    encode, meta = import_representation(repr_path, config.spec, config.noise_bits)
    learned = learned_dual_encoder(encode, meta["n_dim"])
    return learned, (learned if config.use_dual_state else raw)


def landmark_table(config: ExperimentConfig, dataset: TransitionDataset) -> LandmarkTable:
    if dataset.noise_bits:
        latent = np.unique(dataset.latent(dataset.states))
        rng = np.random.default_rng(config.landmark_seed)
        picked = rng.choice(latent, size=min(config.n_landmarks, latent.size), replace=False)
        landmarks = LandmarkSet(tuple(int(s) for s in picked), config.landmark_seed)
    else:
        landmarks = sample_landmarks(dataset, config.n_landmarks, config.landmark_seed)
    return LandmarkTable.build(config.spec, landmarks, config.enum_cap)


def eval_tasks(config: ExperimentConfig, spec: PuzzleSpec | None = None, seed_offset: int = 0):
    spec = spec or config.spec
    return make_eval_tasks(spec, config.n_tasks, config.scramble_presses,
                           config.eval_seed + seed_offset, config.goal_presses)


def run_policy_phase(
    ctx: RunContext,
    dataset: TransitionDataset,
    goal_enc: GoalEncoder,
    state_enc: GoalEncoder,
    tasks=None,
    seed: int | None = None,
    phase_name: str = "policy",
    curve_sink=None,
) -> GcDqnModel:
    """Train DQN, evaluating every ``eval_every`` steps; the last good checkpoint survives a NaN abort."""
    cfg = ctx.config
    seed = cfg.seed if seed is None else seed
    tasks = tasks if tasks is not None else eval_tasks(cfg)
    writer = MetricsWriter(ctx.run_dir / "metrics.csv")
    ckpt = ctx.run_dir / f"{phase_name}.ckpt"
    eval_rows = ctx.run_dir / f"{phase_name}_eval_tasks.csv"
    if not eval_rows.exists():
        eval_rows.write_text("run_id,step,task_id,start,goal,success_rate\n")
    acc = _Accumulator()
    batch_digest = hashlib.sha256()
    eval_rng_seed = [cfg.eval_seed, seed]
    meta = {"kind": "gc-dqn", "encoder": goal_enc.kind.value, "seed": seed, "puzzle": dataset.spec.name}

    def on_step(step, model, diag):
        acc.add(td_loss=diag.td_loss, mean_q=diag.mean_q)
        if step % cfg.eval_every == 0:
            res = evaluate(model, goal_enc, tasks, cfg.episodes_per_task, dataset.spec, dataset.noise_bits,
                           np.random.default_rng(eval_rng_seed + [step]))
            writer.append(run_id=ctx.run_id, phase=phase_name, step=step, task_id="all",
                          success_rate=res.mean, **acc.flush())
            with eval_rows.open("a") as fh:
                for i, (task, rate) in enumerate(zip(tasks, res.per_task)):
                    fh.write(f"{ctx.run_id},{step},{i},{task.start},{task.goal},{rate!r}\n")
            if curve_sink is not None:
                curve_sink(step, res.mean)
            save_checkpoint(ckpt, {"q_net": model.q_net, "target": model.target.shadow}, {**meta, "step": step})

    def on_batch(batch):
        batch_digest.update(batch.digest().encode())

    try:
        model = train_dqn(
            dataset, goal_enc, state_enc, cfg.gradient_steps,
            hidden=cfg.hidden, batch_size=cfg.batch_size, lr=cfg.learning_rate,
            tau=cfg.target_update_rate, gamma=cfg.gamma, ratios=cfg.dqn_ratios,
            layer_norm=cfg.layer_norm, seed=seed, callback=on_step, batch_hook=on_batch,
        )
    except NonFiniteError:
        ctx.update_manifest(**{f"{phase_name}_aborted": "non-finite loss", f"{phase_name}_batch_digest": batch_digest.hexdigest()})
        raise
    save_checkpoint(ckpt, {"q_net": model.q_net, "target": model.target.shadow}, {**meta, "step": cfg.gradient_steps})
    ctx.update_manifest(**{
        f"{phase_name}_checkpoint": ckpt.name,
        f"{phase_name}_encoder": goal_enc.kind.value,
        f"{phase_name}_batch_digest": batch_digest.hexdigest(),
    })
    return model


def load_policy(path, state_enc: GoalEncoder, lr: float = 1e-4, tau: float = 0.005) -> GcDqnModel:
    from .nn import AdamState, TargetCopy

    nets, _ = load_checkpoint(path)
    q = nets["q_net"]
    return GcDqnModel(q, TargetCopy(nets["target"], tau), AdamState.for_params(q, lr), state_enc)


def load_or_fail_dataset(ctx: RunContext) -> TransitionDataset:
    path = resolve_dataset_path(ctx)
    if not path.exists():
        raise FileNotFoundError(f"dataset file {path} not found; run gen-data first")
    ds = load_dataset(path)
    if ds.spec != ctx.config.spec or ds.noise_bits != ctx.config.noise_bits:
        raise ValueError(f"dataset {path} is for {ds.spec.name}+{ds.noise_bits} noise bits, config wants "
                         f"{ctx.config.spec.name}+{ctx.config.noise_bits}")
    ctx.update_manifest(dataset=str(path), dataset_sha256=file_sha256(path))
    return ds


def train(ctx: RunContext, phase: str) -> None:
    dataset = load_or_fail_dataset(ctx)
    cfg = ctx.config
    repr_path = Path(cfg.repr_checkpoint) if cfg.repr_checkpoint else ctx.run_dir / "repr.ckpt"
    if phase in ("repr", "both"):
        repr_path = run_repr_phase(ctx, dataset)
    if phase in ("policy", "both"):
        if cfg.encoder == "learned_dual":
            if not repr_path.exists():
                raise FileNotFoundError(f"representation checkpoint {repr_path} not found; train phase=repr first")
            ctx.update_manifest(policy_repr_source=str(repr_path), policy_repr_sha256=file_sha256(repr_path))
        goal_enc, state_enc = build_encoders(cfg, dataset, repr_path)
        run_policy_phase(ctx, dataset, goal_enc, state_enc)


# -- figure reproduction -----------------------------------------------------------

def auc(steps, values) -> float:
    """Normalized area under a success curve (trapezoid rule from the first eval point)."""
    steps = np.asarray(steps, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if steps.size == 1:
        return float(values[0])
    return float(trapezoid(values, steps) / (steps[-1] - steps[0]))


def reproduce_fig3(config: ExperimentConfig, out_dir, log=print) -> list[dict]:
    """Original vs ideal-dual DQN arms on each configured puzzle and seed.

    Writes ``fig3.csv`` (one row per puzzle/arm/seed/eval point) and
    ``fig3_summary.csv``; returns the summary rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    curve_path = out / "fig3.csv"
    curve_writer = MetricsWriter(curve_path, FIG3_COLUMNS, "dgrd-fig3 v1")
    summary = []
    for spec in config.puzzles():
        pcfg = config.replace(n_x=spec.n_x, n_y=spec.n_y, noise_bits=0)
        dataset = collect_dataset(spec, pcfg.n_traj, pcfg.traj_len, pcfg.data_seed)
        table = landmark_table(pcfg, dataset)
        curves: dict[str, list[tuple[list[int], list[float]]]] = {"original": [], "ideal_dual": []}
        for seed in config.fig3_seeds:
            tasks = eval_tasks(pcfg, spec, seed_offset=seed)
            for arm in ("original", "ideal_dual"):
                acfg = pcfg.replace(encoder=arm, seed=seed)
                run_dir = out / f"{spec.name}-{arm}-seed{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                acfg.save(run_dir / "config.txt")
                ctx = RunContext(acfg, run_dir, run_dir.name)
                goal_enc, state_enc = build_encoders(acfg, dataset, table=table)
                steps, rates = [], []

                def sink(step, rate, arm=arm, seed=seed):
                    steps.append(step)
                    rates.append(rate)
                    curve_writer.append(puzzle=spec.name, arm=arm, seed=seed, step=step, success_rate=rate)

                t0 = time.perf_counter()
                run_policy_phase(ctx, dataset, goal_enc, state_enc, tasks=tasks, seed=seed, curve_sink=sink)
                curves[arm].append((steps, rates))
                log(f"{spec.name} {arm} seed={seed}: final={rates[-1] if rates else float('nan'):.3f} "
                    f"auc={auc(steps, rates) if rates else float('nan'):.3f} ({time.perf_counter() - t0:.0f}s)")
        for arm, runs in curves.items():
            finals = [r[-1] for _, r in runs if r]
            aucs = [auc(s, r) for s, r in runs if r]
            summary.append({
                "puzzle": spec.name, "arm": arm, "seeds": len(runs),
                "final_success": float(np.mean(finals)) if finals else float("nan"),
                "auc": float(np.mean(aucs)) if aucs else float("nan"),
            })
    with (out / "fig3_summary.csv").open("w") as fh:
        w = csv.DictWriter(fh, fieldnames=["puzzle", "arm", "seeds", "final_success", "auc"], lineterminator="\n")
        w.writeheader()
        for row in summary:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return summary
