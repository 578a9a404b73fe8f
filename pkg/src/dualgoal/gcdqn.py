"""Goal-conditioned DQN with a pluggable goal encoder, plus the evaluation protocol."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .data import TrainingBatch
from .env import ContractError, ExBcmpSpec, PuzzleSpec, emit_batch, to_bits
from .nn import (
    AdamState,
    MlpParams,
    NonFiniteError,
    TargetCopy,
    adam_step,
    ema_update,
    init_mlp,
    mlp_apply,
    mlp_backward,
    mlp_forward,
)
from .oracle import LandmarkTable


class EncoderKind(str, Enum):
    ORIGINAL = "original"
    IDEAL_DUAL = "ideal_dual"
    LEARNED_DUAL = "learned_dual"


@dataclass(frozen=True)
class GoalEncoder:
    """Pure map from a uint64 state array to a ``(batch, width)`` float array."""

    kind: EncoderKind
    width: int
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, states) -> np.ndarray:
        out = self.fn(np.atleast_1d(np.asarray(states, dtype=np.uint64)))
        if out.shape[1] != self.width:
            raise ContractError(f"encoder produced width {out.shape[1]}, declared {self.width}")
        return out


def original_encoder(obs_width: int) -> GoalEncoder:
    return GoalEncoder(EncoderKind.ORIGINAL, obs_width, lambda s: to_bits(s, obs_width))


def ideal_dual_encoder(table: LandmarkTable, latent_mask: int | None = None) -> GoalEncoder:
    """Landmark distances scaled by the cell count so inputs stay O(1)."""
    scale = float(table.spec.n_actions)
    mask = np.uint64(latent_mask if latent_mask is not None else table.spec.n_states - 1)

    def fn(states):
        return table.encode(states & mask) / scale

    return GoalEncoder(EncoderKind.IDEAL_DUAL, len(table.landmarks), fn)


def learned_dual_encoder(encode: Callable[[np.ndarray], np.ndarray], n_dim: int) -> GoalEncoder:
    return GoalEncoder(EncoderKind.LEARNED_DUAL, n_dim, encode)


@dataclass
class GcDqnModel:
    q_net: MlpParams
    target: TargetCopy
    opt: AdamState
    state_encoder: GoalEncoder

    @property
    def n_actions(self) -> int:
        return self.q_net.n_out


@dataclass
class DqnDiagnostics:
    td_loss: float
    mean_q: float


@dataclass(frozen=True)
class EvalTask:
    start: int
    goal: int
    max_steps: int


@dataclass
class EvalResult:
    per_task: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_task)) if self.per_task else 0.0


def init_dqn(
    state_encoder: GoalEncoder,
    goal_width: int,
    n_actions: int,
    hidden,
    rng: np.random.Generator,
    lr: float = 1e-4,
    tau: float = 0.005,
    layer_norm: bool = True,
) -> GcDqnModel:
    q = init_mlp((state_encoder.width + goal_width, *hidden, n_actions), rng, layer_norm)
    return GcDqnModel(q, TargetCopy.of(q, tau), AdamState.for_params(q, lr), state_encoder)


def q_values(model: GcDqnModel, states, goal_reps: np.ndarray, net: MlpParams | None = None) -> np.ndarray:
    x = np.concatenate([model.state_encoder(states), goal_reps], axis=1)
    return mlp_apply(net if net is not None else model.q_net, x)


def dqn_train_step(
    model: GcDqnModel, encoder: GoalEncoder, batch: TrainingBatch, gamma: float
) -> tuple[GcDqnModel, DqnDiagnostics]:
    """Squared TD loss on taken actions against ``r + gamma * (1 - done) * max_a' Qbar``."""
    rep = encoder(batch.g)
    next_q = q_values(model, batch.s_next, rep, model.target.shadow)
    y = batch.reward + gamma * (1.0 - batch.done_mask) * next_q.max(axis=1)

    x = np.concatenate([model.state_encoder(batch.s), rep], axis=1)
    q, cache = mlp_forward(model.q_net, x)
    rows = np.arange(len(batch))
    err = q[rows, batch.a] - y
    td_loss = float(np.mean(err * err))
    diag = DqnDiagnostics(td_loss, float(q[rows, batch.a].mean()))
    if not np.isfinite(td_loss):
        raise NonFiniteError(f"non-finite TD loss: {diag}")
    d_q = np.zeros_like(q)
    d_q[rows, batch.a] = 2.0 * err / err.size
    grads, _ = mlp_backward(model.q_net, cache, d_q)
    q_net, opt = adam_step(model.q_net, grads, model.opt)
    return GcDqnModel(q_net, ema_update(model.target, q_net), opt, model.state_encoder), diag


def greedy_actions(model: GcDqnModel, encoder: GoalEncoder, states, goals) -> np.ndarray:
    """Argmax actions; ``np.argmax`` resolves ties to the lowest index."""
    q = q_values(model, states, encoder(goals))
    return np.argmax(q, axis=1)


def greedy_action(model: GcDqnModel, encoder: GoalEncoder, s: int, g: int) -> int:
    return int(greedy_actions(model, encoder, [s], [g])[0])


def rollout_lengths(
    spec: PuzzleSpec,
    policy: Callable[[np.ndarray, np.ndarray], np.ndarray],
    starts,
    goals,
    max_steps: int,
    noise_bits: int = 0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Steps taken to first reach each goal (latent match), or -1 if not within ``max_steps``."""
    latent_mask = np.uint64(spec.n_states - 1)
    goals = np.asarray(goals, dtype=np.uint64)
    latent = np.asarray(starts, dtype=np.uint64) & latent_mask
    target = goals & latent_mask
    exb = ExBcmpSpec(spec, noise_bits)
    rng = rng if rng is not None else np.random.default_rng(0)
    lengths = np.full(latent.shape, -1, dtype=np.int64)
    lengths[latent == target] = 0
    for t in range(1, max_steps + 1):
        active = lengths < 0
        if not active.any():
            break
        obs = emit_batch(exb, latent[active], rng)
        actions = np.asarray(policy(obs, goals[active]))
        latent[active] = latent[active] ^ spec.masks[actions]
        reached = np.flatnonzero(active)[latent[active] == target[active]]
        lengths[reached] = t
    return lengths


def evaluate(
    model: GcDqnModel | None,
    encoder: GoalEncoder | None,
    tasks: list[EvalTask],
    episodes_per_task: int,
    spec: PuzzleSpec,
    noise_bits: int = 0,
    rng: np.random.Generator | None = None,
    policy: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> EvalResult:
    """Success rate of the greedy policy (or an injected ``policy``) on each task."""
    if policy is None:
        policy = lambda s, g: greedy_actions(model, encoder, s, g)  # noqa: E731
    rates = []
    for task in tasks:
        starts = np.full(episodes_per_task, task.start, dtype=np.uint64)
        goals = np.full(episodes_per_task, task.goal, dtype=np.uint64)
        lengths = rollout_lengths(spec, policy, starts, goals, task.max_steps, noise_bits, rng)
        rates.append(float(np.mean(lengths >= 0)))
    return EvalResult(rates)


def make_eval_tasks(
    spec: PuzzleSpec,
    n_tasks: int,
    scramble_presses: int,
    seed: int,
    goal_presses: int | None = None,
) -> list[EvalTask]:
    """Start = all-off scrambled by ``scramble_presses`` presses; goal = start scrambled further.

    ``goal_presses`` defaults to ``scramble_presses``; 0 yields start == goal tasks.
    """
    if scramble_presses < 1:
        raise ContractError("scramble_presses must be at least 1")
    goal_presses = scramble_presses if goal_presses is None else goal_presses
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(n_tasks):
        presses = rng.integers(0, spec.n_actions, size=scramble_presses + goal_presses)
        start = int(np.bitwise_xor.reduce(spec.masks[presses[:scramble_presses]]))
        goal = start
        if goal_presses:
            goal ^= int(np.bitwise_xor.reduce(spec.masks[presses[scramble_presses:]]))
        tasks.append(EvalTask(start, goal, spec.n_actions))
    return tasks


def train_dqn(
    dataset,
    encoder: GoalEncoder,
    state_encoder: GoalEncoder,
    steps: int,
    *,
    hidden=(1024, 1024, 1024, 1024),
    batch_size: int = 1024,
    lr: float = 1e-4,
    tau: float = 0.005,
    gamma: float = 0.95,
    ratios=None,
    layer_norm: bool = True,
    seed: int = 0,
    callback: Callable[[int, GcDqnModel, DqnDiagnostics], None] | None = None,
    batch_hook: Callable[[TrainingBatch], None] | None = None,
) -> GcDqnModel:
    """Offline DQN on relabeled batches.

    Initialization and batch sampling use separate seeded streams, so two runs
    with the same seed see identical batches whatever the encoder.
    """
    from .data import RelabelRatios, sample_batch

    ratios = ratios if ratios is not None else RelabelRatios(0.2, 0.0, 0.5, 0.3)
    init_rng = np.random.default_rng([seed, 1])
    batch_rng = np.random.default_rng([seed, 2])
    model = init_dqn(state_encoder, encoder.width, dataset.spec.n_actions, hidden, init_rng, lr, tau, layer_norm)
    for i in range(1, steps + 1):
        batch = sample_batch(dataset, ratios, batch_size, gamma, batch_rng)
        if batch_hook is not None:
            batch_hook(batch)
        model, diag = dqn_train_step(model, encoder, batch, gamma)
        if callback is not None:
            callback(i, model, diag)
    return model
