"""Goal-conditioned IQL with a factored value ``f(psi(s), phi(g))``.

The goal head ``phi`` is the learned dual goal representation handed to the
downstream policy phase.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .data import RelabelRatios, TrainingBatch, sample_batch
from .env import ContractError, PuzzleSpec, to_bits
from .nn import (
    AdamState,
    MlpParams,
    NonFiniteError,
    TargetCopy,
    adam_step,
    ema_update,
    expectile_loss,
    init_mlp,
    load_checkpoint,
    mlp_apply,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)


class Aggregator(str, Enum):
    INNER_PRODUCT = "inner_product"
    NEG_L2 = "neg_l2"


class SpecMismatchError(ContractError):
    pass


@dataclass
class ReprTrainConfig:
    gamma: float = 0.95
    kappa: float = 0.7
    batch_size: int = 1024
    learning_rate: float = 1e-4
    gradient_steps: int = 100_000
    target_update_rate: float = 0.005
    ratios: RelabelRatios = field(default_factory=lambda: RelabelRatios(0.2, 0.5, 0.0, 0.3))
    n_dim: int = 64
    aggregator: Aggregator = Aggregator.INNER_PRODUCT
    hidden: tuple[int, ...] = (1024, 1024, 1024, 1024)
    layer_norm: bool = True
    seed: int = 0
    expectile_residual_sign: str = "iql"  # "iql": u = Qbar - f ; "alg1": u = f - Qbar

    def __post_init__(self):
        self.aggregator = Aggregator(self.aggregator)
        if not 0 < self.gamma < 1:
            raise ContractError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0 < self.kappa < 1:
            raise ContractError(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.expectile_residual_sign not in ("iql", "alg1"):
            raise ContractError("expectile_residual_sign must be 'iql' or 'alg1'")


@dataclass
class FactoredValueModel:
    psi: MlpParams
    phi: MlpParams
    aggregator: Aggregator
    psi_opt: AdamState
    phi_opt: AdamState

    @property
    def n_dim(self) -> int:
        return self.phi.n_out


@dataclass
class CriticModel:
    q: MlpParams
    target: TargetCopy
    opt: AdamState


@dataclass
class StepDiagnostics:
    value_loss: float
    critic_loss: float
    mean_v: float
    mean_q: float


def init_repr(config: ReprTrainConfig, obs_width: int, n_actions: int, rng: np.random.Generator):
    """Fresh (model, critic) pair for observations of ``obs_width`` bits."""
    hidden = tuple(config.hidden)
    psi = init_mlp((obs_width, *hidden, config.n_dim), rng, config.layer_norm)
    phi = init_mlp((obs_width, *hidden, config.n_dim), rng, config.layer_norm)
    q = init_mlp((2 * obs_width + n_actions, *hidden, 1), rng, config.layer_norm)
    lr = config.learning_rate
    model = FactoredValueModel(
        psi, phi, config.aggregator, AdamState.for_params(psi, lr), AdamState.for_params(phi, lr)
    )
    critic = CriticModel(q, TargetCopy.of(q, config.target_update_rate), AdamState.for_params(q, lr))
    return model, critic


def aggregate(kind: Aggregator, s_enc: np.ndarray, g_enc: np.ndarray) -> np.ndarray:
    """Row-wise aggregate of two ``(batch, N)`` encodings (1-D inputs give a scalar)."""
    s_enc = np.asarray(s_enc, dtype=np.float64)
    g_enc = np.asarray(g_enc, dtype=np.float64)
    if s_enc.shape != g_enc.shape:
        raise ContractError(f"encoding widths differ: {s_enc.shape} vs {g_enc.shape}")
    if Aggregator(kind) is Aggregator.INNER_PRODUCT:
        return np.sum(s_enc * g_enc, axis=-1)
    return -np.sqrt(np.sum((s_enc - g_enc) ** 2, axis=-1))


def _aggregate_grad(kind: Aggregator, s_enc, g_enc, d_f):
    d_f = d_f[:, None]
    if kind is Aggregator.INNER_PRODUCT:
        return d_f * g_enc, d_f * s_enc
    diff = s_enc - g_enc
    norm = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))
    # subgradient 0 where the encodings coincide
    unit = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
    d_s = -d_f * unit
    return d_s, -d_s


def critic_inputs(s_bits, g_bits, actions, n_actions: int) -> np.ndarray:
    onehot = np.zeros((actions.shape[0], n_actions))
    onehot[np.arange(actions.shape[0]), actions] = 1.0
    return np.concatenate([s_bits, g_bits, onehot], axis=1)


def value(model: FactoredValueModel, s_bits: np.ndarray, g_bits: np.ndarray) -> np.ndarray:
    return aggregate(model.aggregator, mlp_apply(model.psi, s_bits), mlp_apply(model.phi, g_bits))


def repr_train_step(
    model: FactoredValueModel,
    critic: CriticModel,
    batch: TrainingBatch,
    config: ReprTrainConfig,
    obs_width: int,
) -> tuple[FactoredValueModel, CriticModel, StepDiagnostics]:
    """One gradient step on both IQL losses, then the EMA target update.

    Both losses are computed from the pre-step parameters. The critic target
    ``r + gamma * (1 - done) * f(psi(s'), phi(g))`` is treated as a constant.
    """
    n_actions = critic.q.n_in - 2 * obs_width
    s_bits = to_bits(batch.s, obs_width)
    g_bits = to_bits(batch.g, obs_width)
    sn_bits = to_bits(batch.s_next, obs_width)
    x_q = critic_inputs(s_bits, g_bits, batch.a, n_actions)

    q_bar = mlp_apply(critic.target.shadow, x_q)[:, 0]
    s_enc, s_cache = mlp_forward(model.psi, s_bits)
    g_enc, g_cache = mlp_forward(model.phi, g_bits)
    f = aggregate(model.aggregator, s_enc, g_enc)
    if config.expectile_residual_sign == "iql":
        value_loss, d_u = expectile_loss(q_bar - f, config.kappa)
        d_f = -d_u
    else:
        value_loss, d_u = expectile_loss(f - q_bar, config.kappa)
        d_f = d_u
    d_s, d_g = _aggregate_grad(model.aggregator, s_enc, g_enc, d_f)
    psi_grads, _ = mlp_backward(model.psi, s_cache, d_s)
    phi_grads, _ = mlp_backward(model.phi, g_cache, d_g)

    f_next = aggregate(model.aggregator, mlp_apply(model.psi, sn_bits), g_enc)
    y = batch.reward + config.gamma * (1.0 - batch.done_mask) * f_next
    q, q_cache = mlp_forward(critic.q, x_q)
    err = q[:, 0] - y
    critic_loss = float(np.mean(err * err))
    q_grads, _ = mlp_backward(critic.q, q_cache, (2.0 * err / err.size)[:, None])

    diag = StepDiagnostics(value_loss, critic_loss, float(f.mean()), float(q.mean()))
    if not (np.isfinite(value_loss) and np.isfinite(critic_loss)):
        raise NonFiniteError(f"non-finite loss: {diag}")

    psi, psi_opt = adam_step(model.psi, psi_grads, model.psi_opt)
    phi, phi_opt = adam_step(model.phi, phi_grads, model.phi_opt)
    q_new, q_opt = adam_step(critic.q, q_grads, critic.opt)
    model = FactoredValueModel(psi, phi, model.aggregator, psi_opt, phi_opt)
    critic = CriticModel(q_new, ema_update(critic.target, q_new), q_opt)
    return model, critic, diag


def train_repr(
    dataset,
    config: ReprTrainConfig,
    steps: int | None = None,
    callback: Callable[[int, FactoredValueModel, StepDiagnostics], None] | None = None,
):
    """Run the representation phase on ``dataset``; returns ``(model, critic)``.

    Batch sampling and initialization draw from separate streams seeded by
    ``config.seed`` so runs are bit-reproducible.
    """
    init_rng = np.random.default_rng([config.seed, 1])
    batch_rng = np.random.default_rng([config.seed, 2])
    width = dataset.obs_width
    model, critic = init_repr(config, width, dataset.spec.n_actions, init_rng)
    total = config.gradient_steps if steps is None else steps
    for i in range(1, total + 1):
        batch = sample_batch(dataset, config.ratios, config.batch_size, config.gamma, batch_rng)
        model, critic, diag = repr_train_step(model, critic, batch, config, width)
        if callback is not None:
            callback(i, model, diag)
    return model, critic


def encode_goal(model: FactoredValueModel, g, obs_width: int) -> np.ndarray:
    """Goal-head output; a single state gives a length-N vector, an array gives ``(batch, N)``."""
    out = mlp_apply(model.phi, to_bits(g, obs_width))
    return out[0] if np.ndim(g) == 0 else out


def export_representation(
    model: FactoredValueModel, path, spec: PuzzleSpec, noise_bits: int = 0, **extra
) -> None:
    meta = {
        "kind": "dual-goal-representation",
        "n_x": spec.n_x,
        "n_y": spec.n_y,
        "noise_bits": noise_bits,
        "n_dim": model.n_dim,
        "aggregator": model.aggregator.value,
        **extra,
    }
    save_checkpoint(path, {"phi": model.phi}, meta)


def import_representation(path, spec: PuzzleSpec | None = None, noise_bits: int | None = None):
    """Load an exported goal head; returns ``(encode, meta)`` with ``encode(states) -> (batch, N)``."""
    nets, meta = load_checkpoint(path)
    if meta.get("kind") != "dual-goal-representation" or "phi" not in nets:
        raise SpecMismatchError(f"{path} is not an exported goal representation")
    if spec is not None and (meta["n_x"], meta["n_y"]) != (spec.n_x, spec.n_y):
        raise SpecMismatchError(
            f"representation was trained on {meta['n_x']}x{meta['n_y']}, requested {spec.n_x}x{spec.n_y}"
        )
    if noise_bits is not None and meta["noise_bits"] != noise_bits:
        raise SpecMismatchError(f"representation expects {meta['noise_bits']} noise bits, got {noise_bits}")
    phi = nets["phi"]
    width = phi.n_in

    def encode(states) -> np.ndarray:
        return mlp_apply(phi, to_bits(states, width))

    return encode, meta


def fit_table(
    table: np.ndarray,
    n_dim: int = 16,
    hidden=(64,),
    steps: int = 50_000,
    lr: float = 1e-3,
    seed: int = 0,
    aggregator: Aggregator = Aggregator.INNER_PRODUCT,
    target_mse: float | None = None,
    log_every: int = 500,
) -> tuple[FactoredValueModel, list[tuple[int, float]]]:
    """Regress ``f(psi(one_hot(i)), phi(one_hot(j)))`` onto ``table[i, j]`` with full-batch Adam.

    A capacity check for the factored parameterization. Stops early once the
    full-table MSE drops below ``target_mse``; returns the model and the
    ``(step, mse)`` history sampled every ``log_every`` steps (plus the last step).
    """
    table = np.asarray(table, dtype=np.float64)
    n_s, n_g = table.shape
    rng = np.random.default_rng(seed)
    psi = init_mlp((n_s, *hidden, n_dim), rng, layer_norm=False)
    phi = init_mlp((n_g, *hidden, n_dim), rng, layer_norm=False)
    model = FactoredValueModel(psi, phi, Aggregator(aggregator), AdamState.for_params(psi, lr), AdamState.for_params(phi, lr))
    si, gi = np.meshgrid(np.arange(n_s), np.arange(n_g), indexing="ij")
    xs, xg = np.eye(n_s)[si.ravel()], np.eye(n_g)[gi.ravel()]
    y = table.ravel()
    history = []
    for i in range(1, steps + 1):
        s_enc, s_cache = mlp_forward(model.psi, xs)
        g_enc, g_cache = mlp_forward(model.phi, xg)
        err = aggregate(model.aggregator, s_enc, g_enc) - y
        mse = float(np.mean(err * err))
        done = target_mse is not None and mse < target_mse
        if i % log_every == 0 or i == steps or done or i == 1:
            history.append((i - 1, mse))
        if done:
            break
        d_s, d_g = _aggregate_grad(model.aggregator, s_enc, g_enc, 2.0 * err / err.size)
        psi_new, psi_opt = adam_step(model.psi, mlp_backward(model.psi, s_cache, d_s)[0], model.psi_opt)
        phi_new, phi_opt = adam_step(model.phi, mlp_backward(model.phi, g_cache, d_g)[0], model.phi_opt)
        model = FactoredValueModel(psi_new, phi_new, model.aggregator, psi_opt, phi_opt)
    return model, history
