"""Minimal float64 dense-network kit: MLP forward/backward, Adam, EMA targets, expectile loss.

Hidden layers compute ``linear -> layer norm -> GELU``; the output layer is linear.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.special import ndtr

from . import binfmt

LN_EPS = 1e-5
CK_MAGIC = b"DGRD-CK\0"
CK_VERSION = 1
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in parameters, gradients or a loss."""


@dataclass
class MlpParams:
    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    ln_gains: list[np.ndarray] = field(default_factory=list)
    ln_offsets: list[np.ndarray] = field(default_factory=list)
    layer_norm: bool = True

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        n_layers = len(self.sizes) - 1
        if n_layers < 1 or len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError(f"sizes {self.sizes} do not match {len(self.weights)} weight matrices")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ShapeError(f"layer {i}: weight {w.shape}, bias {b.shape} break the shape chain")
        n_norm = n_layers - 1 if self.layer_norm else 0
        if len(self.ln_gains) != n_norm or len(self.ln_offsets) != n_norm:
            raise ShapeError(f"expected {n_norm} layer-norm parameter pairs")

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def tensors(self) -> list[np.ndarray]:
        """Canonical parameter order: per layer W, b, then (hidden layers) gain, offset."""
        out = []
        for i in range(len(self.weights)):
            out += [self.weights[i], self.biases[i]]
            if self.layer_norm and i < len(self.ln_gains):
                out += [self.ln_gains[i], self.ln_offsets[i]]
        return out

    def with_tensors(self, tensors: Iterable[np.ndarray]) -> "MlpParams":
        it = iter(tensors)
        ws, bs, gs, os_ = [], [], [], []
        for i in range(len(self.weights)):
            ws.append(next(it))
            bs.append(next(it))
            if self.layer_norm and i < len(self.ln_gains):
                gs.append(next(it))
                os_.append(next(it))
        return MlpParams(self.sizes, ws, bs, gs, os_, self.layer_norm)

    def copy(self) -> "MlpParams":
        return self.with_tensors(t.copy() for t in self.tensors())

    def zeros_like(self) -> "MlpParams":
        return self.with_tensors(np.zeros_like(t) for t in self.tensors())

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())

    def same_shape(self, other: "MlpParams") -> bool:
        return self.sizes == other.sizes and self.layer_norm == other.layer_norm


def init_mlp(sizes, rng: np.random.Generator, layer_norm: bool = True) -> MlpParams:
    """Fan-scaled uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases, unit gains."""
    sizes = tuple(sizes)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    hidden = sizes[1:-1] if layer_norm else ()
    gs = [np.ones(h) for h in hidden]
    os_ = [np.zeros(h) for h in hidden]
    return MlpParams(sizes, ws, bs, gs, os_, layer_norm)


def gelu(z: np.ndarray) -> np.ndarray:
    return z * ndtr(z)


def gelu_grad(z: np.ndarray) -> np.ndarray:
    return ndtr(z) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


@dataclass
class ForwardCache:
    params: MlpParams
    inputs: list[np.ndarray]  # input to each linear layer
    pre: list[np.ndarray]  # pre-activation (after norm) of each hidden layer
    xhat: list[np.ndarray]
    inv_std: list[np.ndarray]


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.n_in:
        raise ShapeError(f"expected input of width {params.n_in}, got shape {x.shape}")
    cache = ForwardCache(params, [], [], [], [])
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        h = h @ w + b
        if i == last:
            break
        if params.layer_norm:
            mu = h.mean(axis=1, keepdims=True)
            centered = h - mu
            inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + LN_EPS)
            xhat = centered * inv_std
            cache.xhat.append(xhat)
            cache.inv_std.append(inv_std)
            h = xhat * params.ln_gains[i] + params.ln_offsets[i]
        cache.pre.append(h)
        h = gelu(h)
    return h, cache


def mlp_apply(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_forward(params, x)[0]


def mlp_backward(
    params: MlpParams, cache: ForwardCache, grad_out: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Reverse-mode gradients; returns (parameter gradients, input gradient)."""
    if cache.params is not params:
        raise ShapeError("forward cache was produced by a different parameter object")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (cache.inputs[0].shape[0], params.n_out):
        raise ShapeError(f"output gradient shape {grad_out.shape} does not match forward output")
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    gg, go = [None] * len(params.ln_gains), [None] * len(params.ln_offsets)
    d = grad_out
    for i in range(n_layers - 1, -1, -1):
        gw[i] = cache.inputs[i].T @ d
        gb[i] = d.sum(axis=0)
        d = d @ params.weights[i].T
        if i == 0:
            break
        j = i - 1
        d = d * gelu_grad(cache.pre[j])
        if params.layer_norm:
            xhat = cache.xhat[j]
            gg[j] = (d * xhat).sum(axis=0)
            go[j] = d.sum(axis=0)
            dx = d * params.ln_gains[j]
            d = cache.inv_std[j] * (
                dx - dx.mean(axis=1, keepdims=True) - xhat * (dx * xhat).mean(axis=1, keepdims=True)
            )
    grads = MlpParams(params.sizes, gw, gb, gg, go, params.layer_norm)
    return grads, d


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(
            [np.zeros_like(t) for t in params.tensors()],
            [np.zeros_like(t) for t in params.tensors()],
            lr=lr,
            **kw,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            [a.copy() for a in self.m], [a.copy() for a in self.v],
            self.step, self.lr, self.beta1, self.beta2, self.eps,
        )


def adam_step(
    params: MlpParams, grads: MlpParams, state: AdamState
) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched.

    Raises ``NonFiniteError`` (without updating anything) if a gradient is NaN/Inf.
    """
    if not params.same_shape(grads) or len(state.m) != len(params.tensors()):
        raise ShapeError("parameter, gradient and optimizer shapes disagree")
    g_list = grads.tensors()
    if not all(np.isfinite(g).all() for g in g_list):
        raise NonFiniteError("non-finite gradient; parameters left unchanged")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.tensors(), g_list, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
    return params.with_tensors(new_p), new_state


@dataclass
class TargetCopy:
    shadow: MlpParams
    tau: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"target update rate must be in (0, 1], got {self.tau}")

    @classmethod
    def of(cls, source: MlpParams, tau: float = 0.005) -> "TargetCopy":
        return cls(source.copy(), tau)


def ema_update(target: TargetCopy, source: MlpParams) -> TargetCopy:
    if not target.shadow.same_shape(source):
        raise ShapeError("target and source networks differ in shape")
    tau = target.tau
    mixed = [(1.0 - tau) * s + tau * p for s, p in zip(target.shadow.tensors(), source.tensors())]
    return TargetCopy(target.shadow.with_tensors(mixed), tau)


def expectile_loss(u: np.ndarray, kappa: float) -> tuple[float, np.ndarray]:
    """Mean of ``|kappa - 1{u < 0}| * u**2`` and its gradient w.r.t. ``u``.

    At ``u == 0`` the weight is ``kappa`` (the ``u > 0`` branch).
    """
    if not 0.0 < kappa < 1.0:
        raise ValueError(f"expectile must lie in (0, 1), got {kappa}")
    u = np.asarray(u, dtype=np.float64)
    w = np.where(u < 0, 1.0 - kappa, kappa)
    loss = float(np.mean(w * u * u))
    return loss, 2.0 * w * u / u.size


def save_checkpoint(path, nets: dict[str, MlpParams], meta: dict | None = None) -> None:
    """Write named networks plus a JSON metadata block.

    Layout (little-endian): magic, u32 version, u32 meta length, meta JSON,
    u32 network count, then per network: u16 name length, name, u8 layer-norm
    flag, u32 layer count, u32 sizes, raw f64 tensors in ``tensors()`` order.
    A CRC32 of everything before it closes the file.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray(CK_MAGIC)
    out += struct.pack("<II", CK_VERSION, len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(nets))
    for name, net in nets.items():
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BI", int(net.layer_norm), len(net.sizes))
        out += struct.pack(f"<{len(net.sizes)}I", *net.sizes)
        for t in net.tensors():
            out += np.ascontiguousarray(t, dtype="<f8").tobytes()
    Path(path).write_bytes(binfmt.seal(bytes(out)))


def load_checkpoint(path) -> tuple[dict[str, MlpParams], dict]:
    r = binfmt.open_sealed(path, CK_MAGIC, CK_VERSION)
    r.verify()
    (meta_len,) = r.take("<I")
    meta = json.loads(r.take_bytes(meta_len).decode())
    (count,) = r.take("<I")
    nets = {}
    for _ in range(count):
        (name_len,) = r.take("<H")
        name = r.take_bytes(name_len).decode()
        ln, n_sizes = r.take("<BI")
        sizes = r.take(f"<{n_sizes}I")
        skeleton = _skeleton(sizes, bool(ln))
        tensors = []
        for t in skeleton.tensors():
            raw = r.take_bytes(t.size * 8)
            tensors.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t.shape))
        nets[name] = skeleton.with_tensors(tensors)
    r.finish()
    return nets, meta


def _skeleton(sizes, layer_norm: bool) -> MlpParams:
    ws = [np.empty((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.empty(b) for b in sizes[1:]]
    hidden = sizes[1:-1] if layer_norm else ()
    return MlpParams(tuple(sizes), ws, bs, [np.empty(h) for h in hidden], [np.empty(h) for h in hidden], layer_norm)
