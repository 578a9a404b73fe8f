"""Offline dataset collection, persistence and hindsight-relabeled batch sampling."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import binfmt
from .env import ContractError, ExBcmpSpec, PuzzleSpec, emit_batch

DS_MAGIC = b"DGRD-DS\0"
DS_VERSION = 1

CUR, GEOM, TRAJ, RAND = 0, 1, 2, 3


@dataclass(frozen=True)
class RelabelRatios:
    p_cur: float
    p_geom: float
    p_traj: float
    p_rand: float

    def __post_init__(self):
        probs = self.as_array()
        if np.any(probs < 0):
            raise ContractError(f"relabel ratios must be nonnegative, got {tuple(probs)}")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ContractError(f"relabel ratios must sum to 1, got {probs.sum():.6g}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_cur, self.p_geom, self.p_traj, self.p_rand], dtype=np.float64)

    @classmethod
    def parse(cls, text: str) -> "RelabelRatios":
        parts = [float(p) for p in text.replace("(", "").replace(")", "").split(",")]
        if len(parts) != 4:
            raise ContractError(f"expected 4 comma-separated ratios, got {text!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return ",".join(repr(float(p)) for p in self.as_array())


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Equal-length trajectories; ``states`` is ``(n_traj, T + 1)`` uint64, ``actions`` ``(n_traj, T)`` uint8.

    With ``noise_bits > 0`` the stored states are Ex-BCMP observations and goals
    are matched on their latent bits.
    """

    spec: PuzzleSpec
    states: np.ndarray
    actions: np.ndarray
    noise_bits: int = 0

    def __post_init__(self):
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ContractError("states and actions must be 2-D arrays")
        if self.states.shape[0] != self.actions.shape[0] or self.states.shape[1] != self.actions.shape[1] + 1:
            raise ContractError(
                f"shape mismatch: states {self.states.shape}, actions {self.actions.shape}"
            )
        if self.actions.size and int(self.actions.max()) >= self.spec.n_actions:
            raise ContractError(f"action index out of range for {self.spec.name}")
        lat = self.states & np.uint64(self.spec.n_states - 1)
        if not np.array_equal(lat[:, 1:], lat[:, :-1] ^ self.spec.masks[self.actions]):
            raise ContractError("stored transitions violate the puzzle dynamics")
        self.states.flags.writeable = False
        self.actions.flags.writeable = False

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def traj_len(self) -> int:
        return self.actions.shape[1]

    @property
    def n_transitions(self) -> int:
        return self.actions.size

    @property
    def exbcmp(self) -> ExBcmpSpec:
        return ExBcmpSpec(self.spec, self.noise_bits)

    @property
    def obs_width(self) -> int:
        return self.spec.width + self.noise_bits

    @cached_property
    def _distinct(self) -> np.ndarray:
        out = np.unique(self.states)
        out.flags.writeable = False
        return out

    def distinct_states(self) -> np.ndarray:
        """Sorted distinct states appearing anywhere in the dataset."""
        return self._distinct

    def contains(self, states) -> np.ndarray:
        return np.isin(np.asarray(states, dtype=np.uint64), self._distinct)

    def __eq__(self, other):
        if not isinstance(other, TransitionDataset):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.noise_bits == other.noise_bits
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
        )

    __hash__ = None

    def latent(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=np.uint64) & np.uint64(self.spec.n_states - 1)

    def goal_match(self, states: np.ndarray, goals: np.ndarray) -> np.ndarray:
        return self.latent(states) == self.latent(goals)


@dataclass(frozen=True, eq=False)
class TrainingBatch:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    g: np.ndarray
    reward: np.ndarray
    done_mask: np.ndarray
    branch: np.ndarray = field(repr=False)
    offset: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.s.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.s, self.a, self.s_next, self.g, self.reward, self.done_mask):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def collect_dataset(
    spec: PuzzleSpec,
    n_traj: int,
    traj_len: int,
    seed: int,
    noise_bits: int = 0,
    starts: np.ndarray | None = None,
) -> TransitionDataset:
    """Uniform-random-policy trajectories.

    By default each trajectory starts from the all-off board scrambled by
    ``traj_len`` uniform presses, so every visited state shares the all-off
    component. ``starts`` overrides this; trajectory ``i`` then begins at
    ``starts[i % len(starts)]`` (use every state for a full-support dataset).
    """
    if n_traj < 1 or traj_len < 1:
        raise ContractError("n_traj and traj_len must be at least 1")
    rng = np.random.default_rng(seed)
    masks = spec.masks
    scramble = rng.integers(0, spec.n_actions, size=(n_traj, traj_len))
    if starts is None:
        start = np.bitwise_xor.reduce(masks[scramble], axis=1)
    else:
        starts = np.asarray(starts, dtype=np.uint64)
        for s0 in np.unique(starts).tolist():
            spec.check_state(s0)
        start = starts[np.arange(n_traj) % starts.size]
    actions = rng.integers(0, spec.n_actions, size=(n_traj, traj_len)).astype(np.uint8)
    deltas = masks[actions]
    states = np.empty((n_traj, traj_len + 1), dtype=np.uint64)
    states[:, 0] = start
    states[:, 1:] = start[:, None] ^ np.bitwise_xor.accumulate(deltas, axis=1)
    if noise_bits:
        states = emit_batch(ExBcmpSpec(spec, noise_bits), states, rng)
    return TransitionDataset(spec, states, actions, noise_bits)


def sample_batch(
    dataset: TransitionDataset,
    ratios: RelabelRatios,
    batch_size: int,
    gamma: float,
    rng: np.random.Generator,
) -> TrainingBatch:
    """Uniform transitions with goals relabeled by the (cur, geom, traj, rand) mixture.

    Reward is 0 with ``done_mask`` 1 when the current state matches the goal,
    otherwise -1 with ``done_mask`` 0.
    """
    n, T = dataset.n_traj, dataset.traj_len
    j = rng.integers(0, n, size=batch_size)
    t = rng.integers(0, T, size=batch_size)
    branch = rng.choice(4, size=batch_size, p=ratios.as_array())
    geom = rng.geometric(1.0 - gamma, size=batch_size) - 1
    traj = rng.integers(t + 1, T + 1)
    rand_j = rng.integers(0, n, size=batch_size)
    rand_t = rng.integers(0, T + 1, size=batch_size)

    goal_t = np.select(
        [branch == CUR, branch == GEOM, branch == TRAJ],
        [t, np.minimum(t + 1 + geom, T), traj],
        default=rand_t,
    )
    goal_j = np.where(branch == RAND, rand_j, j)
    s = dataset.states[j, t]
    g = dataset.states[goal_j, goal_t]
    hit = dataset.goal_match(s, g)
    return TrainingBatch(
        s=s,
        a=dataset.actions[j, t].astype(np.int64),
        s_next=dataset.states[j, t + 1],
        g=g,
        reward=np.where(hit, 0.0, -1.0),
        done_mask=hit.astype(np.float64),
        branch=branch,
        offset=np.where(branch == RAND, -1, goal_t - t),
    )


def save_dataset(dataset: TransitionDataset, path) -> None:
    out = bytearray(DS_MAGIC)
    out += struct.pack(
        "<IIIIII",
        DS_VERSION,
        dataset.spec.n_x,
        dataset.spec.n_y,
        dataset.noise_bits,
        dataset.n_traj,
        dataset.traj_len,
    )
    T = dataset.traj_len
    body = np.empty(dataset.n_traj, dtype=[("s", "<u8", (T + 1,)), ("a", "<u1", (T,))])
    body["s"] = dataset.states
    body["a"] = dataset.actions
    out += body.tobytes()
    Path(path).write_bytes(binfmt.seal(bytes(out)))


def load_dataset(path) -> TransitionDataset:
    r = binfmt.open_sealed(path, DS_MAGIC, DS_VERSION)
    n_x, n_y, noise_bits, n_traj, traj_len = r.take("<IIIII")
    row = (traj_len + 1) * 8 + traj_len
    if len(r.buf) - r.offset != n_traj * row:
        raise binfmt.TruncatedFileError(
            f"{path}: header declares {n_traj * row} payload bytes, found {len(r.buf) - r.offset}"
        )
    r.verify()
    rec = np.dtype([("s", "<u8", (traj_len + 1,)), ("a", "<u1", (traj_len,))])
    body = np.frombuffer(r.take_bytes(n_traj * row), dtype=rec)
    r.finish()
    return TransitionDataset(
        PuzzleSpec(n_x, n_y),
        body["s"].astype(np.uint64),
        body["a"].astype(np.uint8),
        noise_bits,
    )
