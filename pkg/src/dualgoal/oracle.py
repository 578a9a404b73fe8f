"""Exact temporal distances, optimal values and ideal dual representations.

Every Lights Out action is an involution, so the transition graph is undirected
and a single breadth-first search rooted at a goal gives the distance from every
state to that goal.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import binfmt
from .env import DEFAULT_ENUM_CAP, BitState, ContractError, PuzzleSpec, enumerate_states

UNREACHABLE = 255
DF_MAGIC = b"DGRD-DF\0"
DF_VERSION = 1


class NonConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"value iteration did not converge: residual {residual:.3e} after {iterations} sweeps")
        self.residual = residual
        self.iterations = iterations


class UnreachableLandmarkError(ContractError):
    def __init__(self, landmark: int, goal: int):
        super().__init__(f"landmark {landmark:#x} cannot reach goal {goal:#x}")
        self.landmark = landmark
        self.goal = goal


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Shortest-path length from every state to ``goal``; ``UNREACHABLE`` marks infinity."""

    spec: PuzzleSpec
    goal: BitState
    dist: np.ndarray  # uint8, indexed by state

    def __post_init__(self):
        self.dist.flags.writeable = False

    def __getitem__(self, state) -> int | float:
        d = int(self.dist[int(state)])
        return math.inf if d == UNREACHABLE else d

    def reachable(self) -> np.ndarray:
        return self.dist != UNREACHABLE


@dataclass(frozen=True, eq=False)
class ValueField:
    spec: PuzzleSpec
    goal: BitState
    gamma: float
    value: np.ndarray
    sweeps: int = 0

    def __post_init__(self):
        self.value.flags.writeable = False


@dataclass(frozen=True)
class LandmarkSet:
    states: tuple[int, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.states)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.states, dtype=np.uint64)


def bfs_distances(spec: PuzzleSpec, goal: BitState, cap: int = DEFAULT_ENUM_CAP) -> DistanceField:
    if spec.n_states > cap:
        enumerate_states(spec, cap)  # raises with the cap message
    spec.check_state(goal)
    dist = np.full(spec.n_states, UNREACHABLE, dtype=np.uint8)
    dist[goal] = 0
    frontier = np.array([goal], dtype=np.uint64)
    masks = spec.masks
    level = 0
    while frontier.size:
        level += 1
        nbrs = (frontier[:, None] ^ masks[None, :]).ravel()
        fresh = nbrs[dist[nbrs] == UNREACHABLE]
        if fresh.size == 0:
            break
        seen = np.zeros(spec.n_states, dtype=bool)
        seen[fresh] = True
        frontier = np.flatnonzero(seen).astype(np.uint64)
        dist[frontier] = level
    return DistanceField(spec, int(goal), dist)


def _iteration_cap(gamma: float, tol: float) -> int:
    return math.ceil(math.log(tol * (1 - gamma)) / math.log(gamma)) + 100


def value_iteration(
    spec: PuzzleSpec,
    goal: BitState,
    gamma: float,
    tol: float = 1e-10,
    reward: str = "minus_one_zero",
    cap: int = DEFAULT_ENUM_CAP,
    max_sweeps: int | None = None,
) -> ValueField:
    """Synchronous value iteration with an absorbing goal.

    ``reward="minus_one_zero"`` pays -1 per step away from the goal (fixed point
    ``-(1 - gamma**d) / (1 - gamma)``); ``reward="zero_one"`` pays 1 on reaching the
    goal (fixed point ``gamma**d``).
    """
    if not 0 < gamma < 1:
        raise ContractError(f"gamma must lie in (0, 1), got {gamma}")
    if tol <= 0:
        raise ContractError("tol must be positive")
    states = enumerate_states(spec, cap)
    spec.check_state(goal)
    succ = (states[:, None] ^ spec.masks[None, :]).astype(np.intp)
    if reward == "minus_one_zero":
        step_reward, goal_value = -1.0, 0.0
    elif reward == "zero_one":
        step_reward, goal_value = 0.0, 1.0
    else:
        raise ContractError(f"unknown reward convention {reward!r}")

    v = np.zeros(spec.n_states)
    v[goal] = goal_value
    limit = max_sweeps if max_sweeps is not None else _iteration_cap(gamma, tol)
    residual = math.inf
    for sweep in range(1, limit + 1):
        new = step_reward + gamma * v[succ].max(axis=1)
        new[goal] = goal_value
        residual = float(np.abs(new - v).max())
        v = new
        if residual < tol:
            return ValueField(spec, int(goal), gamma, v, sweep)
    raise NonConvergenceError(residual, limit)


def sample_landmarks(dataset, k: int, seed: int) -> LandmarkSet:
    """Draw ``k`` distinct states uniformly from those appearing in ``dataset``."""
    pool = dataset.distinct_states()
    if k > pool.size:
        raise ContractError(f"dataset has only {pool.size} distinct states, cannot draw {k} landmarks")
    rng = np.random.default_rng(seed)
    picked = rng.choice(pool, size=k, replace=False)
    return LandmarkSet(tuple(int(s) for s in picked), seed)


def ideal_dual_rep(
    landmarks: LandmarkSet | Sequence[int],
    goal: BitState,
    distance_source: Callable[[int], DistanceField],
) -> np.ndarray:
    """Vector of landmark-to-goal distances, from a single field rooted at ``goal``."""
    states = landmarks.states if isinstance(landmarks, LandmarkSet) else tuple(landmarks)
    field_ = distance_source(goal)
    out = np.empty(len(states))
    for i, s in enumerate(states):
        d = int(field_.dist[s])
        if d == UNREACHABLE:
            raise UnreachableLandmarkError(s, goal)
        out[i] = d
    return out


@dataclass
class LandmarkTable:
    """Distances between each landmark and every state, one BFS per landmark.

    ``table[i, x] == d(landmark_i, x) == d(x, landmark_i)``, so column ``x`` is the
    ideal dual representation of goal ``x``.
    """

    spec: PuzzleSpec
    landmarks: LandmarkSet
    table: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, spec: PuzzleSpec, landmarks: LandmarkSet, cap: int = DEFAULT_ENUM_CAP):
        rows = [bfs_distances(spec, s, cap).dist for s in landmarks.states]
        return cls(spec, landmarks, np.stack(rows))

    def encode(self, states) -> np.ndarray:
        """Dual representations for a batch of states, shape ``(batch, K)`` float64."""
        cols = self.table[:, np.asarray(states, dtype=np.intp)].T
        if np.any(cols == UNREACHABLE):
            bad = np.asarray(states)[np.any(cols == UNREACHABLE, axis=1)][0]
            i = int(np.flatnonzero(self.table[:, int(bad)] == UNREACHABLE)[0])
            raise UnreachableLandmarkError(self.landmarks.states[i], int(bad))
        return cols.astype(np.float64)


def save_distance_field(df: DistanceField, path) -> None:
    payload = bytearray(DF_MAGIC)
    payload += struct.pack("<IIIQQ", DF_VERSION, df.spec.n_x, df.spec.n_y, df.goal, df.dist.size)
    payload += df.dist.astype("<u1").tobytes()
    Path(path).write_bytes(binfmt.seal(bytes(payload)))


def load_distance_field(path) -> DistanceField:
    r = binfmt.open_sealed(path, DF_MAGIC, DF_VERSION)
    n_x, n_y, goal, count = r.take("<IIQQ")
    if len(r.buf) - r.offset < count:
        raise binfmt.TruncatedFileError(f"{path}: expected {count} distance bytes")
    r.verify()
    dist = np.frombuffer(r.take_bytes(count), dtype="<u1").astype(np.uint8)
    r.finish()
    return DistanceField(PuzzleSpec(n_x, n_y), goal, dist)


class DistanceCache:
    """Per-goal distance provider backed by an optional on-disk cache directory."""

    def __init__(self, spec: PuzzleSpec, directory=None, cap: int = DEFAULT_ENUM_CAP):
        self.spec = spec
        self.cap = cap
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def __call__(self, goal: int) -> DistanceField:
        if self.directory is None:
            return bfs_distances(self.spec, goal, self.cap)
        path = self.directory / f"{self.spec.name}-{int(goal):016x}.df"
        if path.exists():
            df = load_distance_field(path)
            if df.spec == self.spec and df.goal == goal:
                return df
        df = bfs_distances(self.spec, goal, self.cap)
        save_distance_field(df, path)
        return df
