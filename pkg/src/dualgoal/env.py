"""Lights Out controlled Markov process and an exogenous-noise observation wrapper.

States are plain Python ints (or ``uint64`` arrays for batched work). Cell
``(i, j)`` of an ``n_x`` by ``n_y`` grid lives at bit ``i * n_y + j``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

BitState = int

DEFAULT_ENUM_CAP = 2**20
MAX_CELLS = 30


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


class EnumerationCapError(ContractError):
    def __init__(self, n_states: int, cap: int):
        super().__init__(
            f"state space has {n_states} states, above the enumeration cap of {cap}; "
            "raise the cap explicitly to proceed"
        )
        self.n_states = n_states
        self.cap = cap


@dataclass(frozen=True)
class PuzzleSpec:
    n_x: int
    n_y: int

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ContractError(f"grid dimensions must be positive, got {self.n_x}x{self.n_y}")
        if self.n_x * self.n_y > MAX_CELLS:
            raise ContractError(f"at most {MAX_CELLS} cells supported, got {self.n_x * self.n_y}")

    @property
    def width(self) -> int:
        return self.n_x * self.n_y

    @property
    def n_actions(self) -> int:
        return self.n_x * self.n_y

    @property
    def n_states(self) -> int:
        return 1 << self.width

    @property
    def name(self) -> str:
        return f"puzzle-{self.n_x}x{self.n_y}"

    @cached_property
    def masks(self) -> np.ndarray:
        """Toggle mask per action, shape ``(n_actions,)`` uint64."""
        out = np.zeros(self.n_actions, dtype=np.uint64)
        for i in range(self.n_x):
            for j in range(self.n_y):
                m = 0
                for di, dj in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < self.n_x and 0 <= jj < self.n_y:
                        m |= 1 << (ii * self.n_y + jj)
                out[i * self.n_y + j] = m
        out.flags.writeable = False
        return out

    def check_state(self, state: int) -> None:
        if state < 0 or state >> self.width:
            raise ContractError(f"state {state:#x} has bits outside width {self.width}")


@dataclass(frozen=True)
class ExBcmpSpec:
    """Latent puzzle whose observations carry ``noise_bits`` uniform random high bits."""

    base: PuzzleSpec
    noise_bits: int = 0

    def __post_init__(self):
        if self.noise_bits < 0:
            raise ContractError("noise_bits must be nonnegative")
        if self.base.width + self.noise_bits > 64:
            raise ContractError(
                f"observation width {self.base.width + self.noise_bits} exceeds 64 bits"
            )

    @property
    def latent_width(self) -> int:
        return self.base.width

    @property
    def width(self) -> int:
        return self.base.width + self.noise_bits

    @property
    def latent_mask(self) -> int:
        return (1 << self.base.width) - 1


def step(spec: PuzzleSpec, state: BitState, action: int) -> BitState:
    if not 0 <= action < spec.n_actions:
        raise ContractError(f"action {action} out of range [0, {spec.n_actions})")
    spec.check_state(state)
    return state ^ int(spec.masks[action])


def step_batch(spec: PuzzleSpec, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Vectorized ``step``; states uint64, actions integer. No range checks beyond indexing."""
    return np.asarray(states, dtype=np.uint64) ^ spec.masks[np.asarray(actions)]


def neighbors(spec: PuzzleSpec, states: np.ndarray) -> np.ndarray:
    """All successors, shape ``(len(states), n_actions)``."""
    return np.asarray(states, dtype=np.uint64)[:, None] ^ spec.masks[None, :]


def emit(spec: ExBcmpSpec, latent: BitState, rng: np.random.Generator) -> BitState:
    spec.base.check_state(latent)
    if spec.noise_bits == 0:
        return latent
    noise = int(rng.integers(0, 1 << spec.noise_bits, dtype=np.uint64))
    return latent | (noise << spec.latent_width)


def emit_batch(spec: ExBcmpSpec, latents: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.uint64)
    if spec.noise_bits == 0:
        return latents.copy()
    noise = rng.integers(0, 1 << spec.noise_bits, size=latents.shape, dtype=np.uint64)
    return latents | (noise << np.uint64(spec.latent_width))


def latent_of(spec: ExBcmpSpec, observation):
    """Low ``latent_width`` bits; works on ints and uint64 arrays alike."""
    if isinstance(observation, np.ndarray):
        return observation & np.uint64(spec.latent_mask)
    return observation & spec.latent_mask


def enumerate_states(spec: PuzzleSpec, cap: int = DEFAULT_ENUM_CAP) -> np.ndarray:
    if spec.n_states > cap:
        raise EnumerationCapError(spec.n_states, cap)
    return np.arange(spec.n_states, dtype=np.uint64)


def to_bits(states, width: int) -> np.ndarray:
    """Unpack states into a float64 ``(batch, width)`` array of {0, 1} features."""
    states = np.atleast_1d(np.asarray(states, dtype=np.uint64))
    shifts = np.arange(width, dtype=np.uint64)
    return ((states[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.float64)
