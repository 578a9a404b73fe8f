"""Flat ``key = value`` experiment configuration with strict validation."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import RelabelRatios
from .env import MAX_CELLS, ContractError, PuzzleSpec

FULL_BUDGET_STEPS = 1_000_000

ENCODERS = ("original", "ideal_dual", "learned_dual")
AGGREGATORS = ("inner_product", "neg_l2")
PHASES = ("repr", "policy", "both")


class ConfigError(ContractError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(x) for x in text.split(",") if x.strip()) if text else ()


@dataclass
class ExperimentConfig:
    # puzzle
    n_x: int = 4
    n_y: int = 5
    noise_bits: int = 0
    enum_cap: int = 2**20
    # dataset
    n_traj: int = 40_000
    traj_len: int = 25
    data_seed: int = 0
    # optimisation (puzzle hyperparameter table; gradient_steps is the desk budget)
    gradient_steps: int = 100_000
    learning_rate: float = 1e-4
    batch_size: int = 1024
    hidden: tuple[int, ...] = (1024, 1024, 1024, 1024)
    layer_norm: bool = True
    target_update_rate: float = 0.005
    gamma: float = 0.95
    dqn_ratios: RelabelRatios = field(default_factory=lambda: RelabelRatios(0.2, 0.0, 0.5, 0.3))
    seed: int = 0
    # goal representation
    encoder: str = "original"
    dual_state_input: str = "auto"  # auto: on for ideal_dual, off otherwise
    n_landmarks: int = 64
    landmark_seed: int = 0
    repr_dim: int = 64
    kappa: float = 0.7
    aggregator: str = "inner_product"
    repr_ratios: RelabelRatios = field(default_factory=lambda: RelabelRatios(0.2, 0.5, 0.0, 0.3))
    expectile_residual_sign: str = "iql"
    repr_steps: int = 0  # 0: same as gradient_steps
    # evaluation
    n_tasks: int = 5
    episodes_per_task: int = 15
    scramble_presses: int = 20
    goal_presses: int = 6
    eval_every: int = 10_000
    eval_seed: int = 0
    # theorem checks
    verify_cap: int = 2**12
    verify_noise_bits: int = 6
    verify_samples: int = 100
    # reproduction sweep
    fig3_seeds: tuple[int, ...] = (0, 1, 2, 3)
    fig3_puzzles: str = "4x5,4x6"
    # outputs
    run_dir: str = ""
    dataset_path: str = ""
    repr_checkpoint: str = ""

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------
    def validate(self) -> None:
        if self.n_x < 1 or self.n_y < 1 or self.n_x * self.n_y > MAX_CELLS:
            raise ConfigError("n_x", f"grid {self.n_x}x{self.n_y} must have 1..{MAX_CELLS} cells")
        if self.noise_bits < 0 or self.n_x * self.n_y + self.noise_bits > 64:
            raise ConfigError("noise_bits", "observation width must stay within 64 bits")
        for key in ("n_traj", "traj_len", "batch_size", "n_landmarks", "repr_dim", "n_tasks",
                    "episodes_per_task", "scramble_presses", "eval_every", "enum_cap",
                    "verify_cap", "verify_samples"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be at least 1")
        if self.verify_noise_bits < 0 or self.verify_noise_bits > 16:
            raise ConfigError("verify_noise_bits", "must lie in 0..16")
        if self.gradient_steps < 0 or self.repr_steps < 0 or self.goal_presses < 0:
            raise ConfigError("gradient_steps", "step counts must be nonnegative")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma", f"must lie in (0, 1), got {self.gamma}")
        if not 0 < self.kappa < 1:
            raise ConfigError("kappa", f"must lie in (0, 1), got {self.kappa}")
        if not 0 < self.target_update_rate <= 1:
            raise ConfigError("target_update_rate", "must lie in (0, 1]")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be nonnegative")
        if self.encoder not in ENCODERS:
            raise ConfigError("encoder", f"must be one of {ENCODERS}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError("aggregator", f"must be one of {AGGREGATORS}")
        if self.dual_state_input not in ("auto", "true", "false"):
            raise ConfigError("dual_state_input", "must be auto, true or false")
        if self.expectile_residual_sign not in ("iql", "alg1"):
            raise ConfigError("expectile_residual_sign", "must be iql or alg1")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden", "layer sizes must be positive")
        for key in ("dqn_ratios", "repr_ratios"):
            if not isinstance(getattr(self, key), RelabelRatios):
                raise ConfigError(key, "must be four comma-separated probabilities")
        self.puzzles()

    # -- derived ----------------------------------------------------------
    @property
    def spec(self) -> PuzzleSpec:
        return PuzzleSpec(self.n_x, self.n_y)

    @property
    def use_dual_state(self) -> bool:
        if self.dual_state_input == "auto":
            return self.encoder == "ideal_dual"
        return self.dual_state_input == "true"

    @property
    def total_repr_steps(self) -> int:
        return self.repr_steps or self.gradient_steps

    def puzzles(self) -> list[PuzzleSpec]:
        out = []
        for item in self.fig3_puzzles.split(","):
            item = item.strip()
            try:
                nx, ny = (int(v) for v in item.lower().split("x"))
                out.append(PuzzleSpec(nx, ny))
            except (ValueError, ContractError) as exc:
                raise ConfigError("fig3_puzzles", f"bad puzzle {item!r}: {exc}") from None
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- text form --------------------------------------------------------
    def to_text(self) -> str:
        lines = ["# dualgoal experiment config v1"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        values.update(overrides or {})
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
            kwargs[key] = _coerce(key, known[key], value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), overrides)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, f: dataclasses.Field, text: str):
    kind = f.type
    try:
        if kind == "bool":
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text.replace("_", ""))
        if kind == "float":
            return float(text)
        if kind == "tuple[int, ...]":
            return _ints(text)
        if kind == "RelabelRatios":
            return RelabelRatios.parse(text)
        return text.strip()
    except (ValueError, ContractError) as exc:
        raise ConfigError(key, f"cannot parse {text!r}: {exc}") from None
