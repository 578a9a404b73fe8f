"""Exhaustive executable checks of dual-representation properties on small puzzles.

* sufficiency: acting greedily on ``gamma ** phi(g)(s')`` is optimal;
* noise invariance: observations of one latent goal share a dual representation;
* distance/value identity: value iteration agrees with closed forms in BFS distance.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import DEFAULT_ENUM_CAP, EnumerationCapError, ExBcmpSpec, PuzzleSpec, emit, enumerate_states
from .oracle import UNREACHABLE, bfs_distances, value_iteration

SUFFICIENCY_CAP = 2**12


@dataclass(frozen=True)
class Violation:
    s: int
    g: int
    expected: object
    got: object


@dataclass
class TheoremReport:
    theorem: str
    instance: str
    pairs_checked: int = 0
    violations: list[Violation] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_text(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"[{status}] {self.theorem} on {self.instance}: {self.pairs_checked} pairs, {len(self.violations)} violations"]
        for k in sorted(self.notes):
            lines.append(f"    {k} = {self.notes[k]}")
        for v in self.violations[:20]:
            lines.append(f"    s={v.s:#x} g={v.g:#x} expected={v.expected} got={v.got}")
        if len(self.violations) > 20:
            lines.append(f"    ... {len(self.violations) - 20} more")
        return "\n".join(lines)

    def to_records(self) -> list[str]:
        """One JSON line for the summary, then one per violation."""
        head = {
            "theorem": self.theorem,
            "instance": self.instance,
            "pairs_checked": self.pairs_checked,
            "violations": len(self.violations),
            "passed": self.passed,
            **{f"note.{k}": v for k, v in sorted(self.notes.items())},
        }
        out = [json.dumps(head, sort_keys=True)]
        for v in self.violations:
            out.append(json.dumps({"theorem": self.theorem, "s": v.s, "g": v.g,
                                   "expected": _jsonable(v.expected), "got": _jsonable(v.got)}, sort_keys=True))
        return out


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def check_sufficiency(
    spec: PuzzleSpec,
    gamma: float,
    cap: int = SUFFICIENCY_CAP,
    distance_fn: Callable = bfs_distances,
) -> TheoremReport:
    """Roll out ``argmax_a gamma ** phi(g)(step(s, a))`` from every state to every goal.

    ``distance_fn`` builds the dual representation and is swappable for fault
    injection; the reference lengths always come from ``bfs_distances``.
    """
    states = enumerate_states(spec, cap)
    report = TheoremReport("sufficiency", f"{spec.name} gamma={gamma}")
    masks = spec.masks
    for g in states.tolist():
        dual = distance_fn(spec, g, cap).dist
        truth = bfs_distances(spec, g, cap).dist
        score = np.where(dual == UNREACHABLE, 0.0, gamma ** dual.astype(np.float64))
        sources = np.flatnonzero(truth != UNREACHABLE).astype(np.uint64)
        cur = sources.copy()
        lengths = np.full(cur.size, -1, dtype=np.int64)
        lengths[cur == g] = 0
        for t in range(1, spec.n_states + 1):
            active = lengths < 0
            if not active.any():
                break
            nbrs = cur[active][:, None] ^ masks[None, :]
            pick = np.argmax(score[nbrs], axis=1)
            cur[active] = nbrs[np.arange(nbrs.shape[0]), pick]
            hit = np.flatnonzero(active)[cur[active] == g]
            lengths[hit] = t
        report.pairs_checked += sources.size
        expected = truth[sources.astype(np.intp)].astype(np.int64)
        for i in np.flatnonzero(lengths != expected):
            got = int(lengths[i]) if lengths[i] >= 0 else math.inf
            report.violations.append(Violation(int(sources[i]), g, int(expected[i]), got))
    report.violations.sort(key=lambda v: (v.s, v.g))
    return report


def observation_dual_rep(
    spec: ExBcmpSpec, goal_obs: int, landmarks: np.ndarray, gamma: float, tol: float = 1e-12
) -> np.ndarray:
    """Ideal dual representation computed on the observation space.

    Value iteration runs over every observation with reward ``1{latent(s) ==
    latent(g)}``, an absorbing goal set, and next observations drawn by uniform
    emission; distances are ``log_gamma V``.
    """
    n_latent = spec.base.n_states
    n_noise = 1 << spec.noise_bits
    obs = np.arange(n_latent * n_noise, dtype=np.uint64)
    latent = (obs & np.uint64(n_latent - 1)).astype(np.intp)
    succ_latent = (np.arange(n_latent, dtype=np.uint64)[:, None] ^ spec.base.masks[None, :]).astype(np.intp)
    at_goal = latent == (goal_obs & (n_latent - 1))
    v = np.where(at_goal, 1.0, 0.0)
    for _ in range(10_000):
        # observation index = noise * n_latent + latent
        expected_next = v.reshape(n_noise, n_latent).mean(axis=0)
        new = gamma * expected_next[succ_latent].max(axis=1)[latent]
        new[at_goal] = 1.0
        done = np.abs(new - v).max() < tol
        v = new
        if done:
            break
    picked = v[np.asarray(landmarks, dtype=np.intp)]
    with np.errstate(divide="ignore"):
        return np.where(picked > 0, np.log(picked) / math.log(gamma), np.inf)


def check_noise_invariance(
    spec: ExBcmpSpec,
    gamma: float,
    samples: int,
    seed: int,
    n_landmarks: int = 64,
    control_threshold: float = 0.95,
    cap: int = DEFAULT_ENUM_CAP,
) -> TheoremReport:
    n_obs = 1 << spec.width
    if n_obs > cap:
        raise EnumerationCapError(n_obs, cap)
    rng = np.random.default_rng(seed)
    k = min(n_landmarks, n_obs)
    landmarks = np.sort(rng.choice(n_obs, size=k, replace=False)).astype(np.uint64)
    report = TheoremReport(
        "noise_invariance", f"{spec.base.name}+{spec.noise_bits}noise gamma={gamma} K={k}"
    )
    n_latent = spec.base.n_states
    latent_bfs = {}
    control_total = control_differ = 0
    for _ in range(samples):
        z = int(rng.integers(0, n_latent))
        g1 = emit(spec, z, rng)
        g2 = emit(spec, z, rng)
        while spec.noise_bits and g2 == g1:
            g2 = emit(spec, z, rng)
        rep1 = observation_dual_rep(spec, g1, landmarks, gamma)
        rep2 = observation_dual_rep(spec, g2, landmarks, gamma)
        report.pairs_checked += 1
        if not np.array_equal(rep1, rep2):
            report.violations.append(Violation(g1, g2, rep1, rep2))

        # the observation-level distances must agree with latent BFS
        if z not in latent_bfs:
            latent_bfs[z] = bfs_distances(spec.base, z).dist
        ref = latent_bfs[z][(landmarks & np.uint64(n_latent - 1)).astype(np.intp)].astype(np.float64)
        ref[ref == UNREACHABLE] = np.inf
        finite = np.isfinite(ref)
        if not (np.array_equal(np.isfinite(rep1), finite) and np.allclose(rep1[finite], ref[finite], atol=1e-9)):
            report.violations.append(Violation(-1, g1, ref, rep1))

        if n_latent > 1:
            z_other = int(rng.integers(0, n_latent - 1))
            z_other += z_other >= z
            other = observation_dual_rep(spec, emit(spec, z_other, rng), landmarks, gamma)
            control_total += 1
            control_differ += int(not np.array_equal(rep1, other))

    rate = control_differ / control_total if control_total else 1.0
    report.notes["control_pairs"] = control_total
    report.notes["control_differ_rate"] = round(rate, 6)
    if control_total and rate < control_threshold:
        report.violations.append(Violation(-1, -1, f">= {control_threshold}", rate))
    return report


def check_distance_value_identity(
    spec: PuzzleSpec,
    gamma: float,
    tol: float = 1e-9,
    n_goals: int = 8,
    seed: int = 0,
    cap: int = DEFAULT_ENUM_CAP,
) -> TheoremReport:
    """Compare -1/0 and 0/1 value iteration against their closed forms in BFS distance."""
    enumerate_states(spec, cap)
    rng = np.random.default_rng(seed)
    goals = rng.choice(spec.n_states, size=min(n_goals, spec.n_states), replace=False)
    report = TheoremReport("distance_value_identity", f"{spec.name} gamma={gamma} tol={tol}")
    worst = 0.0
    for g in sorted(int(x) for x in goals):
        d = bfs_distances(spec, g, cap).dist
        reach = np.flatnonzero(d != UNREACHABLE)
        dr = d[reach].astype(np.float64)
        neg = value_iteration(spec, g, gamma, reward="minus_one_zero", cap=cap).value[reach]
        pos = value_iteration(spec, g, gamma, reward="zero_one", cap=cap).value[reach]
        closed_neg = -(1.0 - gamma**dr) / (1.0 - gamma)
        closed_pos = gamma**dr
        err_neg = np.abs(neg - closed_neg)
        err_pos = np.abs(pos - closed_pos)
        worst = max(worst, float(err_neg.max()), float(err_pos.max()))
        report.pairs_checked += reach.size
        for i in np.flatnonzero((err_neg >= tol) | (err_pos >= tol)):
            report.violations.append(
                Violation(int(reach[i]), g, (float(closed_neg[i]), float(closed_pos[i])), (float(neg[i]), float(pos[i])))
            )
    report.notes["max_abs_error"] = worst
    return report
