"""Execution constraints: box bounds, turnover cap, proportional costs.

Turnover is always one-way, ``0.5 * ||w_new - w_old||_1``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InfeasibleError

_TOL = 1e-12


@dataclass(frozen=True)
class ConstraintSpec:
    level: str = "L1"
    w_max: float = 1.0
    to_max: float = 1.0
    cost_rate: float = 0.0

    def __post_init__(self):
        if self.level not in ("L1", "L2", "L3"):
            raise ValueError(f"unknown constraint level {self.level!r}")
        if not 0.0 < self.w_max <= 1.0:
            raise ValueError("w_max must lie in (0, 1]")
        if not 0.0 < self.to_max <= 1.0:
            raise ValueError("to_max must lie in (0, 1]")
        if self.cost_rate < 0:
            raise ValueError("cost_rate must be non-negative")
        if self.level in ("L1", "L2") and (self.w_max, self.to_max, self.cost_rate) != (1.0, 1.0, 0.0):
            raise ValueError(f"{self.level} carries no execution constraints")

    @classmethod
    def for_level(cls, level: str, w_max: float = 0.30, to_max: float = 0.30,
                  cost_rate: float = 0.001) -> "ConstraintSpec":
        if level == "L3":
            return cls("L3", w_max, to_max, cost_rate)
        return cls(level)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConstraintSpec":
        return cls(**json.loads(text))


def turnover(a, b) -> float:
    return 0.5 * float(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)).sum())


def clip_renormalize(w, w_max: float) -> np.ndarray:
    """Box-clip to ``[0, w_max]`` and renormalize, to the fixed point.

    Plain clip-then-renormalize can push entries back over the cap, and
    repeating it only converges in the limit. This computes that limit
    directly: capped entries sit at ``w_max`` and the remaining mass is spread
    proportionally over the others, re-capping until nothing exceeds the bound
    (at most N rounds). Mass with nowhere proportional to go is spread evenly.
    """
    w = np.maximum(np.asarray(w, dtype=float), 0.0)
    n = w.size
    if n * w_max < 1.0 - 1e-12:
        raise InfeasibleError(f"{n} assets with cap {w_max} cannot hold a fully invested portfolio")
    total = w.sum()
    if total <= 0:
        w = np.full(n, 1.0 / n)
        total = 1.0
    if np.all(w <= w_max + _TOL) and abs(total - 1.0) <= _TOL:
        return w
    w = w / total
    capped = np.zeros(n, dtype=bool)
    for _ in range(n + 1):
        capped |= w > w_max
        free = ~capped
        remainder = 1.0 - w_max * capped.sum()
        out = np.where(capped, w_max, 0.0)
        if free.any():
            mass = w[free].sum()
            out[free] = w[free] * (remainder / mass) if mass > 0 else remainder / free.sum()
        w = out
        if not np.any(w > w_max + _TOL):
            break
    return np.minimum(w, w_max) if np.all(w <= w_max + _TOL) else w


def apply_turnover_cap(prev, target, to_max: float, w_max: float = 1.0) -> np.ndarray:
    """Execute only ``to_max / TO`` of the trade when the target turnover exceeds the cap."""
    prev = np.asarray(prev, dtype=float)
    target = np.asarray(target, dtype=float)
    to = turnover(target, prev)
    if to <= to_max + _TOL:
        return target
    alpha = to_max / to
    blended = prev + alpha * (target - prev)
    return clip_renormalize(blended, w_max)


def transaction_cost(prev_exec, exec_w, cost_rate: float) -> float:
    return cost_rate * turnover(exec_w, prev_exec)


def net_return(exec_w, realized, tc: float = 0.0) -> float:
    exec_w = np.asarray(exec_w, dtype=float)
    realized = np.asarray(realized, dtype=float)
    if exec_w.shape != realized.shape:
        raise ValueError(f"weights {exec_w.shape} and returns {realized.shape} differ in shape")
    return float(exec_w @ realized) - tc


def execute(prev, target, spec: ConstraintSpec) -> tuple[np.ndarray, float, float]:
    """Full operator: clip, turnover-cap, re-clip. Returns ``(weights, turnover, cost)``."""
    prev = np.asarray(prev, dtype=float)
    if spec.level != "L3":
        w = np.asarray(target, dtype=float)
    else:
        w = clip_renormalize(target, spec.w_max)
        w = apply_turnover_cap(prev, w, spec.to_max, spec.w_max)
    to = turnover(w, prev)
    return w, to, spec.cost_rate * to
