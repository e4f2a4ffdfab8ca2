"""Stylized stress transforms for a ``T x N`` weekly return panel.

Each transform decomposes a week into its cross-sectional mean and residuals
and perturbs one of the two. At identity parameters every transform returns an
exact copy of its input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rng import stream

KINDS = ("vol_bursts", "jumps", "whipsaw", "corr_spike", "combo")

DEFAULTS = {
    "vol_bursts": {"sigma_s": 2.0, "n_b": 3, "l_b": 8},
    "jumps": {"p_j": 0.03, "mu_j": 0.08, "p_neg": 0.80},
    "whipsaw": {"gamma": 0.7},
    "corr_spike": {"lam": 0.7},
    "combo": {},
}


def _split(panel):
    X = np.asarray(panel, dtype=float)
    rbar = X.mean(axis=1, keepdims=True)
    return X, rbar, X - rbar


def burst_mask(T: int, n_b: int, l_b: int, rng) -> np.ndarray:
    """Place ``n_b`` non-overlapping windows of ``l_b`` weeks uniformly at random."""
    if n_b < 0 or l_b < 1:
        raise ValueError("need n_b >= 0 and l_b >= 1")
    if n_b * l_b > T:
        raise ValueError(f"cannot place {n_b} bursts of {l_b} weeks in {T} weeks")
    mask = np.zeros(T, dtype=bool)
    if n_b == 0:
        return mask
    # uniform over placements: pick n_b slots among the T - n_b*l_b + n_b free positions
    slots = np.sort(rng.choice(T - n_b * l_b + n_b, size=n_b, replace=False))
    for j, s in enumerate(slots):
        start = s + j * (l_b - 1)
        mask[start : start + l_b] = True
    return mask


def stress_vol_bursts(panel, sigma_s: float = 2.0, n_b: int = 3, l_b: int = 8, seed=0) -> np.ndarray:
    X, rbar, eps = _split(panel)
    if sigma_s < 1:
        raise ValueError("sigma_s must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed), "stress.vol_bursts")
    mask = burst_mask(X.shape[0], n_b, l_b, rng)
    out = X.copy()
    if sigma_s == 1.0 or not mask.any():
        return out
    out[mask] = rbar[mask] + eps[mask] * sigma_s
    return out


def stress_jumps(panel, p_j: float = 0.03, mu_j: float = 0.08, p_neg: float = 0.80, seed=0,
                 return_events: bool = False):
    X = np.asarray(panel, dtype=float)
    if not (0 <= p_j <= 1 and 0 <= p_neg <= 1 and mu_j > 0):
        raise ValueError("jump parameters out of range")
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed), "stress.jumps")
    T, N = X.shape
    u = rng.random(T)
    sign_u = rng.random(T)
    size = np.abs(rng.normal(mu_j, mu_j / 2.0, T))
    v = rng.random((T, N))
    eta = rng.normal(0.0, mu_j / 2.0, (T, N))
    market = u < p_j
    idio = v < p_j / 3.0
    out = X.copy()
    if market.any():
        sign = np.where(sign_u[market] < p_neg, -1.0, 1.0)
        out[market] += (sign * size[market])[:, None]
    if idio.any():
        out[idio] += eta[idio]
    if return_events:
        return out, market, idio
    return out


def stress_whipsaw(panel, gamma: float = 0.7) -> np.ndarray:
    X, rbar, eps = _split(panel)
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    if gamma == 0:
        return X.copy()
    a = np.where(np.arange(X.shape[0]) % 2 == 0, 1.0, -1.0)[:, None]
    return X + gamma * (a * np.abs(rbar) - rbar) - 0.3 * gamma * eps


def stress_corr_spike(panel, lam: float = 0.7) -> np.ndarray:
    X, rbar, _ = _split(panel)
    if not 0 <= lam <= 1:
        raise ValueError("lambda must lie in [0, 1]")
    if lam == 0:
        return X.copy()
    return (1.0 - lam) * X + lam * rbar


def stress_combo(panel, seed=0, *, lam: float = 0.7, sigma_s: float = 2.0, n_b: int = 3, l_b: int = 8,
                 p_j: float = 0.03, mu_j: float = 0.08, p_neg: float = 0.80) -> np.ndarray:
    """Correlation spike, then volatility bursts, then jumps, each with its own stream."""
    X = stress_corr_spike(panel, lam)
    X = stress_vol_bursts(X, sigma_s, n_b, l_b, stream(int(seed), "stress.combo.vol_bursts"))
    return stress_jumps(X, p_j, mu_j, p_neg, stream(int(seed), "stress.combo.jumps"))


@dataclass(frozen=True)
class StressSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown stress kind {self.kind!r}")
        merged = dict(DEFAULTS[self.kind])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "params": self.params, "seed": self.seed}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StressSpec":
        d = json.loads(text)
        return cls(d["kind"], d.get("params", {}), d.get("seed", 0))


def apply_stress(panel, spec: StressSpec) -> np.ndarray:
    p = spec.params
    if spec.kind == "vol_bursts":
        return stress_vol_bursts(panel, p["sigma_s"], int(p["n_b"]), int(p["l_b"]), spec.seed)
    if spec.kind == "jumps":
        return stress_jumps(panel, p["p_j"], p["mu_j"], p["p_neg"], spec.seed)
    if spec.kind == "whipsaw":
        return stress_whipsaw(panel, p["gamma"])
    if spec.kind == "corr_spike":
        return stress_corr_spike(panel, p["lam"])
    return stress_combo(panel, spec.seed, **p)
