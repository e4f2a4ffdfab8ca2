"""CVaR teacher and the classical long-only baselines.

All solvers return weights on the probability simplex. The teacher minimizes the
Rockafellar-Uryasev form of CVaR by projected subgradient descent; mean-variance
and minimum-variance use accelerated projected gradient.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, NumericalError

DEFAULT_ALPHA = 0.95


def project_simplex(v: np.ndarray, s: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum(w) = s}`` (sort-based).

    Ties are resolved by a stable sort, so equal entries are treated in index
    order and the result is deterministic.
    """
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    u = -np.sort(-v, kind="stable")
    css = np.cumsum(u) - s
    k = np.arange(1, n + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def finalize_weights(w: np.ndarray) -> np.ndarray:
    """Clamp tiny negatives to zero and renormalize to an exact simplex point."""
    w = np.where(np.asarray(w, dtype=float) < 0, 0.0, w)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise NumericalError("weights do not define a portfolio")
    return w / total


def tail_count(n_scenarios: int, alpha: float) -> int:
    # round before ceil so that e.g. (1 - 0.9) * 10 does not become 1.0000000000000002
    return max(1, math.ceil(round((1.0 - alpha) * n_scenarios, 9)))


def empirical_cvar(losses, alpha: float = DEFAULT_ALPHA) -> float:
    """Mean of the worst ``ceil((1 - alpha) S)`` losses."""
    losses = np.asarray(losses, dtype=float).ravel()
    if losses.size == 0:
        raise ValueError("empirical_cvar of an empty loss vector")
    k = tail_count(losses.size, alpha)
    return float(np.sort(losses)[-k:].mean())


def ru_objective(w: np.ndarray, scenarios: np.ndarray, alpha: float, ell: float | None = None) -> float:
    """Rockafellar-Uryasev objective; with ``ell=None`` it is minimized over ell exactly."""
    losses = -scenarios @ w
    S = losses.size
    scale = 1.0 / ((1.0 - alpha) * S)
    if ell is None:
        # the minimizing ell is the ceil(alpha*S)-th smallest loss
        j = min(S - 1, max(0, math.ceil(round(alpha * S, 9)) - 1))
        ell = np.partition(losses, j)[j]
    return float(ell + scale * np.maximum(losses - ell, 0.0).sum())


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: np.ndarray
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        sc = np.atleast_2d(np.asarray(self.scenarios, dtype=float))
        object.__setattr__(self, "scenarios", sc)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        need = math.ceil(round(1.0 / (1.0 - self.alpha), 9))
        if sc.shape[0] < need:
            raise ValueError(f"need at least {need} scenarios for alpha={self.alpha}, got {sc.shape[0]}")
        if not np.all(np.isfinite(sc)):
            raise ValueError("scenarios must be finite")


@dataclass(frozen=True)
class TeacherResult:
    weights: np.ndarray
    objective: float
    var_level: float
    iterations: int
    converged: bool


def solve_cvar_teacher(scenarios: ScenarioSet | np.ndarray, alpha: float = DEFAULT_ALPHA, *,
                       step0: float = 0.1, iterations: int = 5000, tol: float = 1e-6) -> TeacherResult:
    """Minimize CVaR over the simplex by projected subgradient on ``(w, ell)``.

    Scenarios are rescaled to unit mean absolute size before iterating, which
    makes the result invariant to the units of the returns. Steps follow
    ``step0 / sqrt(k)``; the reported solution is the better of the
    last-half average and the best iterate seen.
    """
    if not isinstance(scenarios, ScenarioSet):
        scenarios = ScenarioSet(scenarios, alpha)
    R = scenarios.scenarios
    alpha = scenarios.alpha
    S, N = R.shape
    scale = float(np.mean(np.abs(R)))
    if scale == 0.0:
        w = np.full(N, 1.0 / N)
        return TeacherResult(w, 0.0, 0.0, 0, True)
    Rn = R / scale
    coef = 1.0 / ((1.0 - alpha) * S)

    w = np.full(N, 1.0 / N)
    losses = -Rn @ w
    j = min(S - 1, max(0, math.ceil(round(alpha * S, 9)) - 1))
    ell = float(np.partition(losses, j)[j])
    half = iterations // 2
    w_sum = np.zeros(N)
    ell_sum = 0.0
    n_avg = 0
    best_w, best_obj = w.copy(), ru_objective(w, Rn, alpha)
    check_every = max(1, iterations // 200)

    for k in range(1, iterations + 1):
        losses = -Rn @ w
        active = losses > ell
        g_w = -coef * Rn[active].sum(axis=0)
        g_ell = 1.0 - coef * np.count_nonzero(active)
        step = step0 / math.sqrt(k)
        w = project_simplex(w - step * g_w)
        ell -= step * g_ell
        if k > half:
            w_sum += w
            ell_sum += ell
            n_avg += 1
        if k % check_every == 0:
            obj = ru_objective(w, Rn, alpha)
            if obj < best_obj:
                best_obj, best_w = obj, w.copy()

    w_avg = project_simplex(w_sum / max(n_avg, 1))
    avg_obj = ru_objective(w_avg, Rn, alpha)
    if avg_obj <= best_obj:
        w_out, obj_out = w_avg, avg_obj
    else:
        w_out, obj_out = best_w, best_obj
    # the averaged and best iterates agree once the iteration has settled
    converged = avg_obj - best_obj <= max(tol, 1e-2 * abs(best_obj))
    if not converged:
        warnings.warn("CVaR teacher did not converge; returning best iterate", RuntimeWarning, stacklevel=2)
    w_out = finalize_weights(w_out)
    losses = -R @ w_out
    var_level = float(np.partition(losses, j)[j])
    return TeacherResult(w_out, ru_objective(w_out, R, alpha), var_level, iterations, bool(converged))


def _check_psd(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise ValueError("covariance must be symmetric")
    if np.linalg.eigvalsh(sigma).min() < -1e-10 * max(1.0, np.abs(sigma).max()):
        raise ValueError("covariance must be positive semi-definite")
    return 0.5 * (sigma + sigma.T)


def _qp_simplex(sigma, mu=None, target=None, penalty=0.0, w0=None, iterations=5000, xtol=1e-14):
    """FISTA on ``w'Sw + penalty * max(0, target - w'mu)^2`` over the simplex.

    Momentum is reset whenever it points against the last step (adaptive restart).
    """
    N = sigma.shape[0]
    L = 2.0 * max(np.linalg.eigvalsh(sigma).max(), 1e-12)
    if penalty > 0:
        L += 2.0 * penalty * float(mu @ mu)
    step = 1.0 / L
    w = np.full(N, 1.0 / N) if w0 is None else w0.copy()
    y, t = w.copy(), 1.0
    for _ in range(iterations):
        g = 2.0 * sigma @ y
        if penalty > 0:
            short = target - y @ mu
            if short > 0:
                g = g - 2.0 * penalty * short * mu
        w_next = project_simplex(y - step * g)
        if (y - w_next) @ (w_next - w) > 0:
            t = 1.0
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = w_next + ((t - 1.0) / t_next) * (w_next - w)
        moved = np.max(np.abs(w_next - w))
        w, t = w_next, t_next
        if moved < xtol:
            break
    return w


def solve_min_variance(sigma) -> np.ndarray:
    sigma = _check_psd(sigma)
    return finalize_weights(_qp_simplex(sigma))


def solve_mean_variance(mu, sigma, target_return: float, *, tol: float = 1e-10) -> np.ndarray:
    """Minimum variance subject to ``w'mu >= target_return`` on the simplex.

    The return constraint is an exterior quadratic penalty. Rather than
    escalating the weight without bound, the penalized target is shifted by the
    remaining shortfall each round (a method-of-multipliers update), which
    drives the shortfall to zero at a fixed, well-conditioned penalty. Any
    residual shortfall is closed by moving towards the highest-return asset.
    """
    sigma = _check_psd(sigma)
    mu = np.asarray(mu, dtype=float)
    k_best = int(np.argmax(mu))
    if target_return > mu[k_best] + tol:
        raise InfeasibleError(f"target return {target_return:.6g} exceeds max achievable {mu[k_best]:.6g}")
    w = _qp_simplex(sigma)
    if w @ mu >= target_return - tol:
        return finalize_weights(w)
    penalty = 100.0 * max(1.0, float(np.trace(sigma)) / max(float(mu @ mu), 1e-18))
    shift = 0.0
    for _ in range(60):
        w = _qp_simplex(sigma, mu, target_return + shift, penalty, w0=w)
        short = target_return - w @ mu
        if short <= tol:
            break
        shift += short
    short = target_return - w @ mu
    if short > 0:
        gap = mu[k_best] - w @ mu
        theta = 1.0 if gap <= 0 else min(1.0, short / gap)
        corner = np.zeros_like(w)
        corner[k_best] = 1.0
        w = (1.0 - theta) * w + theta * corner
    return finalize_weights(w)


def solve_risk_parity(sigma) -> np.ndarray:
    """Inverse-volatility weights."""
    var = np.diag(np.asarray(sigma, dtype=float))
    if np.any(var <= 0):
        raise ValueError("risk parity needs strictly positive variances")
    inv = 1.0 / np.sqrt(var)
    return inv / inv.sum()


@dataclass(frozen=True)
class LabeledPair:
    date_index: int
    features: np.ndarray
    teacher: np.ndarray


def scenario_window(returns: np.ndarray, t: int, window: int) -> np.ndarray:
    """Trailing ``window`` rows ending at row ``t`` inclusive."""
    if t - window + 1 < 0 or t >= returns.shape[0]:
        raise IndexError(f"date {t} lacks a {window}-week history")
    return returns[t - window + 1 : t + 1]


def label_dates(dates, returns: np.ndarray, window: int = 104, *, features=None,
                alpha: float = DEFAULT_ALPHA, **solver) -> list[LabeledPair]:
    """Solve the teacher on each date's trailing window; dates lacking history are discarded.

    ``features`` maps a date index to its flattened feature vector; when absent
    the pairs carry an empty feature array.
    """
    returns = np.asarray(returns, dtype=float)
    pairs = []
    for t in dates:
        t = int(t)
        if t - window + 1 < 0 or t >= returns.shape[0]:
            continue
        res = solve_cvar_teacher(scenario_window(returns, t, window), alpha, **solver)
        x = np.empty(0) if features is None else np.asarray(features[t], dtype=float)
        pairs.append(LabeledPair(t, x, res.weights))
    return pairs
