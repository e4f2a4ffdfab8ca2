"""Backtest metrics, adaptive walk-forward inference and comparative analytics.

Return convention throughout: weights decided with information up to week
``t`` earn the realized returns of week ``t + 1``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import allocators, nn_core
from .allocators import empirical_cvar
from .constraints import ConstraintSpec, execute, turnover
from .data_panel import FactorPanel, ReturnPanel
from .errors import DivergenceError, DomainError, SkipDate
from .features import COL, FeatureParams, features_at, market_series
from .rng import stream

ANNUALIZATION = math.sqrt(52.0)
MODELS = ("DNN-sup", "DNN-S", "BNN-sup", "BNN-S", "Teacher", "MeanVar", "MinVar", "RiskParity")
STUDENTS = MODELS[:4]
BASELINES = MODELS[4:]
LOW_SAMPLE = 8


# --- metrics ---------------------------------------------------------------------


def sharpe_annualized(returns) -> float:
    """Mean over sample std (n - 1) times sqrt(52); NaN when the volatility is zero."""
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise ValueError("Sharpe needs at least two returns")
    mean = r.mean()
    sd = r.std(ddof=1)
    if sd <= 1e-14 * max(1.0, abs(mean)):
        return float("nan")
    return float(mean / sd * ANNUALIZATION)


def max_drawdown(returns) -> float:
    """Largest fractional fall of compounded wealth (starting at 1) from its running peak."""
    r = np.asarray(returns, dtype=float)
    if np.any(r <= -1.0):
        raise DomainError("a return of -100% or worse wipes out wealth")
    wealth = np.concatenate([[1.0], np.cumprod(1.0 + r)])
    peak = np.maximum.accumulate(wealth)
    return float(((peak - wealth) / peak).max())


def cvar95_report(returns, alpha: float = 0.95) -> float:
    """Tail metric in report sign: the mean of the worst ``ceil((1-alpha) n)`` returns."""
    return -empirical_cvar(-np.asarray(returns, dtype=float), alpha)


def mean_turnover(weights: np.ndarray, initial=None) -> float:
    W = np.asarray(weights, dtype=float)
    prev = W[0] if initial is None else np.asarray(initial, dtype=float)
    rows = np.vstack([prev[None, :], W])
    return float(np.mean([turnover(rows[i + 1], rows[i]) for i in range(len(W))]))


def rolling_normalize(value, history, window: int = 52, eps: float = 1e-8):
    """Z-score ``value`` with the mean and std of the last ``window`` history rows.

    Returns ``(normalized, ok)``; ``ok`` is False when fewer than two past rows
    exist, in which case ``value`` is returned untouched for the caller to
    fall back on.
    """
    hist = np.asarray(history, dtype=float)
    if hist.ndim == 1:
        hist = hist[:, None] if np.ndim(value) == 0 else hist[None, :]
    hist = hist[-window:] if len(hist) else hist
    if len(hist) < 2:
        return np.asarray(value, dtype=float), False
    mu = hist.mean(axis=0)
    sd = hist.std(axis=0)
    out = (np.asarray(value, dtype=float) - mu) / (sd + eps)
    return (float(out[0]) if np.ndim(value) == 0 else out), True


def bootstrap_sharpe_ci(returns, n_boot: int = 1000, level: float = 0.95, seed: int = 0):
    r = np.asarray(returns, dtype=float)
    rng = stream(seed, "bootstrap")
    idx = rng.integers(0, r.size, size=(n_boot, r.size))
    samples = r[idx]
    sd = samples.std(axis=1, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sh = np.where(sd > 0, samples.mean(axis=1) / sd * ANNUALIZATION, np.nan)
    sh = sh[np.isfinite(sh)]
    if sh.size == 0:
        return float("nan"), float("nan")
    lo, hi = np.percentile(sh, [50 * (1 - level), 100 - 50 * (1 - level)])
    return float(lo), float(hi)


# --- tracks and reports ------------------------------------------------------------


@dataclass
class BacktestTrack:
    dates: np.ndarray  # week index of each realized return
    returns: np.ndarray
    weights: np.ndarray  # executed weights held over each week
    turnover: np.ndarray
    rebalance: np.ndarray
    costs: np.ndarray = None
    flags: list = field(default_factory=list)

    def take(self, mask) -> "BacktestTrack":
        mask = np.asarray(mask, dtype=bool)
        costs = None if self.costs is None else self.costs[mask]
        return BacktestTrack(self.dates[mask], self.returns[mask], self.weights[mask], self.turnover[mask],
                             self.rebalance[mask], costs, list(self.flags))

    def mean_turnover(self) -> float:
        """Mean one-way turnover per rebalance."""
        t = self.turnover[self.rebalance]
        return float(t.mean()) if t.size else 0.0


@dataclass
class EvalReport:
    model: str
    world_seed: int
    model_seed: int
    universe: str
    level: str
    stress: str
    regime: str
    sharpe: float
    cvar95: float
    max_drawdown: float
    mean_turnover: float
    ann_return: float
    ann_vol: float
    n_weeks: int
    flags: str = ""

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def report_from_track(track: BacktestTrack, **keys) -> EvalReport:
    r = track.returns
    flags = list(track.flags)
    if r.size < 2:
        sharpe, vol = float("nan"), float("nan")
        flags.append("too-short")
    else:
        sharpe = sharpe_annualized(r)
        vol = float(r.std(ddof=1) * ANNUALIZATION)
        if not np.isfinite(sharpe):
            flags.append("sharpe-undefined")
    if r.size < LOW_SAMPLE:
        flags.append("low-sample")
    return EvalReport(
        sharpe=sharpe,
        cvar95=cvar95_report(r) if r.size else float("nan"),
        max_drawdown=max_drawdown(r) if r.size else 0.0,
        mean_turnover=track.mean_turnover(),
        ann_return=float(r.mean() * 52) if r.size else float("nan"),
        ann_vol=vol,
        n_weeks=int(r.size),
        flags=";".join(sorted(set(flags))),
        **keys,
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_reports_csv(path, reports: list[EvalReport]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EvalReport.columns())
        for rep in reports:
            w.writerow([_fmt(getattr(rep, c)) for c in EvalReport.columns()])


def read_reports_csv(path) -> list[EvalReport]:
    out = []
    types = {f.name: f.type for f in fields(EvalReport)}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                kw[k] = int(v) if t in ("int", int) else float(v) if t in ("float", float) else v
            out.append(EvalReport(**kw))
    return out


# --- baselines ---------------------------------------------------------------------


def baseline_weights(name: str, window: np.ndarray, mu: np.ndarray | None = None, teacher=None,
                     alpha: float = 0.95, **solver) -> np.ndarray:
    """Weights for one baseline from the trailing scenario window."""
    if name == "Teacher":
        if teacher is not None:
            return np.asarray(teacher, dtype=float)
        return allocators.solve_cvar_teacher(window, alpha, **solver).weights
    sigma = np.cov(window, rowvar=False, ddof=1).reshape(window.shape[1], window.shape[1])
    if name == "MinVar":
        return allocators.solve_min_variance(sigma)
    if name == "RiskParity":
        return allocators.solve_risk_parity(sigma)
    if name == "MeanVar":
        mu = window.mean(axis=0) if mu is None else np.asarray(mu, dtype=float)
        return allocators.solve_mean_variance(mu, sigma, float(mu.mean()))
    raise ValueError(f"unknown baseline {name!r}")


def mu_from_features(x: np.ndarray, n_assets: int) -> np.ndarray:
    """The blended expected-return column of a flattened feature vector."""
    return np.asarray(x, dtype=float).reshape(n_assets, -1)[:, COL["mu_blend"]]


# --- split evaluation ----------------------------------------------------------------


def hold_track(panel: ReturnPanel, date_indices, weights, hold: int, spec: ConstraintSpec | None = None,
               initial=None) -> BacktestTrack:
    """Rebalance at each date to the given target and hold for up to ``hold`` weeks.

    Holding stops early at the next rebalance date or the end of the panel.
    """
    spec = spec or ConstraintSpec()
    dates = np.asarray(date_indices, dtype=int)
    order = np.argsort(dates, kind="stable")
    dates = dates[order]
    targets = np.asarray(weights, dtype=float)[order]
    n = panel.n_assets
    prev = np.full(n, 1.0 / n) if initial is None else np.asarray(initial, dtype=float)
    weeks, rets, held, tos, reb, costs = [], [], [], [], [], []
    for j, t in enumerate(dates):
        w, to, cost = execute(prev, targets[j], spec)
        stop = min(t + hold, panel.n_weeks - 1)
        if j + 1 < len(dates):
            stop = min(stop, dates[j + 1])
        for s in range(t + 1, stop + 1):
            first = s == t + 1
            weeks.append(s)
            rets.append(float(w @ panel.simple[s]) - (cost if first else 0.0))
            held.append(w)
            tos.append(to if first else 0.0)
            reb.append(first)
            costs.append(cost if first else 0.0)
        prev = w
    return BacktestTrack(np.array(weeks, dtype=int), np.array(rets), np.array(held).reshape(-1, n),
                         np.array(tos), np.array(reb, dtype=bool), np.array(costs))


# --- adaptive walk-forward -------------------------------------------------------------


@dataclass(frozen=True)
class AdaptiveConfig:
    norm_window: int = 52
    finetune_every: int = 8
    finetune_window: int = 26
    lambda_to: float = 0.1
    finetune_lr: float = 1e-4
    finetune_epochs: int = 20
    normalization: str = "rolling"  # or "checkpoint"

    def __post_init__(self):
        for name in ("norm_window", "finetune_every", "finetune_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.lambda_to < 0 or self.finetune_lr < 0 or self.finetune_epochs < 0:
            raise ValueError("fine-tune settings must be non-negative")
        if self.normalization not in ("rolling", "checkpoint"):
            raise ValueError("normalization must be 'rolling' or 'checkpoint'")

    def to_dict(self) -> dict:
        return asdict(self)


def finetune_objective(net: nn_core.Network, X: np.ndarray, realized: np.ndarray, lambda_to: float):
    """Negative mean realized return plus ``lambda_to`` times the mean L1 weight change.

    ``realized[i]`` is the return vector earned by the weights decided from
    ``X[i]``. Uses the deterministic (mean) path. Returns ``(value, grads)``.
    """
    W, tape = nn_core.forward(net, X)
    n = len(X)
    value = -float((W * realized).sum(axis=1).mean())
    up = -realized / n
    if n > 1 and lambda_to > 0:
        d = W[1:] - W[:-1]
        value += lambda_to * float(np.abs(d).sum(axis=1).mean())
        s = np.sign(d) * (lambda_to / (n - 1))
        up = up.copy()
        up[1:] += s
        up[:-1] -= s
    return value, nn_core.backward(net, tape, up)


def adaptive_walk_forward(checkpoint, panel: ReturnPanel, factors: FactorPanel, decision_dates,
                          constraint: ConstraintSpec, adaptive: AdaptiveConfig, *,
                          feature_params: FeatureParams = FeatureParams(), mc_samples: int = 20,
                          mc_seed: int = 0, grad_clip: float = 5.0) -> BacktestTrack:
    """Weekly decisions with rolling normalization and periodic fine-tune-then-reset.

    Every ``finetune_every`` decisions the live network is reset to the frozen
    checkpoint and fine-tuned on the last ``finetune_window`` decisions whose
    next-week returns are already realized. The previous-weight feature is the
    model's own executed weights.
    """
    frozen = checkpoint.net
    live = frozen.copy()
    std = checkpoint.standardizer
    n = panel.n_assets
    cap = constraint.w_max if constraint.level == "L3" else 1.0
    dates = [int(t) for t in decision_dates if t + 1 < panel.n_weeks]
    prev = np.full(n, 1.0 / n)
    raw_hist: list[np.ndarray] = []
    inputs: list[np.ndarray] = []
    weeks, rets, held, tos, costs = [], [], [], [], []
    flags: set[str] = set()
    resets = 0
    for step, t in enumerate(dates):
        try:
            x = features_at(panel, factors, t, prev, cap, feature_params).flattened
        except SkipDate:
            flags.add("skipped-dates")
            continue
        if adaptive.normalization == "rolling":
            z, ok = rolling_normalize(x, raw_hist, adaptive.norm_window)
            if not ok:
                z = std(x)
                flags.add("norm-fallback")
        else:
            z = std(x)
        raw_hist.append(x)
        if step > 0 and step % adaptive.finetune_every == 0 and adaptive.finetune_epochs > 0:
            live = frozen.copy()
            resets += 1
            done = [i for i, s in enumerate(weeks) if s <= t]
            use = done[-adaptive.finetune_window :]
            if len(use) >= 2:
                Xf = np.stack([inputs[i] for i in use])
                Rf = np.stack([panel.simple[weeks[i]] for i in use])
                try:
                    for _ in range(adaptive.finetune_epochs):
                        val, grads = finetune_objective(live, Xf, Rf, adaptive.lambda_to)
                        if not np.isfinite(val):
                            raise DivergenceError("fine-tune objective is non-finite")
                        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                        if not np.isfinite(norm):
                            raise DivergenceError("fine-tune gradient is non-finite")
                        if norm > grad_clip:
                            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
                        live.step(grads, adaptive.finetune_lr)
                except DivergenceError:
                    live = frozen.copy()
                    flags.add("finetune-skipped")
        target = nn_core.predict(live, z, mc_samples, mc_seed)
        w, to, cost = execute(prev, target, constraint)
        inputs.append(z)
        weeks.append(t + 1)
        rets.append(float(w @ panel.simple[t + 1]) - cost)
        held.append(w)
        tos.append(to)
        costs.append(cost)
        prev = w
    track = BacktestTrack(np.array(weeks, dtype=int), np.array(rets), np.array(held).reshape(-1, n),
                          np.array(tos), np.ones(len(weeks), dtype=bool), np.array(costs), sorted(flags))
    track.flags.append(f"resets={resets}")
    return track


def baseline_walk_forward(name: str, panel: ReturnPanel, factors: FactorPanel, decision_dates,
                          constraint: ConstraintSpec, *, window: int = 104, alpha: float = 0.95,
                          feature_params: FeatureParams = FeatureParams(), **solver) -> BacktestTrack:
    n = panel.n_assets
    prev = np.full(n, 1.0 / n)
    cap = constraint.w_max if constraint.level == "L3" else 1.0
    weeks, rets, held, tos, costs = [], [], [], [], []
    for t in decision_dates:
        t = int(t)
        if t + 1 >= panel.n_weeks or t - window + 1 < 0:
            continue
        win = allocators.scenario_window(panel.simple, t, window)
        mu = None
        if name == "MeanVar":
            mu = mu_from_features(features_at(panel, factors, t, prev, cap, feature_params).flattened, n)
        target = baseline_weights(name, win, mu, alpha=alpha, **solver)
        w, to, cost = execute(prev, target, constraint)
        weeks.append(t + 1)
        rets.append(float(w @ panel.simple[t + 1]) - cost)
        held.append(w)
        tos.append(to)
        costs.append(cost)
        prev = w
    return BacktestTrack(np.array(weeks, dtype=int), np.array(rets), np.array(held).reshape(-1, n),
                         np.array(tos), np.ones(len(weeks), dtype=bool), np.array(costs))


# --- analytics ---------------------------------------------------------------------


def trailing_vol(series, window: int = 12) -> np.ndarray:
    """Sample std of the trailing ``window`` values ending at each index (NaN before)."""
    m = np.asarray(series, dtype=float)
    out = np.full(m.size, np.nan)
    for t in range(window - 1, m.size):
        out[t] = m[t - window + 1 : t + 1].std(ddof=1)
    return out


def regime_labels(market, weeks, window: int = 12) -> np.ndarray:
    """True (HIGHVOL) where the trailing vol known before week ``s`` exceeds its median over the track."""
    vol = trailing_vol(market, window)
    weeks = np.asarray(weeks, dtype=int)
    v = vol[weeks - 1]
    med = np.nanmedian(v)
    return v > med


def regime_split(track: BacktestTrack, market, window: int = 12):
    high = regime_labels(market, track.dates, window)
    return track.take(high), track.take(~high)


def win_rate_matrix(sharpe_by_run: dict[str, list[float]]) -> tuple[list[str], np.ndarray]:
    """``P(row > column)`` over paired runs, ties counting one half."""
    names = list(sharpe_by_run)
    lengths = {len(v) for v in sharpe_by_run.values()}
    if len(lengths) != 1:
        raise ValueError("win-rate matrix needs the same runs for every model")
    S = np.array([sharpe_by_run[k] for k in names], dtype=float)
    M = np.zeros((len(names), len(names)))
    for i in range(len(names)):
        for j in range(len(names)):
            gt = (S[i] > S[j]).mean()
            eq = (S[i] == S[j]).mean()
            M[i, j] = gt + 0.5 * eq
    return names, M


def sensitivity(l1: float, l3: float) -> float:
    """Relative Sharpe change ``(L3 - L1) / L1``; NaN when the L1 Sharpe is zero."""
    if l1 == 0:
        return float("nan")
    return (l3 - l1) / l1


def constraint_sensitivity(reports: list[EvalReport]) -> list[dict]:
    groups: dict = {}
    for r in reports:
        if r.regime != "ALL" or r.level not in ("L1", "L3"):
            continue
        groups.setdefault((r.model, r.universe), {}).setdefault(r.level, []).append(r.sharpe)
    rows = []
    for (model, universe), lv in sorted(groups.items()):
        if "L1" not in lv or "L3" not in lv:
            continue
        l1, l3 = float(np.nanmean(lv["L1"])), float(np.nanmean(lv["L3"]))
        d = sensitivity(l1, l3)
        rows.append({"model": model, "universe": universe, "L1": l1, "L3": l3, "delta": d,
                     "undefined": not np.isfinite(d)})
    return rows


def summarize(reports: list[EvalReport], keys=("universe", "level", "stress", "regime", "model")) -> list[dict]:
    """Mean and std (ddof 1, 0 for a single run) of each metric per group."""
    groups: dict = {}
    for r in reports:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r)
    rows = []
    metrics = ("sharpe", "cvar95", "max_drawdown", "mean_turnover", "ann_return", "ann_vol")
    for key, rs in sorted(groups.items()):
        row = dict(zip(keys, key))
        row["n_runs"] = len(rs)
        for m in metrics:
            v = np.array([getattr(r, m) for r in rs], dtype=float)
            v = v[np.isfinite(v)]
            row[f"{m}_mean"] = float(v.mean()) if v.size else float("nan")
            row[f"{m}_std"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
        rows.append(row)
    return rows


def market_for(panel: ReturnPanel, market_asset=None) -> np.ndarray:
    return market_series(panel, market_asset)
