"""Synthetic weekly markets: VAR(1) factors, AR(1) risk-free rate, t-copula residuals.

A fitted :class:`GeneratorModel` bundles the four component models. Every
simulation is a pure function of the model and a world seed; each component
draws from its own named stream.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .data_panel import FACTOR_NAMES, FactorPanel, ReturnPanel
from .errors import FitError, NonStationaryError
from .rng import as_generator, stream

DEFAULT_NU = 6.0
SYNTH_START = np.datetime64("2000-01-07")  # a Friday


def weekly_dates(n: int, start=SYNTH_START) -> np.ndarray:
    return np.datetime64(start, "D") + 7 * np.arange(n)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Lower factor ``L`` with ``L L' = m``; falls back to eigen-sqrt when singular."""
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _own(obj, *names) -> None:
    # C-contiguous copies so a reloaded model multiplies bitwise like the fitted one
    for name in names:
        object.__setattr__(obj, name, np.ascontiguousarray(getattr(obj, name), dtype=float))


@dataclass(frozen=True)
class Var1Model:
    c: np.ndarray
    A: np.ndarray
    sigma_u: np.ndarray
    spectral_radius: float

    def __post_init__(self):
        _own(self, "c", "A", "sigma_u")

    @property
    def stationary(self) -> bool:
        return self.spectral_radius < 1.0

    def unconditional_mean(self) -> np.ndarray:
        k = len(self.c)
        return np.linalg.solve(np.eye(k) - self.A, self.c)

    def to_dict(self) -> dict:
        return {"c": self.c.tolist(), "A": self.A.tolist(), "sigma_u": self.sigma_u.tolist(),
                "spectral_radius": self.spectral_radius}

    @classmethod
    def from_dict(cls, d) -> "Var1Model":
        return cls(np.array(d["c"]), np.array(d["A"]), np.array(d["sigma_u"]), float(d["spectral_radius"]))

    @classmethod
    def from_params(cls, c, A, sigma_u) -> "Var1Model":
        A = np.asarray(A, dtype=float)
        return cls(np.asarray(c, dtype=float), A, np.asarray(sigma_u, dtype=float),
                   float(np.max(np.abs(np.linalg.eigvals(A)))))


def fit_var1(factors) -> Var1Model:
    """Least-squares fit of ``f_t`` on ``[1, f_{t-1}]``."""
    f = np.asarray(factors.factors if isinstance(factors, FactorPanel) else factors, dtype=float)
    T, k = f.shape
    if T < 30:
        raise FitError(f"VAR(1) fit needs at least 30 rows, got {T}")
    X = np.hstack([np.ones((T - 1, 1)), f[:-1]])
    Y = f[1:]
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise FitError("singular VAR(1) design matrix")
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    sigma_u = resid.T @ resid / (T - 1 - X.shape[1])
    sigma_u = 0.5 * (sigma_u + sigma_u.T)
    model = Var1Model.from_params(coef[0], coef[1:].T, sigma_u)
    if not model.stationary:
        warnings.warn(f"fitted VAR(1) is non-stationary (radius {model.spectral_radius:.3f})", stacklevel=2)
    return model


def simulate_var1(model: Var1Model, horizon: int, seed, start=None) -> np.ndarray:
    """``horizon x k`` trajectory; the state before the first row is ``start``
    (default: the unconditional mean)."""
    if not model.stationary:
        raise NonStationaryError(f"refusing to simulate: spectral radius {model.spectral_radius:.3f} >= 1")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = as_generator(seed, "factors")
    k = len(model.c)
    L = _psd_sqrt(model.sigma_u)
    shocks = rng.standard_normal((horizon, k)) @ L.T
    f = model.unconditional_mean() if start is None else np.asarray(start, dtype=float)
    out = np.empty((horizon, k))
    for t in range(horizon):
        f = model.c + model.A @ f + shocks[t]
        out[t] = f
    return out


@dataclass(frozen=True)
class Ar1Model:
    c_rf: float
    phi_rf: float
    sigma: float

    def mean(self) -> float:
        return self.c_rf / (1.0 - self.phi_rf)

    def to_dict(self) -> dict:
        return {"c_rf": self.c_rf, "phi_rf": self.phi_rf, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d) -> "Ar1Model":
        return cls(float(d["c_rf"]), float(d["phi_rf"]), float(d["sigma"]))


def fit_ar1(rf) -> Ar1Model:
    rf = np.asarray(rf, dtype=float)
    if rf.size < 3:
        raise FitError("AR(1) fit needs at least 3 observations")
    x, y = rf[:-1], rf[1:]
    if np.ptp(x) == 0:
        return Ar1Model(float(rf.mean()), 0.0, float(np.std(y - rf.mean())))
    X = np.column_stack([np.ones_like(x), x])
    (c, phi), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - c - phi * x
    sigma = float(np.sqrt(resid @ resid / max(y.size - 2, 1)))
    return Ar1Model(float(c), float(phi), sigma)


def simulate_ar1(model: Ar1Model, horizon: int, seed, start=None) -> np.ndarray:
    if abs(model.phi_rf) >= 1:
        raise NonStationaryError(f"refusing to simulate AR(1) with phi = {model.phi_rf}")
    rng = as_generator(seed, "rf")
    eps = rng.standard_normal(horizon) * model.sigma
    x = model.mean() if start is None else float(start)
    out = np.empty(horizon)
    for t in range(horizon):
        x = model.c_rf + model.phi_rf * x + eps[t]
        out[t] = x
    return out


@dataclass(frozen=True)
class CopulaModel:
    corr: np.ndarray
    nu: float
    marginals: np.ndarray  # N x T, each row sorted ascending

    def __post_init__(self):
        _own(self, "corr", "marginals")

    def to_dict(self) -> dict:
        return {"corr": self.corr.tolist(), "nu": self.nu, "marginals": self.marginals.tolist()}

    @classmethod
    def from_dict(cls, d) -> "CopulaModel":
        return cls(np.array(d["corr"]), float(d["nu"]), np.array(d["marginals"]))


def nearest_correlation(m: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """Clip eigenvalues at ``floor`` and rescale back to a unit diagonal."""
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    fixed = (vecs * np.maximum(vals, floor)) @ vecs.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    return 0.5 * (fixed + fixed.T)


def fit_copula(residuals, nu: float = DEFAULT_NU) -> CopulaModel:
    """Kendall-tau t-copula correlation plus empirical marginals."""
    E = np.asarray(residuals, dtype=float)
    if nu <= 2:
        raise FitError("copula degrees of freedom must exceed 2")
    T, N = E.shape
    corr = np.eye(N)
    for i in range(N):
        for j in range(i + 1, N):
            tau = stats.kendalltau(E[:, i], E[:, j]).statistic
            corr[i, j] = corr[j, i] = np.sin(0.5 * np.pi * (0.0 if np.isnan(tau) else tau))
    corr = nearest_correlation(corr)
    if np.linalg.eigvalsh(corr).min() < -1e-12:
        raise FitError("copula correlation is not PSD after projection")
    return CopulaModel(corr, float(nu), np.sort(E, axis=0).T.copy())


def empirical_quantile(sorted_sample: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse empirical CDF, linear between plotting positions, clamped at the extremes."""
    n = sorted_sample.size
    grid = (np.arange(n) + 0.5) / n
    return np.interp(u, grid, sorted_sample)


def sample_copula(model: CopulaModel, horizon: int, seed) -> np.ndarray:
    rng = as_generator(seed, "residuals")
    N = model.corr.shape[0]
    L = _psd_sqrt(model.corr)
    z = rng.standard_normal((horizon, N)) @ L.T
    g = rng.chisquare(model.nu, size=horizon) / model.nu
    t = z / np.sqrt(g)[:, None]
    u = stats.t.cdf(t, model.nu)
    return np.column_stack([empirical_quantile(model.marginals[i], u[:, i]) for i in range(N)])


@dataclass(frozen=True)
class LoadingsModel:
    alpha: np.ndarray
    beta: np.ndarray
    residual_std: np.ndarray

    def __post_init__(self):
        _own(self, "alpha", "beta", "residual_std")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist(), "residual_std": self.residual_std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "LoadingsModel":
        return cls(np.array(d["alpha"]), np.array(d["beta"]), np.array(d["residual_std"]))


def ridge_fit(X: np.ndarray, Y: np.ndarray, lam: float):
    """Ridge with an unpenalized intercept, all columns of ``Y`` at once.

    Returns ``(intercept, beta, residuals)`` with ``beta`` shaped ``(n_targets, n_features)``.
    """
    xm = X.mean(axis=0)
    ym = Y.mean(axis=0)
    Xc = X - xm
    Yc = Y - ym
    k = X.shape[1]
    beta = np.linalg.solve(Xc.T @ Xc + lam * np.eye(k), Xc.T @ Yc).T
    intercept = ym - beta @ xm
    resid = Y - intercept - X @ beta.T
    return intercept, beta, resid


def fit_loadings(returns: ReturnPanel, factors: FactorPanel, lam: float = 5.0):
    """Static ridge loadings of excess returns; also returns standardized residuals."""
    excess = returns.simple - returns.rf[:, None]
    alpha, beta, resid = ridge_fit(factors.factors, excess, lam)
    std = resid.std(axis=0, ddof=1)
    safe = np.where(std > 0, std, 1.0)
    return LoadingsModel(alpha, beta, std), resid / safe


def reconstruct_returns(loadings: LoadingsModel, factors, residuals, rf, dates=None, assets=None) -> ReturnPanel:
    f = np.asarray(factors.factors if isinstance(factors, FactorPanel) else factors, dtype=float)
    eps = np.asarray(residuals, dtype=float)
    rf = np.asarray(rf, dtype=float)
    H, N = eps.shape
    if f.shape[0] != H or rf.shape[0] != H or loadings.beta.shape != (N, f.shape[1]) or loadings.alpha.shape != (N,):
        raise ValueError("shape mismatch between loadings, factors, residuals and rf")
    excess = loadings.alpha + f @ loadings.beta.T + eps
    total = excess + rf[:, None]
    dates = weekly_dates(H) if dates is None else dates
    assets = tuple(assets) if assets is not None else tuple(f"A{i:02d}" for i in range(N))
    return ReturnPanel(dates, assets, total, rf)


def stride_dates(horizon: int, min_hist: int = 104, stride: int = 4) -> list[int]:
    """Feature dates ``min_hist, min_hist + stride, ...`` strictly before ``horizon``."""
    if horizon <= min_hist:
        warnings.warn(f"horizon {horizon} leaves no feature dates after {min_hist} warm-up weeks", stacklevel=2)
        return []
    return list(range(min_hist, horizon, stride))


@dataclass(frozen=True)
class GeneratorModel:
    var1: Var1Model
    ar1: Ar1Model
    loadings: LoadingsModel
    copula: CopulaModel
    assets: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"var1": self.var1.to_dict(), "ar1": self.ar1.to_dict(), "loadings": self.loadings.to_dict(),
                "copula": self.copula.to_dict(), "assets": list(self.assets), "factor_names": list(FACTOR_NAMES)}

    @classmethod
    def from_dict(cls, d) -> "GeneratorModel":
        return cls(Var1Model.from_dict(d["var1"]), Ar1Model.from_dict(d["ar1"]),
                   LoadingsModel.from_dict(d["loadings"]), CopulaModel.from_dict(d["copula"]), tuple(d["assets"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "GeneratorModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_generator(returns: ReturnPanel, factors: FactorPanel, nu: float = DEFAULT_NU,
                  ridge_lambda: float = 5.0) -> GeneratorModel:
    loadings, std_resid = fit_loadings(returns, factors, ridge_lambda)
    return GeneratorModel(fit_var1(factors), fit_ar1(returns.rf), loadings, fit_copula(std_resid, nu), returns.assets)


def simulate_world(model: GeneratorModel, horizon: int, world_seed: int) -> tuple[ReturnPanel, FactorPanel]:
    f = simulate_var1(model.var1, horizon, stream(world_seed, "synth.factors"))
    rf = simulate_ar1(model.ar1, horizon, stream(world_seed, "synth.rf"))
    z = sample_copula(model.copula, horizon, stream(world_seed, "synth.residuals"))
    eps = z * model.loadings.residual_std
    dates = weekly_dates(horizon)
    panel = reconstruct_returns(model.loadings, f, eps, rf, dates, model.assets)
    return panel, FactorPanel(dates, f, FACTOR_NAMES, rf)


# --- built-in reference market --------------------------------------------------
#
# Used wherever no real price files are supplied: a fixed, seeded factor market
# whose weekly moments sit in the range of US factor data, with t(6) residuals.

REF_FACTOR_MEAN = np.array([0.0015, 0.0002, 0.0001, 0.0005, 0.0003, 0.0010])
REF_FACTOR_VOL = np.array([0.022, 0.012, 0.014, 0.008, 0.008, 0.018])
REF_FACTOR_CORR = np.array([
    [1.00, 0.25, 0.05, -0.20, -0.15, -0.20],
    [0.25, 1.00, 0.10, -0.25, 0.00, -0.05],
    [0.05, 0.10, 1.00, 0.20, 0.45, -0.40],
    [-0.20, -0.25, 0.20, 1.00, 0.20, 0.10],
    [-0.15, 0.00, 0.45, 0.20, 1.00, 0.05],
    [-0.20, -0.05, -0.40, 0.10, 0.05, 1.00],
])
REF_A = np.diag([-0.05, 0.10, 0.15, 0.10, 0.22, 0.08])
REF_A[5, 0] = -0.06
REF_A[2, 5] = 0.04


def reference_var1() -> Var1Model:
    stat_cov = np.outer(REF_FACTOR_VOL, REF_FACTOR_VOL) * REF_FACTOR_CORR
    # innovations chosen so the stationary covariance is approximately stat_cov
    sigma_u = stat_cov - REF_A @ stat_cov @ REF_A.T
    sigma_u = 0.5 * (sigma_u + sigma_u.T)
    c = (np.eye(6) - REF_A) @ REF_FACTOR_MEAN
    return Var1Model.from_params(c, REF_A, sigma_u)


def reference_assets(n_assets: int, asset_seed: int):
    """Loadings, residual scale and a two-block residual correlation for ``n_assets``."""
    rng = stream(asset_seed, "reference.assets")
    beta = np.column_stack([
        rng.uniform(0.2, 1.3, n_assets),
        rng.normal(0.0, 0.3, (n_assets, 5)),
    ])
    alpha = rng.normal(0.0002, 0.0006, n_assets)
    resid_vol = rng.uniform(0.010, 0.030, n_assets)
    group = rng.integers(0, 2, n_assets)
    corr = np.where(group[:, None] == group[None, :], 0.30, 0.05)
    np.fill_diagonal(corr, 1.0)
    return alpha, beta, resid_vol, corr


def reference_market(n_assets: int, weeks: int, seed: int = 7, asset_seed: int | None = None,
                     keep_assets: int = 0, base_asset_seed: int | None = None,
                     prefix: str = "A") -> tuple[ReturnPanel, FactorPanel]:
    """Seeded stand-in for a real weekly panel.

    ``seed`` drives the factor path and rf; ``asset_seed`` drives the asset
    loadings and idiosyncratic noise. With ``keep_assets = k`` the first ``k``
    columns are copied from the universe of ``base_asset_seed`` (names
    included), which gives a partially overlapping universe on the same factor
    path.
    """
    asset_seed = seed if asset_seed is None else asset_seed
    alpha, beta, vol, corr = reference_assets(n_assets, asset_seed)
    f = simulate_var1(reference_var1(), weeks, stream(seed, "reference.factors"))
    rf = simulate_ar1(Ar1Model(0.00002, 0.95, 0.00001), weeks, stream(seed, "reference.rf"))
    L = _psd_sqrt(corr)
    # separate streams keep a longer panel an extension of a shorter one
    z = stream(seed, "reference.residuals", asset_seed).standard_normal((weeks, n_assets)) @ L.T
    g = stream(seed, "reference.mixing", asset_seed).chisquare(DEFAULT_NU, size=weeks) / DEFAULT_NU
    # unit-variance t(6) residuals scaled per asset
    eps = z / np.sqrt(g)[:, None] * np.sqrt((DEFAULT_NU - 2) / DEFAULT_NU) * vol
    dates = weekly_dates(weeks, np.datetime64("2015-01-02"))
    assets = [f"{prefix}{i:02d}" for i in range(n_assets)]
    panel = reconstruct_returns(LoadingsModel(alpha, beta, vol), f, eps, rf, dates, assets)
    if keep_assets:
        base, _ = reference_market(n_assets, weeks, seed, base_asset_seed if base_asset_seed is not None else seed)
        simple = panel.simple.copy()
        simple[:, :keep_assets] = base.simple[:, :keep_assets]
        assets[:keep_assets] = base.assets[:keep_assets]
        panel = ReturnPanel(dates, assets, simple, rf)
    return panel, FactorPanel(dates, f, FACTOR_NAMES, rf)


def validation_report(real: ReturnPanel, synth: ReturnPanel, band: float = 0.15) -> dict:
    """Marginal volatility and correlation agreement between two panels."""
    cr = np.corrcoef(real.simple, rowvar=False)
    cs = np.corrcoef(synth.simple, rowvar=False)
    iu = np.triu_indices_from(cr, k=1)
    diff = np.abs(cr - cs)[iu]
    vol_r = real.simple.std(axis=0, ddof=1) * np.sqrt(52)
    vol_s = synth.simple.std(axis=0, ddof=1) * np.sqrt(52)
    return {
        "corr_abs_diff_p90": float(np.percentile(diff, 90)) if diff.size else 0.0,
        "corr_abs_diff_max": float(diff.max()) if diff.size else 0.0,
        "corr_within_band_frac": float(np.mean(diff <= band)) if diff.size else 1.0,
        "band": band,
        "ann_vol_real": vol_r.tolist(),
        "ann_vol_synth": vol_s.tolist(),
        "median_abs_return_real": float(np.median(np.abs(real.simple))),
        "median_abs_return_synth": float(np.median(np.abs(synth.simple))),
    }
