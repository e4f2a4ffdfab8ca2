"""Per-asset feature matrices built from data up to and including row ``t``.

Sixteen columns per asset, in six blocks::

    forecast  mu_blend, sigma_mu, realized_vol
    pca       pc1, pc2, pc3
    momentum  z12_1, z6m, z1m
    risk      drawdown
    position  prev_weight, cap
    regime    mkt_ret_4w, mkt_ret_12w, mkt_vol, mkt_drawdown

The model input is the row-major flattening (asset by asset).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .data_panel import FactorPanel, ReturnPanel
from .errors import DataError, SkipDate
from .synth_market import ridge_fit

BLOCKS = (
    ("forecast", ("mu_blend", "sigma_mu", "realized_vol")),
    ("pca", ("pc1", "pc2", "pc3")),
    ("momentum", ("z12_1", "z6m", "z1m")),
    ("risk", ("drawdown",)),
    ("position", ("prev_weight", "cap")),
    ("regime", ("mkt_ret_4w", "mkt_ret_12w", "mkt_vol", "mkt_drawdown")),
)
COLUMNS = tuple(name for _, names in BLOCKS for name in names)
N_FEATURES = len(COLUMNS)
COL = {name: i for i, name in enumerate(COLUMNS)}

MIN_HIST = 104
W_MU, W_MOM = 0.7, 0.3


@dataclass(frozen=True)
class FeatureParams:
    lookback: int = 52
    ridge_lambda: float = 5.0
    min_obs: int = 30
    fbar_window: int = 13
    pca_window: int = 104
    vol_window: int = 26
    drawdown_window: int = 52
    min_hist: int = MIN_HIST
    market_asset: str | None = None  # None: equal-weight cross-sectional mean

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class RidgeForecast:
    mu_ex_hat: np.ndarray
    sigma_mu: np.ndarray
    beta_hat: np.ndarray


@dataclass(frozen=True)
class FeatureMatrix:
    date_index: int
    per_asset: np.ndarray

    @property
    def flattened(self) -> np.ndarray:
        return flatten(self.per_asset)


def flatten(per_asset: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(per_asset, dtype=float).reshape(-1)


def unflatten(x: np.ndarray, n_assets: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(n_assets, N_FEATURES)


def _need(t: int, rows: int, what: str) -> None:
    if t - rows + 1 < 0:
        raise SkipDate(t, f"{what} needs {rows} weeks of history")


def rolling_ridge(returns: ReturnPanel, factors: FactorPanel, t: int, lookback: int = 52,
                  lam: float = 5.0, min_obs: int = 30, fbar_window: int = 13) -> RidgeForecast:
    """Trailing ridge of excess returns on factors, forecast at the recent factor mean."""
    start = max(0, t - lookback + 1)
    if t + 1 - start < min_obs:
        raise SkipDate(t, f"ridge window has {t + 1 - start} < {min_obs} rows")
    F = factors.factors[start : t + 1]
    Y = returns.simple[start : t + 1] - returns.rf[start : t + 1, None]
    _, beta, resid = ridge_fit(F, Y, lam)
    fbar = factors.factors[max(0, t - fbar_window + 1) : t + 1].mean(axis=0)
    sigma = resid.std(axis=0, ddof=1)
    return RidgeForecast(beta @ fbar, sigma, beta)


def cross_sectional_z(values: np.ndarray) -> np.ndarray:
    sd = values.std()
    if sd == 0 or not np.isfinite(sd):
        return np.zeros_like(values, dtype=float)
    return (values - values.mean()) / sd


def _cumret(block: np.ndarray) -> np.ndarray:
    return np.prod(1.0 + block, axis=0) - 1.0


def momentum_features(returns: ReturnPanel, t: int):
    """``(mom_12_1, z12_1, z6m, z1m)``; 12-1 momentum skips the latest four weeks."""
    _need(t, 53, "momentum")
    R = returns.simple
    mom = _cumret(R[t - 52 : t - 4])
    m6 = _cumret(R[t - 25 : t + 1])
    m1 = _cumret(R[t - 3 : t + 1])
    return mom, cross_sectional_z(mom), cross_sectional_z(m6), cross_sectional_z(m1)


def sign_convention(vecs: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    vecs = vecs.copy()
    for j in range(vecs.shape[1]):
        k = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[k, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vecs


def pca_loadings(returns: ReturnPanel, t: int, window: int = 104) -> np.ndarray:
    _need(t, window, "PCA")
    X = returns.simple[t - window + 1 : t + 1]
    cov = np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:3]
    top = sign_convention(vecs[:, order])
    out = np.zeros((X.shape[1], 3))
    out[:, : top.shape[1]] = top
    return out


def drawdown_from_returns(r: np.ndarray) -> np.ndarray:
    """Drawdown at the last row of wealth paths that start at 1 (columns = series)."""
    r = np.asarray(r, dtype=float)
    wealth = np.cumprod(1.0 + r, axis=0)
    peak = np.maximum(np.maximum.accumulate(wealth, axis=0)[-1], 1.0)
    return (peak - wealth[-1]) / peak


def drawdown_feature(returns: ReturnPanel, t: int, window: int = 52) -> np.ndarray:
    _need(t, window, "drawdown")
    return drawdown_from_returns(returns.simple[t - window + 1 : t + 1])


def market_series(returns: ReturnPanel, market_asset: str | None = None) -> np.ndarray:
    if market_asset is None:
        return returns.simple.mean(axis=1)
    try:
        return returns.simple[:, returns.assets.index(market_asset)]
    except ValueError:
        raise DataError(f"market proxy {market_asset!r} is not in the universe") from None


def market_regime_features(returns: ReturnPanel, t: int, market_asset: str | None = None) -> np.ndarray:
    """``(ret_4w, ret_12w, vol_12w, drawdown_52w)`` of the market proxy."""
    _need(t, 52, "market regime")
    m = market_series(returns, market_asset)
    return np.array([
        _cumret(m[t - 3 : t + 1]),
        _cumret(m[t - 11 : t + 1]),
        m[t - 11 : t + 1].std(ddof=1),
        drawdown_from_returns(m[t - 51 : t + 1]),
    ])


def realized_vol(returns: ReturnPanel, t: int, window: int = 26) -> np.ndarray:
    _need(t, window, "realized volatility")
    return returns.simple[t - window + 1 : t + 1].std(axis=0, ddof=1)


def blend_forecast(mu_ex: np.ndarray, z_mom: np.ndarray, rf_t: float) -> np.ndarray:
    s = mu_ex.std()
    return W_MU * mu_ex + W_MOM * s * z_mom + rf_t


def assemble_features(date_index: int, forecast: RidgeForecast, realized: np.ndarray, pca: np.ndarray,
                      momentum, drawdown: np.ndarray, prev_weights, cap: float, regime: np.ndarray,
                      rf_t: float, assets=None) -> FeatureMatrix:
    _, z12, z6, z1 = momentum
    n = forecast.mu_ex_hat.size
    X = np.empty((n, N_FEATURES))
    X[:, COL["mu_blend"]] = blend_forecast(forecast.mu_ex_hat, z12, rf_t)
    X[:, COL["sigma_mu"]] = forecast.sigma_mu
    X[:, COL["realized_vol"]] = realized
    X[:, COL["pc1"] : COL["pc3"] + 1] = pca
    X[:, COL["z12_1"]] = z12
    X[:, COL["z6m"]] = z6
    X[:, COL["z1m"]] = z1
    X[:, COL["drawdown"]] = drawdown
    X[:, COL["prev_weight"]] = prev_weights
    X[:, COL["cap"]] = cap
    X[:, COL["mkt_ret_4w"] :] = regime
    bad = np.argwhere(~np.isfinite(X))
    if bad.size:
        i, j = bad[0]
        name = assets[i] if assets is not None else i
        raise DataError(f"non-finite feature at asset {name}, column {COLUMNS[j]}")
    return FeatureMatrix(int(date_index), X)


def features_at(returns: ReturnPanel, factors: FactorPanel, t: int, prev_weights=None, cap: float = 1.0,
                params: FeatureParams = FeatureParams()) -> FeatureMatrix:
    """All blocks for row ``t``, or :class:`SkipDate` when any block lacks history."""
    if t < params.min_hist:
        raise SkipDate(t, f"inside the {params.min_hist}-week warm-up")
    if t >= returns.n_weeks:
        raise SkipDate(t, "beyond the end of the panel")
    n = returns.n_assets
    prev = np.full(n, 1.0 / n) if prev_weights is None else np.asarray(prev_weights, dtype=float)
    fc = rolling_ridge(returns, factors, t, params.lookback, params.ridge_lambda, params.min_obs, params.fbar_window)
    return assemble_features(
        t, fc, realized_vol(returns, t, params.vol_window), pca_loadings(returns, t, params.pca_window),
        momentum_features(returns, t), drawdown_feature(returns, t, params.drawdown_window), prev, cap,
        market_regime_features(returns, t, params.market_asset), float(returns.rf[t]), returns.assets,
    )


def build_features(returns: ReturnPanel, factors: FactorPanel, dates, prev_weights=None, cap: float = 1.0,
                   params: FeatureParams = FeatureParams()):
    """Feature matrices for ``dates``; returns ``(matrices, skipped)``.

    ``prev_weights`` maps a date index to the weights held going into it;
    missing entries default to uniform.
    """
    out, skipped = [], []
    prev_weights = prev_weights or {}
    for t in dates:
        try:
            out.append(features_at(returns, factors, int(t), prev_weights.get(int(t)), cap, params))
        except SkipDate as s:
            skipped.append(s)
    return out, skipped


def column_names(assets) -> list[str]:
    return [f"{a}.{block}.{name}" for a in assets for block, names in BLOCKS for name in names]


def write_feature_csv(path, matrices: list[FeatureMatrix], dates, assets) -> None:
    frame = pd.DataFrame([m.flattened for m in matrices], columns=column_names(assets))
    frame.insert(0, "date_index", [m.date_index for m in matrices])
    frame.insert(0, "date", [str(np.datetime64(dates[m.date_index], "D")) for m in matrices])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_feature_csv(path):
    """Returns ``(date_indices, X)`` with ``X`` of shape ``(n_dates, N * 16)``."""
    frame = pd.read_csv(path, float_precision="round_trip")
    idx = frame["date_index"].to_numpy(dtype=int)
    return idx, frame.drop(columns=["date", "date_index"]).to_numpy(dtype=float)


def feature_schema(assets, params: FeatureParams, cap: float) -> dict:
    return {
        "n_assets": len(assets),
        "n_features": N_FEATURES,
        "input_dim": len(assets) * N_FEATURES,
        "assets": list(assets),
        "blocks": [{"name": b, "columns": list(names)} for b, names in BLOCKS],
        "layout": "row-major by asset",
        "blend": {"w_mu": W_MU, "w_mom": W_MOM, "mom_scale": "cross-sectional std of mu_ex"},
        "cap": cap,
        "params": params.to_dict(),
    }


def write_feature_schema(path, assets, params: FeatureParams, cap: float) -> None:
    Path(path).write_text(json.dumps(feature_schema(assets, params, cap), sort_keys=True, indent=1) + "\n")
