"""Weekly price, return and factor panels.

Missing observations are carried as NaN inside float arrays; a NaN is never
turned into a zero return. Prices may be gap-filled (short runs only), returns
never are.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import AlignmentError, DiagnosticError, DomainError, EmptyUniverseError

FACTOR_NAMES = ("Mkt-RF", "SMB", "HML", "RMW", "CMA", "Mom")
BASE_CURRENCY = "USD"
JB_CRITICAL_5PCT = 5.991464547107979  # chi2(2) 95th percentile


def _as_dates(dates) -> np.ndarray:
    return np.asarray(pd.to_datetime(np.asarray(dates)).values.astype("datetime64[D]"))


def _check_increasing(dates: np.ndarray) -> None:
    if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
        raise AlignmentError("dates must be strictly increasing")


@dataclass(frozen=True)
class PricePanel:
    dates: np.ndarray
    assets: tuple[str, ...]
    prices: np.ndarray
    currency: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dates", _as_dates(self.dates))
        object.__setattr__(self, "assets", tuple(self.assets))
        prices = np.ascontiguousarray(self.prices, dtype=float).reshape(len(self.dates), len(self.assets))
        object.__setattr__(self, "prices", prices)
        if not self.currency:
            object.__setattr__(self, "currency", (BASE_CURRENCY,) * len(self.assets))
        _check_increasing(self.dates)
        present = ~np.isnan(prices)
        if np.any(prices[present] <= 0):
            t, i = np.argwhere(present & (prices <= 0))[0]
            raise DomainError(f"non-positive price at {self.dates[t]} / {self.assets[i]}")


@dataclass(frozen=True)
class ReturnPanel:
    """Weekly simple and log returns plus the aligned risk-free series."""

    dates: np.ndarray
    assets: tuple[str, ...]
    simple: np.ndarray
    rf: np.ndarray = None
    log: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "dates", _as_dates(self.dates))
        object.__setattr__(self, "assets", tuple(self.assets))
        # row-major so BLAS results do not depend on where the panel came from
        simple = np.ascontiguousarray(self.simple, dtype=float).reshape(len(self.dates), len(self.assets))
        object.__setattr__(self, "simple", simple)
        if self.rf is None:
            object.__setattr__(self, "rf", np.zeros(len(self.dates)))
        else:
            object.__setattr__(self, "rf", np.asarray(self.rf, dtype=float).reshape(len(self.dates)))
        if self.log is None:
            present = ~np.isnan(simple)
            if np.any(simple[present] <= -1.0):
                raise DomainError("simple return <= -100% has no log return")
            object.__setattr__(self, "log", np.log1p(simple))
        _check_increasing(self.dates)

    @property
    def n_weeks(self) -> int:
        return len(self.dates)

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    def is_rectangular(self) -> bool:
        return not np.isnan(self.simple).any()

    def take(self, rows) -> "ReturnPanel":
        rows = np.asarray(rows)
        return ReturnPanel(self.dates[rows], self.assets, self.simple[rows], self.rf[rows], self.log[rows])


@dataclass(frozen=True)
class FactorPanel:
    dates: np.ndarray
    factors: np.ndarray
    names: tuple[str, ...] = FACTOR_NAMES
    rf: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "dates", _as_dates(self.dates))
        object.__setattr__(self, "names", tuple(self.names))
        f = np.ascontiguousarray(self.factors, dtype=float).reshape(len(self.dates), len(self.names))
        object.__setattr__(self, "factors", f)
        if self.rf is not None:
            object.__setattr__(self, "rf", np.asarray(self.rf, dtype=float).reshape(len(self.dates)))
        _check_increasing(self.dates)

    def take(self, rows) -> "FactorPanel":
        rows = np.asarray(rows)
        rf = None if self.rf is None else self.rf[rows]
        return FactorPanel(self.dates[rows], self.factors[rows], self.names, rf)


def convert_to_base(prices: PricePanel, fx: pd.Series, base: str = BASE_CURRENCY) -> PricePanel:
    """Divide every foreign-currency column by the (foreign per base) rate."""
    fx = pd.Series(fx)
    fx.index = pd.to_datetime(fx.index)
    if (fx <= 0).any():
        raise DomainError("fx rates must be positive")
    out = prices.prices.copy()
    foreign = [i for i, c in enumerate(prices.currency) if c != base]
    if foreign:
        idx = pd.to_datetime(prices.dates)
        rate = fx.reindex(idx).to_numpy(dtype=float)
        needed = ~np.isnan(out[:, foreign]).all(axis=1)
        missing = needed & np.isnan(rate)
        if missing.any():
            bad = [str(d) for d in prices.dates[missing]]
            raise AlignmentError(f"missing fx rate on {', '.join(bad)}")
        for i in foreign:
            out[:, i] = out[:, i] / rate
    return PricePanel(prices.dates, prices.assets, out, (base,) * len(prices.assets))


def resample_weekly(daily: PricePanel, anchor: str = "FRI") -> PricePanel:
    """Last available observation per asset in each week ending on ``anchor``."""
    if len(daily.dates) == 0:
        return daily
    frame = pd.DataFrame(daily.prices, index=pd.to_datetime(daily.dates), columns=list(daily.assets))
    weekly = frame.resample(f"W-{anchor.upper()}").last()
    return PricePanel(weekly.index.values, daily.assets, weekly.to_numpy(), daily.currency)


def fill_price_gaps(prices: PricePanel, limit: int = 3) -> PricePanel:
    """Forward-then-backward fill interior/edge runs of at most ``limit`` missing prices.

    Longer runs are left missing in full (no partial filling).
    """
    out = prices.prices.copy()
    T = out.shape[0]
    for i in range(out.shape[1]):
        col = out[:, i]
        miss = np.isnan(col)
        t = 0
        while t < T:
            if not miss[t]:
                t += 1
                continue
            end = t
            while end < T and miss[end]:
                end += 1
            if end - t <= limit:
                if t > 0:
                    col[t:end] = col[t - 1]
                elif end < T:
                    col[t:end] = col[end]
            t = end
    return replace(prices, prices=out)


def compute_returns(prices: PricePanel) -> ReturnPanel:
    p = prices.prices
    present = ~np.isnan(p)
    if np.any(p[present] <= 0):
        t, i = np.argwhere(present & (p <= 0))[0]
        raise DomainError(f"non-positive price at {prices.dates[t]} / {prices.assets[i]}")
    simple = p[1:] / p[:-1] - 1.0
    return ReturnPanel(prices.dates[1:], prices.assets, simple)


def clean_panel(returns: ReturnPanel, min_coverage: float = 0.90) -> ReturnPanel:
    """Drop low-coverage assets, then drop every week that still has a gap."""
    if not 0.0 < min_coverage <= 1.0:
        raise ValueError("min_coverage must lie in (0, 1]")
    r = returns.simple
    if r.shape[0] == 0:
        raise EmptyUniverseError("empty return panel")
    coverage = (~np.isnan(r)).mean(axis=0)
    keep = coverage >= min_coverage
    if not keep.any():
        raise EmptyUniverseError(f"no asset reaches {min_coverage:.0%} coverage")
    dropped = [a for a, k in zip(returns.assets, keep) if not k]
    if dropped:
        warnings.warn(f"dropping low-coverage assets: {', '.join(dropped)}", stacklevel=2)
    sub = r[:, keep]
    rows = ~np.isnan(sub).any(axis=1)
    assets = tuple(a for a, k in zip(returns.assets, keep) if k)
    return ReturnPanel(returns.dates[rows], assets, sub[rows], returns.rf[rows], returns.log[rows][:, keep])


def align_calendar(returns: ReturnPanel, factors: FactorPanel) -> tuple[ReturnPanel, FactorPanel]:
    """Restrict both panels to their common dates; attach the factor rf when present."""
    common, ri, fi = np.intersect1d(returns.dates, factors.dates, assume_unique=True, return_indices=True)
    if len(common) == 0:
        raise AlignmentError("return and factor calendars do not intersect")
    r = returns.take(ri)
    f = factors.take(fi)
    if f.rf is not None:
        r = ReturnPanel(r.dates, r.assets, r.simple, f.rf, r.log)
    return r, f


def jarque_bera(series) -> tuple[float, bool]:
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 8:
        raise DiagnosticError("Jarque-Bera needs at least 8 observations")
    d = x - x.mean()
    m2 = np.mean(d**2)
    if m2 == 0:
        raise DiagnosticError("zero variance series")
    skew = np.mean(d**3) / m2**1.5
    kurt = np.mean(d**4) / m2**2
    jb = n / 6.0 * (skew**2 + (kurt - 3.0) ** 2 / 4.0)
    return float(jb), bool(jb > JB_CRITICAL_5PCT)


# --- CSV / manifest I/O -----------------------------------------------------


def _frame_to_csv(frame: pd.DataFrame, path) -> None:
    frame = frame.copy()
    frame.insert(0, "date", pd.to_datetime(frame.index).strftime("%Y-%m-%d"))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="", float_format="%.17g", lineterminator="\n")


def _read_dated(path) -> pd.DataFrame:
    frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    if "date" not in frame.columns:
        raise DomainError(f"{path}: missing 'date' column")
    frame.index = pd.to_datetime(frame.pop("date"))
    return frame


def write_price_csv(panel: PricePanel, path) -> None:
    _frame_to_csv(pd.DataFrame(panel.prices, index=panel.dates, columns=list(panel.assets)), path)


def read_price_csv(path, currency: dict[str, str] | None = None) -> PricePanel:
    frame = _read_dated(path)
    cur = tuple((currency or {}).get(c, BASE_CURRENCY) for c in frame.columns)
    return PricePanel(frame.index.values, tuple(frame.columns), frame.to_numpy(dtype=float), cur)


def write_return_csv(panel: ReturnPanel, path) -> None:
    frame = pd.DataFrame(panel.simple, index=panel.dates, columns=list(panel.assets))
    frame["RF"] = panel.rf
    _frame_to_csv(frame, path)


def read_return_csv(path) -> ReturnPanel:
    frame = _read_dated(path)
    rf = frame.pop("RF").to_numpy(dtype=float) if "RF" in frame.columns else None
    return ReturnPanel(frame.index.values, tuple(frame.columns), frame.to_numpy(dtype=float), rf)


def _units_flag(path) -> str | None:
    with open(path) as fh:
        first = fh.readline().strip().lower()
    if first.startswith("#") and "units" in first:
        return "percent" if "percent" in first else "decimal"
    return None


def write_factor_csv(panel: FactorPanel, path) -> None:
    frame = pd.DataFrame(panel.factors, index=panel.dates, columns=list(panel.names))
    if panel.rf is not None:
        frame["RF"] = panel.rf
    _frame_to_csv(frame, path)


def read_factor_csv(path, units: str | None = None) -> FactorPanel:
    """Read factors; a ``# units: percent`` header line (or ``units=``) rescales to decimals."""
    units = units or _units_flag(path) or "decimal"
    if units not in ("decimal", "percent"):
        raise DomainError(f"unknown factor units {units!r}")
    frame = _read_dated(path)
    scale = 0.01 if units == "percent" else 1.0
    rf = frame.pop("RF").to_numpy(dtype=float) * scale if "RF" in frame.columns else None
    missing = [n for n in FACTOR_NAMES if n not in frame.columns]
    if missing:
        raise DomainError(f"{path}: missing factor columns {missing}")
    values = frame[list(FACTOR_NAMES)].to_numpy(dtype=float) * scale
    return FactorPanel(frame.index.values, values, FACTOR_NAMES, rf)


def write_manifest(path, *, source, anchor="FRI", min_coverage=0.90, fill_limit=3, **extra) -> None:
    record = {"source": str(source), "anchor": anchor, "min_coverage": min_coverage, "fill_limit": fill_limit}
    record.update(extra)
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def load_price_pipeline(prices_csv, factors_csv, *, fx_csv=None, currency=None, anchor="FRI",
                        min_coverage=0.90, fill_limit=3, factor_units=None, daily=False):
    """File ingestion path: prices (+fx) -> weekly -> gap fill -> returns -> clean -> align."""
    prices = read_price_csv(prices_csv, currency)
    if daily:
        prices = resample_weekly(prices, anchor)
    if fx_csv is not None:
        fx = _read_dated(fx_csv).iloc[:, 0]
        if daily:
            fx = fx.resample(f"W-{anchor.upper()}").last()
        prices = convert_to_base(prices, fx)
    prices = fill_price_gaps(prices, fill_limit)
    returns = clean_panel(compute_returns(prices), min_coverage)
    factors = read_factor_csv(factors_csv, factor_units)
    return align_calendar(returns, factors)
