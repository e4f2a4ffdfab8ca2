import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvar_distill import distill_train as dt
from cvar_distill import evaluation as ev
from cvar_distill import features as fb
from cvar_distill import nn_core as nn
from cvar_distill.constraints import ConstraintSpec
from cvar_distill.errors import DomainError
from cvar_distill.rng import stream

from conftest import simplex_point
from oracles import oracle_cvar, oracle_mdd, oracle_sharpe, oracle_turnover


# --- metrics ---------------------------------------------------------------------------------


def test_sharpe_examples():
    assert ev.sharpe_annualized([0.01, -0.01] * 10) == 0.0
    assert math.isnan(ev.sharpe_annualized([0.002] * 30))
    r = stream(1, "sh").normal(0.002, 0.02, 100)
    assert ev.sharpe_annualized(r) == pytest.approx(oracle_sharpe(r.tolist()), abs=1e-12)
    with pytest.raises(ValueError):
        ev.sharpe_annualized([0.01])


def test_max_drawdown_examples():
    assert ev.max_drawdown([0.01] * 10) == 0.0
    assert ev.max_drawdown([0.10, -0.50]) == pytest.approx(0.5, abs=1e-15)
    r = stream(2, "mdd").normal(0.001, 0.03, 500)
    assert ev.max_drawdown(r) == pytest.approx(oracle_mdd(r.tolist()), abs=1e-12)
    with pytest.raises(DomainError):
        ev.max_drawdown([0.1, -1.0])


@pytest.mark.parametrize("seed", range(5))
def test_metric_oracles(seed):
    rng = stream(seed, "metrics")
    r = rng.normal(0.001, 0.02, 150)
    assert ev.cvar95_report(r) == pytest.approx(oracle_cvar(r.tolist()), abs=1e-12)
    W = rng.dirichlet(np.ones(4), 30)
    init = np.full(4, 0.25)
    assert ev.mean_turnover(W, init) == pytest.approx(oracle_turnover(W.tolist(), init.tolist()), abs=1e-12)


def test_rolling_normalize():
    z, ok = ev.rolling_normalize(0.3, [0.3] * 10)
    assert ok and abs(z) < 1e-6  # float noise in the mean over eps
    hist = stream(3, "norm").normal(size=(30, 4))
    z, ok = ev.rolling_normalize(hist[-10:].mean(axis=0), hist, window=10)
    np.testing.assert_allclose(z, 0.0, atol=1e-12)
    x = np.array([1.0, 2.0, 3.0])
    h = np.array([[0.0, 1.0, 1.0], [2.0, 3.0, 5.0]])
    z, ok = ev.rolling_normalize(x, h, window=52)
    np.testing.assert_allclose(z, [(1 - 1) / (1 + 1e-8), (2 - 2) / (1 + 1e-8), (3 - 3) / (2 + 1e-8)])
    z, ok = ev.rolling_normalize(x, h[:1])
    assert not ok


def test_bootstrap_interval_brackets_point_estimate():
    r = stream(4, "boot").normal(0.003, 0.02, 200)
    lo, hi = ev.bootstrap_sharpe_ci(r, seed=1)
    assert lo < ev.sharpe_annualized(r) < hi
    assert (lo, hi) == ev.bootstrap_sharpe_ci(r, seed=1)


# --- analytics --------------------------------------------------------------------------------


def test_sensitivity_examples():
    assert ev.sensitivity(2.0, 2.0) == 0.0
    assert ev.sensitivity(2.0, 1.0) == -0.5
    assert round(100 * ev.sensitivity(2.38, 2.37), 1) == -0.4
    assert math.isnan(ev.sensitivity(0.0, 1.0))


def test_win_rate_examples():
    names, M = ev.win_rate_matrix({"a": [1.0, 2.0, 3.0], "b": [0.0, 1.0, 2.0], "c": [0.5, 5.0, 1.0]})
    assert np.all(np.diag(M) == 0.5)
    assert M[0, 1] == 1.0
    with pytest.raises(ValueError):
        ev.win_rate_matrix({"a": [1.0], "b": [1.0, 2.0]})


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 6), st.integers(1, 20))
def test_win_rate_complementarity(seed, m, runs):
    rng = stream(seed, "wr")
    data = {f"m{i}": rng.integers(0, 4, runs).astype(float).tolist() for i in range(m)}
    _, M = ev.win_rate_matrix(data)
    np.testing.assert_allclose(M + M.T, np.ones((m, m)), atol=1e-15)


def test_regime_split_constructed_market():
    rng = stream(5, "regime")
    market = np.concatenate([rng.normal(0, 0.01, 100), rng.normal(0, 0.05, 100)])
    weeks = np.arange(30, 200)
    high = ev.regime_labels(market, weeks)
    assert abs(high.sum() - (~high).sum()) <= 1
    # every clearly calm week (trailing window inside the quiet block) is LOWVOL
    assert not high[weeks - 1 < 100].any()
    assert high[weeks - 1 >= 160].mean() > 0.9


def test_constraint_sensitivity_table():
    base = dict(world_seed=32, model_seed=0, universe="C2A", stress="none", regime="ALL", cvar95=-0.02,
                max_drawdown=0.1, mean_turnover=0.1, ann_return=0.1, ann_vol=0.1, n_weeks=50)
    reps = [ev.EvalReport("BNN-S", level="L1", sharpe=2.38, **base), ev.EvalReport("BNN-S", level="L3", sharpe=2.37, **base)]
    (row,) = ev.constraint_sensitivity(reps)
    assert row["delta"] == pytest.approx(-0.01 / 2.38)


def test_reports_csv_round_trip(tmp_path):
    rep = ev.EvalReport("DNN-S", 32, 1, "GRID", "L1", "none", "ALL", 1.25, -0.03, 0.12, 0.1, 0.2, 0.15, 40, "x;y")
    ev.write_reports_csv(tmp_path / "r.csv", [rep, rep])
    assert ev.read_reports_csv(tmp_path / "r.csv") == [rep, rep]


# --- tracks and walk-forward -----------------------------------------------------------------


def test_hold_track_accounting(ref_panel):
    r, _ = ref_panel
    rng = stream(6, "hold")
    dates = [150, 154, 158]
    W = np.stack([simplex_point(rng, 6) for _ in dates])
    spec = ConstraintSpec.for_level("L3")
    tr = ev.hold_track(r, dates, W, 4, spec)
    assert list(tr.dates) == list(range(151, 163))
    for i, s in enumerate(tr.dates):
        expect = tr.weights[i] @ r.simple[s] - tr.costs[i]
        assert tr.returns[i] == pytest.approx(expect, abs=1e-15)
    reb_w = tr.weights[tr.rebalance]
    assert tr.mean_turnover() == pytest.approx(oracle_turnover(reb_w.tolist(), [1 / 6] * 6), abs=1e-9)


def test_anti_leakage_witness(ref_panel):
    r, _ = ref_panel
    rng = stream(7, "leak")
    dates = list(range(150, 170))
    W = np.stack([simplex_point(rng, 6) for _ in dates])
    a = ev.hold_track(r, dates, W, 1)
    shifted = ev.hold_track(r, [d + 1 for d in dates], W, 1)
    assert np.all(a.returns[:-1] != shifted.returns[:-1])
    np.testing.assert_allclose(a.returns, np.einsum("ij,ij->i", W, r.simple[np.array(dates) + 1]), rtol=0, atol=1e-16)


@pytest.fixture(scope="module")
def frozen(ref_panel):
    r, f = ref_panel
    mats, _ = fb.build_features(r, f, range(104, 160))
    X = np.stack([m.flattened for m in mats])
    net = nn.Network.init(nn.NetworkSpec.for_universe(6, hidden=(8,), bayesian=True, n_variational=1), 3)
    return dt.StudentCheckpoint(net, dt.Standardizer.fit(X), dt.TrainConfig())


def _walk(ck, panel, cfg, dates=range(160, 239), level="L1"):
    r, f = panel
    spec = ConstraintSpec.for_level(level)
    return ev.adaptive_walk_forward(ck, r, f, dates, spec, cfg, mc_samples=3)


def test_frozen_equivalences(frozen, ref_panel):
    plain = _walk(frozen, ref_panel, ev.AdaptiveConfig(finetune_epochs=0))
    never = _walk(frozen, ref_panel, ev.AdaptiveConfig(finetune_every=10_000))
    noop = _walk(frozen, ref_panel, ev.AdaptiveConfig(finetune_every=4, finetune_epochs=0))
    for other in (never, noop):
        np.testing.assert_array_equal(other.returns, plain.returns)
        np.testing.assert_array_equal(other.weights, plain.weights)
    assert "resets=0" in never.flags


def test_turnover_penalty_ab(frozen, ref_panel):
    plain = _walk(frozen, ref_panel, ev.AdaptiveConfig(finetune_epochs=0))
    tuned = {lam: _walk(frozen, ref_panel, ev.AdaptiveConfig(finetune_every=4, finetune_epochs=20,
                                                             finetune_lr=0.05, lambda_to=lam))
             for lam in (0.0, 10.0)}
    assert tuned[10.0].mean_turnover() < plain.mean_turnover()
    assert tuned[10.0].mean_turnover() < tuned[0.0].mean_turnover()


def test_reset_boundedness(frozen, ref_panel, monkeypatch):
    before = frozen.net.state()
    seen = []
    real = ev.finetune_objective

    def spy(net, X, R, lam):
        seen.append(net.state())
        return real(net, X, R, lam)

    monkeypatch.setattr(ev, "finetune_objective", spy)
    epochs = 3
    track = _walk(frozen, ref_panel, ev.AdaptiveConfig(finetune_every=4, finetune_epochs=epochs, finetune_lr=0.05))
    assert seen and len(seen) % epochs == 0
    for start in seen[::epochs]:
        for k, v in start.items():
            np.testing.assert_array_equal(v, before[k])
    for k, v in frozen.net.state().items():
        np.testing.assert_array_equal(v, before[k])
    assert "resets=19" in track.flags


def test_walk_forward_respects_l3(frozen, ref_panel):
    track = _walk(frozen, ref_panel, ev.AdaptiveConfig(finetune_epochs=0), level="L3")
    assert np.all(track.weights <= 0.30 + 1e-9)
    assert np.all(track.turnover <= 0.30 + 1e-9)
    np.testing.assert_allclose(track.weights.sum(axis=1), 1.0, atol=1e-9)


def test_baseline_walk_forward_and_regimes(ref_panel):
    r, f = ref_panel
    for name in ("Teacher", "MinVar", "RiskParity", "MeanVar"):
        tr = ev.baseline_walk_forward(name, r, f, range(200, 239, 4), ConstraintSpec(), iterations=300)
        assert len(tr.returns) == 10
        np.testing.assert_allclose(tr.weights.sum(axis=1), 1.0, atol=1e-9)
    hi, lo = ev.regime_split(tr, ev.market_for(r))
    assert len(hi.returns) + len(lo.returns) == len(tr.returns)
    rep = ev.report_from_track(hi, model="MeanVar", world_seed=0, model_seed=0, universe="C2A", level="L1",
                               stress="none", regime="HIGHVOL")
    assert "low-sample" in rep.flags


def test_report_from_constant_track_flags_sharpe():
    tr = ev.BacktestTrack(np.arange(10), np.full(10, 0.001), np.full((10, 2), 0.5), np.zeros(10),
                          np.ones(10, dtype=bool))
    rep = ev.report_from_track(tr, model="m", world_seed=0, model_seed=0, universe="GRID", level="L1",
                               stress="none", regime="ALL")
    assert math.isnan(rep.sharpe) and "sharpe-undefined" in rep.flags
    assert rep.cvar95 == pytest.approx(0.001)


def test_unknown_baseline():
    with pytest.raises(ValueError):
        ev.baseline_weights("Oracle", np.zeros((20, 2)))


def test_mu_from_features_reads_blend_column():
    x = np.arange(32.0)
    np.testing.assert_array_equal(ev.mu_from_features(x, 2), [0.0, 16.0])

