import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg, stats

from cvar_distill import synth_market as sm
from cvar_distill.errors import FitError, NonStationaryError
from cvar_distill.rng import stream


def _radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A))))


# --- VAR(1) ----------------------------------------------------------------------------


def test_reference_transition_has_radius_022():
    assert sm.reference_var1().spectral_radius == pytest.approx(0.22, abs=1e-12)


def test_var1_round_trip_recovers_transition():
    true = sm.reference_var1()
    f = sm.simulate_var1(true, 5000, stream(11, "var"))
    fit = sm.fit_var1(f)
    assert np.max(np.abs(fit.A - true.A)) < 0.05
    assert fit.spectral_radius < 1.0
    np.testing.assert_allclose(fit.sigma_u, fit.sigma_u.T, atol=1e-10)
    np.linalg.cholesky(fit.sigma_u)


def test_var1_white_noise_gives_near_zero_transition():
    f = stream(12, "wn").normal(0, 0.01, (5000, 6))
    assert np.max(np.abs(sm.fit_var1(f).A)) < 0.05


def test_var1_constant_series_is_singular():
    with pytest.raises(FitError):
        sm.fit_var1(np.ones((100, 6)) * 0.01)


def test_var1_needs_30_rows():
    with pytest.raises(FitError):
        sm.fit_var1(stream(0, "x").normal(size=(29, 6)))


def test_var1_noise_free_path_converges_to_mean():
    m = sm.reference_var1()
    quiet = sm.Var1Model.from_params(m.c, m.A, np.zeros((6, 6)))
    path = sm.simulate_var1(quiet, 40, 0, start=np.full(6, 0.05))
    gaps = np.linalg.norm(path - quiet.unconditional_mean(), axis=1)
    assert gaps[-1] < 1e-15
    assert gaps[10] < gaps[0] * 1e-5


def test_var1_determinism_and_refusal():
    m = sm.reference_var1()
    np.testing.assert_array_equal(sm.simulate_var1(m, 50, 3), sm.simulate_var1(m, 50, 3))
    A = np.diag([1.1, 0.1, 0.1, 0.1, 0.1, 0.1])
    explosive = sm.Var1Model.from_params(np.zeros(6), A, np.eye(6))
    assert explosive.spectral_radius == pytest.approx(1.1)
    with pytest.raises(NonStationaryError):
        sm.simulate_var1(explosive, 10, 0)


def test_var1_stationary_covariance_matches_lyapunov():
    m = sm.reference_var1()
    f = sm.simulate_var1(m, 60_000, stream(5, "lyap"))
    oracle = linalg.solve_discrete_lyapunov(m.A, m.sigma_u)
    emp = np.cov(f, rowvar=False)
    assert np.linalg.norm(emp - oracle) / np.linalg.norm(oracle) < 0.10


def test_nonstationary_fit_warns():
    rng = stream(9, "explode")
    f = np.zeros((200, 6))
    f[0] = 0.01
    for t in range(1, 200):
        f[t] = 1.05 * f[t - 1] + rng.normal(0, 1e-3, 6)
    with pytest.warns(UserWarning, match="non-stationary"):
        fit = sm.fit_var1(f)
    assert fit.spectral_radius >= 1.0


# --- AR(1) ----------------------------------------------------------------------------------


def test_ar1_fixed_point():
    path = sm.simulate_ar1(sm.Ar1Model(0.001, 0.5, 0.0), 60, 0, start=0.0)
    assert path[-1] == pytest.approx(0.002, abs=1e-15)


def test_ar1_white_noise_phi_near_zero():
    fit = sm.fit_ar1(stream(3, "ar").normal(0.001, 1e-4, 5000))
    assert abs(fit.phi_rf) < 0.05


def test_ar1_constant_series():
    fit = sm.fit_ar1(np.full(50, 0.0004))
    assert fit.sigma == 0.0
    np.testing.assert_allclose(sm.simulate_ar1(fit, 20, 1), 0.0004, rtol=0, atol=1e-18)


def test_ar1_refuses_unit_root():
    with pytest.raises(NonStationaryError):
        sm.simulate_ar1(sm.Ar1Model(0.0, 1.0, 0.1), 5, 0)


# --- copula --------------------------------------------------------------------------------------


def test_copula_independent_residuals():
    E = stream(1, "ind").standard_normal((2000, 4))
    model = sm.fit_copula(E)
    off = model.corr[~np.eye(4, dtype=bool)]
    assert np.all(np.abs(off) < 0.1)


def test_copula_comonotone_pair():
    x = stream(2, "co").standard_normal(300)
    model = sm.fit_copula(np.column_stack([x, np.exp(x)]))
    assert model.corr[0, 1] == pytest.approx(1.0, abs=1e-9)


def test_copula_single_asset():
    model = sm.fit_copula(stream(2, "one").standard_normal((50, 1)))
    np.testing.assert_array_equal(model.corr, [[1.0]])


def test_copula_rejects_low_nu():
    with pytest.raises(FitError):
        sm.fit_copula(np.zeros((10, 2)), nu=2.0)


def test_nearest_correlation_is_psd_unit_diagonal():
    bad = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    fixed = sm.nearest_correlation(bad)
    np.testing.assert_allclose(np.diag(fixed), 1.0)
    assert np.linalg.eigvalsh(fixed).min() > -1e-12


def test_gaussian_limit_marginals_and_independence():
    marg = stream(4, "marg").standard_t(5, (3, 4000))
    model = sm.CopulaModel(np.eye(3), 1e6, np.sort(marg, axis=1))
    Z = sm.sample_copula(model, 5000, 8)
    c = np.corrcoef(Z, rowvar=False)
    assert np.max(np.abs(c[~np.eye(3, dtype=bool)])) < 0.05
    for i in range(3):
        assert stats.ks_2samp(Z[:, i], marg[i]).statistic < 0.03


def _oracle_sampler(corr, nu, marginals, horizon, rng):
    """Independent reimplementation: Gaussian via eigen factor, scipy quantile interpolation."""
    vals, vecs = np.linalg.eigh(corr)
    L = vecs * np.sqrt(np.maximum(vals, 0))
    z = rng.standard_normal((horizon, corr.shape[0])) @ L.T
    g = rng.chisquare(nu, horizon) / nu
    u = stats.t.cdf(z / np.sqrt(g)[:, None], nu)
    out = np.empty_like(u)
    for i, m in enumerate(marginals):
        n = m.size
        out[:, i] = np.quantile(m, np.clip(u[:, i], 0.5 / n, 1 - 0.5 / n), method="hazen")
    return out


def test_t_copula_correlation_matches_oracle():
    marg = np.sort(stream(6, "m").standard_t(4, (2, 3000)), axis=1)
    corr = np.array([[1.0, 0.8], [0.8, 1.0]])
    model = sm.CopulaModel(corr, 6.0, marg)
    ours = np.corrcoef(sm.sample_copula(model, 20_000, 1), rowvar=False)[0, 1]
    ref = np.corrcoef(_oracle_sampler(corr, 6.0, marg, 20_000, stream(99, "oracle")), rowvar=False)[0, 1]
    assert abs(ours - ref) < 0.05
    assert ours < 0.8 + 0.05


def test_copula_sampler_determinism():
    model = sm.fit_copula(stream(7, "d").standard_normal((200, 3)))
    np.testing.assert_array_equal(sm.sample_copula(model, 100, 5), sm.sample_copula(model, 100, 5))


def test_copula_refit_fidelity():
    rng = stream(8, "fid")
    target = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, -0.3], [0.2, -0.3, 1.0]])
    seed_model = sm.CopulaModel(target, 6.0, np.sort(rng.standard_t(6, (3, 5000)), axis=1))
    resid = sm.sample_copula(seed_model, 5000, stream(8, "draw"))
    refit = sm.fit_copula(resid)
    again = sm.sample_copula(refit, 5000, stream(8, "again"))
    iu = np.triu_indices(3, 1)
    diff = np.abs(np.corrcoef(again, rowvar=False) - np.corrcoef(resid, rowvar=False))[iu]
    assert np.percentile(diff, 90) <= 0.15
    for i in range(3):
        assert stats.ks_2samp(again[:, i], resid[:, i]).statistic < 0.05


# --- loadings and reconstruction -----------------------------------------------------------------------


def test_reconstruct_pass_through():
    H, N = 3, 2
    lm = sm.LoadingsModel(np.zeros(N), np.zeros((N, 6)), np.zeros(N))
    out = sm.reconstruct_returns(lm, np.zeros((H, 6)), np.zeros((H, N)), np.full(H, 0.001))
    np.testing.assert_array_equal(out.simple, 0.001)


def test_reconstruct_single_factor():
    beta = np.zeros((1, 6))
    beta[0, 0] = 1.0
    f = np.zeros((1, 6))
    f[0, 0] = 0.02
    out = sm.reconstruct_returns(sm.LoadingsModel(np.zeros(1), beta, np.zeros(1)), f, np.zeros((1, 1)), np.zeros(1))
    assert out.simple[0, 0] == pytest.approx(0.02, abs=1e-17)


def test_reconstruct_spreadsheet_case():
    alpha = np.array([0.001, -0.002])
    beta = np.array([[1.0, 0.5, 0, 0, 0, 0], [0.2, 0, -1.0, 0, 0, 0.3]])
    f = np.array([[0.01, 0.02, 0, 0, 0, 0], [-0.03, 0, 0.01, 0, 0, 0.02], [0, 0, 0, 0, 0, 0]])
    eps = np.array([[0.001, 0.0], [0.0, -0.001], [0.002, 0.003]])
    rf = np.array([0.0001, 0.0002, 0.0003])
    out = sm.reconstruct_returns(sm.LoadingsModel(alpha, beta, np.ones(2)), f, eps, rf)
    expected = np.array([
        [0.001 + 0.01 + 0.01 + 0.001 + 0.0001, -0.002 + 0.002 + 0.0 + 0.0001],
        [0.001 - 0.03 + 0.0 + 0.0002, -0.002 - 0.006 - 0.01 + 0.006 - 0.001 + 0.0002],
        [0.001 + 0.002 + 0.0003, -0.002 + 0.003 + 0.0003],
    ])
    np.testing.assert_allclose(out.simple, expected, atol=1e-15)
    np.testing.assert_allclose(out.log, np.log1p(expected), atol=1e-15)


def test_reconstruct_shape_mismatch():
    lm = sm.LoadingsModel(np.zeros(2), np.zeros((2, 6)), np.zeros(2))
    with pytest.raises(ValueError):
        sm.reconstruct_returns(lm, np.zeros((3, 6)), np.zeros((4, 2)), np.zeros(3))


def test_ridge_fit_matches_dense_solver():
    rng = stream(10, "ridge")
    X = rng.normal(size=(40, 6))
    y = rng.normal(size=(40, 1))
    _, beta, _ = sm.ridge_fit(X, y, 5.0)
    Xc = X - X.mean(0)
    ref = linalg.solve(Xc.T @ Xc + 5.0 * np.eye(6), Xc.T @ (y - y.mean(0)), assume_a="pos")
    np.testing.assert_allclose(beta.T, ref, atol=1e-12)


# --- stride dates --------------------------------------------------------------------------------


def test_stride_counts():
    assert len(sm.stride_dates(1400, 104, 4)) == 324
    assert sm.stride_dates(105, 104, 4) == [104]
    with pytest.warns(UserWarning):
        assert sm.stride_dates(104, 104, 4) == []


@settings(max_examples=200, deadline=None)
@given(st.integers(105, 3000), st.integers(1, 200), st.integers(1, 12))
def test_stride_dates_properties(horizon, min_hist, stride):
    if horizon <= min_hist:
        return
    d = sm.stride_dates(horizon, min_hist, stride)
    assert d[0] == min_hist and d[-1] < horizon
    assert all(b - a == stride for a, b in zip(d, d[1:]))
    assert len(d) == -(-(horizon - min_hist) // stride)


# --- generator round trip ---------------------------------------------------------------------------


def test_generator_save_load_and_determinism(tmp_path):
    panel, factors = sm.reference_market(4, 200)
    gen = sm.fit_generator(panel, factors)
    gen.save(tmp_path / "g.json")
    back = sm.GeneratorModel.load(tmp_path / "g.json")
    a, fa = sm.simulate_world(gen, 150, 32)
    b, fb = sm.simulate_world(back, 150, 32)
    np.testing.assert_array_equal(a.simple, b.simple)
    np.testing.assert_array_equal(fa.factors, fb.factors)
    c, _ = sm.simulate_world(gen, 150, 42)
    assert not np.array_equal(a.simple, c.simple)


def test_reference_market_prefix_stability():
    short, _ = sm.reference_market(5, 120)
    long, _ = sm.reference_market(5, 200)
    np.testing.assert_array_equal(short.simple, long.simple[:120])


def test_d2a_universe_overlap():
    base, fb = sm.reference_market(5, 120)
    other, fo = sm.reference_market(5, 120, asset_seed=1007, keep_assets=2, base_asset_seed=7, prefix="B")
    np.testing.assert_array_equal(other.simple[:, :2], base.simple[:, :2])
    assert other.assets[:2] == base.assets[:2]
    assert other.assets[2].startswith("B")
    np.testing.assert_array_equal(fb.factors, fo.factors)


def test_validation_report_on_self():
    panel, _ = sm.reference_market(4, 300)
    rep = sm.validation_report(panel, panel)
    assert rep["corr_abs_diff_max"] == 0.0
    assert rep["corr_within_band_frac"] == 1.0
