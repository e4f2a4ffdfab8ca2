import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvar_distill import stress as sx
from cvar_distill.rng import stream


def _panel(T=60, N=5, seed=0):
    return stream(seed, "panel").normal(0.001, 0.02, (T, N))


def test_vol_burst_hand_row():
    X = np.array([[0.01, 0.03]])
    out = sx.stress_vol_bursts(X, 2.0, 1, 1, seed=0)
    np.testing.assert_allclose(out, [[0.00, 0.04]], atol=1e-17)


def test_whipsaw_hand_rows():
    X = np.array([[0.02], [0.02]])
    np.testing.assert_allclose(sx.stress_whipsaw(X, 0.7)[:, 0], [0.02, -0.008], atol=1e-17)
    two = np.array([[0.01, 0.03]])  # mean 0.02, residuals (-0.01, 0.01), even row
    expected = np.array([[0.01 + 0.3 * 0.01, 0.03 - 0.3 * 0.01]])
    np.testing.assert_allclose(sx.stress_whipsaw(two, 1.0), expected, atol=1e-17)


def test_corr_spike_examples():
    np.testing.assert_allclose(sx.stress_corr_spike(np.array([[0.01, 0.03]]), 0.7), [[0.017, 0.023]], atol=1e-17)
    X = _panel()
    np.testing.assert_allclose(sx.stress_corr_spike(X, 1.0), np.repeat(X.mean(1, keepdims=True), 5, 1), atol=1e-17)


def test_identity_parameters_are_bitwise():
    X = _panel()
    np.testing.assert_array_equal(sx.stress_vol_bursts(X, 2.0, 0, 8, 3), X)
    np.testing.assert_array_equal(sx.stress_vol_bursts(X, 1.0, 3, 8, 3), X)
    np.testing.assert_array_equal(sx.stress_jumps(X, 0.0, 0.08, 0.8, 3), X)
    np.testing.assert_array_equal(sx.stress_whipsaw(X, 0.0), X)
    np.testing.assert_array_equal(sx.stress_corr_spike(X, 0.0), X)
    np.testing.assert_array_equal(sx.stress_combo(X, 3, lam=0.0, sigma_s=1.0, p_j=0.0), X)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 1.0))
def test_corr_spike_scales_dispersion(seed, lam):
    X = _panel(seed=seed)
    out = sx.stress_corr_spike(X, lam)
    np.testing.assert_allclose(out.std(axis=1), (1 - lam) * X.std(axis=1), atol=1e-12)
    assert out.shape == X.shape


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_vol_bursts_preserve_row_mean(seed):
    X = _panel(seed=seed)
    out = sx.stress_vol_bursts(X, 2.0, 3, 8, seed)
    np.testing.assert_allclose(out.mean(axis=1), X.mean(axis=1), atol=1e-12)
    changed = np.any(out != X, axis=1)
    assert changed.sum() == 24


def test_burst_mask_layout_and_errors():
    for seed in range(50):
        m = sx.burst_mask(40, 3, 8, stream(seed, "mask"))
        assert m.sum() == 24
        edges = np.flatnonzero(np.diff(np.concatenate([[0], m.astype(int), [0]])))
        runs = edges[1::2] - edges[::2]
        # adjacent bursts may touch, so runs are multiples of the burst length
        assert np.all(runs % 8 == 0)
    with pytest.raises(ValueError):
        sx.burst_mask(20, 3, 8, stream(0, "mask"))


def test_jump_frequency_and_sign():
    X = np.zeros((100_000, 3))
    out, market, idio = sx.stress_jumps(X, 0.03, 0.08, 0.8, 11, return_events=True)
    assert abs(market.mean() - 0.03) <= 0.01
    assert abs(idio.mean() - 0.01) <= 0.005
    forced, market, idio = sx.stress_jumps(np.zeros((5000, 3)), 0.03, 0.08, 1.0, 12, return_events=True)
    hit = market & ~idio.any(axis=1)
    assert np.all(forced[hit] < 0)


def test_combo_determinism_and_order():
    X = _panel(T=120)
    a = sx.stress_combo(X, 5)
    np.testing.assert_array_equal(a, sx.stress_combo(X, 5))
    reversed_order = sx.stress_corr_spike(
        sx.stress_vol_bursts(sx.stress_jumps(X, seed=stream(5, "stress.combo.jumps")),
                             seed=stream(5, "stress.combo.vol_bursts")), 0.7)
    assert not np.allclose(a, reversed_order)


def test_spec_round_trip_and_dispatch():
    spec = sx.StressSpec("whipsaw", {"gamma": 0.5}, seed=2)
    assert sx.StressSpec.from_json(spec.to_json()) == spec
    X = _panel()
    np.testing.assert_array_equal(sx.apply_stress(X, spec), sx.stress_whipsaw(X, 0.5))
    assert sx.StressSpec("jumps").params == sx.DEFAULTS["jumps"]
    with pytest.raises(ValueError):
        sx.StressSpec("earthquake")


def test_parameter_ranges():
    X = _panel()
    with pytest.raises(ValueError):
        sx.stress_whipsaw(X, 1.5)
    with pytest.raises(ValueError):
        sx.stress_corr_spike(X, -0.1)
    with pytest.raises(ValueError):
        sx.stress_vol_bursts(X, 0.5)
    with pytest.raises(ValueError):
        sx.stress_jumps(X, p_j=2.0)
