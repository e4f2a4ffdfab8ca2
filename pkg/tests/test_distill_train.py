import math

import numpy as np
import pytest

from cvar_distill import distill_train as dt
from cvar_distill import nn_core as nn
from cvar_distill.allocators import LabeledPair
from cvar_distill.rng import stream


def _toy_data(n_lab=12, n_unl=10, n_assets=3, n_in=5, seed=0):
    rng = stream(seed, "toy")
    lab = [LabeledPair(i, rng.normal(size=n_in), rng.dirichlet(np.ones(n_assets))) for i in range(n_lab)]
    unl = [dt.UnlabeledExample(rng.normal(size=n_in), rng.normal(0, 0.03, (20, n_assets))) for _ in range(n_unl)]
    return dt.Dataset(lab, unl)


def _net(bayes=False, seed=0, sizes=(5, 6, 3)):
    return nn.Network.init(nn.NetworkSpec(sizes, (bayes,) * (len(sizes) - 1)), seed)


def _cfg(**kw):
    base = dict(epochs_s0=5, cycles=2, epochs_sup=3, epochs_unsup=3, epochs_s2=4, learning_rate=0.2)
    base.update(kw)
    return dt.TrainConfig(**base)


# --- losses ------------------------------------------------------------------------------


def test_supervised_loss_examples():
    assert dt.supervised_loss([[0.2, 0.8]], [[0.2, 0.8]])[0] == 0.0
    assert dt.supervised_loss([[1.0, 0.0]], [[0.0, 1.0]])[0] == 2.0
    rng = stream(1, "sup")
    P, T = rng.dirichlet(np.ones(4), 7), rng.dirichlet(np.ones(4), 7)
    ref = sum(sum((P[b, i] - T[b, i]) ** 2 for i in range(4)) for b in range(7)) / 7
    assert dt.supervised_loss(P, T)[0] == pytest.approx(ref, abs=1e-12)
    with pytest.raises(ValueError):
        dt.supervised_loss(np.zeros((0, 2)), np.zeros((0, 2)))


def test_bnn_loss_arithmetic():
    P, T = np.array([[0.5, 0.5]]), np.array([[0.0, 1.0]])  # mse 0.5
    assert dt.bnn_supervised_loss(P, T, 2.0, 0.1)[0] == pytest.approx(0.7, abs=1e-15)
    assert dt.bnn_supervised_loss(P, T, 2.0, 0.0)[0] == dt.supervised_loss(P, T)[0]


def test_entropy_cases():
    val, _ = dt.unsupervised_loss(np.full(36, 1 / 36), np.zeros((20, 36)), 0.0, 1.0)
    assert val == pytest.approx(math.log(1 / 36), abs=1e-12)
    assert val == pytest.approx(-3.5835, abs=1e-4)
    corner = np.eye(5)[2]
    assert dt.unsupervised_loss(corner, np.zeros((20, 5)), 0.0, 1.0)[0] == 0.0


def test_entropy_gradient_at_uniform():
    n = 6
    w = np.full(n, 1 / n)
    _, g = dt.unsupervised_loss(w, np.zeros((20, n)), 0.0, 1.0)
    np.testing.assert_allclose(g, np.full(n, math.log(1 / n) + 1), atol=1e-14)
    for i in range(n):
        e = np.eye(n)[i] * 1e-6
        num = (dt.neg_entropy(w + e) - dt.neg_entropy(w - e)) / 2e-6
        assert num == pytest.approx(g[i], abs=1e-8)


def test_unsupervised_loss_oracle():
    rng = stream(2, "unsup")
    R = rng.normal(0, 0.03, (40, 4))
    w = rng.dirichlet(np.ones(4))
    losses = sorted((-(R @ w)).tolist(), reverse=True)
    cvar = sum(losses[:2]) / 2  # ceil(0.05 * 40) = 2
    ent = sum(x * math.log(x) for x in w)
    val, _ = dt.unsupervised_loss(w, R, 0.8, 0.3)
    assert val == pytest.approx(0.8 * cvar + 0.3 * ent, abs=1e-12)


# --- training -------------------------------------------------------------------------------


def test_memorizes_single_pair():
    data = _toy_data(n_lab=1)
    ck = dt.train_supervised(_net(), data.labeled, _cfg(learning_rate=0.5), epochs=400)
    assert ck.curves[-1]["mse"] < 1e-3


def test_zero_learning_rate_is_bitwise_noop():
    net = _net(bayes=True)
    before = net.state()
    dt.train_sandwich(net, _toy_data(), _cfg(learning_rate=0.0))
    for k, v in net.state().items():
        np.testing.assert_array_equal(v, before[k])


@pytest.mark.parametrize("bayes", [False, True])
def test_training_determinism(bayes):
    a = dt.train_sandwich(_net(bayes), _toy_data(), _cfg(batch_size=4))
    b = dt.train_sandwich(_net(bayes), _toy_data(), _cfg(batch_size=4))
    for k, v in a.net.state().items():
        np.testing.assert_array_equal(v, b.net.state()[k])
    assert a.curves == b.curves


@pytest.mark.parametrize("bayes", [False, True])
def test_zero_unsupervised_weights_match_supervised_twin(bayes):
    cfg = _cfg(lambda_cvar=0.0, lambda_div=0.0, grad_clip=0.0)
    sand = dt.train_sandwich(_net(bayes), _toy_data(), cfg)
    sup = dt.train_supervised(_net(bayes), _toy_data().labeled, cfg)
    for k, v in sand.net.state().items():
        np.testing.assert_array_equal(v, sup.net.state()[k])


def test_no_cycles_reduces_to_supervised():
    cfg = _cfg(cycles=0)
    sand = dt.train_sandwich(_net(), _toy_data(), cfg)
    sup = dt.train_supervised(_net(), _toy_data().labeled, cfg, epochs=cfg.epochs_s0 + cfg.epochs_s2)
    for k, v in sand.net.state().items():
        np.testing.assert_array_equal(v, sup.net.state()[k])
    assert sand.steps["unsupervised"] == 0


@pytest.mark.parametrize("batch", [None, 5])
def test_step_accounting(batch):
    cfg = _cfg(batch_size=batch)
    ck = dt.train_sandwich(_net(), _toy_data(n_lab=12, n_unl=11), cfg)
    bl = 1 if batch is None else 3
    bu = 1 if batch is None else 3
    assert ck.steps["supervised"] == (5 + 2 * 3 + 4) * bl
    assert ck.steps["unsupervised"] == 2 * 3 * bu
    stages = {c["stage"] for c in ck.curves}
    assert {"S0", "S1.0.sup", "S1.0.unsup", "S1.1.sup", "S1.1.unsup", "S2"} == stages


def test_sandwich_requires_pool():
    with pytest.raises(ValueError):
        dt.train_sandwich(_net(), dt.Dataset(_toy_data().labeled, []), _cfg())


def test_warm_up_reduces_imitation_loss():
    data = _toy_data(n_lab=6)
    ck = dt.train_sandwich(_net(sizes=(5, 16, 3)), data, _cfg(epochs_s0=300, epochs_s2=100, cycles=1))
    s0 = dt.stage_losses(ck.curves, "S0")
    assert s0[-1] <= 0.1 * ck.provenance["initial_mse"]
    assert dt.stage_losses(ck.curves, "S2")[-1] <= 1.1 * s0[-1]


def test_checkpoint_round_trip(tmp_path):
    ck = dt.train_sandwich(_net(bayes=True), _toy_data(), _cfg())
    ck.save(tmp_path / "m.ckpt")
    back = dt.StudentCheckpoint.load(tmp_path / "m.ckpt")
    X = stream(3, "x").normal(size=(4, 5))
    np.testing.assert_array_equal(back.predict(X, 5, 1), ck.predict(X, 5, 1))
    assert back.config == ck.config and back.curves == ck.curves


def test_clip_gradients():
    g = {"a": np.array([3.0, 4.0])}
    np.testing.assert_allclose(dt.clip_gradients(g, 1.0)["a"], [0.6, 0.8])
    assert dt.clip_gradients(g, 10.0) is g


def test_config_validation():
    with pytest.raises(ValueError):
        dt.TrainConfig(lambda_cvar=-1.0)
    with pytest.raises(ValueError):
        dt.TrainConfig(batch_size=0)


# --- splitting ---------------------------------------------------------------------------------


def _pairs(n, start=0):
    return [LabeledPair(start + i, np.zeros(1), np.ones(1)) for i in range(n)]


def test_split_counts_104_real_323_synthetic():
    real, synth = _pairs(104), _pairs(323, 1000)
    train, val, test = dt.split_dataset(real, synth, seed=3)
    assert (len(train), len(val), len(test)) == (256, 85, 86)
    assert train[:104] == real
    assert {p.date_index for p in val + test}.isdisjoint(range(104))


def test_split_no_synthetic_warns():
    with pytest.warns(UserWarning):
        train, val, test = dt.split_dataset(_pairs(10), [])
    assert len(train) == 10 and val == [] and test == []


def test_split_real_overflow_warns():
    with pytest.warns(UserWarning, match="real pairs"):
        train, _, _ = dt.split_dataset(_pairs(50), _pairs(10, 100))
    assert train[:50] == _pairs(50)


def test_split_determinism():
    a = dt.split_dataset(_pairs(20), _pairs(80, 100), seed=4)
    b = dt.split_dataset(_pairs(20), _pairs(80, 100), seed=4)
    c = dt.split_dataset(_pairs(20), _pairs(80, 100), seed=5)
    assert a == b and a != c
