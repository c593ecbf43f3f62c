import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kode import diffcore as dc
from kode import losses as L
from kode.diffcore import Graph, ParamStore, Tensor
from kode.plant import ExcitationConfig, Pattern, PlantParams, derivatives, generate_excitation, simulate

DT = 0.01
W = L.LossWeights()


def sim_states(pattern, seed, n=101):
    u = generate_excitation(pattern, ExcitationConfig(), np.random.default_rng(seed), n_steps=n - 1)
    return simulate(np.zeros(6), u, PlantParams(), DT).states


def test_state_loss_examples():
    rng = np.random.default_rng(0)
    tgt = rng.normal(size=(2, 10, 6))
    assert np.all(L.state_loss(tgt, tgt, tgt).value == 0.0)
    offset = np.zeros(6)
    offset[:2] = [0.6, 0.8]
    np.testing.assert_allclose(L.state_loss(tgt, tgt + offset, tgt).value, 1.0, rtol=1e-14)
    one = tgt[:, :1]
    pred = one + 0.3
    np.testing.assert_allclose(L.state_loss(pred, pred, one).value, 2 * math.sqrt(6 * 0.09), rtol=1e-14)


def test_feature_loss_homogeneity():
    rng = np.random.default_rng(1)
    tgt = rng.normal(size=(3, 5, 16))
    err1, err2 = rng.normal(size=(2, 3, 5, 16))
    assert np.all(L.feature_loss(tgt, tgt, tgt).value == 0.0)
    a = L.feature_loss(tgt + err1, tgt + err2, tgt).value
    b = L.feature_loss(tgt + 2 * err1, tgt + 2 * err2, tgt).value
    np.testing.assert_allclose(b, 2 * a, rtol=1e-14)


def test_discrepancy_examples():
    assert np.all(L.geometry_discrepancy(np.zeros((5, 6)), DT).value == 0.0)
    line = np.zeros((5, 6))
    line[:, 3] = 4.0
    line[:, 0] = 4.0 * DT * np.arange(5)
    d = L.geometry_discrepancy(line, DT).value
    assert d.shape == (4, 3)
    np.testing.assert_allclose(d, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        L.geometry_discrepancy(np.zeros((1, 6)), DT)


@pytest.mark.parametrize("pattern", [Pattern.FRO, Pattern.RWL, Pattern.CRM])
def test_simulated_heading_discrepancy_is_bounded_by_yaw_acceleration(pattern):
    # the forward difference of a heading that integrates wz exactly errs by at most dt/2 max|dwz/dt|
    for seed in range(5):
        u = generate_excitation(pattern, ExcitationConfig(), np.random.default_rng(seed), n_steps=100)
        s = simulate(np.zeros(6), u, PlantParams(), DT).states
        d = L.geometry_discrepancy(s, DT).value
        yaw_acc = max(np.abs(derivatives(s[:-1], u, PlantParams())[:, 5]).max(),
                      np.abs(derivatives(s[1:], u, PlantParams())[:, 5]).max())
        assert d[:, 2].max() <= 0.5 * DT * yaw_acc + 1e-15


def test_temporal_weights():
    assert L.temporal_weight(0, 100) == 1.0
    assert L.temporal_weight(100, 100) == 2.0
    r = L.temporal_weights(100)
    assert r[-1] == 2.0 and len(r) == 100 and np.all(np.diff(r) > 0)


@pytest.mark.parametrize("seed", range(100))
def test_geometry_loss_of_ground_truth_is_zero(seed):
    gt = sim_states(Pattern(seed % 5), seed)
    assert L.geometry_loss(gt, gt, DT, W).value == 0.0
    assert L.geometry_loss(gt, gt, DT, W, scale=L.geometry_scale(gt, DT)).value == 0.0


def test_geometry_loss_clamps_below_reference():
    # reference violates kinematics (positions static, velocity 1); prediction is closer to consistent
    gt = np.zeros((11, 6))
    gt[:, 3] = 1.0
    pred = gt.copy()
    pred[:, 0] = 0.5 * DT * np.arange(11)
    assert np.all(L.geometry_discrepancy(pred, DT).value <= L.geometry_discrepancy(gt, DT).value)
    assert L.geometry_loss(pred, gt, DT, W).value == 0.0


def test_geometry_loss_value_on_synthetic_excess():
    gt = np.zeros((3, 6))
    gt[:, 3] = 1.0
    gt[:, 0] = DT * np.arange(3)
    gt[2, 0] += 0.5 * DT  # reference discrepancy 0.5 on the second interval only
    pred = gt.copy()
    pred[1:, 0] += DT  # excess 1 on the first interval, -0.5 + 0 on the second
    ref = L.geometry_discrepancy(gt, DT).value
    np.testing.assert_allclose(ref[:, 0], [0.0, 0.5], atol=1e-9)
    loss = L.geometry_loss(pred, gt, DT, W).value
    # e_1 = 1 / (0.5 + eps), e_2 = 0; r_1 = 1 + (1/2)^2
    np.testing.assert_allclose(loss, 0.5 * 1.25 * (1.0 / (0.5 + W.eps)), rtol=1e-8)


def test_pattern_weights():
    assert L.pattern_weight([5, 0, 0, 0, 0], 0) == 1.0
    kappa = L.pattern_weight([1e6 - 9, 9, 0, 0, 0], 1)
    assert kappa == pytest.approx(math.log(1000001) / math.log(10))
    assert round(kappa, 1) == 6.0
    with pytest.raises(ValueError):
        L.pattern_weight([5, 0, 0, 0, 0], 1)
    np.testing.assert_array_equal(L.pattern_weights([10, 10, 0, 0, 0], [0, 1, 0]),
                                  [L.pattern_weight([10, 10, 0, 0, 0], 0)] * 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 10**7), st.data())
def test_kappa_at_least_one_and_non_increasing_in_share(total, data):
    v1 = data.draw(st.integers(1, total))
    v2 = data.draw(st.integers(v1, total))
    k1 = L.pattern_weight([v1, total - v1, 0, 0, 0], 0)
    k2 = L.pattern_weight([v2, total - v2, 0, 0, 0], 0)
    assert k2 <= k1 and k2 >= 1.0
    if v2 == total:
        assert k2 == 1.0


def window_inputs(rng, b=3, h=8, d=16):
    states = np.cumsum(rng.normal(size=(b, h + 1, 6)) * 0.1, axis=1)
    states[:, :, :2] -= states[:, :1, :2]
    feats = rng.normal(size=(b, h + 1, d - 6))
    target = np.concatenate([states, feats], axis=-1)
    return target, states


def test_total_loss_perfect_and_weighted():
    rng = np.random.default_rng(2)
    target, states = window_inputs(rng)
    nxt = target[:, 1:]
    assert L.total_loss(nxt, nxt, target, states, np.ones(3), DT, W).value == 0.0
    noisy = nxt + rng.normal(size=nxt.shape) * 0.1
    per = L.window_losses(noisy, noisy, target, states, DT, W)["window"].value
    np.testing.assert_allclose(L.total_loss(noisy, noisy, target, states, np.full(3, 2.5), DT, W).value,
                               per.mean(), rtol=1e-14)
    kappa = np.array([1.0, 2.0, 5.0])
    np.testing.assert_allclose(L.total_loss(noisy, noisy, target, states, kappa, DT, W).value,
                               (per * kappa).sum() / kappa.sum(), rtol=1e-14)
    only_state = L.LossWeights(beta=0.0, eta=0.0)
    terms = L.window_losses(noisy, noisy, target, states, DT, only_state)
    np.testing.assert_allclose(terms["window"].value, terms["state"].value, rtol=0)
    assert all(np.all(t.value >= 0) for t in terms.values())


def test_operator_reg_examples():
    assert L.operator_reg(np.zeros((16, 16)), np.zeros((16, 12))).value == 0.0
    assert L.operator_reg(np.eye(16), np.zeros((16, 12))).value == 4.0
    assert L.operator_reg(2 * np.eye(16), np.zeros((16, 12))).value == 8.0
    bank = np.broadcast_to(np.eye(16), (5, 16, 16))
    assert L.operator_reg(bank, np.zeros((5, 16, 12))).value == 20.0


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        L.LossWeights(beta=-0.1)


def test_total_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    target0, states = window_inputs(rng, b=3, h=6)
    store = ParamStore()
    store.add("ss", target0[:, 1:] + rng.normal(size=target0[:, 1:].shape) * 0.2)
    store.add("ro", target0[:, 1:] + rng.normal(size=target0[:, 1:].shape) * 0.2)
    store.add("tgt", target0[..., 6:].copy())
    kappa = np.array([1.0, 3.0, 2.0])
    scale = L.geometry_scale(states, DT)

    def loss(g):
        tgt = dc.concat([Tensor(states), g.param(store, "tgt")], axis=-1)
        return L.total_loss(g.param(store, "ss"), g.param(store, "ro"), tgt, states, kappa, DT, W, scale)

    assert dc.gradient_check(loss, store, step=1e-6, rng=rng) < 1e-4
    g = Graph()
    g.backward(loss(g))
    assert all(np.any(store.grads[n]) for n in store.names())
