import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kode import diffcore as dc
from kode import koopman as kp
from kode.dataset import uncenter
from kode.diffcore import Graph, ParamStore, Tensor


def random_operator(rng, d=16, m=12, radius=0.98):
    a, b = kp.stable_random_system(d, m, rng, radius)
    return a, b * 0.1


def test_bank_initialisation():
    store = kp.init_bank(ParamStore(), 16, 5)
    assert store.values["kp.A"].shape == (5, 16, 16) and store.values["kp.B"].shape == (5, 16, 12)
    np.testing.assert_array_equal(store.values["kp.A"], np.broadcast_to(np.eye(16), (5, 16, 16)))
    np.testing.assert_array_equal(store.values["kp.B"], 0.0)
    assert kp.bank_size(kp.init_bank(ParamStore(), 8, 1)) == 1
    with pytest.raises(ValueError):
        kp.init_bank(ParamStore(), 8, 3)


def test_operator_index():
    np.testing.assert_array_equal(kp.operator_index([0, 3, 4], 5), [0, 3, 4])
    np.testing.assert_array_equal(kp.operator_index([0, 3, 4], 1), [0, 0, 0])
    with pytest.raises(ValueError):
        kp.operator_index([5], 5)


def test_select_and_contract_agree_for_every_pattern():
    rng = np.random.default_rng(0)
    bank_a = rng.normal(size=(5, 16, 16))
    bank_b = rng.normal(size=(5, 16, 12))
    for c in range(5):
        a, b = kp.select(bank_a, bank_b, c)
        assert a is not None and np.array_equal(a, bank_a[c])
        np.testing.assert_array_equal(kp.contract(kp.one_hot(c), bank_a), a)
        np.testing.assert_array_equal(kp.contract(kp.one_hot(c), bank_b), b)
        again = kp.select(bank_a[None].repeat(5, 0)[c], bank_b[None].repeat(5, 0)[c], c)
        np.testing.assert_array_equal(again[0], a)
    batched = kp.contract(kp.one_hot([2, 0, 2]), bank_a)
    np.testing.assert_array_equal(batched, bank_a[[2, 0, 2]])


def test_evolve_examples():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 16))
    u = rng.normal(size=(3, 12))
    np.testing.assert_array_equal(kp.evolve(z, u, np.eye(16), np.zeros((16, 12))).value, z)
    b = np.zeros((16, 12))
    b[:12] = np.eye(12)
    e1 = np.zeros((1, 12))
    e1[0, 0] = 1.0
    np.testing.assert_array_equal(kp.evolve(np.zeros((1, 16)), e1, rng.normal(size=(16, 16)), b).value[0],
                                  b[:, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_evolve_is_linear(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(16, 16)), rng.normal(size=(16, 12))
    z1, z2 = rng.normal(size=(2, 4, 16))
    u1, u2 = rng.normal(size=(2, 4, 12))
    lhs = kp.evolve(z1 + z2, u1 + u2, a, b).value
    rhs = kp.evolve(z1, u1, a, b).value + kp.evolve(z2, u2, a, b).value
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_per_sample_operators_match_shared():
    rng = np.random.default_rng(2)
    bank_a = rng.normal(size=(5, 16, 16)) * 0.2
    bank_b = rng.normal(size=(5, 16, 12))
    pats = np.array([4, 1, 1, 0])
    z = rng.normal(size=(4, 16))
    u = rng.normal(size=(4, 7, 12))
    out = kp.rollout(z, u, dc.take(Tensor(bank_a), pats), dc.take(Tensor(bank_b), pats)).value
    for i, p in enumerate(pats):
        single = kp.rollout(z[i:i + 1], u[i:i + 1], bank_a[p], bank_b[p]).value
        np.testing.assert_allclose(out[i], single[0], rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("horizon", [1, 100, 300])
def test_closed_form_matches_iteration(horizon):
    rng = np.random.default_rng(horizon)
    a, b = random_operator(rng)
    z0 = rng.normal(size=16)
    u = rng.uniform(0, 1, size=(horizon, 12))
    it = kp.rollout(z0[None], u[None], a, b).value[0]
    closed = kp.rollout_closed_form(z0, u, a, b)
    assert np.abs(it - closed).max() < 1e-9
    if horizon == 1:
        np.testing.assert_array_equal(it[0], kp.evolve(z0[None], u[:1], a, b).value[0])


def test_zero_dynamics_rollout_is_pure_input():
    rng = np.random.default_rng(3)
    b = rng.normal(size=(16, 12))
    u = rng.normal(size=(1, 20, 12))
    out = kp.rollout(rng.normal(size=(1, 16)), u, np.zeros((16, 16)), b).value
    np.testing.assert_allclose(out[0], u[0] @ b.T, rtol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_decoded_rollout_is_affine(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    a, b = random_operator(rng)
    z1, z2 = rng.normal(size=(2, 1, 16))
    u1, u2 = rng.normal(size=(2, 1, 15, 12))
    f = lambda z, u: kp.decode(kp.rollout(z, u, a, b).value)
    lhs = f(alpha * z1 + beta * z2, alpha * u1 + beta * u2)
    np.testing.assert_allclose(lhs, alpha * f(z1, u1) + beta * f(z2, u2), rtol=1e-9, atol=1e-9)


def test_rollout_gradient():
    rng = np.random.default_rng(4)
    store = ParamStore()
    a, b = random_operator(rng, d=8, m=3, radius=0.5)
    store.add("A", a)
    store.add("B", b)
    z = rng.normal(size=(2, 8))
    u = rng.normal(size=(2, 12, 3))

    def loss(g):
        out = kp.rollout(z, u, g.param(store, "A"), g.param(store, "B"))
        return dc.sum_(out * out)

    assert dc.gradient_check(loss, store, step=1e-5, rng=rng) < 1e-7


def test_decode_examples():
    z = np.arange(16.0)
    np.testing.assert_array_equal(kp.decode(z), np.arange(6.0))
    assert isinstance(kp.decode(Tensor(z)), Tensor)
    local = np.array([3.0, 4.0, 0.1, 1, 2, 3])
    np.testing.assert_array_equal(uncenter(local, np.array([100.0, -50.0]))[:2], [103.0, -46.0])


def test_unstable_rollout_flag():
    with pytest.raises(kp.UnstableRollout):
        kp.rollout_numpy(np.ones((1, 2)), np.zeros((1, 2000, 1)), 10 * np.eye(2), np.zeros((2, 1)), check=True)
    assert kp.spectral_radius(np.diag([0.5, -2.0])) == 2.0


def test_kernel_values():
    s = np.zeros((1, 6))
    for kind in kp.KERNELS:
        spec = kp.KernelSpec(kind, np.zeros((1, 6)), 1.0)
        val = kp.kernel_lift(s, spec)[0, 6]
        assert val == {"thinplate": 0.0, "gaussian": 1.0, "invquad": 1.0, "invmultquad": 1.0}[kind]
    x = np.zeros((1, 6))
    x[0, 0] = 2.0
    iq = kp.kernel_lift(x, kp.KernelSpec("invquad", np.zeros((1, 6)), 0.5))[0, 6]
    assert iq == 0.5
    tp = kp.kernel_lift(x, kp.KernelSpec("thinplate", np.zeros((1, 6))))[0, 6]
    assert tp == pytest.approx(4 * math.log(2.0), rel=1e-15)
    imq = kp.kernel_lift(x, kp.KernelSpec("invmultquad", np.zeros((1, 6)), 1.0))[0, 6]
    assert imq == pytest.approx(1 / math.sqrt(5), rel=1e-15)


def test_kernel_spec_from_samples():
    rng = np.random.default_rng(5)
    states = rng.normal(size=(200, 6))
    spec = kp.KernelSpec.from_samples("gaussian", states, 10, np.random.default_rng(0))
    assert spec.centers.shape == (10, 6) and spec.dim == 16
    d = np.linalg.norm(spec.centers[:, None] - spec.centers[None], axis=-1)
    assert spec.eps == pytest.approx(1 / np.median(d[np.triu_indices(10, 1)]))
    assert kp.KernelSpec.from_dict(spec.to_dict()).eps == spec.eps
    with pytest.raises(ValueError):
        kp.KernelSpec("cubic", np.zeros((1, 6)))


def test_edmd_recovers_known_linear_system():
    rng = np.random.default_rng(6)
    a, b = kp.stable_random_system(6, 12, rng)
    z = rng.normal(size=(5000, 6))
    u = rng.normal(size=(5000, 12))
    a_hat, b_hat, info = kp.edmd_fit(z, u, z @ a.T + u @ b.T)
    assert np.linalg.norm(a_hat - a) < 1e-6 and np.linalg.norm(b_hat - b) < 1e-6
    assert info.rank == 18 and info.ridge == 0.0


def test_degenerate_fit_uses_ridge():
    z = np.tile([[1.0, 2.0]], (10, 1))
    u = np.tile([[0.5]], (10, 1))
    zn = np.tile([[3.0, -1.0]], (10, 1))
    a, b, info = kp.edmd_fit(z, u, zn)
    assert info.ridge == kp.RIDGE and info.rank == 1
    np.testing.assert_allclose(a @ z[0] + b @ u[0], zn[0], atol=1e-6)
    with pytest.raises(kp.RankDeficient):
        kp.edmd_fit(z, u, zn, ridge=None)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fit_residual_never_exceeds_zero_operator(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(40, 4))
    u = rng.normal(size=(40, 2))
    zn = np.tanh(z) + 0.1 * rng.normal(size=(40, 4))
    _, _, info = kp.edmd_fit(z, u, zn)
    assert info.residual <= np.sum(zn ** 2) + 1e-9


def test_linear_ls_on_constant_data():
    s = np.tile([[0.0, 0.0, 0.3, 2.0, 0.1, 0.0]], (50, 1))
    u = np.random.default_rng(7).uniform(size=(50, 12)) * 0  # constant control
    a, b, _ = kp.linear_ls_fit(s, u + 0.5, s)
    np.testing.assert_allclose(a @ s[0] + b @ (u[0] + 0.5), s[0], atol=1e-6)


def test_linear_ls_baseline_is_exact_on_linear_plant():
    rng = np.random.default_rng(8)
    a, b = kp.stable_random_system(6, 12, rng)
    s = rng.normal(size=(500, 6))
    u = rng.uniform(size=(500, 12))
    model = kp.fit_baseline(s, u, s @ a.T + u @ b.T)
    assert model.name == "linear-ls"
    s0 = rng.normal(size=(4, 6))
    ctrl = rng.uniform(size=(4, 100, 12))
    truth = kp.rollout(s0, ctrl, a, b).value
    dist = np.hypot(*(model.predict(s0, ctrl) - truth)[..., :2].transpose(2, 0, 1))
    assert dist.mean() < 1e-6


def test_residual_on_fit_subset():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(60, 3))
    u = rng.normal(size=(60, 1))
    zn = np.sin(z) + 0.05 * rng.normal(size=(60, 3))
    a, b, _ = kp.edmd_fit(z, u, zn)
    err = np.sum((zn - z @ a.T - u @ b.T) ** 2, axis=1)
    sums = [err[:n].sum() for n in range(60, 0, -10)]
    assert all(x >= y for x, y in zip(sums, sums[1:]))


def test_baseline_serialisation_round_trip():
    rng = np.random.default_rng(10)
    s = rng.normal(size=(100, 6))
    u = rng.uniform(size=(100, 12))
    for kind in (None,) + kp.KERNELS:
        model = kp.fit_baseline(s, u, s * 0.9, kind, rng=np.random.default_rng(1))
        back = kp.LiftedLinearModel.from_dict(model.to_dict())
        assert back.name == model.name
        ctrl = rng.uniform(size=(2, 5, 12))
        np.testing.assert_array_equal(back.predict(s[:2], ctrl), model.predict(s[:2], ctrl))


def test_graph_bank_tensors():
    store = kp.init_bank(ParamStore(), 8, 5)
    g = Graph()
    a, b = kp.bank_tensors(store, g)
    g.backward(dc.sum_(dc.take(a, np.array([1, 1]))))
    assert store.grads["kp.A"][1].sum() == 2 * 64 and store.grads["kp.A"][0].sum() == 0
