from itertools import permutations

import numpy as np
import pytest

from _support import fd_relative_error
from geofunflow.errors import NumericalError
from geofunflow.flow import (
    Adam,
    FlowNet,
    OdeSolverCfg,
    SEGate,
    VelocityModel,
    fm_loss,
    gronwall_check,
    interpolate,
    model_grad,
    reconstruct_velocity,
    sample,
    se_backward,
    se_recalibrate,
    uq_variance,
    w2_assignment,
)
from geofunflow.latent_grid import AffineMap, pullback_gradient


def _zero_model(d):
    return VelocityModel([np.zeros((d, d))], [np.zeros(d)], "identity", time_embedding=False)


def test_interpolate_endpoints():
    rng = np.random.default_rng(0)
    z0, z1 = rng.normal(size=5), rng.normal(size=5)
    assert np.array_equal(interpolate(z0, z1, 0.0)[0], z0)
    assert np.array_equal(interpolate(z0, z1, 1.0)[0], z1)
    zt, target = interpolate(np.zeros(4), np.ones(4), 0.5)
    assert np.array_equal(zt, np.full(4, 0.5)) and np.array_equal(target, np.ones(4))
    with pytest.raises(ValueError):
        interpolate(np.zeros(3), np.zeros(4), 0.5)


def test_fm_loss_examples():
    d = 3
    z0, z1 = np.zeros((1, d)), np.array([[2.0, 0, 0]])
    assert fm_loss(_zero_model(d), z0, z1, [0.3]) == 4.0

    # bias-only model that outputs z1 - z0 exactly
    exact = VelocityModel([np.zeros((d, d))], [np.array([2.0, 0, 0])], "identity", time_embedding=False)
    assert fm_loss(exact, z0, z1, [0.3]) == 0.0


def test_fm_loss_matches_scalar_loop():
    rng = np.random.default_rng(11)
    m = VelocityModel.init(rng, 4, hidden=(5,))
    z0, z1, t = rng.normal(size=(6, 4)), rng.normal(size=(6, 4)), rng.uniform(size=6)
    total = 0.0
    for i in range(6):
        zt = (1 - t[i]) * z0[i] + t[i] * z1[i]
        x = np.concatenate([zt, [t[i], np.sin(2 * np.pi * t[i]), np.cos(2 * np.pi * t[i])]])
        v = np.tanh(x @ m.weights[0] + m.biases[0]) @ m.weights[1] + m.biases[1]
        total += float(((v - (z1[i] - z0[i])) ** 2).sum())
    assert fm_loss(m, z0, z1, t) == pytest.approx(total / 6, rel=1e-13)


def test_fm_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        fm_loss(_zero_model(2), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))


def test_se_zero_gate_halves():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 3, 3, 4))
    assert np.array_equal(se_recalibrate(x, SEGate.zeros(4)), x / 2)
    g = SEGate.init(rng, 4, 2)
    assert np.all(se_recalibrate(np.zeros((2, 2, 2, 4)), g) == 0)


def test_se_by_hand():
    x = np.zeros((2, 1, 1, 2))
    x[..., 0] = [[[1.0]], [[3.0]]]
    x[..., 1] = [[[-1.0]], [[0.0]]]
    gate = SEGate(np.array([[1.0, 2.0]]), np.array([[0.5], [-1.0]]))
    zc = np.array([2.0, -0.5])
    hidden = max(zc @ [1.0, 2.0], 0.0)  # relu(1.0) = 1.0
    s = 1 / (1 + np.exp(-np.array([0.5, -1.0]) * hidden))
    assert np.allclose(se_recalibrate(x, gate), x * s, rtol=0, atol=1e-15)


def test_se_rejects_bad_reduction():
    with pytest.raises(ValueError):
        SEGate.init(np.random.default_rng(0), 5, 2)


def test_se_gradients():
    rng = np.random.default_rng(2)
    gate = SEGate.init(rng, 4, 2, scale=2.0)
    x = rng.normal(size=(2, 3, 3, 3, 4)) + 0.5
    gout = rng.normal(size=x.shape)
    _, cache = se_recalibrate(x, gate, return_cache=True)
    grads, gx = se_backward(gate, cache, gout)
    params = dict(gate.params(), x=x)
    grads = dict(grads, x=gx)
    err = fd_relative_error(lambda: float((se_recalibrate(x, gate) * gout).sum()), params, grads)
    assert err < 1e-6


def test_zero_model_zero_batch_gives_zero_gradient():
    m = _zero_model(3)
    loss, grads = model_grad(m, np.zeros((2, 3)), np.zeros((2, 3)), [0.2, 0.7])
    assert loss == 0.0 and all(np.all(g == 0) for g in grads.values())


def test_linear_layer_matches_least_squares():
    rng = np.random.default_rng(3)
    d, B = 3, 5
    W, b = rng.normal(size=(d, d)), rng.normal(size=d)
    m = VelocityModel([W], [b], "identity", time_embedding=False)
    z0, z1, t = rng.normal(size=(B, d)), rng.normal(size=(B, d)), rng.uniform(size=B)
    X = (1 - t)[:, None] * z0 + t[:, None] * z1
    R = X @ W + b - (z1 - z0)
    _, grads = model_grad(m, z0, z1, t)
    assert np.allclose(grads["v_W0"], 2 * X.T @ R / B, rtol=1e-13, atol=1e-14)
    assert np.allclose(grads["v_b0"], 2 * R.sum(0) / B, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("seed", [1729] + list(range(10)))
def test_model_gradients(seed):
    rng = np.random.default_rng(seed)
    d = 8
    model = VelocityModel.init(rng, d, hidden=(6, 5), skip=True)
    model.skip[:] = rng.normal(size=4)
    net = FlowNet(model, SEGate.init(rng, 2, 2, scale=2.0), (2, 2, 1, 2))
    z0, z1, t = rng.normal(size=(4, d)), rng.normal(size=(4, d)), rng.uniform(size=4)
    _, grads = model_grad(net, z0, z1, t)
    err = fd_relative_error(lambda: fm_loss(net, z0, z1, t), net.params(), grads, rng=rng)
    assert err <= 1e-5


def test_model_grad_non_finite():
    m = _zero_model(2)
    m.biases[0][:] = np.inf
    with pytest.raises(NumericalError):
        model_grad(m, np.zeros((1, 2)), np.zeros((1, 2)), [0.5])


def test_bias_only_model_learns_constant_displacement():
    rng = np.random.default_rng(4)
    d = np.array([0.5, -1.0, 2.0])
    m = VelocityModel([np.zeros((3, 3))], [np.zeros(3)], "identity", time_embedding=False)
    net = FlowNet(m)
    opt = Adam(lr=0.05)
    for _ in range(2000):
        z0 = rng.normal(size=(8, 3))
        _, grads = model_grad(net, z0, z0 + d, rng.uniform(size=8))
        opt.update(net.params(), grads, frozen=("v_W0",))
    assert np.linalg.norm(m.biases[0] - d) <= 1e-3


def test_sampler_constant_field():
    c = np.array([0.25, -1.0])
    z0 = np.array([1.0, 2.0])
    for steps in (1, 3, 8):
        assert np.allclose(sample(lambda z, t: c, z0, OdeSolverCfg(steps, "euler")), z0 + c, rtol=0, atol=1e-15)


def test_sampler_exponential():
    z0 = np.array([1.0, -2.0, 0.5])
    z1 = sample(lambda z, t: z, z0, OdeSolverCfg(100, "rk4"))
    assert np.all(np.abs(z1 / (np.e * z0) - 1) <= 1e-6)


def test_rk4_self_convergence():
    # dz/dt = -(1 + t) z has z(1) = z0 exp(-3/2)
    z0 = np.array([0.3, 1.2, -0.7])
    ref = z0 * np.exp(-1.5)
    e1 = np.linalg.norm(sample(lambda z, t: -(1 + t) * z, z0, OdeSolverCfg(32, "rk4")) - ref)
    e2 = np.linalg.norm(sample(lambda z, t: -(1 + t) * z, z0, OdeSolverCfg(64, "rk4")) - ref)
    assert 15.0 <= e1 / e2 <= 17.0


def test_sampler_deterministic_and_guarded():
    rng = np.random.default_rng(5)
    net = FlowNet(VelocityModel.init(rng, 4, hidden=(3,)))
    z0 = np.random.default_rng(9).standard_normal((3, 4))
    assert np.array_equal(sample(net, z0, OdeSolverCfg(7)), sample(net, z0, OdeSolverCfg(7)))
    with pytest.raises(NumericalError):
        sample(lambda z, t: np.full_like(z, np.nan), z0, OdeSolverCfg(2))
    with pytest.raises(ValueError):
        OdeSolverCfg(0)


def test_reconstruct_velocity():
    m = AffineMap(np.zeros(3), [2, 4, 8], 0.0)
    assert np.array_equal(reconstruct_velocity([1, 1, 1], m), [2, 4, 8])
    assert np.array_equal(reconstruct_velocity([0, 0, 0], m), [0, 0, 0])
    rng = np.random.default_rng(6)
    m = AffineMap(rng.normal(size=3), rng.uniform(0.1, 5, 3), 1e-6)
    v = rng.normal(size=(10, 3))
    assert np.allclose(pullback_gradient(reconstruct_velocity(v, m), m), v, rtol=0, atol=1e-12)


def test_gronwall_examples():
    assert gronwall_check(1.0, 0.0).measured == 0.0
    r = gronwall_check(0.0, 0.1)
    assert r.passed and r.measured <= 0.1 * (1 + 1e-12)
    r = gronwall_check(1.0, 0.01, A=np.eye(1), z0=np.ones(1))
    assert r.passed and r.measured == pytest.approx(0.01 * (np.e - 1), rel=1e-8)
    rng = np.random.default_rng(7)
    for _ in range(5):
        A = rng.normal(size=(4, 4))
        L = np.linalg.norm(A, 2)
        assert gronwall_check(L, 0.05, A=A, z0=rng.normal(size=4), direction=rng.normal(size=4)).passed


def test_w2_examples():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(5, 3))
    assert w2_assignment(A, A) == 0.0
    a, b = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    assert w2_assignment(a, b) == pytest.approx(np.linalg.norm(a - b), rel=1e-15)
    A, B = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    brute = min(np.mean([np.sum((A[i] - B[p[i]]) ** 2) for i in range(3)]) for p in permutations(range(3)))
    assert w2_assignment(A, B) == pytest.approx(np.sqrt(brute), rel=1e-14)
    with pytest.raises(ValueError):
        w2_assignment(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        w2_assignment(np.zeros((257, 2)), np.zeros((257, 2)))


def test_uq_examples():
    z0 = np.random.default_rng(3).standard_normal((30, 5))
    var, _ = uq_variance(lambda z, t: np.zeros_like(z), 30, 3, OdeSolverCfg(4), 5)
    assert np.allclose(var, z0.var(axis=0, ddof=1), rtol=0, atol=1e-15)
    same = np.ones((2, 5))
    var2, _ = uq_variance(lambda z, t: np.zeros_like(z), 2, 0, OdeSolverCfg(4), 5, z0=same)
    assert np.all(var2 == 0)
    with pytest.raises(ValueError):
        uq_variance(lambda z, t: z, 1, 0, OdeSolverCfg(1), 5)
