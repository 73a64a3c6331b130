import numpy as np
import pytest
from scipy.linalg import expm

from spinprep.control import (
    LossKind,
    OptimizerState,
    adam_step,
    central_difference,
    evaluate_loss,
    expm_directional_derivative,
    finite_difference_gradient,
    loss_value,
    schedule_gradient,
)
from spinprep.dynamics import ControlSchedule, eigen
from spinprep.hilbert import ModelSpec, all_up_state
from spinprep.protocols import SWAP

from conftest import random_hermitian, random_unit, random_unitary


def test_loss_values():
    assert loss_value("nlf", 1.0) == 0
    assert loss_value("nlf", np.exp(-3)) == pytest.approx(3)
    assert loss_value("nlf", 0.0) == pytest.approx(-np.log(1e-12))
    assert loss_value("one_minus_f", 0.25) == 0.75
    assert loss_value("gate_frobenius", np.eye(4), SWAP) == pytest.approx(2)
    with pytest.raises(ValueError):
        loss_value("nlf", 1.1)


def test_phase_invariant_gate_loss():
    assert loss_value("gate_frobenius", np.exp(0.7j) * SWAP, SWAP, phase_invariant=True) < 1e-7
    assert loss_value("gate_frobenius", np.exp(0.7j) * SWAP, SWAP) > 1


def test_directional_derivative_zero_direction(rng):
    eig = eigen(random_hermitian(rng, 8))
    assert np.all(expm_directional_derivative(eig, np.zeros((8, 8)), 0.4) == 0)


def test_directional_derivative_commuting():
    tau = 0.6
    h = np.diag([0.3, -1.2, 0.3, 2.0]).astype(complex)
    d = np.diag([1.0, 0.5, -0.2, 0.0]).astype(complex)
    u = expm(-1j * tau * h)
    assert np.allclose(expm_directional_derivative(eigen(h), d, tau), -1j * tau * d @ u, atol=1e-14)


def test_directional_derivative_finite_difference(rng):
    h, d = random_hermitian(rng, 8), random_hermitian(rng, 8)
    tau, step = 0.2, 1e-5
    fd = (expm(-1j * tau * (h + step * d)) - expm(-1j * tau * (h - step * d))) / (2 * step)
    assert np.max(np.abs(expm_directional_derivative(eigen(h), d, tau) - fd)) < 1e-6


def test_directional_derivative_degenerate_spectrum(rng):
    # repeated eigenvalues exercise the diagonal limit of the kernel
    v = random_unitary(rng, 6)
    h = v @ np.diag([1.0, 1.0, 1.0, -0.5, -0.5, 2.0]) @ v.conj().T
    d = random_hermitian(rng, 6)
    tau, step = 0.9, 1e-5
    fd = (expm(-1j * tau * (h + step * d)) - expm(-1j * tau * (h - step * d))) / (2 * step)
    assert np.max(np.abs(expm_directional_derivative(eigen(h), d, tau) - fd)) < 1e-6


def test_directional_derivative_preserves_unitarity(rng):
    h, d = random_hermitian(rng, 16), random_hermitian(rng, 16)
    tau = 0.45
    u = expm(-1j * tau * h)
    du = expm_directional_derivative(eigen(h), d, tau)
    assert np.max(np.abs(u.conj().T @ du + du.conj().T @ u)) < 1e-9


def _instance(rng, n, k, kind):
    spec = ModelSpec("xy", n)
    s = ControlSchedule(1.5, rng.standard_normal((k, n, 3)))
    if LossKind(kind).is_gate:
        return s, spec, None, random_unitary(rng, 2**n)
    return s, spec, all_up_state(n), random_unit(rng, 2**n)


def _max_rel(a, b):
    scale = np.abs(b)
    err = np.abs(a - b)
    return np.max(np.where(scale < 1e-8, err, err / np.maximum(scale, 1e-300)))


@pytest.mark.parametrize("kind", list(LossKind))
def test_gradient_matches_finite_differences(rng, kind):
    s, spec, psi0, target = _instance(rng, 3, 2, kind)
    loss, grad = schedule_gradient(s, spec, psi0, target, kind)
    fd = finite_difference_gradient(s, spec, psi0, target, kind, step=1e-5)
    assert loss == pytest.approx(evaluate_loss(s, spec, psi0, target, kind), abs=1e-14)
    assert grad.shape == (2, 3, 3)
    assert _max_rel(grad, fd) < 1e-5


def test_swap_gate_gradient(rng):
    spec = ModelSpec("heisenberg", 2)
    s = ControlSchedule(2.0, rng.standard_normal((3, 2, 3)))
    for phase in (False, True):
        _, grad = schedule_gradient(s, spec, None, SWAP, "gate_frobenius", phase_invariant=phase)
        fd = finite_difference_gradient(s, spec, None, SWAP, "gate_frobenius", 1e-5, phase_invariant=phase)
        assert np.max(np.abs(grad - fd)) < 1e-5


def test_nlf_is_one_minus_f_over_f(rng):
    s, spec, psi0, target = _instance(rng, 3, 3, "nlf")
    _, g_nlf = schedule_gradient(s, spec, psi0, target, "nlf")
    l1, g_lin = schedule_gradient(s, spec, psi0, target, "one_minus_f")
    f = 1 - l1
    assert f > 1e-6
    assert np.max(np.abs(g_nlf - g_lin / f)) < 1e-9


def test_gradient_nonzero_on_uncoupled_axis(rng):
    # Ising couples only z, but x/y fields still steer the state
    spec = ModelSpec("ising", 3)
    s = ControlSchedule(1.0, rng.standard_normal((2, 3, 3)))
    _, grad = schedule_gradient(s, spec, all_up_state(3), random_unit(rng, 8), "nlf")
    assert np.all(np.abs(grad[..., :2]) > 0)


def test_central_difference_on_quadratic():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([0.3, -1.1])
    grad = central_difference(lambda y: y @ a @ y + 3 * y[0], x, 1e-3)
    assert np.allclose(grad, 2 * a @ x + [3, 0], atol=1e-10)
    with pytest.raises(ValueError):
        central_difference(np.sum, x, 0.0)


def test_shape_mismatch_errors(rng):
    spec = ModelSpec("xy", 3)
    s = ControlSchedule(1.0, np.zeros((1, 3, 3)))
    with pytest.raises(ValueError):
        schedule_gradient(s, spec, all_up_state(3), all_up_state(2), "nlf")
    with pytest.raises(ValueError):
        schedule_gradient(s, spec, None, np.eye(4), "gate_frobenius")


def test_adam_zero_gradient():
    p = np.arange(6.0).reshape(1, 2, 3)
    new, state = adam_step(p, np.zeros_like(p), OptimizerState.fresh(p.shape))
    assert np.array_equal(new, p)
    assert state.t == 1


def test_adam_first_step():
    p = np.zeros((2, 2, 3))
    g = np.full_like(p, 0.3)
    new, _ = adam_step(p, g, OptimizerState.fresh(p.shape, lr=0.01))
    assert np.allclose(new, -0.01 * 0.3 / (0.3 + 1e-8), rtol=0, atol=1e-15)


def test_adam_deterministic(rng):
    p = rng.standard_normal((3, 2, 3))
    g = rng.standard_normal((3, 2, 3))
    s0 = OptimizerState.fresh(p.shape)
    a, sa = adam_step(p, g, s0)
    b, sb = adam_step(p, g, s0)
    assert np.array_equal(a, b) and np.array_equal(sa.m, sb.m) and np.array_equal(sa.v, sb.v)
    assert np.all(s0.m == 0)


def test_small_adam_step_descends():
    violations = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        s, spec, psi0, target = _instance(rng, 3, 2, "nlf")
        loss, grad = schedule_gradient(s, spec, psi0, target, "nlf")
        new, _ = adam_step(s.fields, grad, OptimizerState.fresh(grad.shape, lr=1e-3))
        if evaluate_loss(s.with_fields(new), spec, psi0, target, "nlf") > loss + 1e-6:
            violations += 1
    assert violations <= 2
