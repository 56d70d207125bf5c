"""Test the Wirtinger gradients against finite differences of the quadrature cost."""
import numpy as np
import pytest

from strh2.bench import gen_ph_random, gen_random_stable
from strh2.h2metric import build_grid, h2_error_quadrature
from strh2.scalarfun import Constant, Monomial
from strh2.sysmodel import ParamSepModel, PHModel
from strh2.wirtinger import diag_restrict, finite_difference_gradient, gradients, ph_gradient

A = np.array([[-1.0, 0.5], [-0.3, -2.0]])
B = np.array([[1.0], [-0.5]])
C = np.array([[0.7, 1.2]])


@pytest.fixture
def grid():
    """Return a grid shared by cost and gradient."""
    return build_grid(20.0, 256)


@pytest.fixture
def fom():
    """Return a six-state random stable model."""
    return gen_random_stable(6, seed=2)


def state_space(A, B, C):
    """Return sI - A with constant input and output maps."""
    return ParamSepModel([(Monomial(1), np.eye(A.shape[0])), (Constant(-1), A)],
                         [(Constant(1), B)], [(Constant(1), C)])


def unpack(theta):
    """Split a real vector into A, B and C."""
    return theta[:4].reshape(2, 2), theta[4:6].reshape(2, 1), theta[6:].reshape(1, 2)


def test_gradient_matches_finite_difference(fom, grid):
    """Confirm 2 Re of each family is the real gradient of the cost."""
    theta = np.concatenate([A.ravel(), B.ravel(), C.ravel()])
    bundle = gradients(fom, state_space(A, B, C), grid)
    analytic = np.concatenate([2 * np.real(bundle.dA[1]).ravel(),
                               2 * np.real(bundle.dB[0]).ravel(),
                               2 * np.real(bundle.dC[0]).ravel()])

    def cost(x):
        return h2_error_quadrature(fom, state_space(*unpack(x)), grid).value

    numeric = finite_difference_gradient(cost, theta)
    assert np.allclose(analytic, numeric, rtol=1e-6, atol=1e-9 * np.abs(numeric).max())


def test_bundle_cost_matches_quadrature(fom, grid):
    """Confirm the bundle carries the same cost as h2_error_quadrature."""
    rom = state_space(A, B, C)
    bundle = gradients(fom, rom, grid)
    assert bundle.cost == pytest.approx(h2_error_quadrature(fom, rom, grid).value)
    assert bundle.norm() > 0
    assert len(bundle.dA) == 2 and bundle.dA[1].shape == (2, 2)


def test_s_term_gradient_is_weighted(fom, grid):
    """Confirm the s-term gradient carries the conjugated weight -i*omega."""
    bundle = gradients(fom, state_space(A, B, C), grid)
    assert not np.allclose(bundle.dA[0], -bundle.dA[1])


def test_gradient_vanishes_at_the_model_itself(grid):
    """Confirm every gradient is zero when the reduced model equals H."""
    model = state_space(A, B, C)
    bundle = gradients(state_space(A, B, C), model, grid)
    assert bundle.cost == pytest.approx(0, abs=1e-28)
    assert bundle.norm() == pytest.approx(0, abs=1e-14)


def test_diag_restrict(fom, grid):
    """Confirm only the diagonals of dA survive."""
    bundle = diag_restrict(gradients(fom, state_space(A, B, C), grid))
    for g in bundle.dA:
        assert np.count_nonzero(g - np.diag(np.diag(g))) == 0


def test_ph_gradient_directional(grid):
    """Confirm the port-Hamiltonian gradient predicts directional derivatives."""
    fom = gen_ph_random(6, seed=5)
    J = np.array([[0.0, 1.5], [-1.5, 0.0]])
    R = np.array([[1.0, 0.2], [0.2, 0.5]])
    Bp = np.array([[0.8], [-0.4]])
    K = np.array([[0.0, 0.3], [-0.3, 0.0]])
    D = np.array([[0.5], [1.0]])
    dJR, dB = ph_gradient(fom, PHModel(J, R, Bp), grid)

    def cost(x):
        return h2_error_quadrature(fom, PHModel(J + x[0] * K, R, Bp + x[0] * D), grid).value

    numeric = finite_difference_gradient(cost, np.zeros(1))[0]
    assert np.sum(dJR * K) + np.sum(dB * D) == pytest.approx(numeric, rel=1e-6)


def test_finite_difference_of_a_quadratic():
    """Confirm the 5-point rule is exact for polynomials of low degree."""
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    theta = np.array([0.3, -1.2])
    numeric = finite_difference_gradient(lambda x: x @ Q @ x + x[0] ** 3, theta)
    assert np.allclose(numeric, 2 * Q @ theta + [3 * theta[0] ** 2, 0])
