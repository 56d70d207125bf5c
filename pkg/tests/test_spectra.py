"""Test root finding, Lambert W, delay poles and residues."""
import numpy as np
import pytest

from strh2.scalarfun import Constant, ExpDelay, Monomial, lincomb
from strh2.spectra import (
    Analytic,
    delay_poles,
    denominator_poles,
    lambert_w,
    lambert_w_many,
    polynomial_roots,
    residue_double,
    residue_simple,
)
from strh2.util import (
    BranchPointSingularity,
    DegenerateLeadingCoefficient,
    NotASimpleZero,
    UnstablePole,
)


def contour_residue(f, c, radius=1e-2, nodes=128):
    """Return (1/2 pi i) times the integral of f around a small circle at c."""
    angle = 2 * np.pi * np.arange(nodes) / nodes
    offset = radius * np.exp(1j * angle)
    return np.mean(np.array([f(c + z) for z in offset]) * offset)


@pytest.fixture
def denominator():
    """Return h(s) = s + 1 - 0.5 exp(-s)."""
    return lincomb([(1, Monomial(1)), (1, Constant(1)), (-0.5, ExpDelay(1.0))])


def test_polynomial_roots_sorted():
    """Confirm roots come back sorted by real part."""
    roots = polynomial_roots(np.poly([-3, -1, -2]))
    assert np.allclose(roots, [-3, -2, -1])


def test_polynomial_roots_degenerate():
    """Confirm a vanishing leading coefficient is rejected."""
    with pytest.raises(DegenerateLeadingCoefficient):
        polynomial_roots([0, 1, 2])


@pytest.mark.parametrize('z', [1.0, -0.2 + 0.5j, 3j])
def test_lambert_w_branches(z):
    """Confirm w exp(w) = z on several branches."""
    w = lambert_w_many(np.arange(-3, 4), z)
    assert np.allclose(w * np.exp(w), z, rtol=1e-11, atol=0)
    assert len(set(np.round(w, 8))) == 7


def test_lambert_w_annulus():
    """Confirm the branch identity to near machine precision across 0.1 <= |z| <= 10."""
    rng = np.random.default_rng(5)
    radius = 10 ** rng.uniform(-1, 1, 50)
    for z in radius * np.exp(2j * np.pi * rng.uniform(size=50)):
        w = lambert_w_many(np.arange(-2, 3), z)
        assert np.all(np.abs(w * np.exp(w) - z) < 1e-11 * abs(z))
        gaps = np.abs(w[:, None] - w[None, :]) + np.eye(5)
        assert gaps.min() > 1e-6


def test_lambert_w_principal():
    """Confirm the omega constant and the branch point errors."""
    assert lambert_w(0, 1.0) == pytest.approx(0.5671432904097838)
    assert lambert_w(0, 0) == 0
    with pytest.raises(BranchPointSingularity):
        lambert_w(1, 0)
    with pytest.raises(BranchPointSingularity):
        lambert_w(0, -np.exp(-1))


def test_delay_poles(denominator):
    """Confirm delay poles are zeros of the denominator on every branch."""
    pole_set = delay_poles(-1, 0.5, 1.0, window=4, index=2)
    assert len(pole_set) == 9
    assert pole_set.index == 2
    assert np.allclose(denominator(pole_set.poles), 0, atol=1e-10)
    assert np.all(pole_set.poles.real < 0)
    assert np.all(np.diff(pole_set.poles.real) >= 0)


@pytest.mark.parametrize('mu, sigma, tau', [(-1, 0.5, 1.0), (-2.0, -1.5, 0.5), (-0.5, 0.1, 2.0)])
def test_delay_poles_conjugate_closed(mu, sigma, tau):
    """Confirm branch -j carries the conjugate of branch j for real mu and sigma."""
    pole_set = delay_poles(mu, sigma, tau, window=5)
    by_branch = dict(zip(pole_set.branches.tolist(), pole_set.poles))
    for j in range(1, 6):
        pole = by_branch[j]
        assert abs(by_branch[-j] - np.conj(pole)) <= 1e-10 * (1 + abs(pole))
    for pole in pole_set.poles:
        assert np.abs(pole_set.poles - np.conj(pole)).min() <= 1e-10 * (1 + abs(pole))


def test_delay_poles_without_delay_term():
    """Confirm sigma = 0 leaves the single pole mu."""
    pole_set = delay_poles(-2 + 1j, 0, 1.0, window=8)
    assert np.allclose(pole_set.poles, [-2 + 1j])


def test_delay_poles_unstable():
    """Confirm a right half-plane pole raises UnstablePole."""
    with pytest.raises(UnstablePole):
        delay_poles(1.0, 0.1, 1.0, window=2)


def test_denominator_poles(denominator):
    """Confirm polynomial and delay denominators are both handled."""
    quadratic = lincomb([(1, Monomial(2)), (3, Monomial(1)), (2, Constant(1))])
    assert np.allclose(denominator_poles(quadratic).poles, [-2, -1])
    assert len(denominator_poles(denominator, window=3)) == 7
    with pytest.raises(UnstablePole):
        denominator_poles(lincomb([(1, Monomial(1)), (-1, Constant(1))]))
    with pytest.raises(NotASimpleZero):
        denominator_poles(lincomb([(1, Monomial(2)), (2, Monomial(1)), (1, Constant(1))]))


def test_residue_simple_against_contour(denominator):
    """Confirm g/h' at a simple zero matches a contour integral."""
    c = delay_poles(-1, 0.5, 1.0, window=0).poles[0]
    g = ExpDelay(0.3)
    expected = contour_residue(lambda s: g(s) / denominator(s), c)
    assert residue_simple(g, denominator, c) == pytest.approx(expected, rel=1e-8)


def test_residue_double_against_contour(denominator):
    """Confirm the double-pole residue formula matches a contour integral."""
    c = delay_poles(-1, 0.5, 1.0, window=1).poles[-1]
    g = lincomb([(2, Monomial(2)), (1j, ExpDelay(0.3))])
    expected = contour_residue(lambda s: g(s) / denominator(s) ** 2, c)
    assert residue_double(g, denominator, c) == pytest.approx(expected, rel=1e-7)


def test_residue_with_plain_callables():
    """Confirm Analytic wrappers supply derivatives for callables."""
    h = Analytic(lambda s: s**2 + 1, (lambda s: 2 * s, lambda s: 2 + 0 * s))
    g = Analytic(np.exp, (np.exp,))
    assert residue_simple(g, h, 1j) == pytest.approx(np.exp(1j) / 2j)
    expected = contour_residue(lambda s: np.exp(s) / (s**2 + 1) ** 2, 1j)
    assert residue_double(g, h, 1j) == pytest.approx(expected, rel=1e-8)


def test_residue_requires_a_zero(denominator):
    """Confirm a point that is not a zero raises NotASimpleZero."""
    with pytest.raises(NotASimpleZero):
        residue_simple(Constant(1), denominator, 0.5)
