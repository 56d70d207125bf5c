"""Test the coefficient functions and the numerical helpers they rely on."""
import json

import numpy as np
import pytest

from strh2.scalarfun import (
    Constant,
    ExpDelay,
    LinearCombination,
    Monomial,
    conj_flip,
    delay_form,
    derivative,
    evaluate,
    from_json,
    lincomb,
    polynomial_coefficients,
)
from strh2.util import (
    SingularAtPoint,
    compensated_sum,
    decode_array,
    encode_array,
    separation,
    solve,
    thread_count,
)


@pytest.fixture
def delay_denominator():
    """Return s - 0.5 - 0.2 exp(-0.7 s) + 0.1j."""
    return lincomb([(1, Monomial(1)), (-0.5 + 0.1j, Constant(1)), (-0.2, ExpDelay(0.7))])


@pytest.mark.parametrize('s', [0.3, 1.5j, -0.4 + 2j])
def test_evaluate_matches_closed_form(delay_denominator, s):
    """Confirm evaluation of a combination matches the formula it encodes."""
    expected = s - 0.5 + 0.1j - 0.2 * np.exp(-0.7 * s)
    assert evaluate(delay_denominator, s) == pytest.approx(expected)


def test_vectorized_evaluation(delay_denominator):
    """Confirm arrays evaluate elementwise and scalars return Python complex."""
    points = np.array([0.1, 1j, 2 - 1j])
    values = delay_denominator(points)
    assert values.shape == (3,)
    assert values[1] == pytest.approx(delay_denominator(1j))
    assert isinstance(Constant(2)(0.5), complex)


@pytest.mark.parametrize('f', [
    Constant(3 - 1j),
    Monomial(3),
    ExpDelay(0.4),
    lincomb([(2, Monomial(2)), (1j, ExpDelay(1.0)), (-1, Constant(0.5))]),
])
def test_derivative_against_finite_difference(f):
    """Confirm the exact derivative matches a central difference."""
    s, h = 0.3 + 0.8j, 1e-6
    numeric = (f(s + h) - f(s - h)) / (2 * h)
    assert derivative(f)(s) == pytest.approx(numeric, rel=1e-6, abs=1e-8)


def test_conj_flip(delay_denominator):
    """Confirm conj_flip(f)(s) = conj(f(conj(s)))."""
    s = 0.2 + 1.1j
    assert conj_flip(delay_denominator)(s) == pytest.approx(np.conj(delay_denominator(np.conj(s))))


def test_lincomb_flattens():
    """Confirm nested combinations distribute their weights."""
    inner = lincomb([(2, Monomial(1)), (1, Constant(1))])
    outer = lincomb([(3, inner), (1, ExpDelay(1.0))])
    assert len(outer.terms) == 3
    assert all(not isinstance(f, LinearCombination) for _, f in outer.terms)
    assert outer(0.5) == pytest.approx(3 * (2 * 0.5 + 1) + np.exp(-0.5))


@pytest.mark.parametrize('bad', [
    lambda: Monomial(-1),
    lambda: Monomial(1.5),
    lambda: ExpDelay(0),
    lambda: LinearCombination(()),
    lambda: LinearCombination(((1, lincomb([(1, Constant(1))])),)),
])
def test_invalid_functions(bad):
    """Confirm invalid constructions raise ValueError."""
    with pytest.raises(ValueError):
        bad()


def test_json_roundtrip(delay_denominator):
    """Confirm the tagged encoding survives a trip through JSON text."""
    decoded = from_json(json.loads(json.dumps(delay_denominator.to_json())))
    assert decoded(0.7 - 0.3j) == pytest.approx(delay_denominator(0.7 - 0.3j))


def test_json_rejects_unknown_tag():
    """Confirm an unknown tag is a ValueError."""
    with pytest.raises(ValueError, match="Unsupported"):
        from_json({'sine': 1.0})


def test_polynomial_coefficients():
    """Confirm polynomial detection and coefficient order."""
    f = lincomb([(2, Monomial(2)), (-3, Monomial(1)), (1, Constant(4))])
    assert np.allclose(polynomial_coefficients(f), [2, -3, 4])
    assert polynomial_coefficients(ExpDelay(1.0)) is None


def test_delay_form(delay_denominator):
    """Confirm delay coefficients are extracted, and rejected for polynomials."""
    c1, c0, ce, tau = delay_form(delay_denominator)
    assert (c1, c0, ce, tau) == pytest.approx((1, -0.5 + 0.1j, -0.2, 0.7))
    assert delay_form(Monomial(1)) is None


def test_solve_raises_on_singular():
    """Confirm singular systems are reported with their evaluation point."""
    with pytest.raises(SingularAtPoint) as info:
        solve(np.zeros((2, 2)), np.ones(2), s=1j)
    assert info.value.s == 1j


def test_compensated_sum_is_order_independent():
    """Confirm summation does not depend on element order."""
    values = np.array([1e16, 1.0, -1e16, 1.0])
    assert compensated_sum(values) == 2.0
    assert compensated_sum(values[::-1]) == 2.0


def test_separation():
    """Confirm the minimum pairwise distance."""
    assert separation([0, 3, 1 + 1j]) == pytest.approx(np.sqrt(2))
    assert separation([5]) == np.inf


def test_array_encoding():
    """Confirm real arrays stay plain lists and complex ones use pairs."""
    assert encode_array(np.eye(2)) == [[1.0, 0.0], [0.0, 1.0]]
    z = np.array([1 + 2j, -1j])
    assert np.allclose(decode_array(encode_array(z), 1), z)
    with pytest.raises(ValueError):
        decode_array([[1.0]], 1)


def test_thread_count(monkeypatch):
    """Confirm the thread cap reads STRH2_THREADS and rejects bad values."""
    monkeypatch.setenv('STRH2_THREADS', '3')
    assert thread_count() == 3
    assert thread_count(2) == 2
    with pytest.raises(ValueError):
        thread_count(0)
