"""Scalar coefficient functions of the Laplace variable.

The four variants (constants, monomials, exponential delays and flat linear
combinations of those) are entire, closed under differentiation and under
s -> conj(f(conj(s))). All of them evaluate on scalars or numpy arrays.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np

from strh2.util import decode_complex, encode_complex


def _shaped(value, s):
    """Return a complex scalar for scalar s, an array otherwise."""
    if np.ndim(s) == 0:
        return complex(value)
    return np.asarray(value, dtype=complex)


class CoefficientFunction(ABC):
    """A scalar function of s multiplying a constant matrix."""

    @abstractmethod
    def __call__(self, s):
        """Evaluate the function at s."""

    @abstractmethod
    def derivative(self) -> CoefficientFunction:
        """Return the exact derivative."""

    @abstractmethod
    def conj_flip(self) -> CoefficientFunction:
        """Return g with g(s) = conj(f(conj(s)))."""

    @abstractmethod
    def to_json(self) -> dict:
        """Return the tag-and-payload encoding."""


@dataclass(frozen=True)
class Constant(CoefficientFunction):
    """s -> c."""

    value: complex

    def __post_init__(self):
        object.__setattr__(self, 'value', complex(self.value))

    def __call__(self, s):
        """Evaluate the function at s."""
        return _shaped(self.value * np.ones_like(s, dtype=complex), s)

    def derivative(self) -> CoefficientFunction:
        """Return Constant(0)."""
        return Constant(0)

    def conj_flip(self) -> CoefficientFunction:
        """Conjugate the constant."""
        return Constant(self.value.conjugate())

    def to_json(self) -> dict:
        """Return {"constant": {"re", "im"}}."""
        return {'constant': encode_complex(self.value)}


@dataclass(frozen=True)
class Monomial(CoefficientFunction):
    """s -> s**power."""

    power: int

    def __post_init__(self):
        if int(self.power) != self.power or self.power < 0:
            raise ValueError(f"Monomial power must be a nonnegative integer, got {self.power}")
        object.__setattr__(self, 'power', int(self.power))

    def __call__(self, s):
        """Evaluate the function at s."""
        return _shaped(np.asarray(s, dtype=complex) ** self.power, s)

    def derivative(self) -> CoefficientFunction:
        """Return k*s**(k-1)."""
        if self.power == 0:
            return Constant(0)
        return LinearCombination(((complex(self.power), Monomial(self.power - 1)),))

    def conj_flip(self) -> CoefficientFunction:
        """Monomials have real coefficients."""
        return self

    def to_json(self) -> dict:
        """Return {"monomial": k}."""
        return {'monomial': self.power}


@dataclass(frozen=True)
class ExpDelay(CoefficientFunction):
    """s -> exp(-tau*s)."""

    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"Delay must be positive, got {self.tau}")
        object.__setattr__(self, 'tau', float(self.tau))

    def __call__(self, s):
        """Evaluate the function at s."""
        return _shaped(np.exp(-self.tau * np.asarray(s, dtype=complex)), s)

    def derivative(self) -> CoefficientFunction:
        """Return -tau*exp(-tau*s)."""
        return LinearCombination(((complex(-self.tau), self),))

    def conj_flip(self) -> CoefficientFunction:
        """The delay is real."""
        return self

    def to_json(self) -> dict:
        """Return {"expdelay": tau}."""
        return {'expdelay': self.tau}


@dataclass(frozen=True)
class LinearCombination(CoefficientFunction):
    """s -> sum of weight * f(s); flat and nonempty."""

    terms: tuple

    def __post_init__(self):
        terms = tuple((complex(w), f) for w, f in self.terms)
        if not terms:
            raise ValueError("A linear combination needs at least one term")
        if any(isinstance(f, LinearCombination) for _, f in terms):
            raise ValueError("Nested linear combinations must be flattened, use lincomb()")
        object.__setattr__(self, 'terms', terms)

    def __call__(self, s):
        """Evaluate the function at s."""
        total = 0
        for w, f in self.terms:
            total = total + w * f(s)
        return _shaped(total, s)

    def derivative(self) -> CoefficientFunction:
        """Differentiate term by term."""
        return lincomb((w, f.derivative()) for w, f in self.terms)

    def conj_flip(self) -> CoefficientFunction:
        """Conjugate weights and flip every term."""
        return lincomb((w.conjugate(), f.conj_flip()) for w, f in self.terms)

    def to_json(self) -> dict:
        """Return {"lincomb": [[weight, f], ...]}."""
        return {'lincomb': [[encode_complex(w), f.to_json()] for w, f in self.terms]}


def lincomb(terms) -> LinearCombination:
    """Build a flat linear combination, distributing weights over nested ones."""
    flat = []
    for w, f in terms:
        if isinstance(f, LinearCombination):
            flat.extend((complex(w) * w2, f2) for w2, f2 in f.terms)
        else:
            flat.append((complex(w), f))
    return LinearCombination(tuple(flat))


def evaluate(f: CoefficientFunction, s):
    """Evaluate f at s."""
    return f(s)


def derivative(f: CoefficientFunction) -> CoefficientFunction:
    """Return the exact derivative of f."""
    return f.derivative()


def conj_flip(f: CoefficientFunction) -> CoefficientFunction:
    """Return s -> conj(f(conj(s)))."""
    return f.conj_flip()


def from_json(obj: dict) -> CoefficientFunction:
    """Decode the tag-and-payload encoding."""
    if len(obj) != 1:
        raise ValueError(f"Expected a single tag, got {sorted(obj)}")
    (tag, payload), = obj.items()
    if tag == 'constant':
        return Constant(decode_complex(payload))
    elif tag == 'monomial':
        return Monomial(payload)
    elif tag == 'expdelay':
        return ExpDelay(payload)
    elif tag == 'lincomb':
        return LinearCombination(tuple((decode_complex(w), from_json(f)) for w, f in payload))
    raise ValueError(f"Unsupported coefficient function: {tag}")


def _terms(f: CoefficientFunction):
    return f.terms if isinstance(f, LinearCombination) else ((1 + 0j, f),)


def polynomial_coefficients(f: CoefficientFunction) -> Optional[np.ndarray]:
    """Return highest-first coefficients if f is a polynomial in s, else None."""
    coeffs = np.zeros(1, dtype=complex)
    for w, term in _terms(f):
        if isinstance(term, Constant):
            power, weight = 0, w * term.value
        elif isinstance(term, Monomial):
            power, weight = term.power, w
        else:
            return None
        if power + 1 > coeffs.size:
            coeffs = np.concatenate([np.zeros(power + 1 - coeffs.size, dtype=complex), coeffs])
        coeffs[coeffs.size - 1 - power] += weight
    nonzero = np.flatnonzero(coeffs)
    return coeffs[nonzero[0]:] if nonzero.size else coeffs[-1:]


def delay_form(f: CoefficientFunction):
    """Return (c1, c0, ce, tau) if f(s) = c1*s + c0 + ce*exp(-tau*s), else None."""
    c1 = c0 = ce = 0j
    tau = None
    for w, term in _terms(f):
        if isinstance(term, Constant):
            c0 += w * term.value
        elif isinstance(term, Monomial) and term.power <= 1:
            if term.power == 1:
                c1 += w
            else:
                c0 += w
        elif isinstance(term, ExpDelay) and tau in (None, term.tau):
            tau = term.tau
            ce += w
        else:
            return None
    if tau is None or ce == 0:
        return None
    return c1, c0, ce, tau
