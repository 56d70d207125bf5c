"""Root finding, Lambert W, delay pole enumeration and residues at simple zeros."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from strh2.scalarfun import CoefficientFunction, delay_form, polynomial_coefficients
from strh2.util import (
    BranchPointSingularity,
    DegenerateLeadingCoefficient,
    NoConvergence,
    NotASimpleZero,
    UnstablePole,
    pole_order,
    separation,
)

logger = logging.getLogger('strh2')

ZERO_TOLERANCE = 1e-10
DUPLICATE_TOLERANCE = 1e-9
HALLEY_ITERATIONS = 50


@dataclass(frozen=True)
class PoleSet:
    """Zeros of one diagonal denominator, sorted by (Re, Im)."""

    index: int
    poles: np.ndarray
    branches: np.ndarray
    window: int = 0
    tail: float = 0.0

    def __len__(self):
        """Return the number of poles."""
        return len(self.poles)


@dataclass(frozen=True)
class Analytic:
    """An analytic function with as many derivatives as a residue formula needs."""

    value: Callable
    derivatives: tuple = ()

    def __call__(self, s):
        """Evaluate the function."""
        return self.value(s)

    def diff(self, order: int, s):
        """Evaluate the derivative of the given order (zero if unknown and constant)."""
        if order == 0:
            return self.value(s)
        if order > len(self.derivatives):
            raise ValueError(f"Derivative of order {order} not available")
        return self.derivatives[order - 1](s)


def as_analytic(f) -> Analytic:
    """Wrap a coefficient function (derivatives from the algebra) or a plain callable."""
    if isinstance(f, Analytic):
        return f
    if isinstance(f, CoefficientFunction):
        d1 = f.derivative()
        return Analytic(f, (d1, d1.derivative()))
    if callable(f):
        return Analytic(f)
    return Analytic(lambda s, c=complex(f): c + 0 * s, (lambda s: 0 * s, lambda s: 0 * s))


def polynomial_roots(coeffs) -> np.ndarray:
    """Return the roots of a polynomial with highest-first coefficients."""
    coeffs = np.asarray(coeffs, dtype=complex)
    if coeffs.ndim != 1 or coeffs.size < 2:
        raise ValueError(f"Need a polynomial of degree >= 1, got {coeffs}")
    norm = np.linalg.norm(coeffs)
    if abs(coeffs[0]) <= 1e-14 * norm:
        raise DegenerateLeadingCoefficient(f"Leading coefficient of {coeffs} vanishes")
    roots = np.roots(coeffs).astype(complex)
    dcoeffs = np.polyder(coeffs)
    for _ in range(2):
        slope = np.polyval(dcoeffs, roots)
        step = np.where(slope != 0, np.polyval(coeffs, roots) / np.where(slope != 0, slope, 1), 0)
        roots = roots - step
    residual = np.abs(np.polyval(coeffs, roots))
    scale = norm * np.maximum(1, np.abs(roots)) ** (coeffs.size - 1)
    if np.any(residual > 1e-9 * scale):
        raise NoConvergence(f"Polynomial roots of {coeffs} failed verification")
    return roots[pole_order(roots)]


def _halley(w, z):
    """Polish w*exp(w) = z by Halley steps; return the refined values and a mask."""
    w = np.array(w, dtype=complex)
    for _ in range(HALLEY_ITERATIONS):
        ew = np.exp(w)
        f = w * ew - z
        wp1 = w + 1
        step = f / (ew * wp1 - (w + 2) * f / (2 * wp1))
        w = w - step
        if np.all(np.abs(step) <= 1e-15 * (1 + np.abs(w))):
            break
    error = np.abs(w * np.exp(w) - z)
    return w, error <= 1e-12 * np.abs(z) * (1 + np.abs(w))


def lambert_w_many(branches, z: complex) -> np.ndarray:
    """Evaluate W_j(z) for an array of branches j (z != 0, off the branch point)."""
    branches = np.asarray(branches, dtype=int)
    z = complex(z)
    if z == 0:
        raise BranchPointSingularity("Lambert W needs z != 0 on nonprincipal branches")
    start = special.lambertw(z, k=branches)
    w, ok = _halley(start, z)
    if not np.all(ok):
        raise NoConvergence(f"Lambert W did not converge for z = {z} on {branches[~ok]}")
    return w


def lambert_w(branch: int, z: complex) -> complex:
    """Return w on branch j with w*exp(w) = z."""
    z = complex(z)
    if z == 0:
        if branch == 0:
            return 0j
        raise BranchPointSingularity(f"W_{branch} is singular at z = 0")
    if branch in (0, -1) and abs(z + np.exp(-1)) < 1e-14:
        raise BranchPointSingularity(f"z = {z} is at the branch point -1/e")
    return complex(lambert_w_many([branch], z)[0])


def delay_poles(mu: complex, sigma: complex, tau: float, window: int, index: int = 0) -> PoleSet:
    """Enumerate zeros of s - mu - sigma*exp(-tau*s) on Lambert W branches -J..J.

    For real z < 0 the labels run over +-1..+-J so the set stays closed under
    conjugation.
    """
    if not tau > 0:
        raise ValueError(f"Delay must be positive, got {tau}")
    if window < 0:
        raise ValueError(f"Branch window must be nonnegative, got {window}")
    mu, sigma = complex(mu), complex(sigma)
    if sigma == 0:
        poles, branches = np.array([mu]), np.array([0])
    else:
        z = tau * sigma * np.exp(-tau * mu)
        if z.imag == 0 and z.real < 0:
            # on the cut W_k and W_{-1-k} are conjugate, labelled k + 1 and -(k + 1)
            half = np.arange(max(window, 1))
            lambert = np.concatenate([-1 - half[::-1], half])
            branches = np.concatenate([-1 - half[::-1], half + 1])
        else:
            lambert = branches = np.arange(-window, window + 1)
        if abs(z + np.exp(-1)) < 1e-14:
            logger.warning(f"Skipping branches 0 and -1 at the Lambert W branch point z = {z}")
            keep = (lambert != 0) & (lambert != -1)
            lambert, branches = lambert[keep], branches[keep]
        poles = mu + lambert_w_many(lambert, z) / tau
        for _ in range(2):
            delayed = sigma * np.exp(-tau * poles)
            poles = poles - (poles - mu - delayed) / (1 + tau * delayed)
        delayed = sigma * np.exp(-tau * poles)
        residual = np.abs(poles - mu - delayed)
        if np.any(residual > ZERO_TOLERANCE * (1 + np.abs(poles))):
            raise NoConvergence(f"Delay poles of (mu={mu}, sigma={sigma}) failed verification")
        if np.any(np.abs(1 + tau * delayed) <= ZERO_TOLERANCE * (1 + np.abs(poles))):
            raise NotASimpleZero(f"Double delay pole for mu={mu}, sigma={sigma}, tau={tau}")
    unstable = poles[poles.real >= 0]
    if unstable.size:
        raise UnstablePole(unstable[np.argmax(unstable.real)])
    order = pole_order(poles)
    return PoleSet(index, poles[order], branches[order], window=window)


def denominator_poles(a: CoefficientFunction, index: int = 0, window: int = 8) -> PoleSet:
    """Return the stable simple zeros of a polynomial or single-delay denominator."""
    coeffs = polynomial_coefficients(a)
    if coeffs is not None:
        poles = polynomial_roots(coeffs)
        unstable = poles[poles.real >= 0]
        if unstable.size:
            raise UnstablePole(unstable[np.argmax(unstable.real)])
        slope = np.polyval(np.polyder(coeffs), poles)
        if np.any(np.abs(slope) <= ZERO_TOLERANCE * (1 + np.abs(poles))):
            raise NotASimpleZero(f"Denominator {a} has a multiple zero")
        if separation(poles) <= DUPLICATE_TOLERANCE:
            raise NotASimpleZero(f"Denominator {a} has clustered zeros")
        return PoleSet(index, poles, np.zeros(poles.size, dtype=int))
    form = delay_form(a)
    if form is None or form[0] == 0:
        raise ValueError(f"Cannot locate the zeros of {a}")
    c1, c0, ce, tau = form
    return delay_poles(-c0 / c1, -ce / c1, tau, window, index=index)


def _check_simple(h: Analytic, c):
    if abs(h(c)) > ZERO_TOLERANCE * (1 + abs(c)):
        raise NotASimpleZero(f"h({c}) = {h(c)} is not zero")
    slope = h.diff(1, c)
    if abs(slope) <= ZERO_TOLERANCE * (1 + abs(c)):
        raise NotASimpleZero(f"h'({c}) vanishes")
    return slope


def residue_simple(g, h, c: complex) -> complex:
    """Residue of g/h at a simple zero c of h: g(c)/h'(c)."""
    g, h = as_analytic(g), as_analytic(h)
    return complex(g(c) / _check_simple(h, c))


def residue_double(g, h, c: complex) -> complex:
    """Residue of g/h**2 at a simple zero c of h."""
    g, h = as_analytic(g), as_analytic(h)
    slope = _check_simple(h, c)
    return complex(g.diff(1, c) / slope**2 - g(c) * h.diff(2, c) / slope**3)
