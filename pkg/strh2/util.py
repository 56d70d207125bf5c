"""Base functionality for linear solves, errors and serialization.

Distributed under the GNU General Public License v3
Copyright (C) 2022 NuMat Technologies
"""
from __future__ import annotations

import logging
import math
import os
from typing import Any

import numpy as np
from scipy import linalg

# Add logger to module
logger = logging.getLogger('strh2')

PIVOT_TOLERANCE = 1e-14


class Strh2Error(Exception):
    """Base class for numerical failures raised by strh2."""


class SingularAtPoint(Strh2Error):
    """The system matrix is (numerically) singular at an evaluation point."""

    def __init__(self, s=None):
        super().__init__(f"System matrix is singular at s = {s}")
        self.s = s


class NotDiagonalizable(Strh2Error):
    """Eigenvalues cluster below the separation tolerance."""


class MoreThanTwoTerms(Strh2Error):
    """More than two matrix terms that cannot be diagonalized simultaneously."""


class RepeatedRoot(Strh2Error):
    """A quadratic denominator has a double root."""


class CrossIndexCollision(Strh2Error):
    """Roots of different second-order denominators coincide."""


class DegenerateLeadingCoefficient(Strh2Error):
    """Polynomial leading coefficient vanishes."""


class NoConvergence(Strh2Error):
    """An iterative refinement failed to reach its tolerance."""


class BranchPointSingularity(Strh2Error):
    """Lambert W requested at (or too close to) a branch point."""


class UnstablePole(Strh2Error):
    """A reduced model has a pole in the closed right half-plane."""

    def __init__(self, pole):
        super().__init__(f"Pole {pole} is not in the open left half-plane")
        self.pole = pole


class NotASimpleZero(Strh2Error):
    """Residue requested at a point that is not a simple zero."""


class UnstableSystem(Strh2Error):
    """A full-order model fails its stability check."""


class DisjointnessViolation(Strh2Error):
    """Pole sets of different diagonal indices overlap."""


class TruncationNotConverged(Strh2Error):
    """The delay branch window reached its cap without meeting the tail rule."""


class UnsupportedStructure(Strh2Error):
    """Unknown structure tag."""


class LineSearchFailure(Strh2Error):
    """Armijo backtracking exhausted its halvings."""


class OptimizationFailed(Strh2Error):
    """No restart produced a finite, feasible reduced model."""


class StabilityCheckFailed(Strh2Error):
    """Generated delay models kept failing the stability verification."""


def factorize(matrix, s=None):
    """LU-factorize a square matrix, raising SingularAtPoint on tiny pivots."""
    matrix = np.asarray(matrix, dtype=complex)
    if not np.all(np.isfinite(matrix)):
        raise SingularAtPoint(s)
    scale = np.linalg.norm(matrix, np.inf)
    lu, piv = linalg.lu_factor(matrix, check_finite=False)
    if scale == 0 or np.min(np.abs(np.diag(lu))) <= PIVOT_TOLERANCE * scale:
        raise SingularAtPoint(s)
    return lu, piv


def solve(matrix, rhs, s=None, trans=0):
    """Solve `matrix x = rhs` (trans=2 for the conjugate transpose)."""
    return linalg.lu_solve(factorize(matrix, s), rhs, trans=trans, check_finite=False)


def batched_solve(matrices, rhs, conjugate_transpose=False):
    """Solve a stack of systems along the first axis."""
    if conjugate_transpose:
        matrices = np.conj(np.swapaxes(matrices, -1, -2))
    try:
        result = np.linalg.solve(matrices, rhs)
    except np.linalg.LinAlgError as e:
        raise SingularAtPoint() from e
    if not np.all(np.isfinite(result)):
        raise SingularAtPoint()
    return result


def hermitian(stack):
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(stack, -1, -2))


def compensated_sum(values) -> Any:
    """Sum along the first axis with correctly rounded (order-independent) totals."""
    values = np.asarray(values)
    flat = values.reshape(values.shape[0], -1)
    real = np.array([math.fsum(column) for column in flat.real.T])
    if np.iscomplexobj(values):
        imag = np.array([math.fsum(column) for column in flat.imag.T])
        total = real + 1j * imag
    else:
        total = real
    total = total.reshape(values.shape[1:])
    return total[()] if total.ndim == 0 else total


def separation(values) -> float:
    """Return the smallest pairwise distance, or inf for fewer than two values."""
    values = np.asarray(values).ravel()
    if values.size < 2:
        return math.inf
    gaps = np.abs(values[:, None] - values[None, :])
    gaps[np.diag_indices_from(gaps)] = math.inf
    return float(gaps.min())


def pole_order(values) -> np.ndarray:
    """Return indices sorting values by real part, then imaginary part."""
    values = np.asarray(values)
    return np.lexsort((values.imag, values.real))


def thread_count(threads=None) -> int:
    """Return the worker cap from the argument or the STRH2_THREADS variable."""
    if threads is None:
        threads = os.environ.get('STRH2_THREADS') or os.cpu_count() or 1
    try:
        threads = int(threads)
    except ValueError:
        raise ValueError(f"Invalid thread count: {threads}") from None
    if threads < 1:
        raise ValueError(f"Thread count must be positive, got {threads}")
    return threads


def encode_complex(z) -> dict:
    """Encode a complex scalar as a {"re", "im"} mapping."""
    z = complex(z)
    return {'re': z.real, 'im': z.imag}


def decode_complex(obj) -> complex:
    """Decode a {"re", "im"} mapping or a plain number."""
    if isinstance(obj, dict):
        return complex(obj['re'], obj.get('im', 0.0))
    return complex(obj)


def encode_array(array) -> list:
    """Encode an array as nested lists of reals, or of [re, im] pairs if complex."""
    array = np.asarray(array)
    if not np.iscomplexobj(array) or not np.any(array.imag):
        return np.asarray(array.real, dtype=float).tolist()
    return np.stack([array.real, array.imag], axis=-1).tolist()


def decode_array(obj, ndim: int) -> np.ndarray:
    """Decode an array with `ndim` dimensions written by encode_array."""
    array = np.asarray(obj, dtype=float)
    if array.ndim == ndim + 1 and array.shape[-1] == 2:
        return array[..., 0] + 1j * array[..., 1]
    if array.ndim != ndim:
        raise ValueError(f"Expected a {ndim}-dimensional array, got shape {array.shape}")
    return array
