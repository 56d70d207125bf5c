"""Full- and reduced-order models and their transfer functions.

Every model is a `TransferEvaluator`. Structured reduced models are
parameter-separable:

    H(s) = C(s) A(s)^-1 B(s),  A(s) = sum_i alpha_i(s) A_i  (likewise B, C)

and the diagonal ones additionally expose the pole-residue form
H(s) = sum_l c_l b_l^* / a_l(s).
"""
from __future__ import annotations

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from strh2 import scalarfun
from strh2.scalarfun import CoefficientFunction, Constant, ExpDelay, Monomial, lincomb
from strh2.spectra import PoleSet, delay_poles, denominator_poles
from strh2.util import (
    CrossIndexCollision,
    MoreThanTwoTerms,
    NotDiagonalizable,
    RepeatedRoot,
    SingularAtPoint,
    UnstablePole,
    UnstableSystem,
    batched_solve,
    decode_array,
    encode_array,
    factorize,
    pole_order,
    separation,
)

logger = logging.getLogger('strh2')

SEPARATION_TOLERANCE = 1e-8
NORMALITY_TOLERANCE = 1e-8
NEAR_NORMAL = 1e-4
STABILITY_MARGIN = 1e-12


class TransferEvaluator(ABC):
    """Anything that yields H(s) and H'(s) on the closed right half-plane."""

    @property
    @abstractmethod
    def shape(self) -> tuple:
        """Return (outputs, inputs)."""

    @abstractmethod
    def eval_transfer(self, s) -> np.ndarray:
        """Evaluate H(s) as a p x m matrix."""

    @abstractmethod
    def eval_transfer_derivative(self, s) -> np.ndarray:
        """Evaluate H'(s) as a p x m matrix."""

    def eval_transfer_many(self, points) -> np.ndarray:
        """Evaluate H at every point, stacked along the first axis."""
        return np.stack([self.eval_transfer(s) for s in np.ravel(points)])

    def eval_derivative_many(self, points) -> np.ndarray:
        """Evaluate H' at every point, stacked along the first axis."""
        return np.stack([self.eval_transfer_derivative(s) for s in np.ravel(points)])

    def frequency_scale(self) -> float:
        """Return a characteristic frequency (largest pole magnitude if known)."""
        return 1.0


class FunctionTransfer(TransferEvaluator):
    """Black-box transfer function from callables."""

    def __init__(self, function: Callable, derivative: Optional[Callable] = None,
                 shape=(1, 1), scale: float = 1.0):
        self.function = function
        self.derivative = derivative
        self._shape = tuple(shape)
        self.scale = scale

    @property
    def shape(self) -> tuple:
        """Return (outputs, inputs)."""
        return self._shape

    def eval_transfer(self, s) -> np.ndarray:
        """Evaluate H(s)."""
        return np.asarray(self.function(s), dtype=complex).reshape(self._shape)

    def eval_transfer_derivative(self, s) -> np.ndarray:
        """Evaluate H'(s)."""
        if self.derivative is None:
            raise ValueError("This black-box transfer function has no derivative")
        return np.asarray(self.derivative(s), dtype=complex).reshape(self._shape)

    def frequency_scale(self) -> float:
        """Return the user-supplied scale."""
        return self.scale


def _term_list(terms, name):
    terms = tuple((f, np.asarray(matrix)) for f, matrix in terms)
    if not terms:
        raise ValueError(f"{name} needs at least one term")
    for f, matrix in terms:
        if not isinstance(f, CoefficientFunction):
            raise ValueError(f"{name} coefficient {f} is not a CoefficientFunction")
        if matrix.ndim != 2:
            raise ValueError(f"{name} matrices must be 2-D, got shape {matrix.shape}")
    return terms


def _combine(terms, s):
    """sum_i f_i(s) M_i at a scalar s."""
    return sum(f(s) * matrix for f, matrix in terms)


def _combine_many(terms, points):
    """sum_i f_i(s) M_i stacked over points."""
    return sum(np.multiply.outer(np.asarray(f(points)), matrix) for f, matrix in terms)


class ParamSepModel(TransferEvaluator):
    """Parameter-separable model H(s) = C(s) A(s)^-1 B(s)."""

    kind = 'param_sep'

    def __init__(self, a_terms, b_terms, c_terms):
        self.a_terms = _term_list(a_terms, 'A(s)')
        self.b_terms = _term_list(b_terms, 'B(s)')
        self.c_terms = _term_list(c_terms, 'C(s)')
        r = self.a_terms[0][1].shape[0]
        if any(matrix.shape != (r, r) for _, matrix in self.a_terms):
            raise ValueError(f"A(s) matrices must all be {r} x {r}")
        m = self.b_terms[0][1].shape[1]
        if any(matrix.shape != (r, m) for _, matrix in self.b_terms):
            raise ValueError(f"B(s) matrices must all be {r} x {m}")
        p = self.c_terms[0][1].shape[0]
        if any(matrix.shape != (p, r) for _, matrix in self.c_terms):
            raise ValueError(f"C(s) matrices must all be {p} x {r}")
        self.order, self.inputs, self.outputs = r, m, p
        self._derivatives = tuple(tuple((f.derivative(), matrix) for f, matrix in terms)
                                  for terms in (self.a_terms, self.b_terms, self.c_terms))

    @classmethod
    def second_order(cls, M, E, K, B, C) -> ParamSepModel:
        """Build s^2 M + s E + K with constant input and output maps."""
        return cls([(Monomial(2), M), (Monomial(1), E), (Constant(1), K)],
                   [(Constant(1), B)], [(Constant(1), C)])

    @property
    def shape(self) -> tuple:
        """Return (outputs, inputs)."""
        return self.outputs, self.inputs

    def system_matrix(self, s) -> np.ndarray:
        """Return A(s)."""
        return _combine(self.a_terms, s)

    def input_matrix(self, s) -> np.ndarray:
        """Return B(s)."""
        return _combine(self.b_terms, s)

    def output_matrix(self, s) -> np.ndarray:
        """Return C(s)."""
        return _combine(self.c_terms, s)

    def stacks(self, points):
        """Return A, B and C stacked over points."""
        return (_combine_many(self.a_terms, points), _combine_many(self.b_terms, points),
                _combine_many(self.c_terms, points))

    def eval_transfer(self, s) -> np.ndarray:
        """Evaluate C(s) A(s)^-1 B(s) by one LU solve."""
        lu = factorize(self.system_matrix(s), s)
        return self.output_matrix(s) @ linalg.lu_solve(lu, self.input_matrix(s))

    def eval_transfer_derivative(self, s) -> np.ndarray:
        """Evaluate H'(s) = C'X + C A^-1 (B' - A'X) with X = A^-1 B."""
        da, db, dc = self._derivatives
        lu = factorize(self.system_matrix(s), s)
        x = linalg.lu_solve(lu, self.input_matrix(s))
        y = linalg.lu_solve(lu, _combine(db, s) - _combine(da, s) @ x)
        return _combine(dc, s) @ x + self.output_matrix(s) @ y

    def eval_transfer_many(self, points) -> np.ndarray:
        """Evaluate H at every point with batched solves."""
        points = np.ravel(points)
        a, b, c = self.stacks(points)
        try:
            return c @ batched_solve(a, b)
        except SingularAtPoint:
            return super().eval_transfer_many(points)

    def eval_derivative_many(self, points) -> np.ndarray:
        """Evaluate H' at every point with batched solves."""
        points = np.ravel(points)
        a, b, c = self.stacks(points)
        da, db, dc = (_combine_many(terms, points) for terms in self._derivatives)
        try:
            x = batched_solve(a, b)
            return dc @ x + c @ batched_solve(a, db - da @ x)
        except SingularAtPoint:
            return super().eval_derivative_many(points)

    def polynomial_matrices(self) -> Optional[list]:
        """Return [P_0, P_1, ...] with A(s) = sum_k s^k P_k, or None if not polynomial."""
        matrices: list = []
        for f, matrix in self.a_terms:
            coeffs = scalarfun.polynomial_coefficients(f)
            if coeffs is None:
                return None
            for power, weight in enumerate(coeffs[::-1]):
                while len(matrices) <= power:
                    matrices.append(np.zeros((self.order, self.order), dtype=complex))
                matrices[power] = matrices[power] + weight * matrix
        while len(matrices) > 1 and not np.any(matrices[-1]):
            matrices.pop()
        return matrices

    def poles(self) -> np.ndarray:
        """Return the finite zeros of det A(s) via a block companion linearization."""
        matrices = self.polynomial_matrices()
        if matrices is None:
            raise ValueError(f"{type(self).__name__} poles need a polynomial A(s)")
        degree, r = len(matrices) - 1, self.order
        if degree == 0:
            return np.array([], dtype=complex)
        lhs = np.eye(degree * r, dtype=complex)
        lhs[-r:, -r:] = matrices[-1]
        rhs = np.zeros((degree * r, degree * r), dtype=complex)
        rhs[:-r, r:] = np.eye((degree - 1) * r)
        for k in range(degree):
            rhs[-r:, k * r:(k + 1) * r] = -matrices[k]
        values = linalg.eigvals(rhs, lhs)
        values = values[np.isfinite(values)]
        return values[pole_order(values)]

    def frequency_scale(self) -> float:
        """Return the largest pole magnitude."""
        try:
            poles = self.poles()
        except ValueError:
            return 1.0
        return float(np.max(np.abs(poles))) if poles.size else 1.0

    def check_stability(self):
        """Raise UnstableSystem if a pole lies in the closed right half-plane."""
        poles = self.poles()
        if poles.size and poles.real.max() >= -STABILITY_MARGIN:
            raise UnstableSystem(f"Pole {poles[np.argmax(poles.real)]} is not stable")

    def to_json(self) -> dict:
        """Return the model file encoding."""
        return {
            'kind': self.kind,
            'a_terms': _encode_terms(self.a_terms),
            'b_terms': _encode_terms(self.b_terms),
            'c_terms': _encode_terms(self.c_terms),
        }


def _encode_terms(terms):
    return [{'coef': f.to_json(), 'matrix': encode_array(matrix)} for f, matrix in terms]


def _decode_terms(terms):
    return [(scalarfun.from_json(term['coef']), decode_array(term['matrix'], 2))
            for term in terms]


class StateSpaceFOM(ParamSepModel):
    """E x' = A x + A_tau x(t - tau) + B u, y = C x."""

    kind = 'state_space'

    def __init__(self, E, A, B, C, A_tau=None, tau=None):
        self.E, self.A = np.asarray(E, dtype=float), np.asarray(A, dtype=float)
        self.B, self.C = np.asarray(B, dtype=float), np.asarray(C, dtype=float)
        if (A_tau is None) != (tau is None):
            raise ValueError("A_tau and tau must be given together")
        a_terms = [(Monomial(1), self.E), (Constant(-1), self.A)]
        self.A_tau, self.tau = None, None
        if A_tau is not None:
            self.A_tau, self.tau = np.asarray(A_tau, dtype=float), float(tau)
            a_terms.append((lincomb([(-1, ExpDelay(self.tau))]), self.A_tau))
        super().__init__(a_terms, [(Constant(1), self.B)], [(Constant(1), self.C)])

    def poles(self) -> np.ndarray:
        """Return generalized eigenvalues of (A, E); delay-free models only."""
        if self.A_tau is not None:
            raise ValueError("Delay models have infinitely many poles")
        values = linalg.eigvals(self.A, self.E)
        return values[pole_order(values)]

    def frequency_scale(self) -> float:
        """Return the largest pole magnitude (of A + A_tau for delay models)."""
        if self.A_tau is None:
            return super().frequency_scale()
        values = linalg.eigvals(self.A + self.A_tau, self.E)
        return float(np.max(np.abs(values)))

    def check_stability(self):
        """Raise UnstableSystem unless every characteristic root is in the open LHP."""
        if self.A_tau is None:
            return super().check_stability()
        try:
            rom = to_delay_rom(self)
        except NotDiagonalizable:
            count = self._rhp_root_count()
            if count:
                raise UnstableSystem(f"{count} characteristic roots in the right half-plane")
            return
        try:
            rom.poles(window=1)
        except UnstablePole as e:
            raise UnstableSystem(str(e)) from e

    def _rhp_root_count(self, samples: int = 2048) -> int:
        """Count zeros of det(sE - A - exp(-tau s) A_tau) in the right half-plane."""
        e_inv = np.linalg.inv(self.E)
        radius = 1 + np.linalg.norm(e_inv @ self.A, 2) + np.linalg.norm(e_inv @ self.A_tau, 2)
        while True:
            t = np.linspace(0, 1, samples, endpoint=False)
            path = np.concatenate([
                radius * (t - 1j),
                radius * (1 + 1j * (2 * t - 1)),
                radius * ((1 - t) + 1j),
                radius * 1j * (1 - 2 * t),
            ])
            path = np.append(path, path[0])
            values = np.linalg.det(_combine_many(self.a_terms, path))
            if np.min(np.abs(values)) == 0:
                return 1
            steps = np.diff(np.unwrap(np.angle(values)))
            if np.max(np.abs(steps)) < np.pi / 4 or samples >= 2**16:
                break
            samples *= 2
        return int(round(np.sum(steps) / (2 * np.pi)))

    def to_json(self) -> dict:
        """Return the model file encoding."""
        d = {'kind': self.kind, 'E': encode_array(self.E), 'A': encode_array(self.A),
             'B': encode_array(self.B), 'C': encode_array(self.C)}
        if self.A_tau is not None:
            d.update(A_tau=encode_array(self.A_tau), tau=self.tau)
        return d


class DiagonalStructuredROM(ParamSepModel):
    """Diagonal A(s) = sum_i alpha_i(s) diag(d_i) with constant B and C."""

    kind = 'diagonal'

    def __init__(self, a_terms, B, C):
        diagonals = [np.asarray(d).ravel() for _, d in a_terms]
        self.diagonals = np.array(diagonals)
        self.B, self.C = np.asarray(B), np.asarray(C)
        super().__init__([(f, np.diag(d)) for (f, _), d in zip(a_terms, diagonals)],
                         [(Constant(1), self.B)], [(Constant(1), self.C)])

    @classmethod
    def from_poles(cls, poles, B, C) -> DiagonalStructuredROM:
        """Build a_l(s) = s - lambda_l."""
        poles = np.asarray(poles)
        return cls([(Monomial(1), np.ones(poles.size)), (Constant(-1), poles)], B, C)

    @property
    def b_vectors(self) -> np.ndarray:
        """Rows b_l (conjugated rows of B)."""
        return np.conj(self.B)

    @property
    def c_vectors(self) -> np.ndarray:
        """Rows c_l (columns of C)."""
        return np.asarray(self.C).T

    def denominators(self) -> list:
        """Return a_l(s) = sum_i alpha_i(s) (A_i)_ll for every l."""
        return [lincomb((d[l], f) for (f, _), d in zip(self.a_terms, self.diagonals))
                for l in range(self.order)]

    def poles(self, window: int = 8) -> np.ndarray:
        """Return all poles (delay denominators within the branch window)."""
        if self.polynomial_matrices() is not None:
            return super().poles()
        sets = pole_residue_form(self, window).pole_sets
        values = np.concatenate([pole_set.poles for pole_set in sets])
        return values[pole_order(values)]

    def to_json(self) -> dict:
        """Return the model file encoding."""
        return {
            'kind': self.kind,
            'a_terms': [{'coef': f.to_json(), 'diag': encode_array(d)}
                        for (f, _), d in zip(self.a_terms, self.diagonals)],
            'B': encode_array(self.B),
            'C': encode_array(self.C),
        }


class SecondOrderROM(DiagonalStructuredROM):
    """Modally damped s^2 I + s diag(e) + diag(k)."""

    kind = 'second_order'

    def __init__(self, e, k, B, C):
        self.e = np.asarray(e, dtype=float).ravel()
        self.k = np.asarray(k, dtype=float).ravel()
        if np.any(self.e <= 0) or np.any(self.k <= 0):
            raise ValueError(f"Damping and stiffness must be positive, got {self.e}, {self.k}")
        super().__init__([(Monomial(2), np.ones(self.e.size)), (Monomial(1), self.e),
                          (Constant(1), self.k)], np.asarray(B, dtype=float),
                         np.asarray(C, dtype=float))

    def to_json(self) -> dict:
        """Return the model file encoding."""
        return {'kind': self.kind, 'e': encode_array(self.e), 'k': encode_array(self.k),
                'B': encode_array(self.B), 'C': encode_array(self.C)}


class DelayROM(DiagonalStructuredROM):
    """a_i(s) = s - mu_i - sigma_i exp(-tau s)."""

    kind = 'delay'

    def __init__(self, mu, sigma, tau, B, C):
        if not tau > 0:
            raise ValueError(f"Delay must be positive, got {tau}")
        self.mu = np.asarray(mu, dtype=complex).ravel()
        self.sigma = np.asarray(sigma, dtype=complex).ravel()
        self.tau = float(tau)
        super().__init__([(Monomial(1), np.ones(self.mu.size)), (Constant(-1), self.mu),
                          (lincomb([(-1, ExpDelay(self.tau))]), self.sigma)], B, C)

    def pole_sets(self, window: int) -> list:
        """Return delay_poles for every index."""
        return [delay_poles(mu, sigma, self.tau, window, index=i)
                for i, (mu, sigma) in enumerate(zip(self.mu, self.sigma))]

    def poles(self, window: int = 8) -> np.ndarray:
        """Return the poles on branches -window..window."""
        values = np.concatenate([pole_set.poles for pole_set in self.pole_sets(window)])
        return values[pole_order(values)]

    def check_stability(self):
        """Raise UnstablePole if a principal-branch pole is not stable."""
        self.pole_sets(1)

    def frequency_scale(self) -> float:
        """Return max |mu| + |sigma|."""
        return float(np.max(np.abs(self.mu) + np.abs(self.sigma)))

    def to_json(self) -> dict:
        """Return the model file encoding."""
        return {'kind': self.kind, 'mu': encode_array(self.mu), 'sigma': encode_array(self.sigma),
                'tau': self.tau, 'B': encode_array(self.B), 'C': encode_array(self.C)}


class PHModel(ParamSepModel):
    """Port-Hamiltonian x' = (J - R) x + B u, y = B^T x."""

    kind = 'ph'

    def __init__(self, J, R, B):
        self.J, self.R = np.asarray(J, dtype=float), np.asarray(R, dtype=float)
        self.B = np.asarray(B, dtype=float)
        scale = max(1.0, np.linalg.norm(self.J), np.linalg.norm(self.R))
        if np.linalg.norm(self.J + self.J.T) > 1e-12 * scale:
            raise ValueError("J must be skew-symmetric")
        if np.linalg.norm(self.R - self.R.T) > 1e-12 * scale:
            raise ValueError("R must be symmetric")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")
        r = self.J.shape[0]
        super().__init__([(Monomial(1), np.eye(r)), (Constant(-1), self.J - self.R)],
                         [(Constant(1), self.B)], [(Constant(1), self.B.T)])

    def to_json(self) -> dict:
        """Return the model file encoding."""
        return {'kind': self.kind, 'J': encode_array(self.J), 'R': encode_array(self.R),
                'B': encode_array(self.B)}


@dataclass
class PoleResidueForm:
    """Per-index denominators, pole sets and residue directions of a diagonal model."""

    denominators: list
    pole_sets: list
    b: np.ndarray
    c: np.ndarray

    def transfer(self, s) -> np.ndarray:
        """Evaluate sum_l c_l b_l^* / a_l(s)."""
        return sum(np.outer(c, np.conj(b)) / a(s)
                   for a, b, c in zip(self.denominators, self.b, self.c))


def pole_residue_form(rom: DiagonalStructuredROM, window: int = 8) -> PoleResidueForm:
    """Return the pole-residue data of a diagonal model."""
    denominators = rom.denominators()
    sets = [denominator_poles(a, index=l, window=window) for l, a in enumerate(denominators)]
    return PoleResidueForm(denominators, sets, rom.b_vectors, rom.c_vectors)


def eval_transfer(model: TransferEvaluator, s) -> np.ndarray:
    """Evaluate H(s)."""
    return model.eval_transfer(s)


def eval_transfer_derivative(model: TransferEvaluator, s) -> np.ndarray:
    """Evaluate H'(s)."""
    return model.eval_transfer_derivative(s)


def _normalize_columns(T) -> np.ndarray:
    """Scale columns to unit norm with first nonzero entry real positive."""
    T = np.array(T, dtype=complex)
    for j in range(T.shape[1]):
        column = T[:, j] / np.linalg.norm(T[:, j])
        lead = column[np.flatnonzero(np.abs(column) > 1e-12 * np.abs(column).max())[0]]
        T[:, j] = column * np.conj(lead) / abs(lead)
    return T


def _check_separation(values, what):
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise NotDiagonalizable(f"{what} has infinite eigenvalues")
    tolerance = SEPARATION_TOLERANCE * max(np.abs(values).max(), np.finfo(float).tiny)
    if separation(values) <= tolerance:
        raise NotDiagonalizable(f"{what} has clustered eigenvalues {values}")


def _constant_io(model: ParamSepModel):
    if len(model.b_terms) != 1 or len(model.c_terms) != 1:
        raise ValueError("Diagonal forms need a single input and a single output term")
    (fb, B), (fc, C) = model.b_terms[0], model.c_terms[0]
    if not isinstance(fb, Constant) or not isinstance(fc, Constant):
        raise ValueError("Diagonal forms need constant input and output maps")
    return fb.value * B, fc.value * C


def to_diagonal(model: ParamSepModel):
    """Return (DiagonalStructuredROM, T, S) with S^* A_i T diagonal and S^* A_1 T = I."""
    if isinstance(model, DiagonalStructuredROM):
        eye = np.eye(model.order)
        return model, eye, eye
    if isinstance(model, StateSpaceFOM) and model.A_tau is not None:
        raise ValueError("Delay models are diagonalized with to_delay_rom")
    B, C = _constant_io(model)
    matrices = [np.asarray(matrix, dtype=complex) for _, matrix in model.a_terms]
    functions = [f for f, _ in model.a_terms]
    r = model.order
    if all(np.count_nonzero(matrix - np.diag(np.diag(matrix))) == 0 for matrix in matrices):
        eye = np.eye(r)
        return DiagonalStructuredROM(list(zip(functions, map(np.diag, matrices))), B, C), eye, eye
    pivot = next((i for i, matrix in enumerate(matrices) if np.linalg.cond(matrix) < 1e12), None)
    if pivot is None:
        raise NotDiagonalizable("No invertible matrix term to normalize against")
    others = [matrix for i, matrix in enumerate(matrices) if i != pivot]
    combined = sum((1 + k / np.sqrt(2)) * matrix for k, matrix in enumerate(others))
    if isinstance(combined, int):
        combined = np.zeros((r, r), dtype=complex)
    values, T = linalg.eig(combined, matrices[pivot])
    _check_separation(values, 'The pencil')
    order = pole_order(values)
    T = _normalize_columns(T[:, order])
    S_star = np.linalg.solve(matrices[pivot] @ T, np.eye(r))
    projected = [S_star @ matrix @ T for matrix in matrices]
    for matrix, original in zip(projected, matrices):
        offdiag = np.linalg.norm(matrix - np.diag(np.diag(matrix)))
        if offdiag > 1e-8 * max(1.0, np.linalg.norm(matrix)):
            if len(matrices) > 2:
                raise MoreThanTwoTerms("Matrix terms are not simultaneously diagonalizable")
            raise NotDiagonalizable(f"Eigenvectors too ill-conditioned ({offdiag})")
    diagonals = [np.diag(matrix) for matrix in projected]
    rom = DiagonalStructuredROM(list(zip(functions, diagonals)), S_star @ B, C @ T)
    _verify_equivalent(model, rom)
    return rom, T, S_star.conj().T


def _verify_equivalent(model, rom, samples=(0.37, 1.0, 2.9)):
    scale = model.frequency_scale()
    for x in samples:
        s = 1j * scale * x
        try:
            expected = model.eval_transfer(s)
        except SingularAtPoint:
            continue
        actual = rom.eval_transfer(s)
        if np.linalg.norm(actual - expected) > 1e-8 * (1 + np.linalg.norm(expected)):
            raise NotDiagonalizable("Diagonal form does not reproduce the transfer function")


def to_second_order(model: ParamSepModel) -> SecondOrderROM:
    """Modal form of a modally damped s^2 M + s E + K model."""
    matrices = model.polynomial_matrices()
    if matrices is None or len(matrices) != 3:
        raise ValueError("to_second_order needs a quadratic A(s)")
    K, E, M = (np.real_if_close(matrix) for matrix in matrices)
    B, C = _constant_io(model)
    values, phi = linalg.eigh(K, M)
    damping = phi.T @ E @ phi
    if np.linalg.norm(damping - np.diag(np.diag(damping))) > 1e-8 * np.linalg.norm(damping):
        raise NotDiagonalizable("Model is not modally damped")
    return SecondOrderROM(np.diag(damping), values, phi.T @ np.real(B), np.real(C) @ phi)


def to_delay_rom(model: StateSpaceFOM) -> DelayROM:
    """Modal form of a delay model whose E^-1 A and E^-1 A_tau diagonalize together."""
    if model.A_tau is None:
        raise ValueError("to_delay_rom needs a delay model")
    A = np.linalg.solve(model.E, model.A)
    A_tau = np.linalg.solve(model.E, model.A_tau)
    values, T = linalg.eig(A)
    _check_separation(values, 'E^-1 A')
    order = pole_order(values)
    T = _normalize_columns(T[:, order])
    T_inv = np.linalg.inv(T)
    delayed = T_inv @ A_tau @ T
    if np.linalg.norm(delayed - np.diag(np.diag(delayed))) > 1e-8 * max(
            1.0, np.linalg.norm(delayed)):
        raise NotDiagonalizable("A and A_tau are not simultaneously diagonalizable")
    B = T_inv @ np.linalg.solve(model.E, model.B)
    return DelayROM(values[order], np.diag(delayed), model.tau, B, model.C @ T)


def second_order_factorization(rom: SecondOrderROM):
    """Return (lambda_plus, lambda_minus) with s^2 + e s + k = (s - l+)(s - l-)."""
    plus = np.empty(rom.order, dtype=complex)
    minus = np.empty(rom.order, dtype=complex)
    for l, (e, k) in enumerate(zip(rom.e, rom.k)):
        disc = e * e - 4 * k
        if abs(disc) <= 1e-10 * max(e * e, 4 * k):
            raise RepeatedRoot(f"s^2 + {e} s + {k} has a double root")
        if disc > 0:
            q = -(e + np.sqrt(disc)) / 2
            roots = np.array([k / q, q], dtype=complex)
        else:
            root = complex(-e / 2, np.sqrt(-disc) / 2)
            roots = np.array([root, root.conjugate()])
        roots = roots[np.lexsort((-roots.real, -roots.imag))]
        plus[l], minus[l] = roots
    values = np.concatenate([plus, minus])
    if separation(values) <= SEPARATION_TOLERANCE * np.abs(values).max():
        raise CrossIndexCollision(f"Second-order roots collide: {values}")
    return plus, minus


@dataclass
class PHModalData:
    """Eigen-data of J - R with the derived tangential directions."""

    poles: np.ndarray
    T: np.ndarray
    S: np.ndarray
    b: np.ndarray
    c: np.ndarray
    normal: bool

    @property
    def t(self) -> np.ndarray:
        """Rows t_i (columns of T)."""
        return self.T.T

    @property
    def s(self) -> np.ndarray:
        """Rows s_i (columns of T^-*)."""
        return self.S.T


def _commutator_ratio(A) -> float:
    A = np.asarray(A)
    commutator = A @ A.conj().T - A.conj().T @ A
    scale = np.linalg.norm(A) ** 2
    return float(np.linalg.norm(commutator) / scale) if scale else 0.0


def is_normal(A) -> bool:
    """Return True if the commutator A A^* - A^* A is negligible."""
    return _commutator_ratio(A) <= NORMALITY_TOLERANCE


def ph_modal_data(model: PHModel, transform=None) -> PHModalData:
    """Eigen-decompose J - R; a unitary T is used when J - R is normal.

    `transform` overrides the eigenvector matrix (e.g. rescaled columns); it
    must diagonalize J - R.
    """
    A = model.J - model.R
    normal = is_normal(A)
    if not normal and _commutator_ratio(A) < NEAR_NORMAL:
        logger.warning("J - R is nearly normal, eigenvectors may be ill conditioned")
    if transform is not None:
        T = np.asarray(transform, dtype=complex)
        values = np.diag(np.linalg.solve(T, A @ T))
    elif normal:
        schur, T = linalg.schur(A.astype(complex), output='complex')
        values = np.diag(schur)
    else:
        values, T = linalg.eig(A)
    _check_separation(values, 'J - R')
    if transform is None:
        order = pole_order(values)
        values, T = values[order], _normalize_columns(T[:, order])
    S = np.linalg.solve(T.conj().T, np.eye(model.order))
    return PHModalData(values, T, S, S.T @ model.B, T.T @ model.B, normal)


def model_from_json(d: dict) -> ParamSepModel:
    """Decode a model file mapping."""
    kind = d.get('kind')
    if kind == 'state_space':
        delay = {'A_tau': decode_array(d['A_tau'], 2), 'tau': d['tau']} if 'A_tau' in d else {}
        return StateSpaceFOM(*(decode_array(d[key], 2) for key in 'EABC'), **delay)
    elif kind == 'second_order':
        return SecondOrderROM(decode_array(d['e'], 1), decode_array(d['k'], 1),
                              decode_array(d['B'], 2), decode_array(d['C'], 2))
    elif kind == 'ph':
        return PHModel(*(decode_array(d[key], 2) for key in 'JRB'))
    elif kind == 'delay':
        return DelayROM(decode_array(d['mu'], 1), decode_array(d['sigma'], 1), d['tau'],
                        decode_array(d['B'], 2), decode_array(d['C'], 2))
    elif kind == 'diagonal':
        return DiagonalStructuredROM(
            [(scalarfun.from_json(t['coef']), decode_array(t['diag'], 1)) for t in d['a_terms']],
            decode_array(d['B'], 2), decode_array(d['C'], 2))
    elif kind == 'param_sep':
        return ParamSepModel(*(_decode_terms(d[key]) for key in ('a_terms', 'b_terms', 'c_terms')))
    raise ValueError(f"Unsupported model kind: {kind}")


def dumps(model: ParamSepModel) -> str:
    """Serialize a model deterministically."""
    return json.dumps(model.to_json(), indent=2, sort_keys=True)


def load_model(path) -> ParamSepModel:
    """Read a model file."""
    with open(path) as in_file:
        return model_from_json(json.load(in_file))


def save_model(model: ParamSepModel, path):
    """Write a model file."""
    with open(path, 'w') as out_file:
        out_file.write(dumps(model) + '\n')
