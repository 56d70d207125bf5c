"""Squared H2 errors by quadrature, Gramians and residue sums."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Union

import numpy as np
from scipy import linalg

from strh2.sysmodel import (
    DiagonalStructuredROM,
    ParamSepModel,
    PoleResidueForm,
    StateSpaceFOM,
    TransferEvaluator,
    pole_residue_form,
)
from strh2.util import UnstableSystem, compensated_sum

logger = logging.getLogger('strh2')

DEFAULT_NODES = 1024
DELAY_NODES = 4096
KRONECKER_LIMIT = 40


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """Quadrature nodes on the imaginary axis with weights for d(omega)."""

    nodes: np.ndarray
    weights: np.ndarray
    tail_bound: float = 0.0
    decay_order: int = 2

    @cached_property
    def points(self) -> np.ndarray:
        """Return the nodes i*omega_k."""
        return 1j * self.nodes

    def __len__(self):
        """Return the number of nodes."""
        return self.nodes.size

    def integrate(self, values):
        """Return (1/2pi) sum_k w_k values_k, summed order-independently."""
        values = np.asarray(values)
        weights = self.weights.reshape((-1,) + (1,) * (values.ndim - 1))
        return compensated_sum(weights * values) / (2 * math.pi)


@dataclass(frozen=True)
class H2Estimate:
    """A squared H2 error with the tail uncertainty of its grid."""

    value: float
    uncertainty: float

    def __float__(self):
        """Return the estimate."""
        return self.value


def build_grid(half_width: float, nodes: int, decay_order: int = 2) -> FrequencyGrid:
    """Fejer-type grid in theta mapped to the real line by omega = half_width * tan(theta).

    The rule is computed on the positive half and mirrored, so the grid is
    exactly symmetric and never contains omega = 0.
    """
    if not half_width > 0:
        raise ValueError(f"Grid half width must be positive, got {half_width}")
    if nodes < 16 or nodes % 2:
        raise ValueError(f"Grid needs an even number of nodes >= 16, got {nodes}")
    if decay_order < 2:
        raise ValueError(f"Decay order must be at least 2, got {decay_order}")
    n = nodes + 1
    k = np.arange(1, nodes // 2 + 1)
    angle = k * np.pi / n
    j = np.arange(1, n // 2 + 1)
    series = np.sin(np.outer(angle, 2 * j - 1)) @ (1 / (2 * j - 1))
    x_weights = 4 / n * np.sin(angle) * series
    theta = np.pi / 2 * np.cos(angle)
    omega = half_width * np.tan(theta)
    weights = x_weights * np.pi / 2 * half_width / np.cos(theta) ** 2
    order = np.argsort(omega)
    omega, weights = omega[order], weights[order]
    tail = omega[-1] ** (1 - decay_order) / ((decay_order - 1) * np.pi)
    return FrequencyGrid(np.concatenate([-omega[::-1], omega]),
                         np.concatenate([weights[::-1], weights]), float(tail), decay_order)


def custom_grid(nodes, weights, tail_bound: float = 0.0, decay_order: int = 2) -> FrequencyGrid:
    """Wrap user-supplied nodes and weights (any measure on the imaginary axis)."""
    nodes = np.asarray(nodes, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if nodes.shape != weights.shape or not nodes.size:
        raise ValueError(f"Need matching nonempty node/weight lists, "
                         f"got {nodes.size} and {weights.size}")
    if np.any(np.diff(nodes) <= 0):
        raise ValueError("Grid nodes must be strictly increasing")
    if np.any(weights <= 0):
        raise ValueError("Grid weights must be positive")
    return FrequencyGrid(nodes, weights, float(tail_bound), decay_order)


def is_delay(model: TransferEvaluator) -> bool:
    """Return True for parameter-separable models with exponential delay terms."""
    return isinstance(model, ParamSepModel) and model.polynomial_matrices() is None


def default_grid(fom: TransferEvaluator, rom: Optional[TransferEvaluator] = None,
                 nodes: Optional[int] = None, half_width: Optional[float] = None,
                 decay_order: int = 2) -> FrequencyGrid:
    """Build the default grid: half width 10x the largest pole magnitude."""
    if half_width is None:
        half_width = 10 * max(m.frequency_scale() for m in (fom, rom) if m is not None)
    if nodes is None:
        delay = any(is_delay(m) for m in (fom, rom) if m is not None)
        nodes = DELAY_NODES if delay else DEFAULT_NODES
    logger.debug(f"Quadrature grid with {nodes} nodes and half width {half_width:.4g}")
    return build_grid(half_width, nodes, decay_order)


class Sampled(TransferEvaluator):
    """A transfer function memoized on one grid."""

    def __init__(self, model: TransferEvaluator, grid: FrequencyGrid):
        self.model = model
        self.grid = grid

    @property
    def shape(self) -> tuple:
        """Return (outputs, inputs)."""
        return self.model.shape

    @cached_property
    def samples(self) -> np.ndarray:
        """Return H(i*omega_k) for every node."""
        return self.model.eval_transfer_many(self.grid.points)

    def eval_transfer(self, s) -> np.ndarray:
        """Evaluate H(s)."""
        return self.model.eval_transfer(s)

    def eval_transfer_derivative(self, s) -> np.ndarray:
        """Evaluate H'(s)."""
        return self.model.eval_transfer_derivative(s)

    def eval_transfer_many(self, points) -> np.ndarray:
        """Return cached samples on the grid, evaluate elsewhere."""
        points = np.ravel(points)
        if points.shape == self.grid.points.shape and np.array_equal(points, self.grid.points):
            return self.samples
        return self.model.eval_transfer_many(points)

    def frequency_scale(self) -> float:
        """Return the wrapped model's scale."""
        return self.model.frequency_scale()


def sample(model: Optional[TransferEvaluator], grid: FrequencyGrid, shape=None) -> np.ndarray:
    """Return model samples on the grid; None stands for the zero system."""
    if model is None:
        return np.zeros((len(grid),) + tuple(shape), dtype=complex)
    return model.eval_transfer_many(grid.points)


def h2_error_quadrature(H: TransferEvaluator, Hr: Optional[TransferEvaluator] = None,
                        grid: Optional[FrequencyGrid] = None) -> H2Estimate:
    """Return (1/2pi) int ||H(iw) - Hr(iw)||_F^2 dw with its tail uncertainty."""
    if grid is None:
        grid = default_grid(H, Hr)
    if H is Hr:
        return H2Estimate(0.0, 0.0)
    residual = sample(H, grid) - sample(Hr, grid, H.shape)
    integrand = np.sum(np.abs(residual) ** 2, axis=(1, 2))
    value = float(grid.integrate(integrand))
    outer = np.abs(grid.nodes[[0, -1]]) ** grid.decay_order * integrand[[0, -1]]
    return H2Estimate(value, float(outer.max() * grid.tail_bound))


def _lyapunov(A, Q) -> np.ndarray:
    """Solve A P + P A^T + Q = 0."""
    n = A.shape[0]
    if n > KRONECKER_LIMIT:
        return linalg.solve_continuous_lyapunov(A, -Q)
    eye = np.eye(n)
    operator = np.kron(eye, A) + np.kron(A, eye)
    vec = np.linalg.solve(operator, -Q.reshape(-1, order='F'))
    return vec.reshape((n, n), order='F')


def h2_norm_gramian(model: StateSpaceFOM) -> float:
    """Return ||H||_H2 = sqrt(trace(C P C^T)) from the controllability Gramian."""
    if model.A_tau is not None:
        raise ValueError("Delay models have no Gramian path, use h2_error_quadrature")
    A = np.linalg.solve(model.E, model.A)
    B = np.linalg.solve(model.E, model.B)
    values = np.linalg.eigvals(A)
    if values.real.max() >= -1e-12:
        raise UnstableSystem(f"Eigenvalue {values[np.argmax(values.real)]} is not stable")
    P = _lyapunov(A, B @ B.T)
    return math.sqrt(max(float(np.trace(model.C @ P @ model.C.T)), 0.0))


def h2_inner_rational(G: Union[PoleResidueForm, DiagonalStructuredROM],
                      H: Optional[TransferEvaluator]) -> complex:
    """Return (1/2pi) int trace(G(iw)^H H(iw)) dw by residues at the poles of G.

    Each pole lambda of a_l contributes c_l^* H(-conj(lambda)) b_l / conj(a_l'(lambda)).
    """
    if isinstance(G, DiagonalStructuredROM):
        G = pole_residue_form(G)
    if H is None:
        return 0j
    total = []
    for a, pole_set, b, c in zip(G.denominators, G.pole_sets, G.b, G.c):
        slopes = np.asarray(a.derivative()(pole_set.poles))
        samples = H.eval_transfer_many(-np.conj(pole_set.poles))
        total.extend(np.conj(c) @ samples @ b / np.conj(slopes))
    return complex(compensated_sum(np.array(total, dtype=complex))) if total else 0j
