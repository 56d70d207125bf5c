"""Wirtinger gradients of the squared H2 error with respect to model matrices."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from strh2.h2metric import FrequencyGrid, default_grid
from strh2.sysmodel import ParamSepModel, PHModel, TransferEvaluator
from strh2.util import batched_solve, hermitian


@dataclass(frozen=True)
class GradientBundle:
    """Gradients with respect to conj(A_i), conj(B_j) and conj(C_k)."""

    dA: list
    dB: list
    dC: list
    cost: float
    grid: FrequencyGrid

    def norm(self) -> float:
        """Return the Frobenius norm over all families."""
        return float(np.sqrt(sum(np.linalg.norm(g) ** 2 for g in (*self.dA, *self.dB, *self.dC))))


@dataclass(frozen=True)
class NodeStates:
    """Primal and dual reduced states with the residual on every node."""

    X: np.ndarray
    Xd: np.ndarray
    residual: np.ndarray


def node_states(H: TransferEvaluator, rom: ParamSepModel, grid: FrequencyGrid) -> NodeStates:
    """Return X = A^-1 B, Xd = A^-* C^* and H - Hr on the grid."""
    points = grid.points
    A, B, C = rom.stacks(points)
    X = batched_solve(A, B)
    Xd = batched_solve(A, hermitian(C), conjugate_transpose=True)
    return NodeStates(X, Xd, H.eval_transfer_many(points) - C @ X)


def gradients(H: TransferEvaluator, rom: ParamSepModel,
              grid: Optional[FrequencyGrid] = None) -> GradientBundle:
    """Quadrature form of the conjugate-matrix gradients.

    dA_i = int conj(alpha_i) Xd (H - Hr) X^*, dB_j = int conj(beta_j) Xd (Hr - H)
    and dC_k = int conj(gamma_k) (Hr - H) X^*, all with measure (1/2pi) d(omega).
    """
    if grid is None:
        grid = default_grid(H, rom)
    points = grid.points
    states = node_states(H, rom, grid)
    X, Xd, D = states.X, states.Xd, states.residual
    inner_a = Xd @ D @ hermitian(X)
    inner_b = -(Xd @ D)
    inner_c = -(D @ hermitian(X))

    def family(terms, inner):
        return [grid.integrate(np.conj(np.asarray(f(points)))[:, None, None] * inner)
                for f, _ in terms]

    cost = float(grid.integrate(np.sum(np.abs(D) ** 2, axis=(1, 2))))
    return GradientBundle(family(rom.a_terms, inner_a), family(rom.b_terms, inner_b),
                          family(rom.c_terms, inner_c), cost, grid)


def diag_restrict(bundle: GradientBundle) -> GradientBundle:
    """Zero the off-diagonal entries of every dA."""
    return replace(bundle, dA=[np.diag(np.diag(g)) for g in bundle.dA])


def ph_gradient(H: TransferEvaluator, model: PHModel, grid: Optional[FrequencyGrid] = None):
    """Return real gradients (dJR, dB) for x' = (J - R) x + B u, y = B^T x.

    B enters both the input and the output map, so its gradient collects both.
    """
    bundle = gradients(H, model, grid)
    dJR = 2 * np.real(bundle.dA[1])
    dB = 2 * np.real(bundle.dB[0] + bundle.dC[0].T)
    return dJR, dB


def finite_difference_gradient(fun: Callable, theta, step=None) -> np.ndarray:
    """5-point central differences of a scalar function of a real vector."""
    theta = np.asarray(theta, dtype=float)
    if step is None:
        step = 1e-3 * np.maximum(1.0, np.abs(theta))
    step = np.broadcast_to(np.asarray(step, dtype=float), theta.shape)
    gradient = np.empty(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = step[i]
        gradient[i] = (-fun(theta + 2 * e) + 8 * fun(theta + e)
                       - 8 * fun(theta - e) + fun(theta - 2 * e)) / (12 * step[i])
    return gradient
