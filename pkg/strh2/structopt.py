"""Structure-preserving parameterizations and a line-search descent optimizer.

Every real parameter vector unpacks to a feasible reduced model: poles and
damping enter through exponentials, port-Hamiltonian dissipation through a
Cholesky-type factor.
"""
from __future__ import annotations

import asyncio
import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from strh2.bench import SplitMix64
from strh2.h2metric import FrequencyGrid, Sampled, default_grid, h2_error_quadrature
from strh2.sysmodel import (
    DelayROM,
    DiagonalStructuredROM,
    ParamSepModel,
    PHModel,
    SecondOrderROM,
    StateSpaceFOM,
    TransferEvaluator,
)
from strh2.util import (
    LineSearchFailure,
    OptimizationFailed,
    Strh2Error,
    UnstablePole,
    UnsupportedStructure,
    thread_count,
)
from strh2.wirtinger import gradients, ph_gradient

logger = logging.getLogger('strh2')

STRUCTURES = ('unstructured', 'so', 'ph', 'delay')
DISSIPATION_FLOOR = 1e-8
ARMIJO = 1e-4
MAX_HALVINGS = 60


class Parameterization(ABC):
    """Map between an unconstrained real vector and a structured reduced model."""

    structure = ''

    def __init__(self, r: int, m: int, p: int):
        if min(r, m, p) < 1:
            raise ValueError(f"Orders and dimensions must be positive, got r={r}, m={m}, p={p}")
        self.r, self.m, self.p = r, m, p

    @property
    @abstractmethod
    def dim(self) -> int:
        """Return the length of the parameter vector."""

    @abstractmethod
    def unpack(self, theta) -> ParamSepModel:
        """Build the model for a parameter vector."""

    @abstractmethod
    def pack(self, model: ParamSepModel) -> np.ndarray:
        """Return the parameter vector of a model."""

    @abstractmethod
    def pullback(self, theta, model: ParamSepModel, H: TransferEvaluator,
                 grid: FrequencyGrid) -> np.ndarray:
        """Return the real gradient of the squared error with respect to theta."""

    @abstractmethod
    def initial(self, fom: TransferEvaluator, rng: SplitMix64) -> np.ndarray:
        """Draw a feasible starting vector in the spectral band of the full model."""

    def feasible(self, model: ParamSepModel) -> ParamSepModel:
        """Return the model (raise a Strh2Error if it is not admissible)."""
        return model

    def cost(self, H: TransferEvaluator, theta, grid: FrequencyGrid) -> float:
        """Return the squared H2 error, inf for infeasible parameters."""
        try:
            model = self.feasible(self.unpack(theta))
            value = h2_error_quadrature(H, model, grid).value
        except Strh2Error:
            return math.inf
        return value if math.isfinite(value) else math.inf

    def cost_and_gradient(self, H: TransferEvaluator, theta, grid: FrequencyGrid):
        """Return (cost, gradient); (inf, None) if the parameters are infeasible."""
        try:
            model = self.feasible(self.unpack(theta))
            value = h2_error_quadrature(H, model, grid).value
            gradient = self.pullback(theta, model, H, grid)
        except Strh2Error:
            return math.inf, None
        if not math.isfinite(value) or not np.all(np.isfinite(gradient)):
            return math.inf, None
        return value, gradient


def _band(fom: TransferEvaluator, rng: SplitMix64, count: int) -> np.ndarray:
    """Log-uniform magnitudes between 1% and 100% of the frequency scale."""
    scale = fom.frequency_scale()
    return scale * np.exp(np.log(1e-2) * rng.uniform(count))


class UnstructuredParameterization(Parameterization):
    """Real system with diagonal A: real poles and conjugate pole pairs.

    Layout: pole block (log(-Re), [Im]), then rows of B, then columns of C,
    each with real entries for real poles and (Re, Im) pairs for pairs.
    """

    structure = 'unstructured'

    def __init__(self, r: int, m: int, p: int, n_real: Optional[int] = None):
        super().__init__(r, m, p)
        self.n_real = r % 2 if n_real is None else n_real
        if not 0 <= self.n_real <= r or (r - self.n_real) % 2:
            raise ValueError(f"Cannot split order {r} into {self.n_real} real poles and pairs")
        self.n_pairs = (r - self.n_real) // 2

    @property
    def dim(self) -> int:
        """Return r + r*m + p*r."""
        return self.r * (1 + self.m + self.p)

    def _expand(self, x, width: int) -> np.ndarray:
        """Real block -> r x width complex rows, partners conjugated."""
        x = np.asarray(x, dtype=float)
        k = self.n_real * width
        rows = np.empty((self.r, width), dtype=complex)
        rows[:self.n_real] = x[:k].reshape(self.n_real, width)
        pairs = x[k:].reshape(self.n_pairs, 2, width)
        rows[self.n_real::2] = pairs[:, 0] + 1j * pairs[:, 1]
        rows[self.n_real + 1::2] = pairs[:, 0] - 1j * pairs[:, 1]
        return rows

    def _collapse(self, rows) -> np.ndarray:
        """Inverse of _expand."""
        rows = np.asarray(rows)
        pairs = rows[self.n_real::2]
        return np.concatenate([np.real(rows[:self.n_real]).ravel(),
                               np.stack([pairs.real, pairs.imag], axis=1).ravel()])

    def _pullback_rows(self, g) -> np.ndarray:
        """Real gradient of a conjugate-structured block from its Wirtinger gradient."""
        g = np.asarray(g)
        first, second = g[self.n_real::2], g[self.n_real + 1::2]
        pairs = np.stack([2 * np.real(first + second), 2 * (first.imag - second.imag)], axis=1)
        return np.concatenate([2 * np.real(g[:self.n_real]).ravel(), pairs.ravel()])

    @property
    def _log_slots(self) -> np.ndarray:
        """Positions in a pole block that hold log(-Re)."""
        return np.concatenate([np.arange(self.n_real),
                               self.n_real + 2 * np.arange(self.n_pairs)]).astype(int)

    def _poles(self, block) -> np.ndarray:
        x = np.array(block, dtype=float)
        slots = self._log_slots
        x[slots] = -np.exp(x[slots])
        return self._expand(x, 1).ravel()

    def _pole_block(self, poles) -> np.ndarray:
        x = self._collapse(np.asarray(poles).reshape(-1, 1))
        slots = self._log_slots
        if np.any(x[slots] >= 0):
            raise ValueError("Poles must have negative real parts")
        x[slots] = np.log(-x[slots])
        return x

    def _pole_pullback(self, block, g) -> np.ndarray:
        grad = self._pullback_rows(np.asarray(g).reshape(-1, 1))
        slots = self._log_slots
        grad[slots] *= -np.exp(np.asarray(block, dtype=float)[slots])
        return grad

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.dim:
            raise ValueError(f"Expected {self.dim} parameters, got {theta.size}")
        r, m = self.r, self.m
        return theta[:r], theta[r:r + r * m], theta[r + r * m:]

    def unpack(self, theta) -> DiagonalStructuredROM:
        """Build diag(s - lambda) with conjugate-structured B and C."""
        poles, b, c = self._split(theta)
        return DiagonalStructuredROM.from_poles(self._poles(poles), self._expand(b, self.m),
                                                self._expand(c, self.p).T)

    def pack(self, model: DiagonalStructuredROM) -> np.ndarray:
        """Return the parameter vector of a from_poles model."""
        return np.concatenate([self._pole_block(model.diagonals[1]),
                               self._collapse(model.B), self._collapse(model.C.T)])

    def pullback(self, theta, model, H, grid) -> np.ndarray:
        """Chain rule through exp, conjugate pairing and the residue blocks."""
        bundle = gradients(H, model, grid)
        poles, _, _ = self._split(theta)
        return np.concatenate([self._pole_pullback(poles, np.diag(bundle.dA[1])),
                               self._pullback_rows(bundle.dB[0]),
                               self._pullback_rows(bundle.dC[0].T)])

    def _initial_poles(self, fom, rng) -> np.ndarray:
        magnitude = _band(fom, rng, self.n_real + self.n_pairs)
        angle = 0.1 + 1.3 * rng.uniform(self.n_pairs)
        block = np.empty(self.r)
        block[:self.n_real] = np.log(magnitude[:self.n_real])
        pairs = magnitude[self.n_real:]
        block[self.n_real::2] = np.log(pairs * np.cos(angle))
        block[self.n_real + 1::2] = pairs * np.sin(angle)
        return block

    def initial(self, fom, rng) -> np.ndarray:
        """Poles in the spectral band, standard normal residue directions."""
        return np.concatenate([self._initial_poles(fom, rng),
                               rng.normal(self.r * self.m), rng.normal(self.r * self.p)])


class SecondOrderParameterization(Parameterization):
    """s^2 I + s diag(exp(u)) + diag(exp(v)) with real B and C."""

    structure = 'so'

    @property
    def dim(self) -> int:
        """Return 2r + r*m + p*r."""
        return self.r * (2 + self.m + self.p)

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.dim:
            raise ValueError(f"Expected {self.dim} parameters, got {theta.size}")
        r, m = self.r, self.m
        return (theta[:r], theta[r:2 * r], theta[2 * r:2 * r + r * m].reshape(r, m),
                theta[2 * r + r * m:].reshape(self.p, r))

    def unpack(self, theta) -> SecondOrderROM:
        """Build the modal second-order model."""
        u, v, B, C = self._split(theta)
        return SecondOrderROM(np.exp(u), np.exp(v), B, C)

    def pack(self, model: SecondOrderROM) -> np.ndarray:
        """Return (log e, log k, B, C)."""
        return np.concatenate([np.log(model.e), np.log(model.k),
                               np.ravel(model.B), np.ravel(model.C)])

    def pullback(self, theta, model, H, grid) -> np.ndarray:
        """Chain rule through the exponentials."""
        bundle = gradients(H, model, grid)
        return np.concatenate([2 * np.real(np.diag(bundle.dA[1])) * model.e,
                               2 * np.real(np.diag(bundle.dA[2])) * model.k,
                               2 * np.real(bundle.dB[0]).ravel(),
                               2 * np.real(bundle.dC[0]).ravel()])

    def initial(self, fom, rng) -> np.ndarray:
        """Natural frequencies in the band, damping ratios in (0.05, 0.95)."""
        omega = _band(fom, rng, self.r)
        zeta = 0.05 + 0.9 * rng.uniform(self.r)
        return np.concatenate([np.log(2 * zeta * omega), np.log(omega**2),
                               rng.normal(self.r * self.m), rng.normal(self.p * self.r)])


class PHParameterization(Parameterization):
    """J from a strictly lower triangle, R = L L^T + 1e-8 I, free B."""

    structure = 'ph'

    def __init__(self, r: int, m: int, p: int):
        if m != p:
            raise ValueError(f"Port-Hamiltonian models need as many outputs as inputs, "
                             f"got m={m}, p={p}")
        super().__init__(r, m, p)
        self._strict = np.tril_indices(r, -1)
        self._lower = np.tril_indices(r)

    @property
    def dim(self) -> int:
        """Return r(r-1)/2 + r(r+1)/2 + r*m."""
        return self.r * self.r + self.r * self.m

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.dim:
            raise ValueError(f"Expected {self.dim} parameters, got {theta.size}")
        k1 = self._strict[0].size
        k2 = k1 + self._lower[0].size
        W = np.zeros((self.r, self.r))
        W[self._strict] = theta[:k1]
        L = np.zeros((self.r, self.r))
        L[self._lower] = theta[k1:k2]
        return W, L, theta[k2:].reshape(self.r, self.m)

    def unpack(self, theta) -> PHModel:
        """Build (J, R, B)."""
        W, L, B = self._split(theta)
        return PHModel(W - W.T, L @ L.T + DISSIPATION_FLOOR * np.eye(self.r), B)

    def pack(self, model: PHModel) -> np.ndarray:
        """Return the triangle of J, the Cholesky factor of R - 1e-8 I and B."""
        L = linalg.cholesky(model.R - DISSIPATION_FLOOR * np.eye(self.r), lower=True)
        return np.concatenate([model.J[self._strict], L[self._lower], np.ravel(model.B)])

    def pullback(self, theta, model, H, grid) -> np.ndarray:
        """Project the (J - R) gradient onto the skew and Cholesky coordinates."""
        _, L, _ = self._split(theta)
        G, dB = ph_gradient(H, model, grid)
        skew = G - G.T
        factor = -(G + G.T) @ L
        return np.concatenate([skew[self._strict], factor[self._lower], dB.ravel()])

    def initial(self, fom, rng) -> np.ndarray:
        """Dissipation in the spectral band with a comparable skew part."""
        magnitude = _band(fom, rng, self.r)
        L = np.diag(np.sqrt(magnitude))
        L[self._strict] = 0.1 * np.sqrt(magnitude.mean()) * rng.normal(self._strict[0].size)
        W = magnitude.mean() * rng.normal(self._strict[0].size)
        return np.concatenate([W, L[self._lower], rng.normal(self.r * self.m)])


class DelayParameterization(UnstructuredParameterization):
    """a_l(s) = s - mu_l - sigma_l exp(-tau s) with fixed tau."""

    structure = 'delay'

    def __init__(self, r: int, m: int, p: int, tau: float, n_real: Optional[int] = None):
        super().__init__(r, m, p, n_real)
        if not tau > 0:
            raise ValueError(f"Delay must be positive, got {tau}")
        self.tau = float(tau)

    @property
    def dim(self) -> int:
        """Return 2r + r*m + p*r."""
        return self.r * (2 + self.m + self.p)

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.dim:
            raise ValueError(f"Expected {self.dim} parameters, got {theta.size}")
        r, m = self.r, self.m
        return theta[:r], theta[r:2 * r], theta[2 * r:2 * r + r * m], theta[2 * r + r * m:]

    def unpack(self, theta) -> DelayROM:
        """Build the diagonal delay model."""
        mu, sigma, b, c = self._split(theta)
        return DelayROM(self._poles(mu), self._expand(sigma, 1).ravel(), self.tau,
                        self._expand(b, self.m), self._expand(c, self.p).T)

    def pack(self, model: DelayROM) -> np.ndarray:
        """Return (mu block, sigma block, B, C)."""
        return np.concatenate([self._pole_block(model.mu),
                               self._collapse(model.sigma.reshape(-1, 1)),
                               self._collapse(model.B), self._collapse(model.C.T)])

    def feasible(self, model: DelayROM) -> DelayROM:
        """Reject models with a principal-branch pole in the right half-plane."""
        model.check_stability()
        return model

    def pullback(self, theta, model, H, grid) -> np.ndarray:
        """Chain rule through mu, sigma and the residue blocks."""
        bundle = gradients(H, model, grid)
        mu, _, _, _ = self._split(theta)
        return np.concatenate([self._pole_pullback(mu, np.diag(bundle.dA[1])),
                               self._pullback_rows(np.diag(bundle.dA[2]).reshape(-1, 1)),
                               self._pullback_rows(bundle.dB[0]),
                               self._pullback_rows(bundle.dC[0].T)])

    def initial(self, fom, rng) -> np.ndarray:
        """Unstructured start with a small delay coupling, shrunk until stable."""
        mu = self._initial_poles(fom, rng)
        sigma = 0.1 * np.abs(self._poles(mu)).min() * rng.normal(self.r)
        tail = np.concatenate([rng.normal(self.r * self.m), rng.normal(self.r * self.p)])
        for _ in range(10):
            theta = np.concatenate([mu, sigma, tail])
            try:
                self.feasible(self.unpack(theta))
                return theta
            except UnstablePole:
                sigma = sigma / 2
        return np.concatenate([mu, np.zeros(self.r), tail])


def make_parameterization(structure: str, r: int, m: int = 1, p: int = 1,
                          **options) -> Parameterization:
    """Return the parameterization of a structure tag."""
    if structure == 'unstructured':
        return UnstructuredParameterization(r, m, p, **options)
    elif structure == 'so':
        return SecondOrderParameterization(r, m, p)
    elif structure == 'ph':
        return PHParameterization(r, m, p)
    elif structure == 'delay':
        if 'tau' not in options:
            raise ValueError("Delay parameterizations need a fixed delay tau")
        return DelayParameterization(r, m, p, **options)
    raise UnsupportedStructure(f"Unknown structure '{structure}', expected one of {STRUCTURES}")


@dataclass
class OptimizeResult:
    """Outcome of one local optimization run."""

    model: ParamSepModel
    theta: np.ndarray
    cost: float
    gradient_norm: float
    iterations: int
    termination: str
    structure: str
    trace: list = field(default_factory=list)
    restart: int = 0
    rejected: int = 0

    def to_json(self) -> dict:
        """Return the result encoding (the model is written separately)."""
        return {
            'structure': self.structure,
            'restart': self.restart,
            'cost': self.cost,
            'gradient_norm': self.gradient_norm,
            'iterations': self.iterations,
            'termination': self.termination,
            'rejected_steps': self.rejected,
            'theta': self.theta.tolist(),
            'trace': [{'iteration': k, 'cost': f, 'gradient_norm': g, 'step': t}
                      for k, f, g, t in self.trace],
        }


def _line_search(fun, theta, cost, slope, direction):
    """Armijo backtracking; return (step, theta, cost, rejected trial count)."""
    step, rejected = 1.0, 0
    for _ in range(MAX_HALVINGS):
        trial = theta + step * direction
        value = fun(trial)
        if value <= cost + ARMIJO * step * slope:
            return step, trial, value, rejected
        rejected += not math.isfinite(value)
        step /= 2
    raise LineSearchFailure(f"No sufficient decrease after {MAX_HALVINGS} halvings")


def minimize(H: TransferEvaluator, param: Parameterization, theta0,
             grid: Optional[FrequencyGrid] = None, max_iter: int = 500, grad_tol: float = 1e-9,
             method: str = 'bfgs') -> OptimizeResult:
    """Descend the squared H2 error from theta0 (BFGS or steepest descent directions)."""
    if method not in ('bfgs', 'gradient'):
        raise ValueError(f"Unknown descent method '{method}'")
    if grid is None:
        grid = default_grid(H)
    if not isinstance(H, Sampled):
        H = Sampled(H, grid)
    theta = np.array(theta0, dtype=float)
    cost, gradient = param.cost_and_gradient(H, theta, grid)
    if gradient is None:
        raise ValueError("Starting parameters do not give a feasible model")
    inverse = np.eye(theta.size)
    scaled = False
    trace = [(0, cost, float(np.linalg.norm(gradient)), 0.0)]
    termination, rejected, iteration = 'max-iterations', 0, 0
    for iteration in range(1, max_iter + 1):
        if np.linalg.norm(gradient) < grad_tol:
            termination, iteration = 'gradient-tolerance', iteration - 1
            break
        direction = -inverse @ gradient if method == 'bfgs' else -gradient
        slope = float(gradient @ direction)
        if slope >= 0:
            inverse = np.eye(theta.size)
            direction, slope = -gradient, -float(gradient @ gradient)
        try:
            step, trial, value, count = _line_search(
                lambda x: param.cost(H, x, grid), theta, cost, slope, direction)
        except LineSearchFailure as e:
            logger.debug(f"Run stopped at iteration {iteration}: {e}")
            termination, iteration = 'line-search-failure', iteration - 1
            break
        rejected += count
        value, new_gradient = param.cost_and_gradient(H, trial, grid)
        if new_gradient is None:
            termination, iteration = 'line-search-failure', iteration - 1
            break
        s, y = trial - theta, new_gradient - gradient
        sy = float(s @ y)
        if method == 'bfgs' and sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if not scaled:
                inverse = sy / float(y @ y) * np.eye(theta.size)
                scaled = True
            rho = 1 / sy
            left = np.eye(theta.size) - rho * np.outer(s, y)
            inverse = left @ inverse @ left.T + rho * np.outer(s, s)
        theta, cost, gradient = trial, value, new_gradient
        trace.append((iteration, cost, float(np.linalg.norm(gradient)), step))
        logger.debug(f"Iteration {iteration}: cost {cost:.6e}, "
                     f"gradient {trace[-1][2]:.3e}, step {step:.3e}")
    if rejected:
        logger.warning(f"Rejected {rejected} infeasible trial steps")
    return OptimizeResult(param.unpack(theta), theta, cost, float(np.linalg.norm(gradient)),
                          iteration, termination, param.structure, trace, rejected=rejected)


def _real_pole_counts(r: int) -> list:
    return list(range(r % 2, r + 1, 2))


async def reduce(H: TransferEvaluator, structure: str, r: int,
                 grid: Optional[FrequencyGrid] = None, restarts: int = 10, seed: int = 0,
                 threads: Optional[int] = None, tau: Optional[float] = None, **options):
    """Run independent restarts in a thread pool and return (best, runs).

    Restart k draws its start from SplitMix64(seed + k); unstructured and delay
    restarts cycle through the possible numbers of real poles. Failed runs
    appear as None in `runs`.
    """
    if restarts < 1:
        raise ValueError(f"Need at least one restart, got {restarts}")
    if grid is None:
        grid = default_grid(H)
    sampled = H if isinstance(H, Sampled) else Sampled(H, grid)
    # sample once, before the workers share the cache
    sampled.samples
    p, m = H.shape
    if structure == 'delay' and tau is None:
        if not isinstance(H, StateSpaceFOM) or H.tau is None:
            raise ValueError("Reducing to a delay model needs tau")
        tau = H.tau
    extra = {'tau': tau} if structure == 'delay' else {}
    counts = _real_pole_counts(r)
    make_parameterization(structure, r, m, p, **extra)

    def run(k: int) -> Optional[OptimizeResult]:
        kwargs = dict(extra)
        if structure in ('unstructured', 'delay'):
            kwargs['n_real'] = counts[k % len(counts)]
        param = make_parameterization(structure, r, m, p, **kwargs)
        try:
            theta0 = param.initial(sampled, SplitMix64(seed + k))
            result = minimize(sampled, param, theta0, grid, **options)
        except (Strh2Error, ValueError) as e:
            logger.warning(f"Restart {k} failed: {e}")
            return None
        result.restart = k
        logger.info(f"Restart {k}: cost {result.cost:.6e}, gradient {result.gradient_norm:.3e}, "
                    f"{result.termination} after {result.iterations} iterations")
        return result

    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=thread_count(threads)) as pool:
        runs = await asyncio.gather(*(loop.run_in_executor(pool, run, k)
                                      for k in range(restarts)))
    feasible = [result for result in runs if result is not None and math.isfinite(result.cost)]
    if not feasible:
        raise OptimizationFailed(f"None of {restarts} restarts produced a feasible model")
    best = min(feasible, key=lambda result: (result.cost, result.restart))
    logger.info(f"Best restart {best.restart} with cost {best.cost:.6e}")
    return best, list(runs)
