"""Seeded generators of full-order test models and the shipped corpus."""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from strh2.sysmodel import ParamSepModel, PHModel, StateSpaceFOM, save_model
from strh2.util import StabilityCheckFailed, UnstableSystem

logger = logging.getLogger('strh2')

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
DELAY_COUPLING = 0.3
DELAY_ATTEMPTS = 10


class SplitMix64:
    """64-bit splitmix stream with uniform and Box-Muller normal draws.

    The algorithm is fixed so a seed reproduces the same models on every platform.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK

    def next_u64(self) -> int:
        """Return the next 64-bit output."""
        self.state = (self.state + GOLDEN) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def _draw(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, size: Optional[int] = None):
        """Return uniform draws on [0, 1)."""
        if size is None:
            return self._draw()
        return np.array([self._draw() for _ in range(size)])

    def _gaussian(self) -> float:
        radius = np.sqrt(-2 * np.log(1 - self._draw()))
        return float(radius * np.cos(2 * np.pi * self._draw()))

    def normal(self, size: Optional[int] = None):
        """Return standard normal draws."""
        if size is None:
            return self._gaussian()
        return np.array([self._gaussian() for _ in range(size)])


@dataclass(frozen=True)
class ModelSpec:
    """Recipe for one generated model."""

    kind: str
    n: int
    m: int = 1
    p: int = 1
    seed: Optional[int] = 0
    alpha: float = 0.1
    beta: float = 0.05
    tau: float = 0.5

    @property
    def name(self) -> str:
        """Return the corpus file stem."""
        seed = 'unit' if self.seed is None else self.seed
        return f"{self.kind}-n{self.n}-m{self.m}-p{self.p}-s{seed}"

    def to_json(self) -> dict:
        """Return the manifest entry."""
        return asdict(self)


def _skew(rng: SplitMix64, n: int) -> np.ndarray:
    W = rng.normal(n * n).reshape(n, n)
    return (W - W.T) / 2


def _stable_matrix(rng: SplitMix64, n: int) -> np.ndarray:
    """Skew part minus a positive diagonal in [0.2, 2]."""
    Q = _skew(rng, n)
    return Q - np.diag(0.2 + 1.8 * rng.uniform(n))


def gen_random_stable(n: int, m: int = 1, p: int = 1, seed: int = 0) -> StateSpaceFOM:
    """Return E = I, A = Q - D with Q skew and D positive diagonal, random B and C."""
    if n < 1:
        raise ValueError(f"Model order must be positive, got {n}")
    rng = SplitMix64(seed)
    A = _stable_matrix(rng, n)
    B = rng.normal(n * m).reshape(n, m)
    C = rng.normal(p * n).reshape(p, n)
    model = StateSpaceFOM(np.eye(n), A, B, C)
    model.check_stability()
    return model


def gen_msd_chain(masses: int, alpha: float = 0.1, beta: float = 0.05,
                  seed: Optional[int] = None) -> ParamSepModel:
    """Mass-spring-damper chain fixed at both ends with Rayleigh damping alpha M + beta K.

    Force enters at the last mass and the position of the first mass is measured.
    Without a seed all masses and springs are 1.
    """
    if masses < 1:
        raise ValueError(f"Need at least one mass, got {masses}")
    if alpha < 0 or beta < 0:
        raise ValueError(f"Damping coefficients must be nonnegative, got {alpha}, {beta}")
    if alpha == 0 and beta == 0:
        raise ValueError("An undamped chain has no finite H2 norm")
    if seed is None:
        mass, spring = np.ones(masses), np.ones(masses + 1)
    else:
        rng = SplitMix64(seed)
        mass = 0.5 + rng.uniform(masses)
        spring = 0.5 + rng.uniform(masses + 1)
    M = np.diag(mass)
    K = np.diag(spring[:-1] + spring[1:]) - np.diag(spring[1:-1], 1) - np.diag(spring[1:-1], -1)
    B = np.zeros((masses, 1))
    B[-1, 0] = 1
    C = np.zeros((1, masses))
    C[0, 0] = 1
    return ParamSepModel.second_order(M, alpha * M + beta * K, K, B, C)


def gen_ph_random(n: int, m: int = 1, seed: int = 0) -> PHModel:
    """Return J random skew, R = G G^T / n + 1e-6 I and random B."""
    if n < 1:
        raise ValueError(f"Model order must be positive, got {n}")
    rng = SplitMix64(seed)
    J = _skew(rng, n)
    G = rng.normal(n * n).reshape(n, n)
    R = G @ G.T / n + 1e-6 * np.eye(n)
    B = rng.normal(n * m).reshape(n, m)
    return PHModel(J, R, B)


def delay_independent(A, A_tau) -> bool:
    """Return True if mu_2(A) + ||A_tau||_2 < 0 (stable for every delay)."""
    log_norm = np.linalg.eigvalsh((A + A.T) / 2).max()
    return bool(log_norm + np.linalg.norm(A_tau, 2) < 0)


def gen_delay_fom(n: int, tau: float = 0.5, m: int = 1, p: int = 1,
                  seed: int = 0) -> StateSpaceFOM:
    """Return E x' = A x + A_tau x(t - tau) + B u with ||A_tau|| = 0.3 ||A||, verified stable."""
    if n < 1:
        raise ValueError(f"Model order must be positive, got {n}")
    if not tau > 0:
        raise ValueError(f"Delay must be positive, got {tau}")
    rng = SplitMix64(seed)
    for attempt in range(DELAY_ATTEMPTS):
        A = _stable_matrix(rng, n)
        A_tau = rng.normal(n * n).reshape(n, n)
        A_tau *= DELAY_COUPLING * np.linalg.norm(A, 2) / np.linalg.norm(A_tau, 2)
        B = rng.normal(n * m).reshape(n, m)
        C = rng.normal(p * n).reshape(p, n)
        model = StateSpaceFOM(np.eye(n), A, B, C, A_tau=A_tau, tau=tau)
        if delay_independent(A, A_tau):
            return model
        try:
            model.check_stability()
        except UnstableSystem as e:
            logger.warning(f"Discarding delay draw {attempt}: {e}")
            continue
        return model
    raise StabilityCheckFailed(f"No stable delay model after {DELAY_ATTEMPTS} draws")


CORPUS = (
    *(ModelSpec('random', 10, seed=seed) for seed in range(1, 6)),
    ModelSpec('random', 6, m=2, p=2, seed=11),
    ModelSpec('msd', 3, seed=None),
    ModelSpec('msd', 6, seed=12),
    ModelSpec('ph', 8, seed=21),
    ModelSpec('delay', 6, tau=0.5, seed=31),
)


def generate(spec: ModelSpec) -> ParamSepModel:
    """Build the model a spec describes."""
    if spec.kind == 'random':
        return gen_random_stable(spec.n, spec.m, spec.p, spec.seed or 0)
    elif spec.kind == 'msd':
        return gen_msd_chain(spec.n, spec.alpha, spec.beta, spec.seed)
    elif spec.kind == 'ph':
        return gen_ph_random(spec.n, spec.m, spec.seed or 0)
    elif spec.kind == 'delay':
        return gen_delay_fom(spec.n, spec.tau, spec.m, spec.p, spec.seed or 0)
    raise ValueError(f"Unsupported model kind: {spec.kind}")


def write_corpus(directory, specs=CORPUS) -> list:
    """Write every corpus model as <name>.json and return the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for spec in specs:
        path = os.path.join(directory, f"{spec.name}.json")
        save_model(generate(spec), path)
        logger.info(f"Wrote {path}")
        paths.append(path)
    return paths
