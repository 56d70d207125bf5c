"""Interpolatory optimality conditions evaluated as residuals."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from strh2.h2metric import FrequencyGrid, default_grid
from strh2.scalarfun import polynomial_coefficients
from strh2.spectra import DUPLICATE_TOLERANCE, delay_poles
from strh2.sysmodel import (
    DelayROM,
    DiagonalStructuredROM,
    ParamSepModel,
    PHModel,
    SecondOrderROM,
    TransferEvaluator,
    ph_modal_data,
    pole_residue_form,
    second_order_factorization,
)
from strh2.util import (
    DisjointnessViolation,
    TruncationNotConverged,
    compensated_sum,
    separation,
    solve,
)

logger = logging.getLogger('strh2')

TAIL_TOLERANCE = 1e-5
WINDOW_CAP = 16384
DISTINCT_BRANCHES = 8


@dataclass(frozen=True)
class ConditionRecord:
    """One condition: left side (full model) against right side (reduced model)."""

    condition: str
    index: object
    lhs: object
    rhs: object

    @property
    def difference(self):
        """Return lhs - rhs."""
        return np.asarray(self.lhs) - np.asarray(self.rhs)

    @property
    def absolute(self) -> float:
        """Return ||lhs - rhs||."""
        return float(np.linalg.norm(self.difference))

    @property
    def scale(self) -> float:
        """Return ||lhs|| + ||rhs|| + 1e-30."""
        return float(np.linalg.norm(self.lhs) + np.linalg.norm(self.rhs) + 1e-30)

    @property
    def relative(self) -> float:
        """Return absolute / scale."""
        return self.absolute / max(self.scale, 1e-300)

    def to_json(self) -> dict:
        """Return the report encoding."""
        index = list(self.index) if isinstance(self.index, tuple) else self.index
        return {'condition': self.condition, 'index': index, 'absolute': self.absolute,
                'relative': self.relative, 'scale': self.scale}


@dataclass
class ConditionReport:
    """Residual records for one structure class."""

    structure: str
    records: list = field(default_factory=list)
    truncation: Optional[dict] = None
    checks: dict = field(default_factory=dict)

    def __iter__(self):
        """Iterate over records."""
        return iter(self.records)

    def __len__(self):
        """Return the number of records."""
        return len(self.records)

    def select(self, condition: str) -> list:
        """Return the records of one condition."""
        return [record for record in self.records if record.condition == condition]

    def add(self, condition: str, index, lhs, rhs):
        """Append a record."""
        self.records.append(ConditionRecord(condition, index, lhs, rhs))

    @property
    def max_relative(self) -> float:
        """Return the largest relative residual."""
        return max((record.relative for record in self.records), default=0.0)

    def passed(self, tolerance: float) -> bool:
        """Return True if every relative residual is below the tolerance."""
        return all(record.relative < tolerance for record in self.records)

    def merge(self, other: ConditionReport) -> ConditionReport:
        """Return a report holding the records of both."""
        return ConditionReport(self.structure, self.records + other.records,
                               self.truncation or other.truncation,
                               {**self.checks, **other.checks})

    def to_json(self, tolerance: Optional[float] = None) -> dict:
        """Return the report encoding."""
        d = {
            'structure': self.structure,
            'records': [record.to_json() for record in self.records],
            'truncation': self.truncation,
            'checks': self.checks,
            'max_relative': self.max_relative,
        }
        if tolerance is not None:
            d.update(tolerance=tolerance, passed=self.passed(tolerance))
        return d

    def to_table(self) -> str:
        """Render an aligned text table."""
        lines = [f"{'condition':<24}{'index':<12}{'absolute':>14}{'relative':>14}"]
        for record in self.records:
            index = ','.join(map(str, record.index)) if isinstance(record.index, tuple) \
                else str(record.index)
            lines.append(f"{record.condition:<24}{index:<12}"
                         f"{record.absolute:>14.6e}{record.relative:>14.6e}")
        for name, value in self.checks.items():
            lines.append(f"check {name}: {value:.3e}")
        if self.truncation:
            lines.append(f"truncation: window {self.truncation['window']}, "
                         f"tail {self.truncation['tail']:.3e}")
        return '\n'.join(lines)


def _mirror(poles) -> np.ndarray:
    return -np.conj(np.asarray(poles))


def _degree(a) -> int:
    coeffs = polynomial_coefficients(a)
    return -1 if coeffs is None else coeffs.size - 1


def residual_unstructured(H: TransferEvaluator, rom: DiagonalStructuredROM) -> ConditionReport:
    """Bitangential Hermite conditions at the mirrored poles of a_l(s) = s - lambda_l."""
    form = pole_residue_form(rom)
    if any(_degree(a) != 1 for a in form.denominators):
        raise ValueError("Unstructured conditions need first-order denominators")
    poles = np.concatenate([pole_set.poles for pole_set in form.pole_sets])
    points = _mirror(poles)
    Hs, Hr = H.eval_transfer_many(points), rom.eval_transfer_many(points)
    dHs, dHr = H.eval_derivative_many(points), rom.eval_derivative_many(points)
    report = ConditionReport('unstructured')
    for l, (b, c) in enumerate(zip(form.b, form.c)):
        report.add('lti-oc1', l, Hs[l] @ b, Hr[l] @ b)
        report.add('lti-oc2', l, np.conj(c) @ Hs[l], np.conj(c) @ Hr[l])
        report.add('lti-oc3', l, np.conj(c) @ dHs[l] @ b, np.conj(c) @ dHr[l] @ b)
    return report


def residual_l2_stationarity(H: TransferEvaluator, rom: ParamSepModel,
                             grid: Optional[FrequencyGrid] = None) -> ConditionReport:
    """Integral stationarity conditions, node by node with LU solves."""
    if grid is None:
        grid = default_grid(H, rom)
    full, reduced = {}, {}
    for s in grid.points:
        A, B, C = rom.system_matrix(s), rom.input_matrix(s), rom.output_matrix(s)
        X = solve(A, B, s)
        Xd = solve(A, C.conj().T, s, trans=2)
        Hs, Hr = H.eval_transfer(s), C @ X
        for name, terms, left, right in (('cond-C', rom.c_terms, None, X.conj().T),
                                         ('cond-B', rom.b_terms, Xd, None),
                                         ('cond-A', rom.a_terms, Xd, X.conj().T)):
            for i, (f, _) in enumerate(terms):
                weight = np.conj(f(s))
                for target, value in ((full, Hs), (reduced, Hr)):
                    product = value if left is None else left @ value
                    product = product if right is None else product @ right
                    target.setdefault((name, i), []).append(weight * product)
    report = ConditionReport('l2')
    for key in full:
        report.add(key[0], key[1], grid.integrate(np.array(full[key])),
                   grid.integrate(np.array(reduced[key])))
    return report


def residual_l2_diag(H: TransferEvaluator, rom: DiagonalStructuredROM,
                     grid: Optional[FrequencyGrid] = None) -> ConditionReport:
    """Quadrature form of the tangential and Hermite conditions of a diagonal model."""
    if grid is None:
        grid = default_grid(H, rom)
    points = grid.points
    Hs, Hr = H.eval_transfer_many(points), rom.eval_transfer_many(points)
    report = ConditionReport('l2-diag')
    for l, (a, b, c) in enumerate(zip(rom.denominators(), rom.b_vectors, rom.c_vectors)):
        weight = 1 / np.conj(a(points))
        report.add('cond-C-diag', l, grid.integrate(weight[:, None] * (Hs @ b)),
                   grid.integrate(weight[:, None] * (Hr @ b)))
        report.add('cond-B-diag', l, grid.integrate(weight[:, None] * (np.conj(c) @ Hs)),
                   grid.integrate(weight[:, None] * (np.conj(c) @ Hr)))
        for i, (f, _) in enumerate(rom.a_terms):
            hermite = np.conj(f(points)) * weight**2
            report.add('cond-A-diag', (l, i), grid.integrate(hermite * (np.conj(c) @ Hs @ b)),
                       grid.integrate(hermite * (np.conj(c) @ Hr @ b)))
    return report


def residual_general_diag(H: TransferEvaluator, rom: DiagonalStructuredROM,
                          pole_sets: Optional[list] = None, window: int = 8) -> ConditionReport:
    """Residue-sum conditions for diagonal models with simple stable zeros."""
    form = pole_residue_form(rom, window)
    if pole_sets is None:
        pole_sets = form.pole_sets
    poles = np.concatenate([pole_set.poles for pole_set in pole_sets])
    if separation(poles) <= DUPLICATE_TOLERANCE * (1 + np.abs(poles).max()):
        raise DisjointnessViolation("Pole sets of different indices overlap")
    report = ConditionReport('general-diag')
    for l, (a, pole_set, b, c) in enumerate(zip(form.denominators, pole_sets, form.b, form.c)):
        lam = pole_set.poles
        points = _mirror(lam)
        d1, d2 = a.derivative(), a.derivative().derivative()
        slope, curvature = np.asarray(d1(lam)), np.asarray(d2(lam))
        samples = {}
        for side, model in (('lhs', H), ('rhs', rom)):
            samples[side] = (model.eval_transfer_many(points), model.eval_derivative_many(points))
        weight = 1 / np.conj(slope)
        sums = {side: (compensated_sum(weight[:, None] * (value @ b)),
                       compensated_sum(weight[:, None] * (np.conj(c) @ value)))
                for side, (value, _) in samples.items()}
        report.add('cond-diag-s-1', l, sums['lhs'][0], sums['rhs'][0])
        report.add('cond-diag-s-2', l, sums['lhs'][1], sums['rhs'][1])
        for i, (f, _) in enumerate(rom.a_terms):
            alpha, dalpha = np.asarray(f(lam)), np.asarray(f.derivative()(lam))
            k1 = np.conj(alpha / slope**2)
            k2 = np.conj(dalpha / slope**2 - alpha * curvature / slope**3)
            sides = [compensated_sum(k1 * (np.conj(c) @ derivative @ b)
                                     - k2 * (np.conj(c) @ value @ b))
                     for value, derivative in samples.values()]
            report.add('cond-diag-s-3', (l, i), *sides)
    return report


def _pair_samples(model, plus, minus):
    points = np.concatenate([_mirror(plus), _mirror(minus)])
    value, derivative = model.eval_transfer_many(points), model.eval_derivative_many(points)
    r = plus.size
    return value[:r], value[r:], derivative[:r], derivative[r:]


def residual_second_order(H: TransferEvaluator, rom: SecondOrderROM) -> ConditionReport:
    """Difference-interpolation and Hermite conditions at both mirrored roots."""
    plus, minus = second_order_factorization(rom)
    full, reduced = _pair_samples(H, plus, minus), _pair_samples(rom, plus, minus)
    report = ConditionReport('so')
    for i in range(rom.order):
        b, c = rom.B[i], rom.C[:, i]
        (Hp, Hm, dHp, dHm), (Rp, Rm, dRp, dRm) = ([x[i] for x in full], [x[i] for x in reduced])
        report.add('soc1', i, (Hp - Hm) @ b, (Rp - Rm) @ b)
        report.add('soc2', i, c @ (Hp - Hm), c @ (Rp - Rm))
        report.add('soc3', i, c @ dHp @ b, c @ dRp @ b)
        report.add('soc4', i, c @ dHm @ b, c @ dRm @ b)
    return report


class DifferenceTransfer:
    """G(s1, s2) = H(s1) - H(s2) with its partial derivatives."""

    def __init__(self, model: TransferEvaluator):
        self.model = model

    def __call__(self, s1, s2) -> np.ndarray:
        """Evaluate G."""
        return self.model.eval_transfer(s1) - self.model.eval_transfer(s2)

    def d1(self, s1, s2) -> np.ndarray:
        """Return dG/ds1 = H'(s1)."""
        return self.model.eval_transfer_derivative(s1)

    def d2(self, s1, s2) -> np.ndarray:
        """Return dG/ds2 = -H'(s2)."""
        return -self.model.eval_transfer_derivative(s2)


def residual_second_order_2d(H: TransferEvaluator, rom: SecondOrderROM) -> ConditionReport:
    """Bitangential Hermite conditions of the two-variable difference transfer function."""
    plus, minus = second_order_factorization(rom)
    G, Gr = DifferenceTransfer(H), DifferenceTransfer(rom)
    report = ConditionReport('so-2d')
    for i, (x1, x2) in enumerate(zip(_mirror(plus), _mirror(minus))):
        b, c = rom.B[i], rom.C[:, i]
        report.add('sobh1', i, G(x1, x2) @ b, Gr(x1, x2) @ b)
        report.add('sobh2', i, c @ G(x1, x2), c @ Gr(x1, x2))
        report.add('sobh3', i, c @ G.d1(x1, x2) @ b, c @ Gr.d1(x1, x2) @ b)
        report.add('sobh4', i, c @ G.d2(x1, x2) @ b, c @ Gr.d2(x1, x2) @ b)
    return report


def residual_ph(H: TransferEvaluator, model: PHModel, transform=None) -> ConditionReport:
    """Port-Hamiltonian conditions: pairwise differences, tangential matrix, normal case."""
    if H.shape[0] != H.shape[1]:
        raise ValueError(f"Port-Hamiltonian conditions need a square system, got {H.shape}")
    data = ph_modal_data(model, transform)
    points = _mirror(data.poles)
    Hs, Hr = H.eval_transfer_many(points), model.eval_transfer_many(points)
    dHs, dHr = H.eval_derivative_many(points), model.eval_derivative_many(points)
    r = model.order
    report = ConditionReport('ph')
    for i in range(r):
        ci = np.conj(data.c[i])
        for j in range(r):
            b = data.b[j]
            report.add('BeaB14-pH-1', (i, j), ci @ (Hs[i] - Hs[j]) @ b, ci @ (Hr[i] - Hr[j]) @ b)
    for i in range(r):
        ci, bi = np.conj(data.c[i]), data.b[i]
        report.add('BeaB14-pH-2', i, ci @ dHs[i] @ bi, ci @ dHr[i] @ bi)

    def tangential(values):
        right = np.einsum('kpm,km->kp', values, data.b)
        left = np.einsum('kmp,km->kp', np.conj(values), data.c)
        return (np.einsum('kp,kr->pr', right, np.conj(data.t))
                + np.einsum('kp,kr->pr', left, np.conj(data.s)))

    report.add('pH-interp-tangential', 0, tangential(Hs), tangential(Hr))
    if data.normal:
        G, Gr = Hs + np.conj(np.swapaxes(Hs, 1, 2)), Hr + np.conj(np.swapaxes(Hr, 1, 2))
        agreement = 0.0
        for i in range(r):
            b = data.b[i]
            new1 = ConditionRecord('new-ph-1', i, (Hs[i] + Hs[i].conj().T) @ b,
                                   (Hr[i] + Hr[i].conj().T) @ b)
            new2 = ConditionRecord('new-ph-2', i, np.conj(b) @ dHs[i] @ b,
                                   np.conj(b) @ dHr[i] @ b)
            g1 = ConditionRecord('phG1', i, G[i] @ b, Gr[i] @ b)
            g2 = ConditionRecord('phG2', i, np.conj(b) @ G[i], np.conj(b) @ Gr[i])
            # G(s) = H(s) + H(s)^* has holomorphic derivative H'(s)
            g3 = ConditionRecord('phG3', i, np.conj(b) @ dHs[i] @ b, np.conj(b) @ dHr[i] @ b)
            report.records.extend([new1, new2, g1, g2, g3])
            agreement = max(agreement, abs(g1.absolute - new1.absolute),
                            abs(g2.absolute - new1.absolute), abs(g3.absolute - new2.absolute))
        report.checks['phG-vs-new-ph'] = agreement
    return report


def _delay_terms(H, rom: DelayROM, i: int, window: int):
    """Per-branch terms of the five delay sums for both sides."""
    pole_set = delay_poles(rom.mu[i], rom.sigma[i], rom.tau, window, index=i)
    lam, tau, mu = pole_set.poles, rom.tau, rom.mu[i]
    shift = tau * (lam - mu)
    phi = np.conj(1 / (1 + shift))
    psi = phi**2
    rho = np.conj(tau * shift / (1 + shift) ** 3)
    points = _mirror(lam)
    b, c = rom.b_vectors[i], np.conj(rom.c_vectors[i])
    terms = {}
    for side, model in (('lhs', H), ('rhs', rom)):
        value, derivative = model.eval_transfer_many(points), model.eval_derivative_many(points)
        hb, chb, cdhb = value @ b, c @ value, c @ derivative @ b
        terms[side] = {
            'td-cond1': phi[:, None] * hb,
            'td-cond2': phi[:, None] * chb,
            'td-cond3': psi * cdhb - rho * (chb @ b),
            'td-cond4': (phi - psi) * cdhb + rho * (chb @ b),
            'td-merged': phi * cdhb,
        }
    return pole_set, terms


def _branch_sizes(terms) -> np.ndarray:
    sizes = [np.abs(t).reshape(t.shape[0], -1).max(axis=1)
             for side in terms.values() for t in side.values()]
    return np.max(sizes, axis=0)


def residual_delay(H: TransferEvaluator, rom: DelayROM, branch_window: Optional[int] = None,
                   tail_tolerance: float = TAIL_TOLERANCE,
                   cap: int = WINDOW_CAP) -> ConditionReport:
    """Truncated Lambert-W branch sums of the delay conditions.

    Without an explicit window, the window doubles until the outermost branches
    satisfy J * (t_J + t_-J) <= tail_tolerance * max_j t_j.
    """
    adaptive = branch_window is None
    window = 1 if adaptive else branch_window
    checked = min(branch_window or DISTINCT_BRANCHES, DISTINCT_BRANCHES)
    distinct = np.concatenate([
        delay_poles(mu, sigma, rom.tau, checked).poles
        for mu, sigma in zip(rom.mu, rom.sigma)])
    if separation(distinct) <= DUPLICATE_TOLERANCE * (1 + np.abs(distinct).max()):
        raise DisjointnessViolation("Delay poles of different indices coincide")
    while True:
        tail, results = 0.0, []
        for i in range(rom.order):
            pole_set, terms = _delay_terms(H, rom, i, window)
            results.append(terms)
            if rom.sigma[i] != 0:
                sizes = _branch_sizes(terms)
                outer = sizes[np.abs(pole_set.branches) == window].sum()
                tail = max(tail, window * outer / max(sizes.max(), 1e-300))
        if not adaptive or tail <= tail_tolerance or not np.any(rom.sigma):
            break
        if window >= cap:
            raise TruncationNotConverged(f"Branch window {window} left a tail of {tail:.3e}")
        window *= 2
        logger.debug(f"Doubling branch window to {window} (tail {tail:.3e})")
    report = ConditionReport('delay', truncation={'window': window, 'tail': tail,
                                                  'adaptive': adaptive})
    for name in ('td-cond1', 'td-cond2', 'td-cond3', 'td-cond4', 'td-merged'):
        for i, terms in enumerate(results):
            report.add(name, i, compensated_sum(terms['lhs'][name]),
                       compensated_sum(terms['rhs'][name]))
    identity = [np.abs(a.difference + b.difference - m.difference)
                for a, b, m in zip(report.select('td-cond3'), report.select('td-cond4'),
                                   report.select('td-merged'))]
    report.checks['td-cond3+td-cond4-vs-merged'] = float(np.max(identity))
    return report
