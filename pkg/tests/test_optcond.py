"""Test the condition residuals, their identities and their failure modes."""
import numpy as np
import pytest

from strh2.bench import gen_ph_random, gen_random_stable
from strh2.h2metric import build_grid
from strh2.optcond import (
    ConditionReport,
    residual_delay,
    residual_general_diag,
    residual_l2_diag,
    residual_l2_stationarity,
    residual_ph,
    residual_second_order,
    residual_second_order_2d,
    residual_unstructured,
)
from strh2.scalarfun import Constant, Monomial
from strh2.sysmodel import (
    DelayROM,
    DiagonalStructuredROM,
    ParamSepModel,
    PHModel,
    SecondOrderROM,
    StateSpaceFOM,
    ph_modal_data,
    second_order_factorization,
    to_diagonal,
)
from strh2.util import DisjointnessViolation, TruncationNotConverged
from strh2.wirtinger import gradients


@pytest.fixture
def fom():
    """Return a six-state two-input, two-output random model."""
    return gen_random_stable(6, m=2, p=2, seed=7)


@pytest.fixture
def rom():
    """Return a conjugate-structured diagonal model matching the fom's shape."""
    B = np.array([[1.0, -0.5], [0.3 + 0.4j, 1j], [0.3 - 0.4j, -1j]])
    C = np.array([[0.5, 1 - 1j, 1 + 1j], [-1.0, 0.2j, -0.2j]])
    return DiagonalStructuredROM.from_poles([-0.8, -0.5 + 1.5j, -0.5 - 1.5j], B, C)


@pytest.fixture
def so_rom():
    """Return a two-index modally damped model."""
    return SecondOrderROM([0.4, 3.0], [1.0, 2.0], [[1.0], [0.5]], [[0.7, -1.2]])


@pytest.fixture
def delay_rom():
    """Return a two-index delay model."""
    return DelayROM([-1.0, -2.5], [0.3, -0.4], 0.5, [[1.0], [0.6]], [[0.8, -0.3]])


@pytest.fixture
def delay_fom():
    """Return a three-state delay model with commuting matrices."""
    return StateSpaceFOM(np.eye(3), np.diag([-0.7, -1.5, -3.0]), [[1.0], [1.0], [-1.0]],
                         [[1.0, 0.5, 1.0]], A_tau=np.diag([0.2, -0.3, 0.5]), tau=0.5)


def test_conditions_hold_when_models_agree(rom):
    """Confirm every residual vanishes when H is the reduced model itself."""
    copy = DiagonalStructuredROM.from_poles(rom.diagonals[1], rom.B, rom.C)
    report = residual_unstructured(copy, rom)
    assert len(report) == 9
    assert report.passed(1e-12)


def test_unstructured_matches_residue_sums(fom, rom):
    """Confirm first-order residue sums reduce to the Hermite conditions."""
    hermite = residual_unstructured(fom, rom)
    sums = residual_general_diag(fom, rom)
    for oc, s in (('lti-oc1', 'cond-diag-s-1'), ('lti-oc2', 'cond-diag-s-2')):
        for a, b in zip(hermite.select(oc), sums.select(s)):
            assert np.allclose(a.lhs, b.lhs)
            assert np.allclose(a.rhs, b.rhs)


def test_residue_sums_match_quadrature(fom, rom):
    """Confirm residue sums agree with the quadrature form of the same integrals."""
    grid = build_grid(3.0, 4096)
    quadrature = residual_l2_diag(fom, rom, grid)
    sums = residual_general_diag(fom, rom)
    for q, s in zip(quadrature.select('cond-C-diag'), sums.select('cond-diag-s-1')):
        assert np.allclose(q.lhs, s.lhs, rtol=1e-6, atol=1e-9)
        assert np.allclose(q.rhs, s.rhs, rtol=1e-6, atol=1e-9)
    for q, s in zip(quadrature.select('cond-B-diag'), sums.select('cond-diag-s-2')):
        assert np.allclose(q.lhs, s.lhs, rtol=1e-6, atol=1e-9)
    for q, s in zip(quadrature.select('cond-A-diag'), sums.select('cond-diag-s-3')):
        assert q.index == s.index
        assert np.allclose(q.lhs, -np.asarray(s.lhs), rtol=1e-6, atol=1e-9)


def test_l2_stationarity_families(fom, rom):
    """Confirm one integral record per matrix term and family."""
    report = residual_l2_stationarity(fom, rom, build_grid(10.0, 64))
    names = [(record.condition, record.index) for record in report]
    assert ('cond-A', 0) in names and ('cond-A', 1) in names
    assert ('cond-B', 0) in names and ('cond-C', 0) in names
    assert len(report) == 4


def test_l2_stationarity_matches_gradients():
    """Confirm each integral residual has the norm of the matching conjugate gradient."""
    fom = gen_random_stable(6, seed=2)
    A = np.array([[-1.0, 0.5], [-0.3, -2.0]])
    rom = ParamSepModel([(Monomial(1), np.eye(2)), (Constant(-1), A)],
                        [(Constant(1), np.array([[1.0], [-0.5]]))],
                        [(Constant(1), np.array([[0.7, 1.2]]))])
    grid = build_grid(20.0, 256)
    report = residual_l2_stationarity(fom, rom, grid)
    bundle = gradients(fom, rom, grid)
    for name, family in (('cond-A', bundle.dA), ('cond-B', bundle.dB), ('cond-C', bundle.dC)):
        for record in report.select(name):
            expected = np.linalg.norm(family[record.index])
            assert record.absolute == pytest.approx(expected, rel=1e-10)


def test_disjointness_violation(fom):
    """Confirm overlapping pole sets of different indices are rejected."""
    rom = DiagonalStructuredROM.from_poles([-1.0, -1.0], np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(DisjointnessViolation):
        residual_general_diag(fom, rom)


def test_unstructured_needs_first_order(so_rom):
    """Confirm quadratic denominators are refused by the Hermite conditions."""
    with pytest.raises(ValueError):
        residual_unstructured(so_rom, so_rom)


def test_second_order_records(so_rom):
    """Confirm four records per index and agreement with the difference form."""
    fom = SecondOrderROM([0.5, 2.0, 1.0], [1.5, 3.0, 0.3], [[1.0], [0.2], [-0.4]],
                         [[0.3, 1.0, 0.8]])
    report = residual_second_order(fom, so_rom)
    assert len(report) == 8
    two_d = residual_second_order_2d(fom, so_rom)
    for one, two in zip(report.select('soc1'), two_d.select('sobh1')):
        assert np.allclose(one.lhs, two.lhs)
    for four, two in zip(report.select('soc4'), two_d.select('sobh4')):
        assert np.allclose(four.lhs, -np.asarray(two.lhs))
    merged = report.merge(two_d)
    assert len(merged) == 16


def test_quadratic_residue_sums_match_second_order(so_rom):
    """Confirm residue sums over both roots of s^2 + e s + k give the second-order conditions."""
    fom = SecondOrderROM([0.5, 2.0, 1.0], [1.5, 3.0, 0.3], [[1.0], [0.2], [-0.4]],
                         [[0.3, 1.0, 0.8]])
    diagonal, _, _ = to_diagonal(so_rom)
    sums = residual_general_diag(fom, diagonal)
    direct = residual_second_order(fom, so_rom)
    plus, minus = second_order_factorization(so_rom)
    gap = np.conj(plus - minus)
    for l in range(so_rom.order):
        c = so_rom.C[:, l]
        soc1, soc2, soc3, soc4 = (direct.select(name)[l]
                                  for name in ('soc1', 'soc2', 'soc3', 'soc4'))
        s1, s2 = sums.select('cond-diag-s-1')[l], sums.select('cond-diag-s-2')[l]
        constant = [record for record in sums.select('cond-diag-s-3') if record.index == (l, 2)][0]
        for side in ('lhs', 'rhs'):
            first, second = (np.asarray(getattr(record, side)) for record in (soc1, soc2))
            hermite = getattr(soc3, side) + getattr(soc4, side)
            expected = hermite / gap[l] ** 2 + 2 * (c @ first) / gap[l] ** 3
            assert np.allclose(getattr(s1, side), first / gap[l], rtol=1e-10, atol=1e-14)
            assert np.allclose(getattr(s2, side), second / gap[l], rtol=1e-10, atol=1e-14)
            assert getattr(constant, side) == pytest.approx(expected, rel=1e-10, abs=1e-14)


def test_second_order_self_check(so_rom):
    """Confirm the second-order residuals vanish for H equal to the model."""
    copy = SecondOrderROM(so_rom.e, so_rom.k, so_rom.B, so_rom.C)
    assert residual_second_order(copy, so_rom).passed(1e-12)


def test_ph_records():
    """Confirm pairwise, Hermite and tangential records for a general model."""
    fom = gen_ph_random(6, m=2, seed=8)
    model = gen_ph_random(3, m=2, seed=9)
    report = residual_ph(fom, model)
    assert len(report.select('BeaB14-pH-1')) == 9
    assert len(report.select('BeaB14-pH-2')) == 3
    assert len(report.select('pH-interp-tangential')) == 1
    for record in report.select('BeaB14-pH-1'):
        if record.index[0] == record.index[1]:
            assert record.absolute == 0


def test_ph_normal_conditions():
    """Confirm normal models add the Hermitian-part records and their cross-check."""
    fom = gen_ph_random(5, m=1, seed=10)
    J = np.array([[0.0, 2.0], [-2.0, 0.0]])
    model = PHModel(J, 0.5 * np.eye(2), [[1.0], [0.4]])
    report = residual_ph(fom, model)
    assert len(report.select('new-ph-1')) == 2
    assert len(report.select('phG3')) == 2
    assert report.checks['phG-vs-new-ph'] == pytest.approx(0, abs=1e-12)


def test_ph_needs_square_system(fom):
    """Confirm non-square systems are refused."""
    model = PHModel([[0.0, 1.0], [-1.0, 0.0]], np.eye(2), [[1.0], [0.0]])
    rectangular = gen_random_stable(4, m=1, p=2, seed=1)
    with pytest.raises(ValueError, match="square"):
        residual_ph(rectangular, model)


def test_delay_fixed_window(delay_fom, delay_rom):
    """Confirm a fixed window gives five records per index and the merged identity."""
    report = residual_delay(delay_fom, delay_rom, branch_window=16)
    assert len(report) == 10
    assert report.truncation['window'] == 16
    assert not report.truncation['adaptive']
    assert report.checks['td-cond3+td-cond4-vs-merged'] < 1e-12


def test_delay_adaptive_window(delay_fom, delay_rom):
    """Confirm the adaptive window stops once the tail rule holds."""
    report = residual_delay(delay_fom, delay_rom)
    assert report.truncation['adaptive']
    assert report.truncation['tail'] <= 1e-5
    assert report.truncation['window'] & (report.truncation['window'] - 1) == 0


def test_delay_truncation_cap(delay_fom, delay_rom):
    """Confirm TruncationNotConverged when the cap is reached first."""
    with pytest.raises(TruncationNotConverged):
        residual_delay(delay_fom, delay_rom, cap=2)


def test_delay_disjointness(delay_fom):
    """Confirm identical delay indices are rejected."""
    rom = DelayROM([-1.0, -1.0], [0.3, 0.3], 0.5, [[1.0], [1.0]], [[1.0, 1.0]])
    with pytest.raises(DisjointnessViolation):
        residual_delay(delay_fom, rom, branch_window=4)


def test_report_encoding():
    """Confirm the JSON and table renderings of a report."""
    report = ConditionReport('unstructured')
    report.add('lti-oc1', 0, np.array([1.0, 2.0]), np.array([1.0, 2.0 + 1e-9]))
    report.add('lti-oc3', (1, 2), 3.0, 2.0)
    d = report.to_json(tolerance=1e-6)
    assert d['passed'] is False
    assert d['records'][1]['index'] == [1, 2]
    assert d['max_relative'] == pytest.approx(0.2)
    assert 'lti-oc3' in report.to_table()
    assert len(report.select('lti-oc1')) == 1


def test_ph_tangential_rescaling_invariance():
    """Confirm the tangential matrix residual does not depend on eigenvector scaling."""
    fom = gen_ph_random(6, m=2, seed=8)
    model = gen_ph_random(3, m=2, seed=9)
    T = ph_modal_data(model).T
    base = residual_ph(fom, model).select('pH-interp-tangential')[0]
    scaled = residual_ph(fom, model, transform=T @ np.diag([2.0, 0.5j, -1.5]))
    record = scaled.select('pH-interp-tangential')[0]
    size = np.linalg.norm(base.lhs)
    assert np.allclose(record.lhs, base.lhs, rtol=0, atol=1e-10 * size)
    assert np.allclose(record.rhs, base.rhs, rtol=0, atol=1e-10 * size)
