"""Command line tool: generate, h2norm, reduce, gradcheck, check-conditions, report."""
from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from strh2 import bench, optcond
from strh2.h2metric import default_grid, h2_error_quadrature, h2_norm_gramian
from strh2.structopt import STRUCTURES, make_parameterization, reduce
from strh2.sysmodel import (
    DelayROM,
    DiagonalStructuredROM,
    ParamSepModel,
    PHModel,
    SecondOrderROM,
    StateSpaceFOM,
    load_model,
    save_model,
    to_delay_rom,
    to_diagonal,
    to_second_order,
)
from strh2.util import (
    OptimizationFailed,
    StabilityCheckFailed,
    Strh2Error,
    UnstablePole,
    UnstableSystem,
)
from strh2.wirtinger import finite_difference_gradient

logger = logging.getLogger('strh2')

EXIT_USAGE = 2
EXIT_UNSTABLE = 3
EXIT_OPTIMIZER = 4
EXIT_CERTIFICATION = 5


class ExitCode(Exception):
    """Stop a sub-command with a non-zero exit status."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Everything that determines a run, embedded in its outputs."""

    command: str
    inputs: list = field(default_factory=list)
    output: Optional[str] = None
    structure: Optional[str] = None
    order: Optional[int] = None
    grid_nodes: Optional[int] = None
    grid_scale: Optional[float] = None
    decay_order: int = 2
    tolerance: Optional[float] = None
    restarts: Optional[int] = None
    seed: Optional[int] = None
    grad_tol: Optional[float] = None
    max_iter: Optional[int] = None
    branch_window: Optional[int] = None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> RunConfig:
        """Collect the fields present on parsed arguments."""
        inputs = [getattr(args, key) for key in ('fom', 'rom', 'model')
                  if getattr(args, key, None)]
        values = {key: getattr(args, key) for key in cls.__dataclass_fields__
                  if key not in ('command', 'inputs', 'tolerance') and hasattr(args, key)}
        return cls(command=args.command, inputs=inputs, tolerance=getattr(args, 'tol', None),
                   **values)


def _stamp(config: RunConfig, payload: dict) -> dict:
    return {**payload, 'config': asdict(config),
            'created': datetime.now(timezone.utc).isoformat()}


def _write_json(path: str, payload: dict):
    with open(path, 'w') as out_file:
        json.dump(payload, out_file, indent=2, sort_keys=True)
        out_file.write('\n')
    logger.info(f"Wrote {path}")


def _grid(args, fom, rom=None):
    return default_grid(fom, rom, args.grid_nodes, args.grid_scale, args.decay_order)


def as_structured(model: ParamSepModel, structure: str) -> ParamSepModel:
    """Bring a model into the reduced form the structure's conditions expect."""
    if structure == 'unstructured':
        return model if isinstance(model, DiagonalStructuredROM) else to_diagonal(model)[0]
    elif structure == 'so':
        return model if isinstance(model, SecondOrderROM) else to_second_order(model)
    elif structure == 'ph':
        if not isinstance(model, PHModel):
            raise ValueError("Port-Hamiltonian conditions need a 'ph' model file")
        return model
    elif structure == 'delay':
        return model if isinstance(model, DelayROM) else to_delay_rom(model)
    raise ValueError(f"Unsupported structure: {structure}")


def certify(fom, rom, structure: str, branch_window: Optional[int] = None):
    """Return the condition report of a structure."""
    if structure == 'unstructured':
        return optcond.residual_unstructured(fom, rom)
    elif structure == 'so':
        return optcond.residual_second_order(fom, rom).merge(
            optcond.residual_second_order_2d(fom, rom))
    elif structure == 'ph':
        return optcond.residual_ph(fom, rom)
    elif structure == 'delay':
        return optcond.residual_delay(fom, rom, branch_window)
    raise ValueError(f"Unsupported structure: {structure}")


def _pair_order(poles) -> np.ndarray:
    """Indices putting real poles first, then each upper pole before its conjugate."""
    poles = np.asarray(poles)
    order = [i for i in range(poles.size) if poles[i].imag == 0]
    lower = [i for i in range(poles.size) if poles[i].imag < 0]
    for i in (i for i in range(poles.size) if poles[i].imag > 0):
        if not lower:
            raise ValueError("Reduced poles are not closed under conjugation")
        j = min(lower, key=lambda k: abs(poles[k] - np.conj(poles[i])))
        lower.remove(j)
        order.extend([i, j])
    if lower:
        raise ValueError("Reduced poles are not closed under conjugation")
    return np.array(order, dtype=int)


def _parameterization(structure: str, rom: ParamSepModel):
    """Return (parameterization, rom in the parameterization's index order)."""
    p, m = rom.shape
    options = {}
    if structure in ('unstructured', 'delay'):
        poles = rom.mu if isinstance(rom, DelayROM) else rom.diagonals[1]
        order = _pair_order(poles)
        if isinstance(rom, DelayROM):
            rom = DelayROM(rom.mu[order], rom.sigma[order], rom.tau, rom.B[order],
                           rom.C[:, order])
            options['tau'] = rom.tau
        else:
            rom = DiagonalStructuredROM.from_poles(poles[order], rom.B[order], rom.C[:, order])
        options['n_real'] = int(np.sum(np.imag(poles) == 0))
    param = make_parameterization(structure, rom.order, m, p, **options)
    point = 1j * rom.frequency_scale() + 0.5
    roundtrip = param.unpack(param.pack(rom)).eval_transfer(point)
    if not np.allclose(roundtrip, rom.eval_transfer(point), rtol=1e-8, atol=1e-12):
        raise ValueError(f"Reduced model is not in real-parameterized '{structure}' form")
    return param, rom


def cmd_generate(args, config: RunConfig) -> dict:
    """Write one generated model, or the whole corpus with --corpus."""
    if args.corpus:
        paths = bench.write_corpus(args.corpus)
        return {'corpus': [spec.to_json() for spec in bench.CORPUS], 'paths': paths}
    seed = None if args.seed is None and args.kind == 'msd' else (args.seed or 0)
    spec = bench.ModelSpec(args.kind, args.n, args.m, args.p, seed, args.alpha, args.beta,
                           args.tau)
    path = args.output or f"{spec.name}.json"
    save_model(bench.generate(spec), path)
    return {'name': spec.name, 'spec': spec.to_json(), 'path': path}


def cmd_h2norm(args, config: RunConfig) -> dict:
    """H2 norm by quadrature and, for delay-free state-space models, by Gramian."""
    model = load_model(args.model)
    model.check_stability()
    grid = _grid(args, model)
    estimate = h2_error_quadrature(model, None, grid)
    norm = math.sqrt(estimate.value)
    result = {'h2_norm_quadrature': norm,
              'uncertainty': estimate.uncertainty / (2 * norm) if norm else estimate.uncertainty,
              'tail_bound': grid.tail_bound, 'grid_nodes': len(grid)}
    if isinstance(model, PHModel):
        model = StateSpaceFOM(np.eye(model.order), model.J - model.R, model.B, model.B.T)
    if isinstance(model, StateSpaceFOM) and model.A_tau is None:
        gramian = h2_norm_gramian(model)
        result.update(h2_norm_gramian=gramian, discrepancy=abs(gramian - norm))
    return _stamp(config, result)


def cmd_reduce(args, config: RunConfig) -> dict:
    """Reduce, write model/result/report files and certify the result."""
    fom = load_model(args.fom)
    if args.order >= fom.order:
        raise ExitCode(EXIT_USAGE, f"Reduced order {args.order} must be below {fom.order}")
    fom.check_stability()
    grid = _grid(args, fom)
    options = {'max_iter': args.max_iter, 'grad_tol': args.grad_tol}
    try:
        best, runs = asyncio.run(reduce(fom, args.structure, args.order, grid,
                                        restarts=args.restarts, seed=args.seed or 0, **options))
    except OptimizationFailed as e:
        raise ExitCode(EXIT_OPTIMIZER, str(e)) from e
    report = certify(fom, best.model, args.structure, args.branch_window)
    prefix = args.output or 'reduced'
    save_model(best.model, f"{prefix}.model.json")
    logger.info(f"Wrote {prefix}.model.json")
    summary = [None if run is None else {key: run.to_json()[key] for key in
                                         ('restart', 'cost', 'gradient_norm', 'termination')}
               for run in runs]
    _write_json(f"{prefix}.result.json", _stamp(config, {**best.to_json(), 'runs': summary}))
    _write_json(f"{prefix}.report.json", _stamp(config, report.to_json(args.tol)))
    print(report.to_table())
    if not report.passed(args.tol):
        raise ExitCode(EXIT_CERTIFICATION, f"Certification failed: max relative residual "
                                           f"{report.max_relative:.3e} >= {args.tol}")
    return _stamp(config, {'cost': best.cost, 'gradient_norm': best.gradient_norm,
                           'max_relative': report.max_relative, 'passed': True})


def cmd_gradcheck(args, config: RunConfig) -> dict:
    """Compare the parameterized gradient with 5-point finite differences."""
    fom = load_model(args.fom)
    rom = as_structured(load_model(args.rom), args.structure)
    param, rom = _parameterization(args.structure, rom)
    grid = _grid(args, fom, rom)
    theta = param.pack(rom)
    _, analytic = param.cost_and_gradient(fom, theta, grid)
    if analytic is None:
        raise ExitCode(EXIT_UNSTABLE, "Reduced model is infeasible")
    numeric = finite_difference_gradient(lambda x: param.cost(fom, x, grid), theta)
    floor = 1e-3 * max(np.abs(numeric).max(), 1e-300)
    errors = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)
    print(f"{'coordinate':<12}{'analytic':>16}{'finite diff':>16}{'rel error':>12}")
    for i, (a, f, e) in enumerate(zip(analytic, numeric, errors)):
        print(f"{i:<12}{a:>16.8e}{f:>16.8e}{e:>12.3e}")
    result = _stamp(config, {'max_relative_error': float(errors.max()),
                             'coordinates': theta.size})
    if errors.max() >= args.tol:
        raise ExitCode(EXIT_CERTIFICATION, f"Gradient check failed: {errors.max():.3e}")
    return result


def cmd_check_conditions(args, config: RunConfig) -> dict:
    """Print the condition table; exit 5 unless every residual is below --tol."""
    fom = load_model(args.fom)
    rom = as_structured(load_model(args.rom), args.structure)
    report = certify(fom, rom, args.structure, args.branch_window)
    print(report.to_table())
    payload = _stamp(config, report.to_json(args.tol))
    if args.output:
        _write_json(args.output, payload)
    if not report.passed(args.tol):
        raise ExitCode(EXIT_CERTIFICATION, f"Certification failed: max relative residual "
                                           f"{report.max_relative:.3e} >= {args.tol}")
    return {'passed': True, 'max_relative': report.max_relative}


def cmd_report(args, config: RunConfig):
    """Write omega,abs_error rows over the grid."""
    fom, rom = load_model(args.fom), load_model(args.rom)
    grid = _grid(args, fom, rom)
    error = np.linalg.norm(fom.eval_transfer_many(grid.points)
                           - rom.eval_transfer_many(grid.points), axis=(1, 2))
    out_file = open(args.output, 'w', newline='') if args.output else sys.stdout
    try:
        writer = csv.writer(out_file)
        writer.writerow(['omega', 'abs_error'])
        writer.writerows((repr(float(w)), repr(float(e))) for w, e in zip(grid.nodes, error))
    finally:
        if args.output:
            out_file.close()


def _add_grid(parser):
    parser.add_argument('--grid-nodes', type=int, default=None,
                        help="Quadrature nodes (default 1024, 4096 for delay models)")
    parser.add_argument('--grid-scale', type=float, default=None,
                        help="Half width of the tan substitution (default 10x pole scale)")
    parser.add_argument('--decay-order', type=int, default=2,
                        help="Assumed decay order of ||H(iw)||^2 (default 2)")


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser with one sub-parser per sub-command."""
    parser = argparse.ArgumentParser(description="Structured H2-optimal model reduction.")
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help="Log at INFO (-v) or DEBUG (-vv)")
    commands = parser.add_subparsers(dest='command', required=True)

    generate = commands.add_parser('generate', help="Write a seeded benchmark model.")
    generate.add_argument('--kind', choices=('random', 'msd', 'ph', 'delay'), default='random')
    generate.add_argument('--n', type=int, default=10, help="Model order (masses for msd)")
    generate.add_argument('--m', type=int, default=1, help="Inputs")
    generate.add_argument('--p', type=int, default=1, help="Outputs")
    generate.add_argument('--seed', type=int, default=None)
    generate.add_argument('--alpha', type=float, default=0.1, help="Rayleigh mass factor")
    generate.add_argument('--beta', type=float, default=0.05, help="Rayleigh stiffness factor")
    generate.add_argument('--tau', type=float, default=0.5, help="Internal delay")
    generate.add_argument('--corpus', type=str, default=None,
                          help="Write the whole corpus to this directory")
    generate.add_argument('-o', '--output', type=str, default=None)

    h2norm = commands.add_parser('h2norm', help="Print the H2 norm of a model file.")
    h2norm.add_argument('model', type=str)
    _add_grid(h2norm)

    reducer = commands.add_parser('reduce', help="Reduce a model and certify the result.")
    reducer.add_argument('fom', type=str)
    reducer.add_argument('--structure', choices=STRUCTURES, default='unstructured')
    reducer.add_argument('--order', type=int, required=True)
    reducer.add_argument('--restarts', type=int, default=10)
    reducer.add_argument('--grad-tol', type=float, default=1e-9)
    reducer.add_argument('--max-iter', type=int, default=500)
    reducer.add_argument('--seed', type=int, default=0)
    reducer.add_argument('--tol', type=float, default=1e-6)
    reducer.add_argument('--branch-window', type=int, default=None)
    reducer.add_argument('-o', '--output', type=str, default=None,
                         help="Prefix of the .model/.result/.report.json files")
    _add_grid(reducer)

    for name, text in (('gradcheck', "Compare analytic and finite-difference gradients."),
                       ('check-conditions', "Evaluate the interpolatory conditions.")):
        sub = commands.add_parser(name, help=text)
        sub.add_argument('fom', type=str)
        sub.add_argument('rom', type=str)
        sub.add_argument('--structure', choices=STRUCTURES, default='unstructured')
        sub.add_argument('--tol', type=float, default=1e-5 if name == 'gradcheck' else 1e-6)
        sub.add_argument('--branch-window', type=int, default=None)
        sub.add_argument('-o', '--output', type=str, default=None)
        _add_grid(sub)

    report = commands.add_parser('report', help="CSV of the error magnitude over the grid.")
    report.add_argument('fom', type=str)
    report.add_argument('rom', type=str)
    report.add_argument('-o', '--output', type=str, default=None)
    _add_grid(report)
    return parser


def command_line(args=None):
    """Command line tool exposed through package install."""
    parser = build_parser()
    args = parser.parse_args(args)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')
    config = RunConfig.from_args(args)
    commands = {
        'generate': cmd_generate,
        'h2norm': cmd_h2norm,
        'reduce': cmd_reduce,
        'gradcheck': cmd_gradcheck,
        'check-conditions': cmd_check_conditions,
        'report': cmd_report,
    }
    try:
        result = commands[args.command](args, config)
    except ExitCode as e:
        logger.error(str(e))
        raise SystemExit(e.code) from e
    except (UnstableSystem, UnstablePole, StabilityCheckFailed) as e:
        logger.error(f"Unstable model: {e}")
        raise SystemExit(EXIT_UNSTABLE) from e
    except (ValueError, KeyError, OSError, Strh2Error) as e:
        logger.error(f"{type(e).__name__}: {e}")
        raise SystemExit(EXIT_USAGE) from e
    if result is not None and args.command not in ('check-conditions',):
        print(json.dumps(result, indent=4))
