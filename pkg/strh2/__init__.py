"""
Structured H2-optimal model reduction.

Distributed under the GNU General Public License v3
Copyright (C) 2022 NuMat Technologies
"""
from strh2.cli import command_line
from strh2.h2metric import (
    FrequencyGrid,
    build_grid,
    h2_error_quadrature,
    h2_inner_rational,
    h2_norm_gramian,
)
from strh2.optcond import (
    residual_delay,
    residual_general_diag,
    residual_l2_diag,
    residual_l2_stationarity,
    residual_ph,
    residual_second_order,
    residual_second_order_2d,
    residual_unstructured,
)
from strh2.structopt import make_parameterization, minimize, reduce
from strh2.sysmodel import (
    DelayROM,
    DiagonalStructuredROM,
    ParamSepModel,
    PHModel,
    SecondOrderROM,
    StateSpaceFOM,
    load_model,
    save_model,
)
from strh2.wirtinger import gradients

__all__ = [
    'DelayROM',
    'DiagonalStructuredROM',
    'FrequencyGrid',
    'PHModel',
    'ParamSepModel',
    'SecondOrderROM',
    'StateSpaceFOM',
    'build_grid',
    'command_line',
    'gradients',
    'h2_error_quadrature',
    'h2_inner_rational',
    'h2_norm_gramian',
    'load_model',
    'make_parameterization',
    'minimize',
    'reduce',
    'residual_delay',
    'residual_general_diag',
    'residual_l2_diag',
    'residual_l2_stationarity',
    'residual_ph',
    'residual_second_order',
    'residual_second_order_2d',
    'residual_unstructured',
    'save_model',
]
