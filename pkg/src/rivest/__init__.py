"""River transport parameter estimation from breakthrough curves.

The package solves the one-dimensional advection-dispersion equation with
immobile-phase exchange in the Laplace domain, builds reusable dimensionless
synthetic datasets with Karhunen-Loeve reduced-order models, and estimates
transport parameters (advection velocity, Peclet number, exchange parameters)
from measured breakthrough curves.
"""

from rivest.kernels import FirstOrderKernel, PowerLawKernel, kernel_laplace, kernel_time
from rivest.solver import (
    Formulation,
    TimeGrid,
    TransportParams,
    ade_analytical,
    boundary_factor,
    breakthrough,
    invert_dehoog,
    laplace_solution,
)

__all__ = [
    "FirstOrderKernel",
    "PowerLawKernel",
    "kernel_laplace",
    "kernel_time",
    "Formulation",
    "TimeGrid",
    "TransportParams",
    "ade_analytical",
    "boundary_factor",
    "breakthrough",
    "invert_dehoog",
    "laplace_solution",
]

__version__ = "0.1.0"
