"""Memory kernels for mobile-immobile mass exchange.

Two kernel families are supported, in both the time domain and the Laplace
domain: first-order exchange (exponential residence times) and a pure
power law (heavy-tailed residence times). All parameters are dimensionless;
the characteristic time L/v is divided out before a kernel is built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np


class KernelPoleError(ZeroDivisionError):
    """Raised when a kernel is evaluated at one of its poles."""


@dataclass(frozen=True)
class FirstOrderKernel:
    """First-order exchange: g(t) = k_f * exp(-k_r * t).

    Parameters
    ----------
    k_f : float
        Dimensionless forward transfer rate, > 0.
    k_r : float
        Dimensionless reverse transfer rate, > 0.
    """

    k_f: float
    k_r: float

    def __post_init__(self):
        if not (self.k_f > 0 and self.k_r > 0):
            raise ValueError(f"first-order rates must be positive, got k_f={self.k_f}, k_r={self.k_r}")


@dataclass(frozen=True)
class PowerLawKernel:
    """Pure power-law exchange: g(t) = alpha * t**(-gamma) / Gamma(1 - gamma).

    Parameters
    ----------
    alpha : float
        Dimensionless exchange scale, > 0.
    gamma : float
        Power-law exponent, 0 < gamma <= 1.
    """

    alpha: float
    gamma: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")


MemoryKernel = Union[FirstOrderKernel, PowerLawKernel]


def kernel_laplace(kernel: MemoryKernel, s):
    """Laplace transform G(s) of the memory kernel.

    Accepts scalar or array `s` (real or complex). Complex powers use the
    principal branch, which is analytic on the right half-plane where the
    inversion contour lives.

    Raises
    ------
    KernelPoleError
        For a power-law kernel with gamma < 1 evaluated at s = 0, where
        G(s) = alpha * s**(gamma - 1) has a pole.
    """
    s = np.asarray(s)
    if isinstance(kernel, FirstOrderKernel):
        return kernel.k_f / (kernel.k_r + s)
    if isinstance(kernel, PowerLawKernel):
        if kernel.gamma == 1.0:
            return np.full_like(s, kernel.alpha, dtype=complex)
        if np.any(s == 0):
            raise KernelPoleError("power-law kernel transform has a pole at s = 0 for gamma < 1")
        return kernel.alpha * np.power(s.astype(complex), kernel.gamma - 1.0)
    raise TypeError(f"unknown kernel type: {type(kernel)!r}")


def kernel_time(kernel: MemoryKernel, t):
    """Evaluate the memory kernel g(t) at dimensionless times t > 0.

    Raises
    ------
    KernelPoleError
        For a power-law kernel with gamma = 1 (the 1/Gamma(1 - gamma)
        prefactor is singular; only the Laplace form exists there).
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("kernel_time requires t > 0")
    if isinstance(kernel, FirstOrderKernel):
        return kernel.k_f * np.exp(-kernel.k_r * t)
    if isinstance(kernel, PowerLawKernel):
        if kernel.gamma == 1.0:
            raise KernelPoleError("time-domain power-law kernel is undefined at gamma = 1")
        return kernel.alpha * t ** (-kernel.gamma) / math.gamma(1.0 - kernel.gamma)
    raise TypeError(f"unknown kernel type: {type(kernel)!r}")


def kernel_to_dict(kernel: MemoryKernel) -> dict:
    """Serialize a kernel to its tagged-record form."""
    if isinstance(kernel, FirstOrderKernel):
        return {"family": "first_order", "k_f": kernel.k_f, "k_r": kernel.k_r}
    if isinstance(kernel, PowerLawKernel):
        return {"family": "power_law", "alpha": kernel.alpha, "gamma": kernel.gamma}
    raise TypeError(f"unknown kernel type: {type(kernel)!r}")


def kernel_from_dict(record: dict) -> MemoryKernel:
    """Build a kernel from its tagged-record form."""
    family = record.get("family")
    if family == "first_order":
        return FirstOrderKernel(k_f=float(record["k_f"]), k_r=float(record["k_r"]))
    if family == "power_law":
        return PowerLawKernel(alpha=float(record["alpha"]), gamma=float(record["gamma"]))
    raise ValueError(f"unknown kernel family: {family!r}")
