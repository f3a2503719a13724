"""Synthetic dataset of dimensionless breakthrough curves.

Coarse parameter estimates from field curves are condensed into a
multivariate lognormal prior (with iterative outlier rejection), the prior
is sampled, and each sample is run through the Laplace-domain solver on the
canonical time grid. The resulting ensemble is reusable across measured
curves of the same kernel family and formulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rivest.kernels import FirstOrderKernel, PowerLawKernel
from rivest.solver import Formulation, TimeGrid, TransportParams, breakthrough

FIRST_ORDER = "first_order"
POWER_LAW = "power_law"

OUTLIER_MAHALANOBIS = 4.0
PARAM_DIM = 3


class PriorError(ValueError):
    """Raised when a lognormal prior cannot be fitted or sampled."""


class GenerationError(RuntimeError):
    """Raised when a sampled parameter set yields an invalid curve."""


@dataclass(frozen=True)
class DimensionlessParams:
    """The three dimensionless parameters of one transport model.

    For the first-order family the components are (Pe, beta*k_f, k_r); for
    the power-law family they are (Pe, beta*alpha, 1 - gamma). Exchange
    strength enters the mobile solution only through the products, so beta
    itself is not identifiable and is folded into the second component.
    """

    family: str
    values: tuple[float, float, float]

    def __post_init__(self):
        if self.family not in (FIRST_ORDER, POWER_LAW):
            raise ValueError(f"unknown family {self.family!r}")
        if len(self.values) != PARAM_DIM:
            raise ValueError(f"expected {PARAM_DIM} components, got {len(self.values)}")
        if not all(v > 0 for v in self.values):
            raise ValueError(f"all components must be positive, got {self.values}")
        if self.family == POWER_LAW and not self.values[2] < 1.0:
            raise ValueError(f"1 - gamma must lie in (0, 1), got {self.values[2]}")

    @property
    def pe(self) -> float:
        return self.values[0]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def transport_params(self, mass: float = 1.0) -> TransportParams:
        """Forward-solver parameters with beta folded into the kernel scale."""
        pe, product, third = self.values
        if self.family == FIRST_ORDER:
            kernel = FirstOrderKernel(k_f=product, k_r=third)
        else:
            kernel = PowerLawKernel(alpha=product, gamma=1.0 - third)
        return TransportParams(pe=pe, beta=1.0, kernel=kernel, mass=mass)

    def named(self) -> dict:
        """Component names for reports and result files."""
        pe, product, third = self.values
        if self.family == FIRST_ORDER:
            return {"Pe": pe, "beta_k_f": product, "k_r": third}
        return {"Pe": pe, "beta_alpha": product, "gamma": 1.0 - third}

    @classmethod
    def from_array(cls, family: str, values) -> "DimensionlessParams":
        v = tuple(float(x) for x in values)
        return cls(family=family, values=v)  # type: ignore[arg-type]


@dataclass(frozen=True)
class LogNormalPrior:
    """Multivariate lognormal prior over the dimensionless parameters."""

    mu_log: np.ndarray
    sigma_log: np.ndarray
    b: float = 2.0
    family: str | None = None
    inlier_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    def __post_init__(self):
        mu = np.asarray(self.mu_log, dtype=float)
        sigma = np.asarray(self.sigma_log, dtype=float)
        object.__setattr__(self, "mu_log", mu)
        object.__setattr__(self, "sigma_log", sigma)
        object.__setattr__(self, "inlier_indices", np.asarray(self.inlier_indices, dtype=int))
        if mu.shape != (PARAM_DIM,):
            raise PriorError(f"mu_log must have shape ({PARAM_DIM},), got {mu.shape}")
        if sigma.shape != (PARAM_DIM, PARAM_DIM):
            raise PriorError(f"sigma_log must be {PARAM_DIM}x{PARAM_DIM}, got {sigma.shape}")
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise PriorError("sigma_log must be symmetric")
        if np.linalg.eigvalsh(sigma).min() <= 0:
            raise PriorError("sigma_log must be positive definite")
        if not self.b > 0:
            raise PriorError(f"variance inflation b must be positive, got {self.b}")

    def to_dict(self) -> dict:
        out = {"mu_log": self.mu_log.tolist(), "sigma_log": self.sigma_log.tolist(), "b": self.b}
        if self.family is not None:
            out["family"] = self.family
        return out

    @classmethod
    def from_dict(cls, record: dict) -> "LogNormalPrior":
        return cls(
            mu_log=np.asarray(record["mu_log"], dtype=float),
            sigma_log=np.asarray(record["sigma_log"], dtype=float),
            b=float(record.get("b", 2.0)),
            family=record.get("family"),
        )


def _inverse_sqrt(sigma: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root; raises on a numerically singular input."""
    w, v = np.linalg.eigh(sigma)
    if w.min() <= w.max() * 1e-12 or w.max() <= 0:
        raise PriorError("covariance of log-parameters is singular (inliers are collinear)")
    return (v / np.sqrt(w)) @ v.T


def fit_prior(estimates: Sequence[DimensionlessParams], b: float = 2.0) -> LogNormalPrior:
    """Fit the lognormal prior with iterative Mahalanobis outlier rejection.

    At each pass the sample mean and covariance of ln(y) are computed over
    the current inliers and every sample farther than 4 standardized units
    (exceedance probability 0.1% under the chi-square law) is dropped. The
    loop ends when a pass drops nothing.

    Raises
    ------
    PriorError
        If fewer than d + 2 estimates survive or the log-covariance is
        singular.
    """
    if len(estimates) < PARAM_DIM + 2:
        raise PriorError(f"need at least {PARAM_DIM + 2} estimates, got {len(estimates)}")
    families = {e.family for e in estimates}
    if len(families) != 1:
        raise PriorError(f"estimates mix families: {sorted(families)}")
    family = families.pop()

    log_y = np.log(np.array([e.as_array() for e in estimates]))
    keep = np.arange(len(estimates))
    while True:
        if len(keep) < PARAM_DIM + 2:
            raise PriorError(f"outlier rejection left {len(keep)} inliers; need at least {PARAM_DIM + 2}")
        current = log_y[keep]
        mu = current.mean(axis=0)
        sigma = np.cov(current, rowvar=False, ddof=1)
        w_inv_sqrt = _inverse_sqrt(sigma)
        dist = np.linalg.norm((current - mu) @ w_inv_sqrt.T, axis=1)
        inlier = dist <= OUTLIER_MAHALANOBIS
        if inlier.all():
            return LogNormalPrior(mu_log=mu, sigma_log=sigma, b=b, family=family, inlier_indices=keep)
        keep = keep[inlier]


def sample_prior(
    prior: LogNormalPrior,
    n: int,
    seed: int,
    family: str | None = None,
    max_retries: int = 1000,
) -> list[DimensionlessParams]:
    """Draw parameter vectors from the inflated prior.

    ln(y) is drawn from Normal(mu_log, b * sigma_log) through the Cholesky
    factor. For the power-law family, draws with 1 - gamma >= 1 are
    rejected and redrawn so gamma stays positive.
    """
    family = family or prior.family
    if family not in (FIRST_ORDER, POWER_LAW):
        raise PriorError(f"sampling requires a known family, got {family!r}")
    chol = np.linalg.cholesky(prior.b * prior.sigma_log)
    rng = np.random.default_rng(seed)

    def draw(k: int) -> np.ndarray:
        return np.exp(prior.mu_log + rng.standard_normal((k, PARAM_DIM)) @ chol.T)

    y = draw(n)
    if family == POWER_LAW:
        for _ in range(max_retries):
            bad = y[:, 2] >= 1.0
            if not bad.any():
                break
            y[bad] = draw(int(bad.sum()))
        else:
            raise PriorError(f"could not sample 1 - gamma < 1 within {max_retries} retries")
    return [DimensionlessParams.from_array(family, row) for row in y]


@dataclass(frozen=True)
class SyntheticDataset:
    """Parameter samples paired with breakthrough curves on a fixed grid."""

    grid: TimeGrid
    family: str
    formulation: Formulation
    seed: int
    prior: LogNormalPrior
    samples: np.ndarray  # (n, 3)
    curves: np.ndarray  # (n, grid.count)
    mass: float = 1.0

    MASS_LOWER = 0.5
    MASS_UPPER = 1.001

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float))
        object.__setattr__(self, "curves", np.asarray(self.curves, dtype=float))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def params(self, i: int) -> DimensionlessParams:
        return DimensionlessParams.from_array(self.family, self.samples[i])

    def validate(self) -> None:
        """Check the ensemble invariants: shape, positivity, mass recovery."""
        n = self.n_samples
        if self.curves.shape != (n, self.grid.count):
            raise GenerationError(
                f"curves shape {self.curves.shape} does not match {n} samples x {self.grid.count} grid points"
            )
        if np.any(self.curves < 0):
            i = int(np.argwhere((self.curves < 0).any(axis=1))[0, 0])
            raise GenerationError(f"curve {i} has negative values")
        masses = np.trapezoid(self.curves, dx=self.grid.step, axis=1)
        low = masses < self.MASS_LOWER * self.mass
        high = masses > self.MASS_UPPER * self.mass
        if low.any() or high.any():
            i = int(np.argmax(low | high))
            raise GenerationError(
                f"curve {i} recovers mass {masses[i]:.4f} outside "
                f"[{self.MASS_LOWER}, {self.MASS_UPPER}] x {self.mass} "
                f"(sample {self.samples[i]})"
            )


def generate_dataset(
    prior: LogNormalPrior,
    n_synth: int,
    formulation: Formulation,
    family: str | None = None,
    seed: int = 0,
    grid: TimeGrid | None = None,
    mass: float = 1.0,
) -> SyntheticDataset:
    """Sample the prior and solve the forward model for every sample.

    Deterministic for a fixed (prior, n_synth, seed, formulation, family).
    Solver failures and ensemble-invariant violations are reported with the
    offending sample index.
    """
    family = family or prior.family
    if grid is None:
        grid = TimeGrid.canonical()
    formulation = Formulation(formulation)
    samples = sample_prior(prior, n_synth, seed, family=family)
    curves = np.empty((n_synth, grid.count))
    for i, y in enumerate(samples):
        try:
            curves[i] = breakthrough(y.transport_params(mass), formulation, grid)
        except Exception as exc:
            raise GenerationError(f"forward solve failed for sample {i} ({y.values}): {exc}") from exc
    dataset = SyntheticDataset(
        grid=grid,
        family=family,
        formulation=formulation,
        seed=seed,
        prior=prior,
        samples=np.array([y.as_array() for y in samples]),
        curves=curves,
        mass=mass,
    )
    dataset.validate()
    return dataset
