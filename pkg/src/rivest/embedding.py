"""Embedding of measured breakthrough curves into KL-coefficient space.

A measured curve is sparse, irregularly sampled, and dimensional. For a
candidate advection velocity its sample times map to dimensionless times,
where the curve can be matched against the reduced-order model. The
coefficients are estimated by a regularized linear least-squares problem
(a MAP estimate with the KL eigenvalues as the prior variances), which
tolerates low sampling rates without committing to an interpolation of the
data. Records are first padded with explicit zeros outside the measured
window so the estimate is not free to invent mass there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rivest.klmodel import KLModel
from rivest.metrics import WINDOW_PEAK_MULTIPLE

VELOCITY_LOW = 0.9
VELOCITY_HIGH = 1.5
VELOCITY_STEP = 0.005
MIN_SAMPLES = 4


class EmbeddingError(RuntimeError):
    """Raised when a curve cannot be embedded at a candidate velocity."""


@dataclass(frozen=True)
class MeasuredCurve:
    """A field breakthrough curve: sample times, concentrations, reach length.

    Times are in seconds and strictly increasing; concentrations are
    nonnegative in any consistent unit; `reach_length` is the distance in
    meters from the release point to the measurement location. Interval
    weights are midpoint intervals, with one-sided halves at the ends.
    """

    times: np.ndarray
    concentrations: np.ndarray
    reach_length: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        conc = np.asarray(self.concentrations, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "concentrations", conc)
        if times.ndim != 1 or conc.shape != times.shape:
            raise ValueError("times and concentrations must be 1-D arrays of equal length")
        if len(times) < MIN_SAMPLES:
            raise ValueError(f"need at least {MIN_SAMPLES} samples, got {len(times)}")
        if not np.all(np.diff(times) > 0):
            raise ValueError("sample times must be strictly increasing")
        if times[0] < 0:
            raise ValueError("sample times must be nonnegative")
        if not np.all(np.isfinite(conc)):
            raise ValueError("concentrations must be finite")
        if np.any(conc < 0):
            raise ValueError("concentrations must be nonnegative")
        if not np.any(conc > 0):
            raise ValueError("curve has no positive concentrations")
        if not self.reach_length > 0:
            raise ValueError(f"reach length must be positive, got {self.reach_length}")

    @property
    def intervals(self) -> np.ndarray:
        """Midpoint interval weights Delta_i in seconds."""
        t = self.times
        delta = np.empty_like(t)
        delta[1:-1] = (t[2:] - t[:-2]) / 2.0
        delta[0] = (t[1] - t[0]) / 2.0
        delta[-1] = (t[-1] - t[-2]) / 2.0
        return delta

    @property
    def peak_index(self) -> int:
        """Index of the earliest maximal concentration."""
        return int(np.argmax(self.concentrations))

    @property
    def t_peak(self) -> float:
        return float(self.times[self.peak_index])

    @property
    def peak_interior(self) -> bool:
        return 0 < self.peak_index < len(self.times) - 1

    @property
    def peak_velocity(self) -> float:
        """The plug-flow velocity estimate L / t_peak in m/s."""
        return self.reach_length / self.t_peak

    def replace_samples(self, times: np.ndarray, concentrations: np.ndarray) -> "MeasuredCurve":
        return MeasuredCurve(times, concentrations, self.reach_length, dict(self.metadata))


def pad_with_zeros(curve: MeasuredCurve) -> MeasuredCurve:
    """Append zero-concentration samples outside the measured window.

    The padding spacing equals the largest inter-sample spacing of the
    original record and the padded record covers [0, 24 * t_peak]. A curve
    that already spans the window is returned with the same samples.
    """
    t = curve.times
    step = float(np.max(np.diff(t)))
    eps = step * 1e-9
    target = WINDOW_PEAK_MULTIPLE * curve.t_peak

    left = []
    if t[0] > eps:
        k_max = int(np.ceil(t[0] / step - 1e-9))
        candidates = t[0] - step * np.arange(1, k_max + 1)
        left = [x for x in candidates[::-1] if x > eps]
        left.insert(0, 0.0)
    right = []
    if t[-1] < target - eps:
        k_max = int(np.floor((target - t[-1]) / step - 1e-9))
        right = list(t[-1] + step * np.arange(1, k_max + 1))
        if not right or target - right[-1] > eps:
            right.append(target)
    if not left and not right:
        return curve

    times = np.concatenate([left, t, right])
    conc = np.concatenate([np.zeros(len(left)), curve.concentrations, np.zeros(len(right))])
    return curve.replace_samples(times, conc)


@dataclass(frozen=True)
class VelocityGrid:
    """Candidate advection velocities for the decoupled search."""

    velocities: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "velocities", np.asarray(self.velocities, dtype=float))
        if not np.all(np.diff(self.velocities) > 0):
            raise ValueError("velocities must be strictly increasing")

    @classmethod
    def for_curve(
        cls,
        curve: MeasuredCurve,
        low: float = VELOCITY_LOW,
        high: float = VELOCITY_HIGH,
        step: float = VELOCITY_STEP,
    ) -> "VelocityGrid":
        """Velocities spanning [low, high] * L / t_peak at `step` resolution."""
        n = int(round((high - low) / step))
        factors = low + step * np.arange(n + 1)
        return cls(velocities=factors * curve.peak_velocity)

    def __len__(self) -> int:
        return len(self.velocities)


@dataclass(frozen=True)
class EmbeddedCurve:
    """Per-velocity KL coefficients of one measured curve."""

    velocities: np.ndarray  # (M,)
    coefficients: np.ndarray  # (M, N); rows of NaN where infeasible
    feasible: np.ndarray  # (M,) bool
    sigma_c: float

    def __post_init__(self):
        if len(self.velocities) != len(self.coefficients) or len(self.velocities) != len(self.feasible):
            raise ValueError("one coefficient vector and one flag per grid velocity")


def _interpolate_model(kl: KLModel, tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean curve and eigenfunctions linearly interpolated at dimensionless times.

    Times beyond the model grid evaluate to zero.
    """
    grid_t = kl.grid.times
    mean_i = np.interp(tau, grid_t, kl.mean, left=0.0, right=0.0)
    phi_i = np.empty((kl.n_modes, len(tau)))
    for j in range(kl.n_modes):
        phi_i[j] = np.interp(tau, grid_t, kl.eigenfunctions[j], left=0.0, right=0.0)
    return mean_i, phi_i


def embed(curve: MeasuredCurve, kl: KLModel, velocity: float, sigma_c: float) -> np.ndarray:
    """MAP estimate of the KL coefficients of a curve at one velocity.

    Solves the regularized linear least-squares problem in which the
    residuals are differences of interval-weighted, sum-normalized
    concentrations; the model normalization uses the mean curve only, which
    keeps the problem linear. The data misfit is scaled by 1/(N* sigma_c^2)
    and the prior term is Z' diag(1/lambda) Z.

    Raises
    ------
    EmbeddingError
        If the curve's dimensionless sample times miss the model support
        entirely (the velocity is implausible).
    """
    if not velocity > 0:
        raise ValueError("velocity must be positive")
    if not sigma_c > 0:
        raise ValueError("sigma_c must be positive")
    tau = curve.times * velocity / curve.reach_length
    mean_i, phi_i = _interpolate_model(kl, tau)
    delta = curve.intervals
    s_model = float(np.sum(mean_i * delta))
    if s_model <= 0:
        raise EmbeddingError(f"velocity {velocity:.4g} maps all samples outside the model support")
    s_data = float(np.sum(curve.concentrations * delta))
    if s_data <= 0:
        raise EmbeddingError("curve has zero integrated mass")

    p = curve.concentrations * delta / s_data
    m_vec = mean_i * delta / s_model
    design = (phi_i * delta).T / s_model  # (N*, n_modes)
    n_star = len(tau)
    scale = 1.0 / (n_star * sigma_c ** 2)
    lhs = scale * design.T @ design + np.diag(1.0 / kl.eigenvalues)
    rhs = scale * design.T @ (p - m_vec)
    return np.linalg.solve(lhs, rhs)


def embed_over_velocities(
    curve: MeasuredCurve,
    kl: KLModel,
    grid: VelocityGrid,
    sigma_c: float,
) -> EmbeddedCurve:
    """Embed a curve at every grid velocity, flagging infeasible ones."""
    m = len(grid)
    coeffs = np.full((m, kl.n_modes), np.nan)
    feasible = np.zeros(m, dtype=bool)
    for i, v in enumerate(grid.velocities):
        try:
            coeffs[i] = embed(curve, kl, v, sigma_c)
            feasible[i] = True
        except EmbeddingError:
            continue
    if not feasible.any():
        raise EmbeddingError("no feasible velocity in the search grid")
    return EmbeddedCurve(velocities=grid.velocities.copy(), coefficients=coeffs, feasible=feasible, sigma_c=sigma_c)


DEFAULT_SIGMA_CANDIDATES = np.logspace(-4.0, 1.0, 25)


def tune_sigma_c(
    curves: Sequence[MeasuredCurve],
    kl: KLModel,
    candidates: Sequence[float] | None = None,
    seed: int = 0,
    validation_fraction: float = 0.2,
) -> float:
    """Pick the likelihood scale by held-out validation error.

    For each candidate, every curve's nonzero measurements are split 80/20;
    the coefficients are estimated from the training side at the curve's
    peak velocity, and the validation error is the L2 mismatch of the
    normalized reconstruction at the held-out samples. The score is the
    geometric mean of validation errors across curves.
    """
    if candidates is None:
        candidates = DEFAULT_SIGMA_CANDIDATES
    candidates = np.asarray(list(candidates), dtype=float)
    if candidates.size == 0:
        raise ValueError("need at least one sigma_c candidate")
    if len(curves) == 0:
        raise ValueError("need at least one curve")

    rng = np.random.default_rng(seed)
    splits = []
    for curve in curves:
        padded = pad_with_zeros(curve)
        nonzero = np.flatnonzero(padded.concentrations > 0)
        if len(nonzero) < 5:
            raise ValueError("each curve needs at least 5 positive samples to split")
        n_val = max(1, int(round(validation_fraction * len(nonzero))))
        if n_val >= len(nonzero):
            n_val = len(nonzero) - 1
        val_idx = rng.choice(nonzero, size=n_val, replace=False)
        train_mask = np.ones(len(padded.times), dtype=bool)
        train_mask[val_idx] = False
        train = padded.replace_samples(padded.times[train_mask], padded.concentrations[train_mask])
        splits.append((curve, padded, train, np.sort(val_idx)))

    scores = np.empty(len(candidates))
    for c, sigma in enumerate(candidates):
        log_errors = []
        for curve, padded, train, val_idx in splits:
            z = embed(train, kl, curve.peak_velocity, sigma)
            tau = padded.times * curve.peak_velocity / curve.reach_length
            mean_i, phi_i = _interpolate_model(kl, tau)
            delta = padded.intervals
            s_model = float(np.sum(mean_i * delta))
            p = padded.concentrations * delta / np.sum(padded.concentrations * delta)
            q = (mean_i + z @ phi_i) * delta / s_model
            err = float(np.sqrt(np.sum((p[val_idx] - q[val_idx]) ** 2)))
            log_errors.append(np.log(max(err, 1e-300)))
        scores[c] = np.exp(np.mean(log_errors))
    return float(candidates[int(np.argmin(scores))])
