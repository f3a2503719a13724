"""Coarse parameter estimators that need no numerical inversion.

Three families of fast estimators seed the synthetic-dataset prior and
serve as benchmarks: least-squares fitting of the log-normalized Laplace
transform, matching of the first four temporal moments (first-order
exchange only; power-law moments diverge), and two fits of the
exchange-free advection-dispersion model (full-curve least squares and a
peak fit). Analytical moments are generated from the Laplace solution as a
moment-generating function, expanding it as a power series about s = 0;
this reproduces the boundary-condition dependence of the moments for all
four formulations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from rivest.dataset import FIRST_ORDER, POWER_LAW, DimensionlessParams
from rivest.embedding import VELOCITY_HIGH, VELOCITY_LOW, MeasuredCurve, pad_with_zeros
from rivest.pbi import EstimationResult
from rivest.solver import Formulation, ade_analytical

_SERIES_ORDER = 4
_FACTORIALS = np.array([math.factorial(k) for k in range(_SERIES_ORDER + 1)], dtype=float)


@dataclass(frozen=True)
class MomentSet:
    """First raw moment and second-to-fourth central moments, in seconds^k."""

    m1: float
    m2: float
    m3: float
    m4: float

    def __post_init__(self):
        values = (self.m1, self.m2, self.m3, self.m4)
        if not all(np.isfinite(values)):
            raise ValueError(f"moments must be finite, got {values}")
        if not self.m2 > 0:
            raise ValueError(f"second central moment must be positive, got {self.m2}")

    def as_array(self) -> np.ndarray:
        return np.array([self.m1, self.m2, self.m3, self.m4])


@dataclass(frozen=True)
class LaplaceSignature:
    """Log-normalized Laplace transform of a measured curve at real abscissas."""

    abscissas: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "abscissas", np.asarray(self.abscissas, dtype=float))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if np.any(self.abscissas <= 0):
            raise ValueError("abscissas must be positive")


@dataclass(frozen=True)
class AdeFit:
    """Two-parameter fit of the exchange-free model."""

    velocity: float
    pe: float
    dispersion: float
    converged: bool
    note: str = ""


def numeric_laplace(curve: MeasuredCurve, s) -> np.ndarray:
    """Laplace transform of the measured record by trapezoid quadrature.

    The curve should already be zero-padded so the quadrature covers the
    full evaluation window.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if np.any(s < 0):
        raise ValueError("abscissas must be nonnegative")
    integrand = curve.concentrations[None, :] * np.exp(-s[:, None] * curve.times[None, :])
    return np.trapezoid(integrand, curve.times, axis=1)


def laplace_signature(curve: MeasuredCurve, abscissas: np.ndarray) -> LaplaceSignature:
    """f*(s) = ln(C*(s) / C*(0)) of a padded measured curve."""
    c0 = float(numeric_laplace(curve, 0.0)[0])
    if c0 <= 0:
        raise ValueError("curve has nonpositive integrated mass")
    values = np.log(numeric_laplace(curve, abscissas) / c0)
    return LaplaceSignature(abscissas=abscissas, values=values)


def log_laplace_shape(shat, values: np.ndarray, family: str, formulation: Formulation) -> np.ndarray:
    """ln(C(1, s) / C(1, 0)) of the model at real dimensionless abscissas."""
    shat = np.asarray(shat, dtype=float)
    pe, product, third = values
    if family == FIRST_ORDER:
        u = shat + product * shat / (third + shat)
    elif family == POWER_LAW:
        u = shat + product * shat ** (1.0 - third)
    else:
        raise ValueError(f"unknown family {family!r}")
    root = np.sqrt(4.0 * u + pe)
    f = 0.5 * (pe - math.sqrt(pe) * root)
    formulation = Formulation(formulation)
    if formulation is Formulation.SEMI_INF_NO_UPSTREAM:
        return f
    if formulation is Formulation.SEMI_INF_UPSTREAM:
        return f - np.log(0.5 + root / (2.0 * math.sqrt(pe)))
    return f + 0.5 * math.log(pe) - np.log(root)


def default_abscissas(curve: MeasuredCurve, count: int = 20) -> np.ndarray:
    """Log-spaced real abscissas in [0.1, 20] / t_peak."""
    return np.logspace(math.log10(0.1), math.log10(20.0), count) / curve.t_peak


def _multistart_factors(n_starts: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Velocity factors and parameter perturbation factors for multistarts."""
    rng = np.random.default_rng(seed)
    v_factors = np.concatenate([[1.0], rng.uniform(0.95, 1.45, n_starts - 1)])
    y_factors = np.concatenate(
        [np.ones((1, 3)), np.exp(rng.standard_normal((n_starts - 1, 3)) * math.log(2.0))]
    )
    return v_factors, y_factors


def _neutral_start(family: str) -> np.ndarray:
    if family == FIRST_ORDER:
        return np.array([100.0, 1.0, 1.0])
    return np.array([100.0, 0.5, 0.5])


def _log_bounds(family: str, peak_velocity: float) -> tuple[np.ndarray, np.ndarray]:
    lo = np.log([VELOCITY_LOW * peak_velocity, 1e-3, 1e-8, 1e-8])
    hi = np.log([VELOCITY_HIGH * peak_velocity, 1e9, 1e6, 1e6])
    if family == POWER_LAW:
        hi[3] = math.log(1.0 - 1e-9)
    return lo, hi


def _fit_log_params(residual_fn, family: str, curve: MeasuredCurve, starts_seed: int, n_starts: int):
    lo, hi = _log_bounds(family, curve.peak_velocity)
    v_factors, y_factors = _multistart_factors(n_starts, starts_seed)
    neutral = _neutral_start(family)
    best = None
    for vf, yf in zip(v_factors, y_factors):
        x0 = np.log(np.concatenate([[curve.peak_velocity * vf], neutral * yf]))
        x0 = np.clip(x0, lo + 1e-9, hi - 1e-9)
        try:
            res = least_squares(residual_fn, x0, bounds=(lo, hi), method="trf")
        except (ValueError, FloatingPointError):
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is not None:
        # a parameter pinned to its search bound is not an identified optimum
        bound_active = bool(
            np.any(np.abs(best.x[1:] - lo[1:]) < 1e-6) or np.any(np.abs(best.x[1:] - hi[1:]) < 1e-6)
        )
        return best, bound_active
    return None, False


def laplace_fit(
    curve: MeasuredCurve,
    family: str = FIRST_ORDER,
    formulation: Formulation = Formulation.SEMI_INF_EQUIV_INFINITE,
    abscissas: np.ndarray | None = None,
    n_starts: int = 5,
    seed: int = 0,
) -> EstimationResult:
    """Estimate (velocity, parameters) by Laplace-domain least squares.

    Minimizes the misfit between the model's and the measurement's
    log-normalized transforms over log-parameters, with the velocity
    constrained to [0.9, 1.5] times the peak velocity. Multistarted from
    the peak velocity and neutral parameter defaults.
    """
    padded = pad_with_zeros(curve)
    if abscissas is None:
        abscissas = default_abscissas(curve)
    signature = laplace_signature(padded, abscissas)
    length = curve.reach_length

    def residuals(x):
        v = math.exp(x[0])
        y = np.exp(x[1:])
        return log_laplace_shape(signature.abscissas * length / v, y, family, formulation) - signature.values

    best, bound_active = _fit_log_params(residuals, family, curve, seed, n_starts)
    if best is None:
        raise RuntimeError("all Laplace-fit starts failed")
    v = math.exp(best.x[0])
    params = DimensionlessParams.from_array(family, np.exp(best.x[1:]))
    return EstimationResult(
        method="LaplaceFit",
        velocity=v,
        params=params,
        residual=math.sqrt(2.0 * best.cost),
        converged=bool(best.success),
        extra={"cost": float(best.cost), "bound_active": bound_active},
    )


# ---------------------------------------------------------------------------
# Temporal moments
# ---------------------------------------------------------------------------


def measured_moments(curve: MeasuredCurve) -> MomentSet:
    """First four temporal moments of the padded record (trapezoid rule)."""
    padded = pad_with_zeros(curve)
    t, c = padded.times, padded.concentrations
    mass = float(np.trapezoid(c, t))
    if mass <= 0:
        raise ValueError("curve has nonpositive integrated mass")
    m1 = float(np.trapezoid(t * c, t)) / mass
    central = [float(np.trapezoid((t - m1) ** k * c, t)) / mass for k in (2, 3, 4)]
    return MomentSet(m1, *central)


def _series_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros(_SERIES_ORDER + 1)
    for n in range(_SERIES_ORDER + 1):
        out[n] = np.dot(a[: n + 1], b[n::-1])
    return out


def _series_sqrt(a: np.ndarray) -> np.ndarray:
    if not a[0] > 0:
        raise ValueError("series sqrt needs a positive constant term")
    out = np.zeros(_SERIES_ORDER + 1)
    out[0] = math.sqrt(a[0])
    for n in range(1, _SERIES_ORDER + 1):
        acc = sum(out[k] * out[n - k] for k in range(1, n))
        out[n] = (a[n] - acc) / (2.0 * out[0])
    return out


def _series_exp(a: np.ndarray) -> np.ndarray:
    if a[0] != 0.0:
        raise ValueError("series exp expects a zero constant term")
    out = np.zeros(_SERIES_ORDER + 1)
    out[0] = 1.0
    for n in range(1, _SERIES_ORDER + 1):
        out[n] = sum(k * a[k] * out[n - k] for k in range(1, n + 1)) / n
    return out


def _series_recip(a: np.ndarray) -> np.ndarray:
    if a[0] == 0.0:
        raise ValueError("series reciprocal needs a nonzero constant term")
    out = np.zeros(_SERIES_ORDER + 1)
    out[0] = 1.0 / a[0]
    for n in range(1, _SERIES_ORDER + 1):
        out[n] = -np.dot(a[1 : n + 1], out[n - 1 :: -1]) / a[0]
    return out


def _laplace_series(params: DimensionlessParams, formulation: Formulation, mass: float = 1.0) -> np.ndarray:
    """Power-series coefficients of C(x=1, s) about s = 0, through order 4."""
    pe, product, third = params.values
    kr = third
    u = np.zeros(_SERIES_ORDER + 1)
    u[1] = 1.0 + product / kr
    for n in range(2, _SERIES_ORDER + 1):
        u[n] = product * (-1.0) ** (n - 1) / kr ** n
    arg = 4.0 * u
    arg[0] += pe
    rt = _series_sqrt(arg)  # sqrt(4u + Pe)
    exponent = -0.5 * math.sqrt(pe) * rt
    exponent[0] = 0.0  # (Pe - sqrt(Pe (4u + Pe))) / 2 vanishes exactly at s = 0
    decay = _series_exp(exponent)
    formulation = Formulation(formulation)
    if formulation is Formulation.SEMI_INF_NO_UPSTREAM:
        boundary = np.zeros(_SERIES_ORDER + 1)
        boundary[0] = 1.0
    elif formulation is Formulation.SEMI_INF_UPSTREAM:
        denom = rt / (2.0 * math.sqrt(pe))
        denom[0] += 0.5
        boundary = _series_recip(denom)
    else:
        boundary = math.sqrt(pe) * _series_recip(rt)
    return mass * _series_mul(boundary, decay)


def analytical_moments(
    velocity: float,
    params: DimensionlessParams,
    reach_length: float,
    formulation: Formulation = Formulation.SEMI_INF_EQUIV_INFINITE,
) -> MomentSet:
    """Temporal moments of the model breakthrough at x = L, in seconds^k.

    Raw dimensionless moments are read off the series coefficients of the
    Laplace solution (mu_k = (-1)^k k! c_k), converted to central moments,
    and rescaled by powers of L / velocity. Only the first-order family has
    finite moments.
    """
    if params.family != FIRST_ORDER:
        raise ValueError("temporal moments diverge for the power-law family")
    coeffs = _laplace_series(params, formulation)
    mu = (-1.0) ** np.arange(_SERIES_ORDER + 1) * _FACTORIALS * coeffs
    mu = mu / mu[0]
    m1 = mu[1]
    mc2 = mu[2] - m1 ** 2
    mc3 = mu[3] - 3.0 * m1 * mu[2] + 2.0 * m1 ** 3
    mc4 = mu[4] - 4.0 * m1 * mu[3] + 6.0 * m1 ** 2 * mu[2] - 3.0 * m1 ** 4
    scale = reach_length / velocity
    return MomentSet(m1 * scale, mc2 * scale ** 2, mc3 * scale ** 3, mc4 * scale ** 4)


def _signed_root(x: float, k: int) -> float:
    return math.copysign(abs(x) ** (1.0 / k), x)


def moment_match(
    curve: MeasuredCurve,
    formulation: Formulation = Formulation.SEMI_INF_EQUIV_INFINITE,
    n_starts: int = 5,
    seed: int = 0,
) -> EstimationResult:
    """Estimate (velocity, parameters) by matching the first four moments.

    The k-th moments enter through their signed k-th roots so the four
    residuals share time units. First-order family only.
    """
    target = measured_moments(curve)
    roots_star = np.array([_signed_root(m, k + 1) for k, m in enumerate(target.as_array())])

    def residuals(x):
        v = math.exp(x[0])
        params = DimensionlessParams.from_array(FIRST_ORDER, np.exp(x[1:]))
        try:
            m = analytical_moments(v, params, curve.reach_length, formulation)
        except ValueError:
            return np.full(4, 1e6)
        roots = np.array([_signed_root(mk, k + 1) for k, mk in enumerate(m.as_array())])
        return roots - roots_star

    best, bound_active = _fit_log_params(residuals, FIRST_ORDER, curve, seed, n_starts)
    if best is None:
        raise RuntimeError("all moment-matching starts failed")
    return EstimationResult(
        method="Moments",
        velocity=math.exp(best.x[0]),
        params=DimensionlessParams.from_array(FIRST_ORDER, np.exp(best.x[1:])),
        residual=math.sqrt(2.0 * best.cost),
        converged=bool(best.success),
        extra={"cost": float(best.cost), "bound_active": bound_active},
    )


# ---------------------------------------------------------------------------
# Exchange-free (pure advection-dispersion) fits
# ---------------------------------------------------------------------------


def ade_ls_fit(curve: MeasuredCurve, seed: int = 0) -> AdeFit:
    """Least-squares fit of the infinite-domain exchange-free solution.

    Two parameters (velocity, Peclet number), initialized from the peak
    velocity and a peak-width estimate of Pe, with three multistarts.
    """
    padded = pad_with_zeros(curve)
    delta = padded.intervals
    p = padded.concentrations * delta
    p = p / p.sum()
    vp = curve.peak_velocity
    moments = measured_moments(curve)
    pe0 = max(2.0 * curve.t_peak ** 2 / moments.m2, 1.0)

    def residuals(x):
        v, pe = np.exp(x)
        tau = padded.times * v / curve.reach_length
        model = ade_analytical(pe, 1.0, 1.0, tau, Formulation.INFINITE)
        q = model * delta
        total = q.sum()
        if total <= 0:
            return np.full(len(p), 1e3)
        return q / total - p

    lo = np.log([VELOCITY_LOW * vp, 1e-2])
    hi = np.log([VELOCITY_HIGH * vp, 1e9])
    best = None
    for v0, f0 in ((vp, 1.0), (vp * 1.1, 3.0), (vp * 0.95, 1.0 / 3.0)):
        x0 = np.clip(np.log([v0, pe0 * f0]), lo + 1e-9, hi - 1e-9)
        res = least_squares(residuals, x0, bounds=(lo, hi), method="trf")
        if best is None or res.cost < best.cost:
            best = res
    v, pe = np.exp(best.x)
    return AdeFit(
        velocity=float(v),
        pe=float(pe),
        dispersion=float(curve.reach_length * v / pe),
        converged=bool(best.success),
    )


def _peak_curvature_ratio(curve: MeasuredCurve) -> float:
    """c''(t_peak) / c(t_peak) from the three samples bracketing the peak."""
    i = curve.peak_index
    t0, t1, t2 = curve.times[i - 1 : i + 2]
    c0, c1, c2 = curve.concentrations[i - 1 : i + 2]
    second = 2.0 * (
        c0 / ((t1 - t0) * (t2 - t0)) - c1 / ((t2 - t1) * (t1 - t0)) + c2 / ((t2 - t1) * (t2 - t0))
    )
    return second / c1


def ade_peak_fit(curve: MeasuredCurve, max_iter: int = 200, rel_tol: float = 1e-8) -> AdeFit:
    """Fit the exchange-free model to the peak arrival and curvature.

    Alternates the explicit velocity update (from the peak-time condition)
    with the implicit dispersion update (from the curvature ratio at the
    peak) until the dispersion is stationary. Lengths are normalized by
    the reach length so both updates are evaluated in reach units. Returns
    a flagged failure for flat-topped records, a negative radicand, or
    non-convergence.
    """
    def failed(note: str) -> AdeFit:
        return AdeFit(float("nan"), float("nan"), float("nan"), converged=False, note=note)

    if not curve.peak_interior:
        return failed("peak not in the record interior")

    kappa = _peak_curvature_ratio(curve)
    t_pk = curve.t_peak
    if not np.isfinite(kappa) or kappa >= -1e-30 / t_pk ** 2:
        return failed("nonnegative curvature at the peak")

    moments = measured_moments(curve)
    d_hat = moments.m2 / (2.0 * t_pk ** 3)  # dispersion in reach-normalized units
    converged = False
    note = ""
    for _ in range(max_iter):
        radicand = 1.0 - 2.0 * t_pk * d_hat
        if radicand <= 0:
            return failed("velocity radicand went negative")
        v_hat = math.sqrt(radicand) / t_pk
        b = math.sqrt(d_hat ** 2 / v_hat ** 2 + 1.0) - d_hat / v_hat
        inner = 4.0 * b ** 4 * (b ** 2 - 1.0) ** 2 * kappa * v_hat ** 4 - 2.0 * b ** 2 * (b ** 4 - 3.0) * v_hat ** 6
        if inner < 0:
            return failed("dispersion radicand went negative")
        denom = 2.0 * b ** 2 * (4.0 * kappa * b ** 2 - 3.0 * v_hat ** 2)
        d_new = (b * (b ** 2 - 3.0) * v_hat ** 3 - math.sqrt(inner)) / denom
        if d_new <= 0 or not np.isfinite(d_new):
            return failed("dispersion update left the physical range")
        if abs(d_new - d_hat) / d_hat < rel_tol:
            d_hat = d_new
            converged = True
            break
        d_hat = d_new
    if not converged:
        note = f"fixed point not reached in {max_iter} iterations"
    radicand = 1.0 - 2.0 * t_pk * d_hat
    if radicand <= 0:
        return failed("velocity radicand went negative")
    v_hat = math.sqrt(radicand) / t_pk
    length = curve.reach_length
    velocity = v_hat * length
    dispersion = d_hat * length ** 2
    return AdeFit(
        velocity=float(velocity),
        pe=float(length * velocity / dispersion),
        dispersion=float(dispersion),
        converged=converged,
        note=note,
    )
