"""Error metrics between measured and reconstructed breakthrough curves.

Both metrics treat the two curves as discrete probability distributions:
concentrations are weighted by their sample time intervals and normalized to
sum to one. Samples beyond 24 times the measured peak time are excluded so
errors are comparable across curves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WINDOW_PEAK_MULTIPLE = 24.0
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class MetricReport:
    """RMSE and KL divergence of a reconstruction, with the window used."""

    rmse: float
    kld: float
    window_end: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "kld": self.kld,
            "window_end_s": self.window_end,
            "n_samples": self.n_samples,
        }


def _window_mask(times: np.ndarray, t_peak: float) -> np.ndarray:
    return times <= WINDOW_PEAK_MULTIPLE * t_peak + 1e-12 * t_peak


def _normalized(values: np.ndarray, weights: np.ndarray, what: str) -> np.ndarray:
    total = float(np.sum(values * weights))
    if total <= 0:
        raise ValueError(f"{what} has nonpositive total mass")
    return values * weights / total


def rmse(curve, model_values: np.ndarray) -> float:
    """Root-mean-square error between normalized discrete distributions.

    `model_values` are the model concentrations at the curve's sample times.
    Invariant to positive rescaling of either argument.
    """
    model_values = np.asarray(model_values, dtype=float)
    if model_values.shape != curve.times.shape:
        raise ValueError("model values must align with the curve samples")
    mask = _window_mask(curve.times, curve.t_peak)
    p = _normalized(curve.concentrations[mask], curve.intervals[mask], "measured curve")
    q = _normalized(model_values[mask], curve.intervals[mask], "model curve")
    return float(np.sqrt(np.mean((q - p) ** 2)))


def kld(curve, model_values: np.ndarray) -> float:
    """Kullback-Leibler divergence from the model to the measurements.

    Computed as sum(p * (ln p - ln q)) over samples with positive measured
    weight, with model weights floored at 1e-300 before the logarithm. Zero
    for identical distributions, positive otherwise.
    """
    model_values = np.asarray(model_values, dtype=float)
    if model_values.shape != curve.times.shape:
        raise ValueError("model values must align with the curve samples")
    mask = _window_mask(curve.times, curve.t_peak)
    p = _normalized(curve.concentrations[mask], curve.intervals[mask], "measured curve")
    q = _normalized(model_values[mask], curve.intervals[mask], "model curve")
    pos = p > 0
    q_floored = np.maximum(q[pos], _LOG_FLOOR)
    return float(np.sum(p[pos] * (np.log(p[pos]) - np.log(q_floored))))


def evaluate(curve, model_values: np.ndarray) -> MetricReport:
    """Bundle both metrics into a report."""
    mask = _window_mask(curve.times, curve.t_peak)
    return MetricReport(
        rmse=rmse(curve, model_values),
        kld=kld(curve, model_values),
        window_end=WINDOW_PEAK_MULTIPLE * curve.t_peak,
        n_samples=int(np.sum(mask)),
    )
