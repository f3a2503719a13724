"""Parameter estimation on the synthetic manifold.

Projected Barycentric Interpolation (PBI) projects the embedded measurement
onto the simplex of its nearest synthetic neighbors in KL space, scans the
velocity grid for the smallest projection residual, and interpolates the
dimensionless parameters in log space with the barycentric weights.
Nearest-Neighbor Interpolation (NNI) simply adopts the parameters of the
closest synthetic point. The projection residual is an estimate of combined
model mismatch and measurement error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from rivest.dataset import DimensionlessParams, SyntheticDataset
from rivest.embedding import EmbeddedCurve, MeasuredCurve, pad_with_zeros
from rivest.klmodel import KLModel, project
from rivest.metrics import MetricReport

SIMPLEX_SIZE = 4  # d + 1 vertices for the d = 3 parameter manifold
_RHO_TOL = 1e-12
_DEGENERATE_REL = 1e-10


class EstimationError(RuntimeError):
    """Raised when no feasible estimate exists."""


@dataclass(frozen=True)
class Simplex:
    """Vertices of a local simplex on the synthetic manifold."""

    indices: np.ndarray  # dataset indices of the vertices
    vertices: np.ndarray  # (k, N) KL coordinates

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=int))
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float))
        if len(self.indices) != len(self.vertices) or len(self.indices) == 0:
            raise ValueError("simplex needs matching, nonempty indices and vertices")
        if len(set(self.indices.tolist())) != len(self.indices):
            raise ValueError("simplex vertices must be distinct dataset points")


@dataclass
class EstimationResult:
    """Outcome of one parameter estimation on one measured curve."""

    method: str
    velocity: float
    params: DimensionlessParams | None
    residual: float = float("nan")
    rho: np.ndarray | None = None
    vertex_indices: np.ndarray | None = None
    metrics: MetricReport | None = None
    converged: bool = True
    extra: dict = dataclass_field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "velocity_m_per_s": self.velocity,
            "residual": self.residual,
            "converged": self.converged,
        }
        if self.params is not None:
            out["family"] = self.params.family
            out["params"] = self.params.named()
            out["y"] = list(self.params.values)
        if self.rho is not None:
            out["rho"] = np.asarray(self.rho).tolist()
        if self.vertex_indices is not None:
            out["vertex_indices"] = np.asarray(self.vertex_indices).tolist()
        if self.metrics is not None:
            out["metrics"] = self.metrics.to_dict()
        if self.extra:
            out["extra"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.extra.items()}
        return out


def _furthest_vertex(point: np.ndarray, simplex: Simplex) -> int:
    """Local index of the vertex furthest from the point; distance ties
    are broken by the lower dataset index."""
    dists = np.linalg.norm(simplex.vertices - point, axis=1)
    far = np.flatnonzero(dists >= dists.max() - 1e-15 * max(dists.max(), 1.0))
    return int(far[np.argmin(simplex.indices[far])])


def _drop_vertex(simplex: Simplex, local: int) -> Simplex:
    keep = np.ones(len(simplex.indices), dtype=bool)
    keep[local] = False
    return Simplex(indices=simplex.indices[keep], vertices=simplex.vertices[keep])


def project_onto_simplex(point: np.ndarray, simplex: Simplex) -> tuple[np.ndarray, np.ndarray, Simplex]:
    """Project a point onto a simplex by greedy vertex removal.

    Orthogonally projects onto the affine hull of the current vertices and
    computes barycentric coordinates from the edge-matrix normal equations.
    While any coordinate is negative, the vertex furthest from the point is
    removed and the projection repeated. A degenerate (rank-deficient)
    vertex set also sheds its furthest vertex; at a single vertex the
    projection is that vertex.

    Returns the projected point, the barycentric weights (nonnegative,
    summing to one), and the final simplex.
    """
    point = np.asarray(point, dtype=float)
    while True:
        k = len(simplex.indices)
        if k == 1:
            return simplex.vertices[0].copy(), np.array([1.0]), simplex
        base = simplex.vertices[-1]
        edges = (simplex.vertices[:-1] - base).T  # (N, k-1)
        gram = edges.T @ edges
        sing = np.linalg.svd(edges, compute_uv=False)
        if sing[-1] <= sing[0] * _DEGENERATE_REL or sing[0] == 0.0:
            simplex = _drop_vertex(simplex, _furthest_vertex(point, simplex))
            continue
        head = np.linalg.solve(gram, edges.T @ (point - base))
        rho = np.append(head, 1.0 - head.sum())
        if np.all(rho >= -_RHO_TOL):
            rho = np.clip(rho, 0.0, None)
            rho = rho / rho.sum()
            projected = base + edges @ head
            return projected, rho, simplex
        simplex = _drop_vertex(simplex, _furthest_vertex(point, simplex))


def dataset_coefficients(kl: KLModel, dataset: SyntheticDataset) -> np.ndarray:
    """KL coefficients of every synthetic curve, as an (n, N) matrix."""
    return project(kl, dataset.curves)


def _nearest_simplex(z: np.ndarray, coeffs: np.ndarray, size: int = SIMPLEX_SIZE) -> Simplex:
    dist = np.linalg.norm(coeffs - z, axis=1)
    nearest = np.argpartition(dist, size - 1)[:size]
    order = np.lexsort((nearest, dist[nearest]))
    idx = nearest[order]
    return Simplex(indices=idx, vertices=coeffs[idx])


def _interpolate_parameters(dataset: SyntheticDataset, simplex: Simplex, rho: np.ndarray) -> DimensionlessParams:
    log_y = np.log(dataset.samples[simplex.indices])
    return DimensionlessParams.from_array(dataset.family, np.exp(rho @ log_y))


def estimate_pbi(
    embedded: EmbeddedCurve,
    dataset: SyntheticDataset,
    kl: KLModel,
    regularization: float = 0.0,
    peak_velocity: float | None = None,
    coeffs: np.ndarray | None = None,
) -> EstimationResult:
    """Projected Barycentric Interpolation estimate of (velocity, parameters).

    For every feasible grid velocity the embedded point is projected onto
    the simplex of its four nearest synthetic neighbors; the velocity with
    the smallest squared projection residual wins (plus an optional
    quadratic velocity-regularization term). Ties go to the lower velocity.
    """
    if regularization and peak_velocity is None:
        raise ValueError("velocity regularization needs the curve's peak velocity")
    if coeffs is None:
        coeffs = dataset_coefficients(kl, dataset)

    best = None  # (loss, velocity, z, projected, rho, simplex)
    for m in range(len(embedded.velocities)):
        if not embedded.feasible[m]:
            continue
        z = embedded.coefficients[m]
        simplex = _nearest_simplex(z, coeffs)
        projected, rho, final_simplex = project_onto_simplex(z, simplex)
        loss = float(np.sum((z - projected) ** 2))
        if regularization:
            loss += regularization * (embedded.velocities[m] - peak_velocity) ** 2
        if best is None or loss < best[0]:
            best = (loss, embedded.velocities[m], z, projected, rho, final_simplex)
    if best is None:
        raise EstimationError("no feasible velocity for PBI")

    _, velocity, z, projected, rho, simplex = best
    return EstimationResult(
        method="PBI",
        velocity=float(velocity),
        params=_interpolate_parameters(dataset, simplex, rho),
        residual=float(np.linalg.norm(z - projected)),
        rho=rho,
        vertex_indices=simplex.indices.copy(),
    )


def estimate_nni(
    embedded: EmbeddedCurve,
    dataset: SyntheticDataset,
    kl: KLModel,
    coeffs: np.ndarray | None = None,
) -> EstimationResult:
    """Nearest-neighbor estimate: adopt the closest synthetic point's parameters."""
    if coeffs is None:
        coeffs = dataset_coefficients(kl, dataset)
    best = None  # (distance, velocity, dataset index)
    for m in range(len(embedded.velocities)):
        if not embedded.feasible[m]:
            continue
        dist = np.linalg.norm(coeffs - embedded.coefficients[m], axis=1)
        i = int(np.argmin(dist))
        if best is None or dist[i] < best[0]:
            best = (float(dist[i]), float(embedded.velocities[m]), i)
    if best is None:
        raise EstimationError("no feasible velocity for NNI")
    distance, velocity, i = best
    return EstimationResult(
        method="NNI",
        velocity=velocity,
        params=dataset.params(i),
        residual=distance,
        rho=np.array([1.0]),
        vertex_indices=np.array([i]),
    )


def exhaustive_search(
    curve: MeasuredCurve,
    dataset: SyntheticDataset,
    velocities: np.ndarray,
) -> EstimationResult:
    """Direct L2 search over (dataset curve, velocity), bypassing KL space.

    For each velocity the synthetic curves are linearly interpolated at the
    measured dimensionless times and both sides are interval-weighted and
    sum-normalized before the squared difference is accumulated.
    """
    padded = pad_with_zeros(curve)
    delta = padded.intervals
    p = padded.concentrations * delta
    p = p / p.sum()
    grid_t = dataset.grid.times
    step = dataset.grid.step

    best = None  # (loss, velocity, index)
    for v in np.asarray(velocities, dtype=float):
        tau = padded.times * v / curve.reach_length
        pos = np.clip(tau / step, 0.0, len(grid_t) - 1.0)
        k = np.minimum(pos.astype(int), len(grid_t) - 2)
        frac = pos - k
        inside = tau <= grid_t[-1]
        values = dataset.curves[:, k] * (1.0 - frac) + dataset.curves[:, k + 1] * frac
        values *= inside
        q = values * delta
        totals = q.sum(axis=1)
        ok = totals > 0
        if not ok.any():
            continue
        losses = np.full(len(totals), np.inf)
        losses[ok] = np.sum((q[ok] / totals[ok, None] - p) ** 2, axis=1)
        i = int(np.argmin(losses))
        if best is None or losses[i] < best[0]:
            best = (float(losses[i]), float(v), i)
    if best is None:
        raise EstimationError("no feasible velocity for exhaustive search")
    loss, velocity, i = best
    return EstimationResult(
        method="ExhaustiveL2",
        velocity=velocity,
        params=dataset.params(i),
        residual=float(np.sqrt(loss)),
        rho=np.array([1.0]),
        vertex_indices=np.array([i]),
    )


def regularization_weight(
    curves,
    embedded_curves: list[EmbeddedCurve],
    dataset: SyntheticDataset,
    kl: KLModel,
    target: float = 0.04,
    tolerance: float = 0.005,
    max_doublings: int = 60,
    max_bisections: int = 200,
) -> float:
    """Calibrate the velocity-regularization weight by bisection.

    Finds lambda such that the mean relative deviation of the estimated
    velocity from each curve's peak velocity equals `target` (default 4%).
    Monotonicity of the deviation in lambda is checked as the bracket
    shrinks. If the target is unreachable the nearest endpoint is returned
    with a warning.
    """
    if dataset.family != "power_law":
        raise ValueError("velocity regularization is used with the power-law family")
    if len(curves) == 0 or len(curves) != len(embedded_curves):
        raise ValueError("need one embedded curve per measured curve")

    coeffs = dataset_coefficients(kl, dataset)
    losses, deviations, peak_velocities = [], [], []
    for curve, embedded in zip(curves, embedded_curves):
        vp = curve.peak_velocity
        loss_m, dev_m = [], []
        for m in range(len(embedded.velocities)):
            if not embedded.feasible[m]:
                loss_m.append(np.inf)
                dev_m.append(np.inf)
                continue
            z = embedded.coefficients[m]
            projected, _, _ = project_onto_simplex(z, _nearest_simplex(z, coeffs))
            loss_m.append(float(np.sum((z - projected) ** 2)))
            dev_m.append((embedded.velocities[m] - vp) ** 2)
        losses.append(np.asarray(loss_m))
        deviations.append(np.asarray(dev_m))
        peak_velocities.append(vp)

    def mean_deviation(lam: float) -> float:
        devs = []
        for loss_m, dev_m, vp, embedded in zip(losses, deviations, peak_velocities, embedded_curves):
            total = loss_m + lam * dev_m
            m = int(np.argmin(total))
            devs.append(abs(embedded.velocities[m] - vp) / vp)
        return float(np.mean(devs))

    dev0 = mean_deviation(0.0)
    if dev0 <= target:
        warnings.warn(
            f"unregularized velocities already deviate {dev0:.2%} <= target {target:.2%}; returning 0",
            stacklevel=2,
        )
        return 0.0

    finite_losses = np.concatenate([l[np.isfinite(l)] for l in losses])
    finite_devs = np.concatenate([d[np.isfinite(d) & (d > 0)] for d in deviations])
    lam_hi = max(np.median(finite_losses) / max(np.median(finite_devs), 1e-300), 1e-12)
    for _ in range(max_doublings):
        if mean_deviation(lam_hi) < target:
            break
        lam_hi *= 2.0
    else:
        warnings.warn(f"target deviation {target:.2%} unreachable; returning lambda = {lam_hi:.3e}", stacklevel=2)
        return float(lam_hi)

    lam_lo = 0.0
    for _ in range(max_bisections):
        mid = 0.5 * (lam_lo + lam_hi)
        dev = mean_deviation(mid)
        if abs(dev - target) <= tolerance:
            return float(mid)
        if dev > target:
            lam_lo = mid
        else:
            lam_hi = mid
        if mean_deviation(lam_lo) < mean_deviation(lam_hi):
            warnings.warn("mean velocity deviation is not monotone in lambda on this data", stacklevel=2)
    final = 0.5 * (lam_lo + lam_hi)
    warnings.warn(
        f"bisection stopped at lambda = {final:.3e} with deviation {mean_deviation(final):.2%} "
        f"(target {target:.2%} +- {tolerance:.2%})",
        stacklevel=2,
    )
    return float(final)
