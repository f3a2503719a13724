"""Karhunen-Loeve reduced-order model of the synthetic ensemble.

The ensemble covariance eigenproblem is solved under the trapezoid-weighted
inner product so the eigenfunctions are orthonormal in the continuous L2
sense. That makes the map between curves and coefficient vectors an
isometry: L2 distances between reconstructed curves equal Euclidean
distances between coefficient vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rivest.dataset import SyntheticDataset
from rivest.solver import TimeGrid

DEFAULT_MODES = 20


class KLError(ValueError):
    """Raised for rank or grid mismatches in the reduced-order model."""


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    """Quadrature weights of the trapezoid rule on a uniform grid."""
    w = np.full(grid.count, grid.step)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


@dataclass(frozen=True)
class KLModel:
    """Mean curve, eigenvalues, and weighted-orthonormal eigenfunctions."""

    grid: TimeGrid
    mean: np.ndarray  # (G,)
    eigenvalues: np.ndarray  # (N,) decreasing, positive
    eigenfunctions: np.ndarray  # (N, G)
    spectrum: np.ndarray  # all positive eigenvalues of the decomposition
    dataset_hash: str | None = None

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.grid)

    def project(self, curve: np.ndarray) -> np.ndarray:
        return project(self, curve)

    def reconstruct(self, z: np.ndarray) -> np.ndarray:
        return reconstruct(self, z)


def fit_kl(dataset: SyntheticDataset, n_modes: int = DEFAULT_MODES, dataset_hash: str | None = None) -> KLModel:
    """Fit the reduced-order model to a synthetic dataset.

    The weighted covariance eigenproblem is solved through the thin SVD of
    the weighted, centered snapshot matrix, which is the snapshot (Gram
    matrix) route with better orthonormality of the recovered modes. Each
    eigenfunction is sign-fixed so its largest-magnitude entry is positive.

    Raises
    ------
    KLError
        If `n_modes` exceeds the numerical rank of the ensemble covariance.
    """
    curves = dataset.curves
    n = curves.shape[0]
    if n < n_modes + 1:
        raise KLError(f"need at least {n_modes + 1} curves for {n_modes} modes, got {n}")
    w = trapezoid_weights(dataset.grid)
    mean = curves.mean(axis=0)
    centered = curves - mean
    snapshots = centered * np.sqrt(w) / np.sqrt(n - 1)
    _, s, vt = np.linalg.svd(snapshots, full_matrices=False)
    lam = s ** 2
    rank = int(np.sum(s > s[0] * max(snapshots.shape) * np.finfo(float).eps)) if s.size and s[0] > 0 else 0
    if rank == 0:
        raise KLError("ensemble covariance is zero (all curves identical)")
    if n_modes > rank:
        raise KLError(f"requested {n_modes} modes but covariance has numerical rank {rank}")
    phi = vt[:n_modes] / np.sqrt(w)
    # deterministic sign: largest-magnitude entry of each mode is positive
    for j in range(n_modes):
        k = int(np.argmax(np.abs(phi[j])))
        if phi[j, k] < 0:
            phi[j] = -phi[j]
    return KLModel(
        grid=dataset.grid,
        mean=mean,
        eigenvalues=lam[:n_modes],
        eigenfunctions=phi,
        spectrum=lam[:rank],
        dataset_hash=dataset_hash,
    )


def project(model: KLModel, curve: np.ndarray) -> np.ndarray:
    """Coefficients of a curve on the model grid: weighted inner products."""
    curve = np.asarray(curve, dtype=float)
    if curve.shape[-1] != model.grid.count:
        raise KLError(f"curve has {curve.shape[-1]} points; model grid has {model.grid.count}")
    return (curve - model.mean) @ (model.eigenfunctions * model.weights).T


def reconstruct(model: KLModel, z: np.ndarray) -> np.ndarray:
    """Curve with coefficients z: mean + z . eigenfunctions."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != model.n_modes:
        raise KLError(f"got {z.shape[-1]} coefficients; model has {model.n_modes} modes")
    return model.mean + z @ model.eigenfunctions


def l2_norm(grid: TimeGrid, values: np.ndarray) -> float:
    """Trapezoid-weighted L2 norm of a function sampled on the grid."""
    w = trapezoid_weights(grid)
    return float(np.sqrt(np.sum(w * np.asarray(values) ** 2)))
