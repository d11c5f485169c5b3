"""Deterministic test-matrix generators.

The overlap and Coulomb surrogates mimic the structure of molecular-cluster
matrices: points are grouped into well-separated clusters, one tile per
cluster, with a Gaussian (exponentially decaying) or ``1/r`` (algebraically
decaying) kernel between them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClusterGeometry:
    n_clusters: int = 20
    points_per_cluster: int = 12
    cluster_spacing: float = 3.0
    intra_cluster_radius: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1 or self.points_per_cluster < 1:
            raise ValueError("need at least one cluster and one point per cluster")
        if self.intra_cluster_radius <= 0:
            raise ValueError("intra_cluster_radius must be positive")
        if self.cluster_spacing <= 2 * self.intra_cluster_radius:
            raise ValueError("cluster_spacing must exceed twice the cluster radius")

    @property
    def n(self) -> int:
        return self.n_clusters * self.points_per_cluster

    def centers(self) -> np.ndarray:
        """Cluster centres on the smallest cubic lattice that holds them all."""
        side = max(1, math.ceil(round(self.n_clusters ** (1 / 3), 9)))
        idx = np.arange(self.n_clusters)
        grid = np.stack([idx % side, (idx // side) % side, idx // (side * side)], axis=1)
        return grid.astype(np.float64) * self.cluster_spacing

    def points(self) -> np.ndarray:
        """All points, cluster by cluster, shape ``(n, 3)``.

        Points inside a cluster keep a minimum separation of ``0.4 * radius``
        so that the kernel matrices stay well conditioned.
        """
        rng = np.random.default_rng(self.seed)
        r = self.intra_cluster_radius
        min_sep = 0.4 * r
        out = []
        for c in self.centers():
            pts: list[np.ndarray] = []
            attempts = 0
            while len(pts) < self.points_per_cluster:
                attempts += 1
                if attempts > 100_000:
                    raise RuntimeError("could not place points; cluster too crowded")
                p = rng.uniform(-r, r, size=3)
                if p @ p > r * r:
                    continue
                if any(np.linalg.norm(p - q) < min_sep for q in pts):
                    continue
                pts.append(p)
            out.append(c + np.array(pts))
        return np.concatenate(out, axis=0)

    def tile_boundaries(self) -> list[int]:
        """One tile per cluster."""
        return [i * self.points_per_cluster for i in range(self.n_clusters + 1)]


# Desk-scale defaults.  The overlap kernel with these settings leaves most
# inter-cluster tiles empty or of rank 1-3; the Coulomb geometry uses tight
# clusters so that every tile is present but far tiles compress well.
OVERLAP_GAMMA = 2.0


def default_geometry(kind: str, **overrides) -> ClusterGeometry:
    """Per-kind default surrogate geometry (20 clusters x 12 points)."""
    if kind == "overlap":
        base = dict(cluster_spacing=3.0, intra_cluster_radius=1.0)
    elif kind == "coulomb":
        base = dict(cluster_spacing=4.0, intra_cluster_radius=0.2)
    else:
        raise ValueError(f"no cluster geometry for kind {kind!r}")
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ClusterGeometry(**base)


def _sq_distances(p: np.ndarray) -> np.ndarray:
    diff = p[:, None, :] - p[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def overlap_matrix(g: ClusterGeometry, gamma: float = OVERLAP_GAMMA) -> np.ndarray:
    """Gaussian kernel ``exp(-gamma |p_i - p_j|^2)``: SPD with unit diagonal."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    s = np.exp(-gamma * _sq_distances(g.points()))
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return np.asfortranarray(s)


def coulomb_matrix(g: ClusterGeometry, ridge: float = 0.0) -> np.ndarray:
    """``1/r`` kernel with a ``1/radius + ridge`` self-interaction diagonal.

    If the result is not positive definite the ridge is raised until it is.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    d = np.sqrt(_sq_distances(g.points()))
    n = d.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.any(d[off] == 0.0):
        raise ValueError("coincident points")
    v = np.zeros_like(d)
    v[off] = 1.0 / d[off]
    v = 0.5 * (v + v.T)
    base = 1.0 / g.intra_cluster_radius
    while True:
        np.fill_diagonal(v, base + ridge)
        lam_min = float(np.linalg.eigvalsh(v)[0])
        if lam_min > 0:
            return np.asfortranarray(v)
        ridge += -lam_min + 1e-3 * base


def random_dense(n: int, seed: int = 0, cols: int | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.asfortranarray(rng.standard_normal((n, n if cols is None else cols)))


def random_spd(n: int, seed: int = 0) -> np.ndarray:
    """``G.T @ G / n + 1e-3 I`` for a Gaussian ``G``."""
    g = random_dense(n, seed)
    m = g.T @ g / n
    m = 0.5 * (m + m.T) + 1e-3 * np.eye(n)
    return np.asfortranarray(m)
