"""Point location and barycentric interpolation on triangulations."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import TriMesh


class TriLocator:
    """Uniform-bin point locator over a triangulation."""

    def __init__(self, mesh: TriMesh, bin_size: float | None = None):
        self.mesh = mesh
        p = mesh.nodes[mesh.triangles]
        self.tri_min = p.min(axis=1)
        self.tri_max = p.max(axis=1)
        self.lo = self.tri_min.min(axis=0)
        self.hi = self.tri_max.max(axis=0)
        self.h = bin_size if bin_size is not None else max(mesh.dx, 1e-9)
        self.nb = np.maximum(((self.hi - self.lo) / self.h).astype(int) + 1, 1)
        self.bins: dict[tuple[int, int], list[int]] = {}
        i0 = ((self.tri_min - self.lo) / self.h).astype(int)
        i1 = ((self.tri_max - self.lo) / self.h).astype(int)
        for t in range(len(mesh.triangles)):
            for ix in range(i0[t, 0], i1[t, 0] + 1):
                for iy in range(i0[t, 1], i1[t, 1] + 1):
                    self.bins.setdefault((ix, iy), []).append(t)
        # precompute barycentric transforms
        a = p[:, 0]
        self.v0 = p[:, 1] - a
        self.v1 = p[:, 2] - a
        self.a = a
        det = self.v0[:, 0] * self.v1[:, 1] - self.v0[:, 1] * self.v1[:, 0]
        self.inv_det = 1.0 / det

    def barycentric(self, t: int, x: float, y: float):
        dx = x - self.a[t, 0]
        dy = y - self.a[t, 1]
        l1 = (dx * self.v1[t, 1] - dy * self.v1[t, 0]) * self.inv_det[t]
        l2 = (dy * self.v0[t, 0] - dx * self.v0[t, 1]) * self.inv_det[t]
        return 1.0 - l1 - l2, l1, l2

    def locate(self, x: float, y: float, tol: float = 1e-12) -> tuple[int, tuple] | None:
        """Containing triangle and barycentric weights, or None if outside."""
        ix = int((x - self.lo[0]) / self.h)
        iy = int((y - self.lo[1]) / self.h)
        best = None
        best_viol = np.inf
        for t in self.bins.get((ix, iy), ()):
            if not (self.tri_min[t, 0] - tol <= x <= self.tri_max[t, 0] + tol
                    and self.tri_min[t, 1] - tol <= y <= self.tri_max[t, 1] + tol):
                continue
            l0, l1, l2 = self.barycentric(t, x, y)
            viol = -min(l0, l1, l2)
            if viol <= tol:
                return t, (l0, l1, l2)
            if viol < best_viol:
                best_viol = viol
                best = (t, (l0, l1, l2))
        # tolerate slight boundary roundoff against snapped edges
        if best is not None and best_viol < 1e-9:
            return best
        return None


def interpolation_matrix(mesh: TriMesh, points: np.ndarray,
                         nearest_fallback: bool = True) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse matrix W with (W @ field)[k] = field interpolated at points[k].

    Points outside the triangulation (e.g. inside the hole) take the nearest
    node value when nearest_fallback is set; otherwise their row is flagged
    in the returned boolean mask and left zero.
    """
    loc = TriLocator(mesh)
    rows, cols, vals = [], [], []
    outside = np.zeros(len(points), dtype=bool)
    tree = cKDTree(mesh.nodes) if nearest_fallback else None
    for k, (x, y) in enumerate(points):
        hit = loc.locate(float(x), float(y))
        if hit is None:
            outside[k] = True
            if nearest_fallback:
                _, j = tree.query([x, y])
                rows.append(k)
                cols.append(int(j))
                vals.append(1.0)
            continue
        t, lam = hit
        for j, l in zip(mesh.triangles[t], lam):
            rows.append(k)
            cols.append(int(j))
            vals.append(max(float(l), 0.0))
    W = sp.csr_matrix((vals, (rows, cols)), shape=(len(points), mesh.n_nodes))
    # renormalize rows clipped at the boundary so constants are reproduced
    s = np.asarray(W.sum(axis=1)).ravel()
    nz = s > 0
    scale = np.ones_like(s)
    scale[nz] = 1.0 / s[nz]
    W = sp.diags(scale) @ W
    return W.tocsr(), outside
