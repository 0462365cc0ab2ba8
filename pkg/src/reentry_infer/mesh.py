"""Boundary-fitted triangulations of the tissue slab with an elliptical hole.

A structured grid of spacing dx is split into right triangles; cells fully
inside the hole are dropped and the remaining interior vertices are snapped
onto the ellipse boundary.  Because the construction is a deterministic
function of the ellipse parameters, regenerating the mesh for a perturbed
ellipse jumps exactly when a lattice point crosses the boundary, while
relocating an existing mesh's boundary nodes varies continuously.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    GeometryParam,
    Point2,
    closest_point_on_ellipse,
    contains_xy,
    ellipse_value,
)

MIN_ANGLE_DEG = 10.0
MIN_EDGE_FACTOR = 0.2  # of dx
COLLAPSE_FACTOR = 0.2  # of dx

PROV_INDEPENDENT = "independent"
PROV_RELOCATED = "relocated"
PROV_FALLBACK = "relocation_fallback"


class MeshQualityError(RuntimeError):
    """Raised when a generated mesh violates a quality metric."""

    def __init__(self, metric: str, value: float, threshold: float):
        self.metric = metric
        self.value = value
        self.threshold = threshold
        super().__init__(f"mesh quality check failed: {metric}={value:.4g} (threshold {threshold:.4g})")


@dataclass(frozen=True)
class MeshQuality:
    min_angle: float  # degrees
    min_edge: float  # mm
    max_aspect: float  # longest/shortest edge per triangle


@dataclass(frozen=True)
class TriMesh:
    nodes: np.ndarray  # (n, 2) float
    triangles: np.ndarray  # (m, 3) int, counter-clockwise
    snapped: np.ndarray  # sorted node indices lying on the hole boundary
    built_for: GeometryParam | None
    dx: float
    domain: tuple[float, float, float, float]
    provenance: str = PROV_INDEPENDENT
    relocated_from: GeometryParam | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a (k, 2) index array."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def total_area(self) -> float:
        return float(self.signed_areas().sum())


def lattice(domain, dx):
    """Structured grid coordinates (flat arrays) and grid shape for a domain."""
    x0, y0, x1, y1 = domain
    nx = (x1 - x0) / dx
    ny = (y1 - y0) / dx
    if abs(nx - round(nx)) > 1e-9 or abs(ny - round(ny)) > 1e-9:
        raise ValueError(f"dx={dx} does not divide the domain extent evenly")
    nx, ny = int(round(nx)), int(round(ny))
    xs = x0 + dx * np.arange(nx + 1)
    ys = y0 + dx * np.arange(ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return X.ravel(), Y.ravel(), nx, ny


def hole_partition(theta: GeometryParam, domain, dx) -> np.ndarray:
    """Inside/outside classification of every lattice point (the mesh topology)."""
    X, Y, _, _ = lattice(domain, dx)
    return contains_xy(theta, X, Y)


def _structured_triangles(nx: int, ny: int) -> np.ndarray:
    """Two CCW triangles per cell; node id = i * (ny + 1) + j."""
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a = i * (ny + 1) + j
    b = (i + 1) * (ny + 1) + j
    c = (i + 1) * (ny + 1) + (j + 1)
    d = i * (ny + 1) + (j + 1)
    return np.concatenate([np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)])


def _validity_violation(nodes, triangles, snapped, theta: GeometryParam | None, dx):
    """Return (metric, value, threshold) of the first violated validity rule, or None."""
    p = nodes[triangles]
    areas = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                   - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    if len(areas) == 0:
        return ("triangle_count", 0.0, 1.0)
    if areas.min() <= 0:
        return ("signed_area", float(areas.min()), 0.0)
    if theta is not None and len(snapped) > 0:
        val = ellipse_value(theta, nodes[snapped, 0], nodes[snapped, 1])
        err = float(np.abs(val - 1.0).max())
        if err > 1e-8:
            return ("snapped_on_boundary", err, 1e-8)
    if theta is not None:
        cent = p.mean(axis=1)
        cv = ellipse_value(theta, cent[:, 0], cent[:, 1])
        if (cv < 1.0 - 1e-12).any():
            return ("centroid_outside_hole", float(cv.min()), 1.0)
    q = _quality_arrays(nodes, triangles)
    if q.min_angle < MIN_ANGLE_DEG:
        return ("min_angle", q.min_angle, MIN_ANGLE_DEG)
    if q.min_edge < MIN_EDGE_FACTOR * dx:
        return ("min_edge", q.min_edge, MIN_EDGE_FACTOR * dx)
    return None


def _quality_arrays(nodes, triangles) -> MeshQuality:
    p = nodes[triangles]
    e0 = p[:, 1] - p[:, 0]
    e1 = p[:, 2] - p[:, 1]
    e2 = p[:, 0] - p[:, 2]
    l0 = np.linalg.norm(e0, axis=1)
    l1 = np.linalg.norm(e1, axis=1)
    l2 = np.linalg.norm(e2, axis=1)
    lengths = np.stack([l0, l1, l2], axis=1)
    lmin = lengths.min(axis=1)
    lmax = lengths.max(axis=1)
    # interior angles via the law of cosines, clipped for numerical safety
    def angle(u, v, lu, lv):
        c = -np.einsum("ij,ij->i", u, v) / np.maximum(lu * lv, 1e-300)
        return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))

    a0 = angle(e2, e0, l2, l0)
    a1 = angle(e0, e1, l0, l1)
    a2 = angle(e1, e2, l1, l2)
    min_angle = float(np.minimum(np.minimum(a0, a1), a2).min())
    max_aspect = float((lmax / np.maximum(lmin, 1e-300)).max())
    return MeshQuality(min_angle=min_angle, min_edge=float(lmin.min()), max_aspect=max_aspect)


def quality(mesh: TriMesh) -> MeshQuality:
    """Exact minimum angle, minimum edge length and maximum edge-ratio aspect."""
    if mesh.n_triangles == 0:
        raise ValueError("quality of an empty mesh is undefined")
    return _quality_arrays(mesh.nodes, mesh.triangles)


def _snap_positions(theta: GeometryParam, nodes, idx):
    out = nodes.copy()
    for i in idx:
        x, y = float(nodes[i, 0]), float(nodes[i, 1])
        # already on the target boundary: keep bit-exact (relocation fixed point)
        if abs(ellipse_value(theta, x, y) - 1.0) < 1e-13:
            continue
        q = closest_point_on_ellipse(theta, Point2(x, y))
        out[i, 0] = q.x
        out[i, 1] = q.y
    return out


def _compact(nodes, triangles, keep_mask_tri, snapped_mask):
    """Drop unreferenced nodes and relabel triangle indices."""
    tris = triangles[keep_mask_tri]
    ref = np.zeros(len(nodes), dtype=bool)
    ref[tris.ravel()] = True
    new_id = -np.ones(len(nodes), dtype=np.int64)
    new_id[ref] = np.arange(ref.sum())
    return nodes[ref], new_id[tris], np.where(snapped_mask[ref])[0], ref


def _merge_pairs(nodes, triangles, snapped_idx, pairs):
    """Union-find merge of node pairs; unsnapped nodes win as representatives."""
    snapped_mask = np.zeros(len(nodes), dtype=bool)
    snapped_mask[snapped_idx] = True
    parent = np.arange(len(nodes))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for u, v in pairs:
        ru, rv = find(u), find(v)
        if ru != rv:
            if snapped_mask[ru] and not snapped_mask[rv]:
                parent[ru] = rv
            elif snapped_mask[rv] and not snapped_mask[ru]:
                parent[rv] = ru
            else:
                parent[max(ru, rv)] = min(ru, rv)
    rep = np.array([find(i) for i in range(len(nodes))])
    tris = rep[triangles]
    degenerate = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
    tris = tris[~degenerate]
    ref = np.zeros(len(nodes), dtype=bool)
    ref[tris.ravel()] = True
    new_id = -np.ones(len(nodes), dtype=np.int64)
    new_id[ref] = np.arange(ref.sum())
    merged_snapped = snapped_mask & (rep == np.arange(len(nodes))) & ref
    return nodes[ref], new_id[tris], np.where(merged_snapped[ref])[0]


def _collapse(nodes, triangles, snapped_idx, dx):
    """Merge node clusters closer than COLLAPSE_FACTOR*dx involving a snapped node."""
    from scipy.spatial import cKDTree

    snapped_mask = np.zeros(len(nodes), dtype=bool)
    snapped_mask[snapped_idx] = True
    tree = cKDTree(nodes)
    pairs = tree.query_pairs(COLLAPSE_FACTOR * dx, output_type="ndarray")
    if len(pairs) > 0:
        pairs = pairs[snapped_mask[pairs].any(axis=1)]
    if len(pairs) == 0:
        return nodes, triangles, snapped_idx, False
    nodes, tris, snapped = _merge_pairs(nodes, triangles, snapped_idx, pairs)
    return nodes, tris, snapped, True


def _repair_slivers(nodes, triangles, snapped_idx, dx, max_rounds=100):
    """Collapse the shortest snapped edge of each quality-violating triangle.

    The fixed-radius collapse cannot reach slivers whose edges all exceed the
    merge radius; removing their shortest boundary edge does.
    """
    for _ in range(max_rounds):
        snapped_mask = np.zeros(len(nodes), dtype=bool)
        snapped_mask[snapped_idx] = True
        p = nodes[triangles]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
        ln = np.linalg.norm(e, axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos0 = -np.einsum("ij,ij->i", e[2], e[0]) / (ln[2] * ln[0])
            cos1 = -np.einsum("ij,ij->i", e[0], e[1]) / (ln[0] * ln[1])
            cos2 = -np.einsum("ij,ij->i", e[1], e[2]) / (ln[1] * ln[2])
        amin = np.degrees(np.arccos(np.clip(np.maximum.reduce([cos0, cos1, cos2]), -1, 1)))
        bad = (amin < MIN_ANGLE_DEG) | (ln.min(axis=0) < MIN_EDGE_FACTOR * dx)
        if not bad.any():
            return nodes, triangles, snapped_idx
        pairs = []
        edge_nodes = [(0, 1), (1, 2), (2, 0)]
        for t in np.where(bad)[0]:
            cand = []
            for k, (u, v) in enumerate(edge_nodes):
                nu, nv = triangles[t, u], triangles[t, v]
                if snapped_mask[nu] or snapped_mask[nv]:
                    cand.append((ln[k, t], nu, nv))
            if cand:
                _, nu, nv = min(cand)
                pairs.append((nu, nv))
        if not pairs:
            return nodes, triangles, snapped_idx
        nodes, triangles, snapped_idx = _merge_pairs(nodes, triangles, snapped_idx, pairs)
    return nodes, triangles, snapped_idx


def generate_mesh(theta: GeometryParam | None, dx: float, domain=(0.0, 0.0, 100.0, 100.0)) -> TriMesh:
    """Structured triangulation of the domain, with the hole cut out and fitted.

    theta=None builds the plain slab without a hole.
    """
    if dx <= 0:
        raise ValueError("dx must be positive")
    X, Y, nx, ny = lattice(domain, dx)
    nodes = np.stack([X, Y], axis=1)
    triangles = _structured_triangles(nx, ny)
    if theta is None:
        return TriMesh(nodes, triangles, np.empty(0, dtype=np.int64), None, dx, tuple(domain))

    x0, y0, x1, y1 = domain
    halfspan = max(theta.a, theta.b)
    cx, cy = theta.center
    if not (x0 + 2 * dx <= cx - halfspan and cx + halfspan <= x1 - 2 * dx
            and y0 + 2 * dx <= cy - halfspan and cy + halfspan <= y1 - 2 * dx):
        raise ValueError("hole must lie inside the domain with clearance >= 2*dx")

    inside = contains_xy(theta, X, Y)
    all_inside = inside[triangles].all(axis=1)
    keep = ~all_inside
    snapped_mask = inside.copy()
    nodes2, tris2, snapped_idx, ref = _compact(nodes, triangles, keep, snapped_mask)
    nodes2 = _snap_positions(theta, nodes2, snapped_idx)

    # Slivers can straddle thin parts of the ellipse without interior vertices;
    # drop any triangle whose centroid still falls inside the hole.
    cent = nodes2[tris2].mean(axis=1)
    ok = ellipse_value(theta, cent[:, 0], cent[:, 1]) >= 1.0 - 1e-12
    if not ok.all():
        snapped_mask2 = np.zeros(len(nodes2), dtype=bool)
        snapped_mask2[snapped_idx] = True
        nodes2, tris2, snapped_idx, _ = _compact(nodes2, tris2, ok, snapped_mask2)

    violation = _validity_violation(nodes2, tris2, snapped_idx, theta, dx)
    if violation is not None:
        nodes3, tris3, snapped3, _ = _collapse(nodes2, tris2, snapped_idx, dx)
        nodes3, tris3, snapped3 = _repair_slivers(nodes3, tris3, snapped3, dx)
        # merges move nodes, which can push a centroid back into the hole
        cent = nodes3[tris3].mean(axis=1)
        ok = ellipse_value(theta, cent[:, 0], cent[:, 1]) >= 1.0 - 1e-12
        if not ok.all():
            mask = np.zeros(len(nodes3), dtype=bool)
            mask[snapped3] = True
            nodes3, tris3, snapped3, _ = _compact(nodes3, tris3, ok, mask)
        violation = _validity_violation(nodes3, tris3, snapped3, theta, dx)
        if violation is None:
            return TriMesh(nodes3, tris3, np.sort(snapped3), theta, dx, tuple(domain))
        raise MeshQualityError(*violation)
    return TriMesh(nodes2, tris2, np.sort(snapped_idx), theta, dx, tuple(domain))


def relocate_mesh(base: TriMesh, theta_star: GeometryParam) -> TriMesh:
    """Refit an existing mesh to a new ellipse by moving its boundary nodes.

    Succeeds only when the lattice inside/outside partition is unchanged, so
    the mesh topology still matches; otherwise (or on a quality failure) a
    fresh independent mesh is generated and flagged as a fallback.
    """
    def fallback():
        m = generate_mesh(theta_star, base.dx, base.domain)
        return replace(m, provenance=PROV_FALLBACK, relocated_from=base.built_for)

    if base.built_for is None:
        return fallback()
    part_base = hole_partition(base.built_for, base.domain, base.dx)
    part_star = hole_partition(theta_star, base.domain, base.dx)
    if not np.array_equal(part_base, part_star):
        return fallback()
    nodes = _snap_positions(theta_star, base.nodes, base.snapped)
    if _validity_violation(nodes, base.triangles, base.snapped, theta_star, base.dx) is not None:
        return fallback()
    return TriMesh(nodes, base.triangles, base.snapped, theta_star, base.dx, base.domain,
                   provenance=PROV_RELOCATED, relocated_from=base.built_for)


def force_relocate(base: TriMesh, theta_star: GeometryParam) -> TriMesh | None:
    """Deform a mesh onto a different ellipse while keeping its connectivity.

    Used by the discretization-variance sweep, where meshes built for nearby
    parameter values are refitted to a single reference ellipse.  All nodes
    now inside the target (plus the previously snapped ring) are projected
    onto the target boundary.  Returns None when the deformed mesh is invalid.
    """
    inside = contains_xy(theta_star, base.nodes[:, 0], base.nodes[:, 1])
    move = inside.copy()
    move[base.snapped] = True
    idx = np.where(move)[0]
    nodes = _snap_positions(theta_star, base.nodes, idx)
    if _validity_violation(nodes, base.triangles, idx, theta_star, base.dx) is not None:
        return None
    return TriMesh(nodes, base.triangles, np.sort(idx), theta_star, base.dx, base.domain,
                   provenance=PROV_RELOCATED, relocated_from=base.built_for)


def save_mvmesh(mesh: TriMesh, path):
    lines = ["MVMESH 1", f"nodes {mesh.n_nodes}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles]
    lines.append(f"snapped {len(mesh.snapped)}")
    lines += [str(i) for i in mesh.snapped]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_mvmesh(path, built_for=None, dx=None, domain=None, provenance=PROV_INDEPENDENT) -> TriMesh:
    with open(path) as f:
        tokens = f.read().split("\n")
    if tokens[0].strip() != "MVMESH 1":
        raise ValueError(f"not an MVMESH file: {path}")
    pos = 1

    def expect(name):
        nonlocal pos
        kw, count = tokens[pos].split()
        if kw != name:
            raise ValueError(f"expected '{name}' section, got '{kw}'")
        pos += 1
        return int(count)

    n = expect("nodes")
    nodes = np.array([[float(v) for v in tokens[pos + i].split()] for i in range(n)])
    pos += n
    m = expect("triangles")
    tris = np.array([[int(v) for v in tokens[pos + i].split()] for i in range(m)], dtype=np.int64)
    pos += m
    k = expect("snapped")
    snapped = np.array([int(tokens[pos + i]) for i in range(k)], dtype=np.int64)
    if dx is None:
        dx = 1.0
    if domain is None:
        domain = (0.0, 0.0, 100.0, 100.0)
    return TriMesh(nodes, tris if m else np.empty((0, 3), dtype=np.int64), snapped,
                   built_for, dx, tuple(domain), provenance=provenance)
