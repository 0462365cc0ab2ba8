"""Catheter electrodes, pseudo-electrogram computation and synthetic data.

The electrogram at an electrode is the gradient-kernel integral
phi_e = -1/(4 pi sigma_b) * sum_T area_T * sigma_i * grad(vm)|_T . (r_e - c_T)/|r_e - c_T|^3
evaluated with one centroid quadrature point per triangle.  The minus sign
gives the conventional morphology: positive deflection while the front
approaches, sharp negative descent as it passes the electrode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import constants
from .geometry import GeometryParam, Point2, closest_point_on_ellipse, contains
from .mesh import TriMesh
from .solver import FrameSeries

# Five catheter arms, four electrodes each (x, y in mm); z = 0 (tissue contact).
ELECTRODE_TABLE = np.array([
    [27.50, 62.00],
    [32.50, 62.00],
    [37.50, 62.00],
    [42.50, 62.00],
    [25.77, 64.38],
    [27.32, 69.13],
    [28.86, 73.89],
    [30.41, 78.64],
    [22.98, 63.47],
    [18.93, 66.41],
    [14.89, 69.35],
    [10.84, 72.29],
    [22.98, 60.53],
    [18.93, 57.59],
    [14.89, 54.65],
    [10.84, 51.71],
    [25.77, 59.62],
    [27.32, 54.87],
    [28.86, 50.11],
    [30.41, 45.36],
])


@dataclass(frozen=True)
class ElectrodeArray:
    positions: np.ndarray  # (20, 3)

    def __post_init__(self):
        if self.positions.shape != (20, 3):
            raise ValueError("exactly 20 electrodes with (x, y, z) coordinates required")

    @staticmethod
    def default(z_offset: float = 0.0) -> "ElectrodeArray":
        pos = np.column_stack([ELECTRODE_TABLE, np.full(20, z_offset)])
        return ElectrodeArray(pos)

    @property
    def xy(self) -> np.ndarray:
        return self.positions[:, :2]

    def clearance(self, theta: GeometryParam) -> float:
        """Signed distance of the closest electrode to the hole boundary."""
        dmin = np.inf
        for x, y in self.xy:
            p = Point2(float(x), float(y))
            q = closest_point_on_ellipse(theta, p)
            d = np.hypot(p.x - q.x, p.y - q.y)
            if contains(theta, p):
                d = -d
            dmin = min(dmin, d)
        return float(dmin)

    def validate_clearance(self, thetas, min_distance: float = 2.0):
        """Require every electrode to sit min_distance outside each region."""
        for theta in thetas:
            d = self.clearance(theta)
            if d <= min_distance:
                raise ValueError(
                    f"electrode within {d:.2f} mm of the region boundary for "
                    f"theta=[{theta.a}, {theta.b}, {theta.phi}]")


@dataclass
class EgmTraces:
    values: np.ndarray  # (20, n_frames)
    tau0: float  # observation window start [ms]
    dtau: float = 4.0  # sampling interval [ms]
    seed: int = 0
    sigma2: float = 1e-6

    @property
    def times(self) -> np.ndarray:
        return self.tau0 + self.dtau * np.arange(self.values.shape[1])


def egm_weights(mesh: TriMesh, positions,
                sigma_i: float = constants.SIGMA_I,
                sigma_b: float = constants.SIGMA_B) -> sp.csr_matrix:
    """Rows w_e with pseudo-EGM phi_e = w_e @ vm (linear in the potential)."""
    if isinstance(positions, ElectrodeArray):
        positions = positions.positions
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if positions.shape[1] == 2:
        positions = np.column_stack([positions, np.zeros(len(positions))])
    p = mesh.nodes[mesh.triangles]
    x1, y1 = p[:, 0, 0], p[:, 0, 1]
    x2, y2 = p[:, 1, 0], p[:, 1, 1]
    x3, y3 = p[:, 2, 0], p[:, 2, 1]
    area2 = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)
    area = 0.5 * area2
    bx = np.stack([y2 - y3, y3 - y1, y1 - y2], axis=1) / area2[:, None]
    by = np.stack([x3 - x2, x1 - x3, x2 - x1], axis=1) / area2[:, None]
    cent = p.mean(axis=1)
    scale = -sigma_i / (4.0 * np.pi * sigma_b)
    rows = []
    for ex, ey, ez in positions:
        dx = ex - cent[:, 0]
        dy = ey - cent[:, 1]
        r2 = dx * dx + dy * dy + ez * ez
        kern = scale * area / np.power(r2, 1.5)
        # contribution of node j of triangle t: kern_t * (bx_tj*dx_t + by_tj*dy_t)
        w = kern[:, None] * (bx * dx[:, None] + by * dy[:, None])
        row = np.zeros(mesh.n_nodes)
        np.add.at(row, mesh.triangles.ravel(), w.ravel())
        rows.append(row)
    return sp.csr_matrix(np.array(rows))


def pseudo_egm(frame_vm: np.ndarray, mesh: TriMesh, electrode, weights=None) -> float:
    """Electrogram value of one frame at one electrode position."""
    if weights is None:
        weights = egm_weights(mesh, np.asarray(electrode, dtype=float))
    return float(np.asarray(weights @ frame_vm).ravel()[0])


def sample_traces(frames: FrameSeries, mesh: TriMesh, electrodes: ElectrodeArray,
                  t0: float, dtau: float = 4.0) -> EgmTraces:
    """Noiseless electrode traces sampled every dtau from recorded frames."""
    frame_dt = frames.dt * frames.record_every
    ratio = dtau / frame_dt
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValueError(f"dtau={dtau} is not a multiple of the frame spacing {frame_dt}")
    times = frames.times
    if not np.any(np.abs(times - t0) < 1e-9):
        raise ValueError(f"t0={t0} does not lie on the frame grid")
    W = egm_weights(mesh, electrodes)
    cols = []
    t = t0
    t_last = times[-1]
    while t <= t_last + 1e-9:
        cols.append(W @ frames.frame_at(t).vm)
        t += dtau
    return EgmTraces(np.array(cols).T, tau0=t0, dtau=dtau)


def add_noise(traces: EgmTraces, sigma2: float, seed: int) -> EgmTraces:
    """Independent Gaussian noise per measurement; deterministic for a seed."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    if sigma2 == 0.0:
        return EgmTraces(traces.values.copy(), traces.tau0, traces.dtau, seed, 0.0)
    rng = np.random.default_rng(seed)
    noisy = traces.values + rng.normal(0.0, np.sqrt(sigma2), size=traces.values.shape)
    return EgmTraces(noisy, traces.tau0, traces.dtau, seed, sigma2)


def save_traces(traces: EgmTraces, csv_path, meta_path=None, meta: dict | None = None):
    """CSV rows: 1-based electrode index, then the potentials; JSON sidecar."""
    with open(csv_path, "w") as f:
        for j in range(traces.values.shape[0]):
            row = ",".join(f"{v:.17g}" for v in traces.values[j])
            f.write(f"{j + 1},{row}\n")
    if meta_path is not None:
        save_traces_meta(traces, meta_path, meta)


def save_traces_meta(traces: EgmTraces, meta_path, meta: dict | None = None):
    payload = {"tau0": traces.tau0, "dtau": traces.dtau, "seed": traces.seed,
               "sigma2": traces.sigma2}
    if meta:
        payload.update(meta)
    with open(meta_path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def load_traces(csv_path, meta_path=None) -> EgmTraces:
    rows = []
    with open(csv_path) as f:
        for line in f:
            parts = line.strip().split(",")
            rows.append((int(parts[0]), [float(v) for v in parts[1:]]))
    rows.sort(key=lambda r: r[0])
    values = np.array([r[1] for r in rows])
    tau0, dtau, seed, sigma2 = 0.0, 4.0, 0, 1e-6
    if meta_path is not None:
        with open(meta_path) as f:
            meta = json.load(f)
        tau0 = float(meta.get("tau0", 0.0))
        dtau = float(meta.get("dtau", 4.0))
        seed = int(meta.get("seed", 0))
        sigma2 = float(meta.get("sigma2", 1e-6))
    return EgmTraces(values, tau0, dtau, seed, sigma2)
