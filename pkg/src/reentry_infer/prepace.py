"""One-off S1-S2 stimulation producing the rotating-wave initial condition.

The protocol paces the slab from the left edge (S1), then stimulates the
lower-left quadrant inside the first wave's recovery tail (S2), which leaves
only one viable propagation direction and wraps a rotor around the central
hole.  The final state is stored and later transferred onto the mesh of any
candidate region.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cell import CellParams, TissueState
from .geometry import GeometryParam
from .interp import interpolation_matrix
from .mesh import TriMesh, generate_mesh
from .solver import DiffusionField, Stimulus, assemble, run_forward

SNAP_MAGIC = b"MVSNAP01"
ELECTRODE4 = (42.5, 62.0)


class NoSpiralError(RuntimeError):
    """No sustained reentry detected; S2 timing likely needs adjustment."""


@dataclass(frozen=True)
class PrepaceProtocol:
    theta_ref: GeometryParam = GeometryParam(9.0, 9.0, 0.0)
    gamma: float = 0.8
    dx: float = 1.0
    dt: float = 0.5
    domain: tuple = (0.0, 0.0, 100.0, 100.0)
    s1_region: tuple = (0.0, 0.0, 2.0, 100.0)  # left strip
    s1_time: float = 0.0
    s2_region: tuple = (0.0, 0.0, 50.0, 50.0)  # lower-left quadrant
    s2_time: float = 460.0
    stim_duration: float = 2.0
    steady_tol: float = 2.0  # ms between the last two rotation periods
    min_periods: int = 5
    max_duration: float = 12_000.0
    check_interval: float = 500.0
    probe_point: tuple = ELECTRODE4  # electrode used for the period criterion
    cell: CellParams = field(default_factory=CellParams)


@dataclass
class Snapshot:
    mesh: TriMesh
    state: TissueState
    metadata: dict


def _rect_mask(nodes: np.ndarray, rect) -> np.ndarray:
    x0, y0, x1, y1 = rect
    return ((nodes[:, 0] >= x0) & (nodes[:, 0] <= x1)
            & (nodes[:, 1] >= y0) & (nodes[:, 1] <= y1))


def _activation_times(trace: np.ndarray, times: np.ndarray, thr: float = 0.3) -> np.ndarray:
    up = np.where((trace[:-1] < thr) & (trace[1:] > thr))[0]
    dt = times[1] - times[0] if len(times) > 1 else 0.0
    return times[up] + (thr - trace[up]) / (trace[up + 1] - trace[up]) * dt


def run_prepacing(proto: PrepaceProtocol = PrepaceProtocol()) -> Snapshot:
    """Run the S1-S2 protocol until the rotation period settles.

    The run advances in blocks; it stops once min_periods rotations are seen
    at the reference electrode and the last two periods agree within
    steady_tol.  Raises NoSpiralError when the reentry never forms or the
    period has not settled within max_duration.
    """
    mesh = generate_mesh(proto.theta_ref, proto.dx, proto.domain)
    fld = DiffusionField(gamma=proto.gamma)
    ops = assemble(mesh, fld)
    probe, outside = interpolation_matrix(mesh, np.array([proto.probe_point]))
    if outside.any():
        raise ValueError("reference electrode lies outside the prepacing mesh")
    stims = (Stimulus(_rect_mask(mesh.nodes, proto.s1_region), proto.s1_time, proto.stim_duration),
             Stimulus(_rect_mask(mesh.nodes, proto.s2_region), proto.s2_time, proto.stim_duration))

    sample_every = max(int(round(4.0 / proto.dt)), 1)
    state = TissueState(np.zeros(mesh.n_nodes), np.ones(mesh.n_nodes), 0.0)
    trace = []
    times = []
    while state.t < proto.max_duration:
        block = min(proto.check_interval, proto.max_duration - state.t)
        fs = run_forward(mesh, state, fld, proto.dt, block, params=proto.cell, ops=ops,
                         record_frames=False, probe_matrix=probe, probe_every=sample_every,
                         stimuli=stims)
        keep = slice(1, None) if times else slice(None)
        trace.extend(fs.probe_values[0][keep])
        times.extend(fs.probe_times[keep])
        state = fs.final_state
        acts = _activation_times(np.asarray(trace), np.asarray(times))
        acts = acts[acts > proto.s2_time]
        if state.t > proto.s2_time + 2 * proto.check_interval and len(acts) < 2:
            raise NoSpiralError(
                f"no reentrant activation at the reference electrode by t={state.t:.0f} ms; "
                "adjust the S2 stimulus timing")
        if len(acts) >= proto.min_periods + 1:
            periods = np.diff(acts)
            if abs(periods[-1] - periods[-2]) < proto.steady_tol:
                meta = {
                    "theta_a": proto.theta_ref.a, "theta_b": proto.theta_ref.b,
                    "theta_phi": proto.theta_ref.phi,
                    "center_x": proto.theta_ref.center[0], "center_y": proto.theta_ref.center[1],
                    "gamma": proto.gamma, "dx": proto.dx, "dt": proto.dt,
                    "domain": ",".join(str(v) for v in proto.domain),
                    "s1_region": ",".join(str(v) for v in proto.s1_region),
                    "s1_time": proto.s1_time,
                    "s2_region": ",".join(str(v) for v in proto.s2_region),
                    "s2_time": proto.s2_time,
                    "stim_duration": proto.stim_duration,
                    "t_final": state.t,
                    "period": float(periods[-1]),
                    "period_prev": float(periods[-2]),
                }
                return Snapshot(mesh, state, meta)
    raise NoSpiralError(
        f"rotation period did not settle within {proto.max_duration:.0f} ms; "
        "adjust the S2 stimulus timing")


def transfer_state(snap: Snapshot, target: TriMesh) -> TissueState:
    """Interpolate the stored state onto another mesh of the same domain.

    Target nodes inside the source hole (or outside all source triangles)
    take the nearest source node's value; gate values are clamped to [0, 1].
    """
    if np.array_equal(target.nodes, snap.mesh.nodes):
        return TissueState(snap.state.vm.copy(), snap.state.h.copy(), snap.state.t)
    W, _ = interpolation_matrix(snap.mesh, target.nodes, nearest_fallback=True)
    vm = W @ snap.state.vm
    h = np.clip(W @ snap.state.h, 0.0, 1.0)
    return TissueState(vm, h, snap.state.t)


def save_snapshot(snap: Snapshot, path):
    mesh, state = snap.mesh, snap.state
    meta_lines = "\n".join(f"{k}={v}" for k, v in sorted(snap.metadata.items()))
    meta_bytes = meta_lines.encode("utf-8")
    with open(path, "wb") as f:
        f.write(SNAP_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<Q", mesh.n_nodes))
        f.write(mesh.nodes.astype("<f8").tobytes())
        f.write(struct.pack("<Q", mesh.n_triangles))
        f.write(mesh.triangles.astype("<u4").tobytes())
        f.write(struct.pack("<d", state.t))
        f.write(state.vm.astype("<f8").tobytes())
        f.write(state.h.astype("<f8").tobytes())
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)


def load_snapshot(path) -> Snapshot:
    with open(path, "rb") as f:
        if f.read(8) != SNAP_MAGIC:
            raise ValueError(f"not a snapshot file: {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise ValueError(f"unsupported snapshot version {version}")
        (n,) = struct.unpack("<Q", f.read(8))
        nodes = np.frombuffer(f.read(16 * n), dtype="<f8").reshape(n, 2).copy()
        (m,) = struct.unpack("<Q", f.read(8))
        tris = np.frombuffer(f.read(12 * m), dtype="<u4").reshape(m, 3).astype(np.int64)
        (t,) = struct.unpack("<d", f.read(8))
        vm = np.frombuffer(f.read(8 * n), dtype="<f8").copy()
        h = np.frombuffer(f.read(8 * n), dtype="<f8").copy()
        (k,) = struct.unpack("<I", f.read(4))
        meta_lines = f.read(k).decode("utf-8")
    metadata = {}
    for line in meta_lines.splitlines():
        key, _, value = line.partition("=")
        metadata[key] = value
    theta = None
    if "theta_a" in metadata:
        theta = GeometryParam(float(metadata["theta_a"]), float(metadata["theta_b"]),
                              float(metadata["theta_phi"]),
                              (float(metadata.get("center_x", 50.0)),
                               float(metadata.get("center_y", 50.0))))
    dx = float(metadata.get("dx", 1.0))
    domain = tuple(float(v) for v in metadata.get("domain", "0,0,100,100").split(","))
    mesh = TriMesh(nodes, tris, np.empty(0, dtype=np.int64), theta, dx, domain)
    return Snapshot(mesh, TissueState(vm, h, t), metadata)
