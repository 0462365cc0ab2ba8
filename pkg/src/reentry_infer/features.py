"""Activation times and the 21-entry characterizing-quantity vector.

Electrode traces yield one activation time per wave passage: electrograms
cross zero with a sharp negative descent, transmembrane traces cross 0.3
upward.  The first two activations per electrode give the period (averaged
over electrodes) and the relative activation pattern of one rotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VM_THRESHOLD = 0.3


class NoReentryError(RuntimeError):
    """Fewer than two qualifying activations in a trace."""


@dataclass(frozen=True)
class LatPair:
    lat1: float
    lat2: float

    def __post_init__(self):
        if not self.lat2 > self.lat1:
            raise ValueError("second activation must follow the first")


@dataclass(frozen=True)
class FeatureVector:
    period: float
    rellat: np.ndarray  # 20 entries, zero mean

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.period], self.rellat])

    @staticmethod
    def from_array(v) -> "FeatureVector":
        v = np.asarray(v, dtype=float)
        return FeatureVector(float(v[0]), v[1:].copy())


def _interp_crossing(times, values, m, level):
    frac = (level - values[m]) / (values[m + 1] - values[m])
    return times[m] + frac * (times[m + 1] - times[m])


def egm_crossings(times, values) -> np.ndarray:
    """Zero crossings with negative descent, guarded against noise blips.

    A crossing at index m needs the available samples among m-2..m positive
    and m+1..m+3 negative; the trailing guard requires all three samples, the
    leading guard uses what exists at the start of the window.
    """
    times = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    n = len(y)
    out = []
    for m in range(n - 3):
        if not (y[m] > 0 and y[m + 1] < 0):
            continue
        lead = y[max(0, m - 2):m + 1]
        tail = y[m + 1:m + 4]
        if (lead > 0).all() and len(tail) == 3 and (tail < 0).all():
            out.append(_interp_crossing(times, y, m, 0.0))
    return np.array(out)


def vm_crossings(times, values, thr: float = VM_THRESHOLD) -> np.ndarray:
    """Upward threshold crossings of a transmembrane trace (interpolated)."""
    times = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    idx = np.where((v[:-1] <= thr) & (v[1:] > thr))[0]
    return np.array([_interp_crossing(times, v, m, thr) for m in idx])


def _first_two(crossings) -> LatPair:
    if len(crossings) < 2:
        raise NoReentryError(f"only {len(crossings)} qualifying activations")
    return LatPair(float(crossings[0]), float(crossings[1]))


def lat_from_egm(times, values) -> LatPair:
    """First and second electrogram activation of a trace."""
    return _first_two(egm_crossings(times, values))


def lat_from_vm(times, values) -> LatPair:
    """First and second transmembrane activation of a trace."""
    return _first_two(vm_crossings(times, values))


def grid_activations(times, values, thr: float = VM_THRESHOLD) -> np.ndarray:
    """Sample times at which an upward threshold crossing starts."""
    times = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    idx = np.where((v[:-1] <= thr) & (v[1:] > thr))[0]
    return times[idx]


def find_t0(activations, n_reentries: int = 2) -> float:
    """Observation-window start leaving exactly n_reentries full rotations.

    With activations a_0 < a_1 < ... the window starts at the third-from-last
    activation, so two further passes of the wave fit before the end.
    """
    acts = np.asarray(activations, dtype=float)
    need = n_reentries + 1
    if len(acts) < need:
        raise NoReentryError(f"{len(acts)} activations, need at least {need}")
    return float(acts[-need])


def characterizing_quantities(pairs: list[LatPair]) -> FeatureVector:
    """period = mean(lat2) - mean(lat1); rellat_j = lat2_j - mean(lat2).

    An electrode whose activation falls within the detection lag of the
    window start can have its pair assigned one rotation late relative to
    the other electrodes (and relative to the other detector kind), so the
    relative pattern is reduced modulo the period into (-P/2, P/2] and
    re-centered until stable; the zero-sum invariant is preserved.
    """
    if len(pairs) != 20:
        raise ValueError(f"expected 20 electrode activation pairs, got {len(pairs)}")
    lat1 = np.array([p.lat1 for p in pairs])
    lat2 = np.array([p.lat2 for p in pairs])
    period = float(lat2.mean() - lat1.mean())
    rellat = lat2 - lat2.mean()
    if period > 0:
        for _ in range(8):
            wrapped = rellat - period * np.ceil(rellat / period - 0.5)
            wrapped -= wrapped.mean()
            if np.allclose(wrapped, rellat, atol=1e-12):
                break
            rellat = wrapped
    return FeatureVector(period, rellat)


def features_from_traces(times, values, kind: str) -> FeatureVector:
    """Characterizing quantities of a 20-row trace matrix.

    kind selects the activation detector: 'egm' for electrode potentials,
    'vm' for transmembrane traces.
    """
    detect = lat_from_egm if kind == "egm" else lat_from_vm
    pairs = [detect(times, row) for row in values]
    return characterizing_quantities(pairs)
