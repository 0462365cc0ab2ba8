"""Two-variable membrane kinetics: normalized potential vm and gate h.

The inward current h*vm*(vm - v_gate)*(1 - vm)/tau_in competes with the
outward current (1 - h)*vm/tau_out; the gate opens below v_gate and closes
above it with its own time constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CellParams:
    tau_in: float = 0.3  # ms
    tau_out: float = 6.0  # ms
    tau_open: float = 120.0  # ms
    tau_close: float = 150.0  # ms
    v_gate: float = 0.13

    def __post_init__(self):
        if min(self.tau_in, self.tau_out, self.tau_open, self.tau_close) <= 0:
            raise ValueError("time constants must be positive")
        if not 0 < self.v_gate < 1:
            raise ValueError("v_gate must lie in (0, 1)")


@dataclass
class TissueState:
    vm: np.ndarray
    h: np.ndarray
    t: float  # ms

    def copy(self) -> "TissueState":
        return TissueState(self.vm.copy(), self.h.copy(), self.t)


def reaction_rhs(v, h, p: CellParams):
    """dvm/dt from the ionic currents (works on scalars and arrays)."""
    return h * v * (v - p.v_gate) * (1.0 - v) / p.tau_in - (1.0 - h) * v / p.tau_out


def reaction_step(state: TissueState, dt_half: float, p: CellParams) -> TissueState:
    """Advance the reaction system by dt_half at every node independently.

    The gate is integrated exactly for the frozen side of v_gate (values at
    v_gate take the opening branch); vm takes one explicit Euler step from
    the start-of-step state.
    """
    if dt_half <= 0:
        raise ValueError("dt_half must be positive")
    v, h = state.vm, state.h
    e_open = math.exp(-dt_half / p.tau_open)
    e_close = math.exp(-dt_half / p.tau_close)
    below = v <= p.v_gate
    h_new = np.where(below, 1.0 + (h - 1.0) * e_open, h * e_close)
    v_new = v + dt_half * reaction_rhs(v, h, p)
    return TissueState(v_new, h_new, state.t + dt_half)
