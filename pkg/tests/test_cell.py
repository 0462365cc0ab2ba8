import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reentry_infer.cell import CellParams, TissueState, reaction_rhs, reaction_step

P = CellParams()


def reference_ode(v0, h0, t_end, p=P, n_sub=100):
    """High-accuracy reference: classic RK4 on the piecewise-smooth system.

    Sub-steps are fine enough that at most a negligible fraction of a step
    straddles the gate threshold.
    """
    def rhs(y):
        v, h = y
        dh = (1 - h) / p.tau_open if v <= p.v_gate else -h / p.tau_close
        return np.array([reaction_rhs(v, h, p), dh])

    y = np.array([v0, h0], dtype=float)
    n = 100 * n_sub
    dt = t_end / n
    for _ in range(n):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


class TestRhs:
    def test_rest_state_is_fixed_point(self):
        for h in (0.0, 0.3, 1.0):
            assert reaction_rhs(0.0, h, P) == 0.0

    def test_hand_value_midpotential(self):
        # 0.5 * 0.37 * 0.5 / 0.3
        assert reaction_rhs(0.5, 1.0, P) == pytest.approx(0.5 * 0.37 * 0.5 / 0.3, abs=1e-12)
        assert reaction_rhs(0.5, 1.0, P) == pytest.approx(0.3083333333, abs=1e-9)

    def test_hand_value_plateau(self):
        assert reaction_rhs(1.0, 0.0, P) == pytest.approx(-1.0 / 6.0, abs=1e-12)


class TestReactionStep:
    def make(self, v, h):
        return TissueState(np.array([v], dtype=float), np.array([h], dtype=float), 0.0)

    def test_rest_fixed_point(self):
        s = reaction_step(self.make(0.0, 1.0), 0.25, P)
        assert s.vm[0] == 0.0
        assert s.h[0] == 1.0

    def test_gate_opening_closed_form(self):
        s = reaction_step(self.make(0.0, 0.5), 120.0, P)
        assert s.h[0] == pytest.approx(1 - 0.5 * math.exp(-1), abs=1e-9)
        assert s.h[0] == pytest.approx(0.816060, abs=1e-6)

    def test_gate_closing_closed_form(self):
        s = reaction_step(self.make(0.9, 1.0), 150.0, P)
        assert s.h[0] == pytest.approx(math.exp(-1), abs=1e-9)
        assert s.h[0] == pytest.approx(0.367879, abs=1e-6)

    @given(
        h0=st.floats(0, 1),
        v0=st.floats(-0.1, 1.1),
        dt=st.floats(1e-3, 500.0),
    )
    @settings(max_examples=300)
    def test_gate_stays_in_unit_interval(self, h0, v0, dt):
        s = reaction_step(self.make(v0, h0), dt, P)
        assert 0.0 <= s.h[0] <= 1.0

    @pytest.mark.parametrize("v0,h0", [(0.5, 0.9), (0.2, 0.8), (0.9, 0.6), (0.05, 0.3), (0.7, 1.0)])
    def test_first_order_convergence(self, v0, h0):
        t_end = 1.0
        ref = reference_ode(v0, h0, t_end)
        errs = []
        for n in (4, 8, 16, 32):
            s = TissueState(np.array([v0]), np.array([h0]), 0.0)
            for _ in range(n):
                s = reaction_step(s, t_end / n, P)
            errs.append(abs(s.vm[0] - ref[0]) + abs(s.h[0] - ref[1]))
        rates = [math.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
        assert rates[-1] > 0.8  # first order in dt

    def test_relaxed_rest_is_stationary(self):
        s = self.make(0.0, 1.0)
        for _ in range(50):
            s = reaction_step(s, 10.0, P)
        assert s.vm[0] == 0.0
        assert s.h[0] == pytest.approx(1.0, abs=1e-12)
