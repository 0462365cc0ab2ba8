import numpy as np
import pytest
import scipy.sparse as sp

from reentry_infer.cell import CellParams, TissueState, reaction_step
from reentry_infer.constants import d_healthy
from reentry_infer.geometry import GeometryParam
from reentry_infer.mesh import TriMesh, generate_mesh
from reentry_infer.solver import (
    DiffusionField,
    Stimulus,
    assemble,
    cg_solve,
    diffusion_step,
    rest_state,
    run_forward,
)


def make_single_triangle():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2]])
    return TriMesh(nodes, tris, np.empty(0, dtype=np.int64), None, 1.0, (0, 0, 1, 1))


class TestDiffusionField:
    def test_paper_constant(self):
        assert d_healthy() == pytest.approx(0.09722, abs=1e-5)

    def test_gamma_scaling(self):
        f = DiffusionField(gamma=0.8)
        assert f.coefficient == pytest.approx(0.8 * d_healthy())


class TestAssemble:
    def test_unit_right_triangle_hand_stiffness(self):
        ops = assemble(make_single_triangle(), DiffusionField(d_healthy=1.0, gamma=1.0))
        K = ops.stiffness.toarray()
        expected = 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]], dtype=float)
        np.testing.assert_allclose(K, expected, atol=1e-14)

    def test_neumann_null_space(self):
        m = generate_mesh(GeometryParam(9, 9, 0, center=(25.0, 25.0)), 2.0, (0.0, 0.0, 50.0, 50.0))
        ops = assemble(m, DiffusionField(gamma=0.8))
        ones = np.ones(m.n_nodes)
        assert np.abs(ops.stiffness @ ones).max() < 1e-12

    def test_lumped_mass_total_area(self):
        m = generate_mesh(GeometryParam(9, 9, 0, center=(25.0, 25.0)), 2.0, (0.0, 0.0, 50.0, 50.0))
        ops = assemble(m, DiffusionField())
        assert ops.lumped_mass.sum() == pytest.approx(m.total_area(), rel=1e-12)
        assert ops.lumped_mass.min() > 0

    def test_degenerate_triangle_reports_index(self):
        m = make_single_triangle()
        nodes = m.nodes.copy()
        nodes[2] = nodes[1]
        from dataclasses import replace

        with pytest.raises(ValueError, match="triangle 0"):
            assemble(replace(m, nodes=nodes), DiffusionField())


class TestCG:
    def test_identity(self):
        A = sp.identity(5, format="csr")
        b = np.arange(5.0)
        np.testing.assert_allclose(cg_solve(A, b), b, atol=1e-12)

    def test_2x2_hand_solution(self):
        A = sp.csr_matrix(np.array([[4.0, 1.0], [1.0, 3.0]]))
        x = cg_solve(A, np.array([1.0, 2.0]))
        np.testing.assert_allclose(x, [1.0 / 11.0, 7.0 / 11.0], atol=1e-10)

    def test_random_spd_against_dense_oracle(self):
        rng = np.random.default_rng(42)
        B = rng.standard_normal((50, 50))
        A = B @ B.T + 50 * np.eye(50)
        b = rng.standard_normal(50)
        expected = np.linalg.solve(A, b)  # dense factorization oracle
        x = cg_solve(sp.csr_matrix(A), b, tol=1e-10)
        assert np.abs(x - expected).max() < 1e-6

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        B = rng.standard_normal((30, 30))
        A = sp.csr_matrix(B @ B.T + 30 * np.eye(30))
        b = rng.standard_normal(30)
        x1 = cg_solve(A, b)
        x2 = cg_solve(A, b)
        assert np.array_equal(x1, x2)


@pytest.fixture(scope="module")
def small_mesh():
    return generate_mesh(None, 1.0, (0.0, 0.0, 5.0, 5.0))


class TestDiffusionStep:
    def test_uniform_field_unchanged(self, small_mesh):
        ops = assemble(small_mesh, DiffusionField(gamma=0.8))
        state = TissueState(np.full(small_mesh.n_nodes, 0.37), np.ones(small_mesh.n_nodes), 0.0)
        out = diffusion_step(state, ops, 0.5)
        assert np.abs(out.vm - 0.37).max() < 1e-10

    def test_mass_conservation(self, small_mesh):
        ops = assemble(small_mesh, DiffusionField(gamma=0.8))
        rng = np.random.default_rng(0)
        state = TissueState(rng.random(small_mesh.n_nodes), np.ones(small_mesh.n_nodes), 0.0)
        before = float(ops.lumped_mass @ state.vm)
        out = diffusion_step(state, ops, 0.5, tol=1e-12)
        after = float(ops.lumped_mass @ out.vm)
        assert abs(after - before) / abs(before) < 1e-8

    def test_smooth_bump_matches_dense_oracle(self, small_mesh):
        ops = assemble(small_mesh, DiffusionField(d_healthy=0.1, gamma=1.0))
        x, y = small_mesh.nodes[:, 0], small_mesh.nodes[:, 1]
        vm = np.exp(-((x - 2.5) ** 2 + (y - 2.5) ** 2))
        state = TissueState(vm.copy(), np.ones_like(vm), 0.0)
        out = diffusion_step(state, ops, 0.5, tol=1e-12)
        A = ops.consistent_mass + 0.5 * ops.stiffness
        expected = np.linalg.solve(A.toarray(), ops.consistent_mass @ vm)
        assert np.abs(out.vm - expected).max() < 1e-8

    def test_h_unchanged(self, small_mesh):
        ops = assemble(small_mesh, DiffusionField())
        rng = np.random.default_rng(3)
        h = rng.random(small_mesh.n_nodes)
        state = TissueState(rng.random(small_mesh.n_nodes), h.copy(), 0.0)
        out = diffusion_step(state, ops, 0.5)
        assert np.array_equal(out.h, h)


class TestRunForward:
    def test_zero_diffusion_equals_pure_reaction(self, small_mesh):
        fld = DiffusionField(d_healthy=1e-300, gamma=1.0)  # numerically zero coupling
        rng = np.random.default_rng(5)
        vm0 = rng.random(small_mesh.n_nodes)
        h0 = rng.random(small_mesh.n_nodes)
        init = TissueState(vm0.copy(), h0.copy(), 0.0)
        fs = run_forward(small_mesh, init, fld, 0.5, 10.0)
        # oracle: the same Rush-Larsen reaction composition without any PDE
        p = CellParams()
        ref = TissueState(vm0.copy(), h0.copy(), 0.0)
        for _ in range(20):
            ref = reaction_step(ref, 0.25, p)
            ref = reaction_step(ref, 0.25, p)
        assert np.abs(fs.frames[-1].vm - ref.vm).max() < 1e-8
        assert np.abs(fs.frames[-1].h - ref.h).max() < 1e-8

    def test_frame_count(self, small_mesh):
        init = rest_state(small_mesh)
        fs = run_forward(small_mesh, init, DiffusionField(), 0.5, 5.0)
        assert len(fs.frames) == 11  # t_end/dt + 1

    def test_record_every_subsampling(self, small_mesh):
        init = rest_state(small_mesh)
        fs = run_forward(small_mesh, init, DiffusionField(), 0.5, 5.0, record_every=2)
        assert len(fs.frames) == 6
        assert fs.frames[1].t == pytest.approx(1.0)

    def test_planar_wave_cv_richardson(self):
        # conduction velocity change under a half-step refinement stays small
        def strip_cv(dx):
            m = generate_mesh(None, dx, (0.0, 0.0, 40.0, 4.0))
            stim = Stimulus(m.nodes[:, 0] < 1.0, 0.0, 2.0)
            probes = [int(np.argmin(np.abs(m.nodes[:, 0] - x) + np.abs(m.nodes[:, 1] - 2.0)))
                      for x in (10.0, 30.0)]
            P = sp.csr_matrix((np.ones(2), (np.arange(2), probes)), shape=(2, m.n_nodes))
            fs = run_forward(m, rest_state(m), DiffusionField(gamma=0.8), 0.5, 220.0,
                             stimuli=(stim,), record_frames=False, probe_matrix=P, probe_every=1)
            pv, pt = fs.probe_values, fs.probe_times

            def lat(tr):
                k = np.where((tr[:-1] < 0.3) & (tr[1:] > 0.3))[0][0]
                return pt[k] + (0.3 - tr[k]) / (tr[k + 1] - tr[k]) * 0.5

            return 20.0 / (lat(pv[1]) - lat(pv[0]))

        cv_course = strip_cv(0.25)
        cv_fine = strip_cv(0.125)
        assert abs(cv_course - cv_fine) / cv_fine < 0.05

    def test_instability_reports_step(self, small_mesh):
        init = rest_state(small_mesh)
        init.vm[0] = np.inf
        from reentry_infer.solver import SolverInstabilityError

        with pytest.raises((SolverInstabilityError, Exception)):
            run_forward(small_mesh, init, DiffusionField(), 0.5, 2.0)
