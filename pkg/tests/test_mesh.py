import math

import numpy as np
import pytest

from reentry_infer.geometry import GeometryParam, ellipse_value
from reentry_infer.mesh import (
    PROV_FALLBACK,
    PROV_RELOCATED,
    MeshQualityError,
    force_relocate,
    generate_mesh,
    load_mvmesh,
    quality,
    relocate_mesh,
    save_mvmesh,
)

DOMAIN = (0.0, 0.0, 100.0, 100.0)


@pytest.fixture(scope="module")
def circle_mesh():
    return generate_mesh(GeometryParam(9, 9, 0), 1.0, DOMAIN)


@pytest.fixture(scope="module")
def generic_mesh():
    # generic parameters: no lattice point sits exactly on the boundary
    return generate_mesh(GeometryParam(10.25, 4.25, 0.3), 1.0, DOMAIN)


class TestGenerate:
    def test_no_hole_counts(self):
        m = generate_mesh(None, 1.0, DOMAIN)
        assert m.n_nodes == 101 * 101
        assert m.n_triangles == 2 * 100 * 100
        assert len(m.snapped) == 0
        assert quality(m).min_angle == pytest.approx(45.0)

    def test_node_count_and_hole_deficit(self, circle_mesh):
        m = circle_mesh
        assert m.n_nodes <= 101 * 101
        # grid nodes displaced or removed by the hole, vs the area-ratio estimate
        deficit = 101 * 101 - (m.n_nodes - len(m.snapped))
        expected = math.pi * 81 / 1.0**2
        assert abs(deficit - expected) / expected < 0.15

    def test_snapped_on_boundary_and_centroids_outside(self):
        m = generate_mesh(GeometryParam(10, 4, 0), 0.5, DOMAIN)
        theta = m.built_for
        v = ellipse_value(theta, m.nodes[m.snapped, 0], m.nodes[m.snapped, 1])
        assert np.abs(v - 1.0).max() < 1e-8
        c = m.centroids()
        assert (ellipse_value(theta, c[:, 0], c[:, 1]) >= 1.0 - 1e-12).all()

    def test_all_areas_positive(self, circle_mesh):
        assert circle_mesh.signed_areas().min() > 0

    def test_lumped_area_matches_domain_minus_hole(self, circle_mesh):
        # snapped polygonization slightly undershoots the exact ellipse area
        hole = math.pi * 81
        assert circle_mesh.total_area() == pytest.approx(100 * 100 - hole, rel=0.01)

    def test_quality_thresholds_over_prior_sweep(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            theta = GeometryParam(rng.uniform(2, 16), rng.uniform(2, 16),
                                  rng.uniform(-math.pi / 2, math.pi / 2))
            m = generate_mesh(theta, 1.0, DOMAIN)
            q = quality(m)
            assert q.min_angle >= 10.0
            assert q.min_edge >= 0.2 * 1.0

    def test_euler_relation_one_hole(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            theta = GeometryParam(rng.uniform(2, 16), rng.uniform(2, 16),
                                  rng.uniform(-math.pi / 2, math.pi / 2))
            m = generate_mesh(theta, 1.0, DOMAIN)
            v, e, t = m.n_nodes, len(m.edges()), m.n_triangles
            assert v - e + t == 0  # V - E + F = 2 with outer face and one hole face

    def test_independent_meshing_discontinuity(self):
        # bisect to exhibit two arbitrarily close parameters with different node counts
        lo, hi = 9.0, 9.2
        n_lo = generate_mesh(GeometryParam(lo, 9, 0), 1.0, DOMAIN).n_nodes
        n_hi = generate_mesh(GeometryParam(hi, 9, 0), 1.0, DOMAIN).n_nodes
        assert n_lo != n_hi
        while hi - lo > 1e-9:
            mid = 0.5 * (lo + hi)
            n_mid = generate_mesh(GeometryParam(mid, 9, 0), 1.0, DOMAIN).n_nodes
            if n_mid == n_lo:
                lo = mid
            else:
                hi = mid
        assert hi - lo <= 1e-9
        assert (generate_mesh(GeometryParam(lo, 9, 0), 1.0, DOMAIN).n_nodes
                != generate_mesh(GeometryParam(hi, 9, 0), 1.0, DOMAIN).n_nodes)

    def test_hole_clearance_precondition(self):
        with pytest.raises(ValueError):
            generate_mesh(GeometryParam(16, 16, 0), 1.0, (0.0, 0.0, 34.0, 34.0))

    def test_degenerate_quality_fixture(self):
        m = generate_mesh(None, 1.0, (0.0, 0.0, 4.0, 4.0))
        nodes = m.nodes.copy()
        # inject a nearly degenerate triangle
        nodes[m.triangles[0][2]] = nodes[m.triangles[0][0]] + 1e-9
        from dataclasses import replace

        q = quality(replace(m, nodes=nodes))
        assert q.min_angle < 0.01


class TestRelocate:
    def test_fixed_point_identical(self, generic_mesh):
        r = relocate_mesh(generic_mesh, generic_mesh.built_for)
        assert r.provenance == PROV_RELOCATED
        assert np.array_equal(r.nodes, generic_mesh.nodes)
        assert np.array_equal(r.triangles, generic_mesh.triangles)
        assert np.array_equal(r.snapped, generic_mesh.snapped)

    def test_small_perturbation_moves_only_snapped(self, generic_mesh):
        base = generic_mesh
        star = GeometryParam(base.built_for.a + 1e-4, base.built_for.b, base.built_for.phi)
        r = relocate_mesh(base, star)
        assert r.provenance == PROV_RELOCATED
        assert np.array_equal(r.triangles, base.triangles)
        moved = np.where(np.any(r.nodes != base.nodes, axis=1))[0]
        assert set(moved).issubset(set(base.snapped.tolist()))
        assert np.abs(r.nodes - base.nodes).max() < 1e-3

    def test_large_perturbation_falls_back(self, generic_mesh):
        base = generic_mesh
        star = GeometryParam(base.built_for.a + 2 * base.dx, base.built_for.b, base.built_for.phi)
        r = relocate_mesh(base, star)
        assert r.provenance == PROV_FALLBACK

    def test_relocation_continuity(self, generic_mesh):
        base = generic_mesh
        prev = np.inf
        for d in (1e-2, 1e-3, 1e-4, 1e-5):
            star = GeometryParam(base.built_for.a + d, base.built_for.b, base.built_for.phi)
            r = relocate_mesh(base, star)
            assert r.provenance == PROV_RELOCATED
            disp = np.abs(r.nodes - base.nodes).max()
            assert disp < prev
            prev = disp
        assert prev < 1e-4

    def test_force_relocate_produces_distinct_fitting_meshes(self):
        ref = GeometryParam(10, 4, 0)
        shapes = set()
        n_ok = 0
        for a in (10.1, 10.2, 10.3, 10.4):
            src = generate_mesh(GeometryParam(a, 4, 0), 1.0, DOMAIN)
            r = force_relocate(src, ref)
            assert r is not None
            v = ellipse_value(ref, r.nodes[r.snapped, 0], r.nodes[r.snapped, 1])
            assert np.abs(v - 1.0).max() < 1e-8
            shapes.add((r.n_nodes, r.n_triangles))
            n_ok += 1
        assert n_ok == 4 and len(shapes) > 1


class TestExport:
    def test_mvmesh_round_trip(self, generic_mesh, tmp_path):
        p = tmp_path / "m.mvmesh"
        save_mvmesh(generic_mesh, p)
        first = p.read_text().splitlines()[0]
        assert first == "MVMESH 1"
        m2 = load_mvmesh(p, built_for=generic_mesh.built_for, dx=generic_mesh.dx,
                         domain=generic_mesh.domain)
        assert np.array_equal(m2.nodes, generic_mesh.nodes)
        assert np.array_equal(m2.triangles, generic_mesh.triangles)
        assert np.array_equal(m2.snapped, generic_mesh.snapped)

    def test_export_deterministic(self, generic_mesh, tmp_path):
        p1, p2 = tmp_path / "a.mvmesh", tmp_path / "b.mvmesh"
        save_mvmesh(generic_mesh, p1)
        save_mvmesh(generic_mesh, p2)
        assert p1.read_bytes() == p2.read_bytes()
