import math

import numpy as np
import pytest

from reentry_infer.features import FeatureVector
from reentry_infer.inference import (
    NoiseModel,
    Prior,
    build_sigma_eps,
    log_prior,
)


class TestPrior:
    def test_inside_value(self):
        assert log_prior([10, 4, 0]) == pytest.approx(-math.log(14 * 14 * math.pi))

    def test_a_below_bound(self):
        assert log_prior([1, 4, 0]) == -math.inf

    def test_phi_above_bound(self):
        assert log_prior([10, 4, 2.0]) == -math.inf

    def test_midpoint(self):
        np.testing.assert_allclose(Prior().midpoint(), [9.0, 9.0, 0.0])


class TestSigmaEps:
    def test_entries(self):
        d = build_sigma_eps()
        assert d[0] == 0.1
        assert np.all(d[1:] == 1.0)
        assert len(d) == 21


class TestNoiseModel:
    def make(self, eps_scale=1.0, d_scale=0.0):
        return NoiseModel(build_sigma_eps() * eps_scale, np.full(21, d_scale))

    def test_zero_misfit_density(self):
        nm = self.make()
        expected = -0.5 * (21 * math.log(2 * math.pi) + np.log(nm.total).sum())
        assert nm.log_density(np.zeros(21)) == pytest.approx(expected)

    def test_doubling_covariance_algebra(self):
        # closed-form Gaussian algebra: ll(Sigma) - ll(2 Sigma)
        # = (21/2) log 2 - (1/4) d^T Sigma^-1 d
        nm1 = self.make()
        nm2 = NoiseModel(nm1.sigma_eps * 2.0, nm1.sigma_d * 2.0)
        rng = np.random.default_rng(0)
        d = rng.standard_normal(21)
        quad = float(d @ (d / nm1.total))
        expected_drop = 10.5 * math.log(2.0) - 0.25 * quad
        assert nm1.log_density(d) - nm2.log_density(d) == pytest.approx(expected_drop, abs=1e-10)

    def test_enlarging_sigma_d_damps_misfit(self):
        # the misfit term shrinks in magnitude for a fixed misfit
        d = np.full(21, 2.0)
        prev = -np.inf
        for scale in (0.0, 0.5, 2.0, 10.0):
            nm = NoiseModel(build_sigma_eps(), np.full(21, scale))
            quad = -0.5 * float(d @ (d / nm.total))
            assert quad > prev
            prev = quad

    def test_positive_definite_required(self):
        with pytest.raises(ValueError):
            NoiseModel(np.zeros(21), np.zeros(21))


class TestFeatureMisfit:
    def test_log_density_uses_all_quantities(self):
        nm = NoiseModel(build_sigma_eps(), np.zeros(21))
        base = FeatureVector(200.0, np.zeros(20))
        other = FeatureVector(201.0, np.zeros(20))
        d = base.as_array() - other.as_array()
        # only the period term contributes: -0.5 * 1 / 0.1 = -5
        assert nm.log_density(d) - nm.log_normalization() == pytest.approx(-5.0)


class TestSigmaDEstimation:
    def _run_with_stub(self, monkeypatch, values_fn):
        import reentry_infer.inference as inf
        from reentry_infer.geometry import GeometryParam

        def fake_worker(args):
            idx, theta = args
            return idx, values_fn(idx, theta), idx < 3  # first meshes "fall back"

        monkeypatch.setattr(inf, "_sigma_d_worker", fake_worker)
        return inf.estimate_sigma_d(GeometryParam(10, 4, 0), setup=None, n_workers=1)

    def test_identical_solutions_give_zero(self, monkeypatch):
        sigma_d, info = self._run_with_stub(
            monkeypatch, lambda idx, theta: np.full(21, 3.7))
        assert np.all(sigma_d == 0.0)
        assert info["n_sweep"] == 51
        assert info["fallbacks"] == [0, 1, 2]

    def test_inflation_and_rounding(self, monkeypatch):
        rng = np.random.default_rng(0)
        draws = rng.standard_normal((51, 21))

        sigma_d, info = self._run_with_stub(monkeypatch, lambda idx, theta: draws[idx])
        expected = np.round(draws.var(axis=0, ddof=1) * 1.3, 1)
        np.testing.assert_array_equal(sigma_d, expected)

    def test_sweep_grid_definition(self, monkeypatch):
        seen = []

        def record(idx, theta):
            seen.append((idx, theta.a))
            return np.zeros(21)

        self._run_with_stub(monkeypatch, record)
        seen.sort()
        assert len(seen) == 51
        assert seen[0][1] == pytest.approx(9.5)
        assert seen[-1][1] == pytest.approx(10.5)
        assert seen[1][1] - seen[0][1] == pytest.approx(0.02)
