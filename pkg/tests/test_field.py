"""Sampled mollified fields, Feynman-Kac in a frozen field and the replica cross-check."""

import math

import numpy as np
import pytest

from pamlab.errors import CoverageError, Unsupported
from pamlab.field import (
    COVERAGE_LIMIT,
    FieldGrid,
    FieldKernel,
    FieldSample,
    build_mollified_covariance,
    fk_solution,
    nesting_bias_check,
    replica_crosscheck,
    sample_field,
    sample_fields,
    smoothed_kernel,
)
from pamlab.kernels import CovarianceKernel, LogPlus, Mollified
from pamlab.montecarlo import InitialCondition

COV1 = CovarianceKernel(1.0, 1)


@pytest.fixture(scope="module")
def mc1():
    return build_mollified_covariance(COV1, 0.1, FieldGrid.around([0.0], 0.25, 1.0, 0.1))


class TestFieldGrid:
    def test_around(self):
        g = FieldGrid.around([0.5], 0.25, 1.0, 0.1)
        assert g.half_width == pytest.approx(4 * 0.5 + 2)
        assert g.h <= 0.05
        ax = g.axes()[0]
        assert ax[0] == pytest.approx(0.5 - g.half_width) and ax[-1] == pytest.approx(0.5 + g.half_width)

    def test_points_2d(self):
        g = FieldGrid((0.0, 1.0), 1.0, 5)
        p = g.points()
        assert p.shape == (25, 2) and g.size == 25
        assert p[0].tolist() == [-1.0, 0.0] and p[-1].tolist() == [1.0, 2.0]


class TestCovariance:
    def test_smoothed_kernel_is_log_part_at_double_eps(self):
        k = smoothed_kernel(COV1, 0.1)
        assert isinstance(k, Mollified) and k.eps == pytest.approx(0.2)
        assert k.base == LogPlus(1.0, 1)

    def test_diagonal_finite_and_growing(self):
        diag = []
        for eps in (0.1, 0.05, 0.025):
            mc = build_mollified_covariance(COV1, eps, FieldGrid((0.0,), 0.5, 11))
            d = np.diag(mc.matrix)
            assert np.all(np.isfinite(d))
            np.testing.assert_allclose(d, d[0], rtol=1e-12)
            diag.append(d[0])
        assert diag[0] < diag[1] < diag[2]
        # logarithmic growth: each halving adds about (1/2) log 2
        assert diag[2] - diag[1] == pytest.approx(0.5 * math.log(2), rel=0.1)

    def test_far_lags_vanish(self, mc1):
        pts = mc1.points[:, 0]
        i, j = 0, len(pts) - 1
        assert pts[j] - pts[i] > 7.0
        assert abs(mc1.matrix[i, j]) < 1e-12

    def test_cholesky(self, mc1):
        K = mc1.matrix
        L = mc1.cholesky
        np.testing.assert_allclose(L @ L.T, K + mc1.jitter * np.eye(len(K)), atol=1e-12)
        assert mc1.jitter >= max(0.0, -mc1.min_eigenvalue)
        man = mc1.manifest()
        assert man["grid_points"] == mc1.grid.size and man["eps"] == 0.1

    def test_bounded_part_smoothing(self):
        cov = CovarianceKernel(1.0, 1, g=lambda x, y: np.full(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]), 0.3), g_sup=0.3)
        fk = smoothed_kernel(cov, 0.1)
        assert isinstance(fk, FieldKernel)
        a = np.array([[0.0], [0.4]])
        np.testing.assert_allclose(fk.pairwise(a, a) - smoothed_kernel(COV1, 0.1).pairwise(a, a), 0.3, rtol=1e-12)

    def test_smoothed_g_gauss_hermite(self):
        # E[(a + s Z1)(b + s Z2)] = a b for independent centred Z
        cov = CovarianceKernel(1.0, 1, g=lambda x, y: np.clip(x[..., 0] * y[..., 0], -9, 9), g_sup=9.0)
        fk = FieldKernel(cov, 0.1)
        assert fk.smoothed_g(np.array([0.5]), np.array([-1.0])) == pytest.approx(-0.5, rel=1e-10)

    def test_validation(self):
        g = FieldGrid((0.0,), 1.0, 11)
        with pytest.raises(ValueError):
            build_mollified_covariance(COV1, 0.0, g)
        with pytest.raises(ValueError):
            build_mollified_covariance(CovarianceKernel(1.0, 2), 0.1, g)
        with pytest.raises(Unsupported):
            build_mollified_covariance(CovarianceKernel(1.0, 2), 0.1, FieldGrid((0.0, 0.0), 1.0, 65))


class TestSampling:
    def test_deterministic(self, mc1):
        a = sample_field(mc1, 11, 3)
        b = sample_field(mc1, 11, 3)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, sample_field(mc1, 11, 4).values)
        batch = sample_fields(mc1, 11, [2, 3])
        np.testing.assert_allclose(batch[1], a.values, rtol=1e-12, atol=1e-12)

    def test_moments(self, mc1):
        n = 10_000
        V = sample_fields(mc1, 2024, range(n))
        K = mc1.matrix
        idx = [0, 40, 80, 81, 85, 120]
        for i in idx:
            sd = math.sqrt(K[i, i])
            assert abs(V[:, i].mean()) <= 3 * sd / math.sqrt(n) + 1e-12
        for i in idx:
            for j in idx:
                emp = float(np.mean(V[:, i] * V[:, j]))
                se = math.sqrt((K[i, i] * K[j, j] + K[i, j] ** 2) / n)
                assert abs(emp - K[i, j]) <= 3 * se + 1e-9


class TestFeynmanKac:
    def test_zero_field(self, mc1):
        est = fk_solution(FieldSample.constant(mc1.grid, 0.0), 0.25, [0.0], 500, 16)
        assert est.u_value == 1.0 and est.stderr == 0.0

    @pytest.mark.parametrize("c", [-1.5, 0.3, 2.0])
    def test_constant_field(self, mc1, c):
        est = fk_solution(FieldSample.constant(mc1.grid, c), 0.25, [0.0], 200, 16)
        assert est.u_value == pytest.approx(math.exp(0.25 * c), rel=1e-12)

    def test_constant_initial_condition(self, mc1):
        est = fk_solution(FieldSample.constant(mc1.grid, 0.0), 0.25, [0.0], 200, 16, u0=InitialCondition.constant(3.0))
        assert est.u_value == pytest.approx(3.0, rel=1e-12)

    def test_stderr_scaling(self, mc1):
        f = sample_field(mc1, 5, 0)
        a = fk_solution(f, 0.25, [0.0], 2000, 16, seed=5)
        b = fk_solution(f, 0.25, [0.0], 8000, 16, seed=5)
        assert b.stderr / a.stderr == pytest.approx(0.5, rel=0.2)
        assert abs(a.log_value - b.log_value) <= 3 * math.hypot(a.log_stderr, b.log_stderr)

    def test_coverage_error(self):
        small = FieldGrid((0.0,), 0.2, 11)
        with pytest.raises(CoverageError):
            fk_solution(FieldSample.constant(small, 0.0), 1.0, [0.0], 200, 16)
        ok = fk_solution(FieldSample.constant(FieldGrid((0.0,), 10.0, 11), 0.0), 1.0, [0.0], 200, 16)
        assert ok.outside_fraction <= COVERAGE_LIMIT


class TestCrosscheck:
    @pytest.mark.parametrize("N,seed", [(1, 3), (2, 7)])
    def test_sides_agree(self, N, seed):
        rep = replica_crosscheck(COV1, 0.1, N, 0.25, [0.0], 500, 200, 5000, seed)
        assert rep.passed and rep.gap_sigmas <= 3
        assert rep.outside_fraction <= COVERAGE_LIMIT
        assert rep.manifest["seedA"]["master_seed"] == seed
        d = rep.as_dict()
        assert set(d) == {"logA", "stderrA", "logB", "stderrB", "gap_sigmas", "pass", "seed"}

    def test_constant_initial_condition_shifts_both_sides(self):
        a = replica_crosscheck(COV1, 0.1, 2, 0.25, [0.0], 200, 100, 2000, 7)
        b = replica_crosscheck(COV1, 0.1, 2, 0.25, [0.0], 200, 100, 2000, 7, u0=InitialCondition.constant(2.0))
        assert b.logA - a.logA == pytest.approx(2 * math.log(2), abs=1e-12)
        assert b.logB - a.logB == pytest.approx(2 * math.log(2), abs=1e-12)
        assert b.gap_sigmas == pytest.approx(a.gap_sigmas, rel=1e-9)

    def test_worker_invariance(self):
        a = replica_crosscheck(COV1, 0.1, 2, 0.25, [0.0], 150, 50, 1000, 9)
        b = replica_crosscheck(COV1, 0.1, 2, 0.25, [0.0], 150, 50, 1000, 9, workers=4)
        assert (a.logA, a.stderrA, a.logB, a.stderrB) == (b.logA, b.stderrA, b.logB, b.stderrB)

    def test_nesting_bias_below_noise(self):
        shift, se_small, se_large = nesting_bias_check(COV1, 0.1, 2, 0.25, [0.0], 300, 100, 32, 5)
        assert abs(shift) <= max(se_small, se_large)
