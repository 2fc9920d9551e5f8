"""Kernel family, mollification and the analytic checks built on it."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from pamlab.kernels import (
    Bessel,
    CosineAtoms,
    CovarianceKernel,
    LogPlus,
    Mollified,
    Riesz,
    Scaled,
    TruncPower,
    bessel_G,
    condition_H_report,
    constant_kernel,
    covariance_domination_constant,
    dalang_check,
    eval_gamma,
    eval_k,
    format_kernel,
    gram_psd_check,
    kernel_from_dict,
    kernel_to_dict,
    mollify,
    parse_kernel,
    radial_heat_convolution,
    riesz_domination_constant,
)

# Frozen oracle values, each computed once by an independent route
# (adaptive quadrature or grid search) before the implementation existed.
MOLLIFIED_RIESZ_AT_ZERO = 1.7200799746490398  # E|Z|^-1/2, Z ~ N(0, 1)
BESSEL_RATIOS = {  # G_2(r) / log(1/r) in d = 2 from the subordination integral
    1e-2: 0.163166485928788,
    1e-3: 0.16182605581728213,
    1e-4: 0.16115824341964483,
}
RIESZ_DOMINATION = {  # dense grid + golden-section maximisation
    0.1: 13.025850929940457,
    0.2: 3.0471895621705016,
    0.3: 0.6799093477531204,
    0.5: 0.0,
    0.7: 0.0,
    0.9: 0.0,
}


def pair(xi, w=1.0, d=1):
    """Symmetric atom pair +-xi with total weight w."""
    return CosineAtoms((tuple(np.atleast_1d(xi)),), (w,), d)


class TestEvalGamma:
    def test_truncpower_value(self):
        assert eval_gamma(TruncPower(2, 1.0), [0.5]) == pytest.approx(0.25, abs=1e-15)

    def test_logplus_values(self):
        k = LogPlus(1.0)
        assert eval_gamma(k, [1.0]) == 0.0
        assert eval_gamma(k, [math.exp(-1)]) == pytest.approx(1.0, rel=1e-15)
        assert eval_gamma(k, [-math.exp(-1)]) == pytest.approx(1.0, rel=1e-15)

    def test_riesz_value(self):
        assert eval_gamma(Riesz(0.5), [4.0]) == pytest.approx(0.5, rel=1e-15)

    def test_singular_at_origin(self):
        assert eval_gamma(LogPlus(1.0, 2), [0.0, 0.0]) == math.inf
        assert eval_gamma(Riesz(0.5), [0.0]) == math.inf
        assert LogPlus().singular and Riesz(0.5).singular

    def test_bounded_values_at_origin(self):
        atoms = CosineAtoms(((1.0,), (2.0,)), (0.3, 0.4))
        assert eval_gamma(atoms, [0.0]) == pytest.approx(0.7)
        assert eval_gamma(TruncPower(2, 3.0), [0.0]) == 1.0
        assert not atoms.singular and not TruncPower().singular

    def test_vectorised_points(self):
        x = np.array([[0.1, 0.2], [0.5, 0.0], [2.0, 2.0]])
        k = LogPlus(1.0, 2)
        r = np.linalg.norm(x, axis=1)
        np.testing.assert_allclose(k(x), np.maximum(np.log(1 / r), 0))

    @given(st.floats(0.05, 5.0), st.floats(-3.0, 3.0))
    def test_scaled_is_exact_multiple(self, c, x):
        base = TruncPower(2, 2.0)
        assert eval_gamma(Scaled(c, base), [x]) == c * eval_gamma(base, [x])

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            Riesz(1.0, 1)
        with pytest.raises(ValueError):
            Riesz(2.0, 3)
        with pytest.raises(ValueError):
            LogPlus(0.0)
        with pytest.raises(ValueError):
            TruncPower(1.0, 1.0, 2)
        with pytest.raises(ValueError):
            CosineAtoms(((1.0,),), (-1.0,))
        with pytest.raises(ValueError):
            Scaled(0.0, LogPlus())

    def test_truncpower_threshold_by_dimension(self):
        TruncPower(1.0, 1.0, 1)
        TruncPower(2.0, 1.0, 2)
        TruncPower(2.0, 1.0, 3)
        with pytest.raises(ValueError):
            TruncPower(1.0, 1.0, 3)
        TruncPower(1.0, 1.0, 3, validate=False)


class TestCovarianceKernel:
    def test_examples(self):
        assert eval_k(CovarianceKernel(1.0, 1), [0.0], [1.0]) == 0.0
        assert eval_k(CovarianceKernel(2.0, 1), [0.5], [2.5]) == 0.0
        g = lambda x, y: np.full(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]), 0.7)
        assert eval_k(CovarianceKernel(1.0, 1, g, 0.7), [0.0], [1.0]) == pytest.approx(0.7)

    def test_symmetric(self, rng):
        g = lambda x, y: 0.3 * np.cos(x[..., 0] + y[..., 0])
        cov = CovarianceKernel(1.5, 2, g, 0.3)
        a, b = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
        np.testing.assert_allclose(cov(a, b), cov(b, a), rtol=1e-15)

    def test_declared_bound_enforced(self):
        g = lambda x, y: np.ones(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]))
        cov = CovarianceKernel(1.0, 1, g, 0.5)
        with pytest.raises(ValueError):
            eval_k(cov, [0.0], [0.3])

    def test_domination_constant(self):
        cov = CovarianceKernel(2.0, 1, lambda x, y: 0.0 * x[..., 0], 0.4)
        c = covariance_domination_constant(cov, 0.3)
        r = np.logspace(-8, 2, 4000)
        assert np.all(np.maximum(np.log(2.0 / r), 0) + 0.4 <= r**-0.3 + c + 1e-12)


class TestMollify:
    def test_atomic_damping(self):
        xi0, eps = 1.7, 0.3
        k = mollify(pair(xi0), eps)
        x = np.linspace(-3, 3, 11)
        np.testing.assert_allclose(k(x[:, None]), math.exp(-eps * xi0**2 / 2) * np.cos(xi0 * x), rtol=1e-14)

    def test_riesz_at_origin_matches_frozen_quadrature(self):
        val = eval_gamma(mollify(Riesz(0.5), 1.0), [0.0])
        assert val == pytest.approx(MOLLIFIED_RIESZ_AT_ZERO, rel=1e-10)

    def test_riesz_at_origin_independent_quadrature(self):
        f = lambda y: abs(y) ** -0.5 * math.exp(-y * y / 2) / math.sqrt(2 * math.pi)
        ref = 2 * integrate.quad(f, 0, np.inf, limit=200)[0]
        assert eval_gamma(mollify(Riesz(0.5), 1.0), [0.0]) == pytest.approx(ref, rel=1e-8)

    def test_rejects_nonpositive_eps(self):
        for eps in (0.0, -1.0):
            with pytest.raises(ValueError):
                mollify(LogPlus(), eps)

    @pytest.mark.parametrize(
        "kernel", [LogPlus(1.0, 1), LogPlus(1.0, 2), Riesz(0.5, 1), Riesz(1.5, 3), TruncPower(2, 1.0, 2), Bessel(2.0, 2)]
    )
    def test_finite_at_origin(self, kernel):
        v = eval_gamma(mollify(kernel, 0.05), [0.0] * kernel.dim)
        assert math.isfinite(v) and v > 0

    @pytest.mark.parametrize("kernel", [LogPlus(1.0, 1), LogPlus(1.0, 2), Riesz(0.5, 1), TruncPower(2, 1.0, 1)])
    def test_value_at_origin_nonincreasing_in_eps(self, kernel):
        vals = [eval_gamma(mollify(kernel, 2.0**-k), [0.0] * kernel.dim) for k in range(0, 8)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("kernel", [LogPlus(1.0, 1), LogPlus(1.0, 2), Riesz(0.5, 1)])
    def test_converges_pointwise_away_from_origin(self, kernel):
        x = [0.4] + [0.0] * (kernel.dim - 1)
        exact = eval_gamma(kernel, x)
        errs = [abs(eval_gamma(mollify(kernel, 2.0**-k), x) - exact) for k in range(4, 12)]
        # decreasing until the 1e-9 interpolation floor of the mollified table
        assert all(b < a or b < 1e-9 for a, b in zip(errs, errs[1:]))
        # at least first order in eps once eps is small against |x|^2
        assert errs[-1] < errs[0] / 2**6

    @pytest.mark.parametrize(
        "base,d,eps",
        [(LogPlus(1.0, 1), 1, 0.05), (LogPlus(1.0, 2), 2, 0.02), (TruncPower(2, 1.0, 1), 1, 0.1), (LogPlus(2.0, 3), 3, 0.1)],
    )
    def test_table_matches_direct_quadrature(self, base, d, eps):
        r = np.linspace(0, 3, 301)
        ref = radial_heat_convolution(base.radial, d, eps, r, getattr(base, "T", 1.0))
        np.testing.assert_allclose(mollify(base, eps).radial(r), ref, atol=1e-7, rtol=1e-7)

    def test_nested_mollification_adds(self):
        a = mollify(mollify(LogPlus(), 0.1), 0.2)
        b = mollify(LogPlus(), 0.3)
        r = np.linspace(0, 2, 50)
        np.testing.assert_allclose(a.radial(r), b.radial(r), rtol=1e-12)

    def test_scaled_commutes(self):
        r = np.linspace(0, 2, 50)
        np.testing.assert_allclose(
            mollify(Scaled(2.5, Riesz(0.5)), 0.1).radial(r), 2.5 * mollify(Riesz(0.5), 0.1).radial(r), rtol=1e-14
        )

    def test_pairwise_agrees_with_call(self, rng):
        k = mollify(LogPlus(1.0, 2), 0.05)
        a, b = rng.normal(size=(7, 2)), rng.normal(size=(5, 2))
        direct = np.array([[eval_gamma(k, x - y) for y in b] for x in a])
        np.testing.assert_allclose(k.pairwise(a, b), direct, rtol=1e-13)


class TestMollificationSandwich:
    """The Gram matrix of gamma - gamma_eps is PSD (its spectral measure is nonnegative)."""

    @pytest.mark.parametrize(
        "kernel", [pair(2.0), CosineAtoms(((0.5, 1.0), (3.0, -1.0)), (0.4, 0.6), 2), TruncPower(2, 1.0, 1), TruncPower(2, 2.0, 3)]
    )
    @pytest.mark.parametrize("eps", [0.01, 0.1, 1.0])
    def test_difference_psd(self, kernel, eps):
        rng = np.random.default_rng(int(eps * 1000))
        pts = rng.uniform(-2, 2, (40, kernel.dim))
        G = kernel.pairwise(pts, pts) - mollify(kernel, eps).pairwise(pts, pts)
        lam = np.linalg.eigvalsh(0.5 * (G + G.T))
        assert lam[0] >= -1e-8 * max(abs(np.trace(G)), 1e-300) - 1e-12

    @pytest.mark.parametrize("kernel", [LogPlus(1.0, 1), Riesz(0.5, 1), LogPlus(1.0, 2)])
    def test_singular_bases_via_two_mollifications(self, kernel):
        # gamma_e1 - gamma_e2 has spectral weight e^{-e1|xi|^2/2} - e^{-e2|xi|^2/2} >= 0 for e1 < e2
        pts = np.random.default_rng(3).uniform(-2, 2, (40, kernel.dim))
        G = mollify(kernel, 0.02).pairwise(pts, pts) - mollify(kernel, 0.2).pairwise(pts, pts)
        lam = np.linalg.eigvalsh(0.5 * (G + G.T))
        assert lam[0] >= -1e-8 * np.trace(G)


class TestDalang:
    def test_riesz_half_in_one_dimension(self):
        res = dalang_check(Riesz(0.5, 1))
        assert res.finite and res.status == "finite"
        # int |x|^-1/2 e^{-|x|} / 2 dx = Gamma(1/2)
        assert res.value == pytest.approx(math.sqrt(math.pi), rel=1e-8)

    def test_atoms_bounded_by_mass(self, rng):
        for _ in range(10):
            k = rng.integers(1, 5)
            atoms = CosineAtoms(tuple(tuple(rng.normal(size=2)) for _ in range(k)), tuple(rng.uniform(0.1, 1, k)), 2)
            res = dalang_check(atoms)
            assert res.finite and 0 < res.value <= atoms.total_mass()

    @pytest.mark.parametrize("d", [1, 2])
    def test_riesz_increasing_in_alpha(self, d):
        alphas = np.linspace(0.1, min(2, d) - 0.1, 6)
        vals = [dalang_check(Riesz(a, d)).value for a in alphas]
        assert all(dalang_check(Riesz(a, d)).finite for a in alphas)
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_riesz_in_three_dimensions_is_gamma_two_minus_alpha(self):
        # pairing with G_2(x) = e^{-|x|} / (4 pi |x|) gives Gamma(2 - alpha), which has
        # an interior minimum, so monotonicity in alpha fails for d = 3
        alphas = np.linspace(0.1, 1.9, 10)
        vals = np.array([dalang_check(Riesz(a, 3)).value for a in alphas])
        np.testing.assert_allclose(vals, [math.gamma(2 - a) for a in alphas], rtol=1e-7)
        assert np.argmin(vals) not in (0, len(vals) - 1)

    def test_riesz_blows_up_as_alpha_to_two_in_d2(self):
        # c(2, a) * 2 pi * int rho^(a-1) / (1 + rho^2) drho = c(2, a) * pi^2 / sin(pi a / 2)
        alphas = [1.5, 1.9, 1.99, 1.999]
        vals = []
        for a in alphas:
            c = 2.0**-a / math.pi * math.gamma((2 - a) / 2) / math.gamma(a / 2)
            ref = c * math.pi**2 / math.sin(math.pi * a / 2)
            v = dalang_check(Riesz(a, 2)).value
            assert v == pytest.approx(ref, rel=1e-6)
            vals.append(v)
        assert all(b > 2 * a for a, b in zip(vals, vals[1:]))

    def test_bessel_tail_classification(self):
        assert dalang_check(Bessel(2.0, 2)).finite
        assert dalang_check(Bessel(1.0, 3)).finite is False

    def test_truncpower_finite(self):
        res = dalang_check(TruncPower(2, 1.0, 1))
        assert res.finite and res.value > 0
        assert res.value <= 1.0  # mu has total mass gamma(0) = 1

    def test_logplus_unknown(self):
        assert dalang_check(LogPlus()).status == "unknown"

    def test_scaled_and_mollified(self):
        base = dalang_check(Riesz(0.5)).value
        assert dalang_check(Scaled(3.0, Riesz(0.5))).value == pytest.approx(3 * base)
        assert dalang_check(mollify(Riesz(0.5), 0.5)).value < base


class TestGram:
    def test_truncpower_passes(self):
        pts = np.random.default_rng(0).uniform(-3, 3, (50, 1))
        assert gram_psd_check(TruncPower(2, 1.0, 1), pts).passed

    def test_atom_pair_rank_two(self, rng):
        pts = rng.normal(size=(30, 2))
        g = gram_psd_check(pair((1.0, 2.0), 1.0, 2), pts)
        assert g.passed
        G = pair((1.0, 2.0), 1.0, 2).pairwise(pts, pts)
        assert np.linalg.matrix_rank(G, tol=1e-9 * np.trace(G)) <= 2

    def test_threshold_is_sharp_in_three_dimensions(self):
        # l = 1 is below floor(3/2) + 1; a jittered cubic lattice at spacing 0.7
        # exposes the negative direction (seed 0: min_eig / trace = -5.7e-3).
        base = np.array(list(itertools.product(range(4), range(4), range(3))), float)[:40]
        pts = 0.7 * base + np.random.default_rng(0).normal(0, 0.02, (40, 3))
        bad = gram_psd_check(TruncPower(1.0, 1.0, 3, validate=False), pts)
        assert not bad.passed
        assert bad.min_eigenvalue / bad.trace == pytest.approx(-5.683e-3, rel=1e-3)
        assert gram_psd_check(TruncPower(2.0, 1.0, 3), pts).passed

    def test_singular_kernels_rejected(self):
        pts = np.array([[0.0], [1.0], [2.0]])
        with pytest.raises(ValueError, match="mollified"):
            gram_psd_check(LogPlus(), pts)
        with pytest.raises(ValueError, match="duplicate"):
            gram_psd_check(Riesz(0.5), np.array([[0.0], [1.0], [0.0]]))

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_all_bounded_variants(self, d):
        rng = np.random.default_rng(d)
        kernels = [
            TruncPower(d // 2 + 1, 1.5, d),
            CosineAtoms(tuple(tuple(rng.normal(size=d)) for _ in range(3)), (0.2, 0.5, 1.0), d),
            mollify(LogPlus(1.0, d), 0.1),
            mollify(Riesz(0.5, d), 0.1),
            Scaled(2.0, mollify(LogPlus(1.0, d), 0.05)),
        ]
        if d >= 2:
            kernels.append(mollify(Bessel(float(d), d), 0.1))
        for k in kernels:
            for _ in range(5):
                assert gram_psd_check(k, rng.uniform(-3, 3, (30, d))).passed


class TestBessel:
    def test_finite_at_origin_when_s_above_d(self):
        v = bessel_G(3.0, 1, [0.0])
        assert math.isfinite(v) and v > 0
        # int G_s = 1 in every dimension
        assert v == pytest.approx(bessel_G(3.0, 1, [0.0], method="quad"), rel=1e-10)

    def test_singular_origin_rejected(self):
        with pytest.raises(ValueError):
            bessel_G(2.0, 2, [0.0, 0.0])

    @pytest.mark.parametrize("r", list(BESSEL_RATIOS))
    def test_log_ratio_matches_frozen_quadrature(self, r):
        ratio = bessel_G(2.0, 2, [r, 0.0]) / math.log(1 / r)
        assert ratio == pytest.approx(BESSEL_RATIOS[r], rel=1e-9)

    def test_log_ratio_is_cauchy(self):
        rs = np.array([1e-2, 1e-3, 1e-4, 1e-5, 1e-6])
        ratios = condition_H_report(Bessel(2.0, 2), rs)
        diffs = np.abs(np.diff(ratios))
        assert np.all(diffs[1:] < diffs[:-1])
        # the limit of G_d(r) / log(1/r) in d = 2 is 1 / (2 pi)
        assert abs(ratios[-1] - 1 / (2 * math.pi)) < abs(ratios[0] - 1 / (2 * math.pi))

    @pytest.mark.parametrize("s,d", [(1.0, 1), (2.0, 2), (0.5, 3), (4.0, 2), (3.0, 3)])
    def test_closed_form_matches_subordination_integral(self, s, d):
        for r in (0.01, 0.3, 1.0, 4.0):
            x = [r] + [0.0] * (d - 1)
            assert bessel_G(s, d, x) == pytest.approx(bessel_G(s, d, x, method="quad"), rel=1e-9)

    @pytest.mark.parametrize("s,d", [(1.0, 1), (2.0, 2), (3.0, 2), (0.5, 3)])
    def test_decreasing_in_radius(self, s, d):
        r = np.linspace(0.01, 8, 300)
        vals = Bessel(s, d).radial(r)
        assert np.all(np.diff(vals) < 0)


class TestRieszDomination:
    @pytest.mark.parametrize("alpha", list(RIESZ_DOMINATION))
    def test_matches_grid_oracle(self, alpha):
        assert riesz_domination_constant(alpha) == pytest.approx(RIESZ_DOMINATION[alpha], rel=1e-9, abs=1e-12)

    @given(st.floats(0.05, 0.99))
    def test_sweep_inequality(self, alpha):
        c = riesz_domination_constant(alpha)
        r = np.logspace(-8, 0, 10_000)
        assert c >= 0
        assert np.all(np.maximum(np.log(1 / r), 0) <= r**-alpha + c + 1e-9 * (1 + c))

    def test_nonincreasing_in_alpha(self):
        vals = [riesz_domination_constant(a) for a in (0.1, 0.2, 0.3, 0.5, 0.7, 0.9)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_rejects_out_of_range(self):
        for a in (0.0, 1.0, 1.5):
            with pytest.raises(ValueError):
                riesz_domination_constant(a)


class TestConditionH:
    def test_logplus_exact(self):
        np.testing.assert_allclose(condition_H_report(LogPlus(1.0), [0.1, 0.01]), [1.0, 1.0], rtol=1e-14)

    def test_truncpower_ratios_vanish(self):
        ratios = condition_H_report(TruncPower(2, 1.0), [1e-2, 1e-4, 1e-8])
        assert np.all(np.diff(ratios) < 0) and ratios[-1] < 0.06

    def test_rejects_bad_radii(self):
        with pytest.raises(ValueError):
            condition_H_report(LogPlus(), [0.5, 1.0])


class TestSerialisation:
    @pytest.mark.parametrize(
        "kernel",
        [
            Riesz(0.5, 1),
            LogPlus(2.0, 2),
            TruncPower(2.0, 3.0, 1),
            Bessel(2.0, 2),
            CosineAtoms(((1.0, 0.5), (0.0, 2.0)), (0.3, 0.7), 2),
            Scaled(1.5, Riesz(0.3)),
            Mollified(0.1, LogPlus(1.0, 2)),
        ],
    )
    def test_round_trip(self, kernel):
        assert kernel_from_dict(kernel_to_dict(kernel)) == kernel
        assert parse_kernel(format_kernel(kernel)) == kernel

    def test_config_block(self):
        text = 'kernel = { family = "riesz", alpha = 0.5, dim = 1 }'
        assert parse_kernel(text) == Riesz(0.5, 1)
        assert format_kernel(Riesz(0.5, 1)) == text

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError):
            kernel_from_dict({"family": "riesz", "alpha": 0.5, "alpah": 1})
        with pytest.raises(ValueError):
            kernel_from_dict({"family": "gauss"})

    def test_constant_kernel_is_single_zero_atom(self):
        k = constant_kernel(0.8, 2)
        np.testing.assert_allclose(k(np.random.default_rng(0).normal(size=(5, 2))), 0.8)
