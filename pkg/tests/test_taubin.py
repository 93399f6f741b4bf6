import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import (angle_deg, cylinder_patch, random_quadric, random_quadric_points, rotation,
                     sphere_patch, unit)
from shellgrasp.errors import (DegenerateFit, InsufficientPoints, ProjectionFailure,
                               ZeroGradientConstraint)
from shellgrasp.geometry import Quadric, eval_quadric, quadric_gradient
from shellgrasp.shell import HandParams
from shellgrasp.taubin import (
    CurvatureEstimate,
    TaubinQuadricFitter,
    batch_fit_taubin,
    estimate_curvature,
    fit_taubin,
    fit_taubin_full,
    moment_matrices,
    monomials,
    passes_curvature_gate,
    project_to_surface,
    rayleigh_residual,
)

seeds = st.integers(0, 2**32 - 1)
HAND = HandParams(0.026, 0.008)


def conditioned_residual(fit, P):
    c = fit.coeffs / np.linalg.norm(fit.coeffs)
    return np.max(np.abs(eval_quadric(c, fit.moments.to_frame(P))))


class TestMoments:
    def test_symmetry_and_semidefinite(self):
        rng = np.random.default_rng(0)
        mm = moment_matrices(rng.normal(size=(50, 3)))
        for A in (mm.M, mm.N):
            assert np.max(np.abs(A - A.T)) <= 1e-12 * np.max(np.abs(A))
        assert np.min(np.linalg.eigvalsh(mm.N)) >= -1e-10 * np.trace(mm.N)
        assert mm.count == 50

    def test_m_is_sum_of_monomial_outer_products(self):
        rng = np.random.default_rng(1)
        P = rng.normal(size=(30, 3))
        mm = moment_matrices(P)
        L = monomials(mm.to_frame(P))
        np.testing.assert_allclose(mm.M, L.T @ L, rtol=1e-12, atol=1e-12)

    def test_n_from_monomial_derivatives(self):
        rng = np.random.default_rng(2)
        P = rng.normal(size=(30, 3))
        mm = moment_matrices(P)
        U = mm.to_frame(P)
        N = np.zeros((10, 10))
        h = 1e-6
        for u in U:
            for e in np.eye(3):
                d = (monomials((u + h * e)[None]) - monomials((u - h * e)[None]))[0] / (2 * h)
                N += np.outer(d, d)
        np.testing.assert_allclose(mm.N, N, rtol=1e-6, atol=1e-6)

    def test_conditioning_frame(self):
        rng = np.random.default_rng(3)
        P = rng.normal(size=(40, 3)) * 0.01 + [0.3, -0.1, 0.9]
        mm = moment_matrices(P)
        U = mm.to_frame(P)
        np.testing.assert_allclose(U.mean(axis=0), 0, atol=1e-12)
        assert np.mean(np.linalg.norm(U, axis=1)) == pytest.approx(1.0)
        np.testing.assert_allclose(mm.from_frame(U), P, atol=1e-15)


class TestFit:
    def test_sphere_exact(self):
        rng = np.random.default_rng(4)
        P, _ = sphere_patch(rng, 0.03, n=200, center=[0.1, -0.05, 0.8], cap_deg=180)
        q = fit_taubin(P)
        assert np.max(np.abs(eval_quadric(q, P))) < 1e-9

    def test_cylinder_curvature_example(self):
        rng = np.random.default_rng(5)
        P, axis, _ = cylinder_patch(rng, 0.026, n=200, arc_deg=120, length=0.06)
        est = estimate_curvature(fit_taubin(P), P, random_state=0)
        assert est.median_kappa_max == pytest.approx(1 / 0.026, rel=0.02)

    def test_corner_fits_hyperbolic(self):
        sigma = 5e-4
        rng = np.random.default_rng(6)
        a = rng.uniform(0, 0.04, (150, 2))
        P = np.vstack([np.column_stack([a[:, 0], rng.normal(0, sigma, 150), a[:, 1]]),
                       np.column_stack([rng.normal(0, sigma, 150), a[:, 0], a[:, 1]])])
        q = fit_taubin(P)
        d = eval_quadric(q, P) / np.linalg.norm(quadric_gradient(q, P), axis=1)
        assert np.sqrt(np.mean(d * d)) < 5 * sigma
        w = np.linalg.eigvalsh(q.as_matrix()[0])
        assert w.min() < 0 < w.max()  # saddle-type quadratic part

    @settings(max_examples=40, deadline=None)
    @given(seeds)
    def test_exact_recovery(self, seed):
        rng = np.random.default_rng(seed)
        c = random_quadric(rng)
        P = random_quadric_points(rng, c, 200)
        fit = fit_taubin_full(P)
        assert conditioned_residual(fit, P) < 1e-8

    @settings(max_examples=25, deadline=None)
    @given(seeds)
    def test_similarity_invariance(self, seed):
        rng = np.random.default_rng(seed)
        c = random_quadric(rng)
        P = random_quadric_points(rng, c, 100)
        R, t, s = rotation(rng), rng.normal(size=3), rng.uniform(0.1, 10)
        q1 = fit_taubin(P)
        q2 = fit_taubin(s * P @ R.T + t)
        expect = q1.transformed(s * R, t)
        assert np.allclose(q2.coeffs, expect.coeffs, atol=1e-6)

    def test_too_few_points(self):
        with pytest.raises(InsufficientPoints):
            fit_taubin(np.random.default_rng(0).normal(size=(9, 3)))

    def test_noiseless_plane_is_ambiguous(self):
        rng = np.random.default_rng(7)
        P = np.column_stack([rng.uniform(-1, 1, (100, 2)), np.zeros(100)])
        with pytest.raises(DegenerateFit):
            fit_taubin(P)

    def test_batch_matches_single_groups(self):
        rng = np.random.default_rng(8)
        groups = [cylinder_patch(rng, r, n=n)[0] for r, n in ((0.01, 60), (0.02, 80), (0.05, 40))]
        off = np.cumsum([0] + [len(g) for g in groups])
        bf = batch_fit_taubin(np.vstack(groups), off)
        for i, g in enumerate(groups):
            single = fit_taubin_full(g)
            assert bf.ok[i]
            np.testing.assert_allclose(bf.coeffs[i], single.coeffs, rtol=1e-9, atol=1e-12)

    def test_batch_flags_small_groups(self):
        rng = np.random.default_rng(9)
        P = cylinder_patch(rng, 0.02, n=60)[0]
        bf = batch_fit_taubin(P, np.array([0, 5, 60]))
        assert not bf.ok[0] and bf.ok[1]


class TestRayleighResidual:
    def test_equals_smallest_eigenvalue(self):
        rng = np.random.default_rng(10)
        P = cylinder_patch(rng, 0.02, n=200, noise=2e-4)[0]
        fit = fit_taubin_full(P)
        r = rayleigh_residual(fit.quadric, fit.moments)
        assert r == pytest.approx(fit.eigenvalues[0], rel=1e-10)

    def test_variational_optimality(self):
        rng = np.random.default_rng(11)
        P = cylinder_patch(rng, 0.02, n=200, noise=2e-4)[0]
        fit = fit_taubin_full(P)
        best = rayleigh_residual(fit.coeffs, fit.moments)
        for c in rng.normal(size=(100, 10)):
            c /= np.linalg.norm(c)
            assert rayleigh_residual(c, fit.moments) >= best

    def test_true_quadric_on_exact_data(self):
        c = np.array([1, 1, 0, 0, 0, 0, 0, 0, 0, -0.02**2])
        rng = np.random.default_rng(12)
        P = cylinder_patch(rng, 0.02, n=200, axis=[0, 0, 1], center=[0, 0, 0])[0]
        assert rayleigh_residual(Quadric(c), moment_matrices(P)) < 1e-18

    def test_zero_gradient_constraint(self):
        mm = moment_matrices(np.random.default_rng(13).normal(size=(20, 3)))
        c = np.zeros(10)
        c[9] = 1.0  # constant term: no gradient at all
        with pytest.raises(ZeroGradientConstraint):
            rayleigh_residual(c, mm)


class TestCurvature:
    def test_cylinder_example(self):
        rng = np.random.default_rng(14)
        P, axis, _ = cylinder_patch(rng, 0.02, n=300, arc_deg=120, length=0.04)
        est = estimate_curvature(fit_taubin(P), P, random_state=1)
        assert est.median_kappa_max == pytest.approx(50.0, rel=0.02)
        assert angle_deg(est.axis, axis) < 5
        assert np.linalg.norm(est.axis) == pytest.approx(1.0, abs=1e-10)
        assert est.sample_count == 50

    def test_plane_is_flat(self):
        rng = np.random.default_rng(15)
        P = np.column_stack([rng.uniform(-0.03, 0.03, (300, 2)), rng.normal(0, 5e-4, 300)])
        assert estimate_curvature(fit_taubin(P), P, random_state=2).median_kappa_max < 1.0

    @pytest.mark.parametrize("r", [0.015, 0.03])
    def test_sphere_example(self, r):
        rng = np.random.default_rng(16)
        P, center = sphere_patch(rng, r, n=300, cap_deg=70)
        est = estimate_curvature(fit_taubin(P), P, random_state=3)
        assert est.median_kappa_max == pytest.approx(1 / r, rel=0.02)
        normal = (est.anchor - center) / np.linalg.norm(est.anchor - center)
        assert abs(est.axis @ normal) < np.sin(np.radians(5))

    def test_anchor_lies_on_surface(self):
        rng = np.random.default_rng(17)
        P = cylinder_patch(rng, 0.02, n=200, noise=3e-4)[0]
        fit = fit_taubin_full(P)
        est = estimate_curvature(fit.quadric, P, random_state=4)
        c = fit.coeffs / np.linalg.norm(fit.coeffs)
        assert abs(eval_quadric(c, fit.moments.to_frame(est.anchor))) < 1e-9

    @settings(max_examples=20, deadline=None)
    @given(seeds)
    def test_rigid_motion_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        P = cylinder_patch(rng, 0.02, n=200, noise=2e-4)[0]
        R, t = rotation(rng), rng.normal(size=3) * 0.2
        a = estimate_curvature(fit_taubin(P), P, random_state=5)
        Q = P @ R.T + t
        b = estimate_curvature(fit_taubin(Q), Q, random_state=5)
        assert b.median_kappa_max == pytest.approx(a.median_kappa_max, rel=1e-8)
        assert abs(abs(b.axis @ (R @ a.axis)) - 1.0) < 1e-6

    def test_noise_robustness(self):
        rng = np.random.default_rng(18)
        good = 0
        for i in range(100):
            P = cylinder_patch(rng, 0.026, n=400, arc_deg=120, length=0.052, noise=1e-3)[0]
            k = estimate_curvature(fit_taubin(P), P, random_state=i).median_kappa_max
            good += abs(k * 0.026 - 1) < 0.15
        assert good >= 95

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(19)
        P = cylinder_patch(rng, 0.02, n=200, noise=3e-4)[0]
        q = fit_taubin(P)
        a = estimate_curvature(q, P, random_state=7)
        b = estimate_curvature(q, P, random_state=np.random.default_rng(7))
        assert a.median_kappa_max == b.median_kappa_max
        assert np.array_equal(a.axis, b.axis)

    def test_projection_failure(self):
        # the quadric x^2 + 1 = 0 has no real points to project onto
        q = Quadric([1, 0, 0, 0, 0, 0, 0, 0, 0, 1])
        P = np.random.default_rng(20).normal(size=(40, 3))
        with pytest.raises(ProjectionFailure):
            estimate_curvature(q, P, random_state=0)

    def test_needs_three_samples(self):
        P = np.random.default_rng(21).normal(size=(40, 3))
        with pytest.raises(ValueError):
            estimate_curvature(Quadric([1, 1, 1, 0, 0, 0, 0, 0, 0, -1]), P, 2)

    def test_newton_projection_converges(self):
        c = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, -1.0])
        U = unit(np.random.default_rng(22), 30) * 1.3
        V, ok = project_to_surface(c, U)
        assert ok.all()
        assert np.max(np.abs(eval_quadric(c, V))) < 1e-10


class TestGate:
    def test_above_threshold(self):
        assert passes_curvature_gate(CurvatureEstimate(40.0, np.array([0, 0, 1.0]), np.zeros(3), 50),
                                     HAND)

    def test_boundary_is_inclusive(self):
        est = CurvatureEstimate(1 / 0.026, np.array([0, 0, 1.0]), np.zeros(3), 50)
        assert passes_curvature_gate(est, HAND)

    def test_below_threshold(self):
        assert not passes_curvature_gate(
            CurvatureEstimate(10.0, np.array([0, 0, 1.0]), np.zeros(3), 50), HAND)


class TestEstimator:
    def test_fit_and_score(self):
        rng = np.random.default_rng(23)
        P = cylinder_patch(rng, 0.02, n=200)[0]
        est = TaubinQuadricFitter(random_state=0).fit(P)
        assert est.coef_.shape == (10,)
        assert np.max(np.abs(est.decision_function(P))) < 1e-9
        assert est.score(P) > -1e-9
        assert est.curvature().median_kappa_max == pytest.approx(50, rel=0.02)

    def test_params_round_trip(self):
        est = TaubinQuadricFitter(n_curvature_samples=30, random_state=4)
        assert est.get_params() == {"n_curvature_samples": 30, "random_state": 4}

    def test_rejects_wrong_width(self):
        with pytest.raises(ValueError):
            TaubinQuadricFitter().fit(np.zeros((20, 2)))
