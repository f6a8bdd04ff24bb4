"""Scheme generation, Newton behaviour, and the adaptive DAE driver."""

import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from cellkit.daecore import (
    ContinuousSolution,
    IntegrateOptions,
    NewtonOptions,
    _barycentric_weights,
    _Segment,
    consistent_project,
    get_scheme,
    implicit_euler,
    integrate,
    jacobian_fd,
    newton_solve,
    radau_iia3,
    stage_jacobian,
)
from cellkit.errors import DomainError, NonConvergence, StepSizeUnderflow


class TestSchemes:
    def test_radau_nodes_closed_form(self):
        s = radau_iia3()
        root6 = math.sqrt(6.0)
        np.testing.assert_allclose(
            s.c, [(4.0 - root6) / 10.0, (4.0 + root6) / 10.0, 1.0], rtol=1e-14)

    def test_row_sums_equal_nodes(self):
        s = radau_iia3()
        np.testing.assert_allclose(s.a.sum(axis=1), s.c, rtol=1e-13)

    def test_quadrature_order_conditions(self):
        s = radau_iia3()
        for k in range(1, 6):
            assert np.sum(s.b * s.c ** (k - 1)) == pytest.approx(1.0 / k, rel=1e-12)

    def test_stiffly_accurate(self):
        s = radau_iia3()
        np.testing.assert_allclose(s.a[-1], s.b, rtol=1e-14)
        e = implicit_euler()
        np.testing.assert_allclose(e.a[-1], e.b, rtol=0)

    def test_error_weights_closed_form(self):
        s = radau_iia3()
        root6 = math.sqrt(6.0)
        expected = np.array([-13.0 - 7.0 * root6, -13.0 + 7.0 * root6, -1.0]) / 3.0
        np.testing.assert_allclose(s.err_weights, expected, rtol=1e-12)
        assert s.mu_real == pytest.approx(3.637834252744496, rel=1e-12)
        assert s.gamma0 == pytest.approx(1.0 / s.mu_real, rel=1e-14)

    def test_embedded_weights_order_three(self):
        # reconstruct bhat from the stored increment weights and verify the
        # quadrature conditions it was built from
        s = radau_iia3()
        bhat = s.b + s.a.T @ s.err_weights / s.mu_real
        assert s.gamma0 + bhat.sum() == pytest.approx(1.0, rel=1e-12)
        assert np.sum(bhat * s.c) == pytest.approx(0.5, rel=1e-10)
        assert np.sum(bhat * s.c**2) == pytest.approx(1.0 / 3.0, rel=1e-10)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError, match="unknown scheme"):
            get_scheme("trapezoid")


class TestNewton:
    def test_quadratic_system(self):
        def residual(x):
            return np.array([x[0] ** 2 - 4.0, x[0] * x[1] - 2.0])

        def jacobian(x):
            return np.array([[2.0 * x[0], 0.0], [x[1], x[0]]])

        x, info = newton_solve(residual, jacobian, np.array([3.0, 3.0]),
                               NewtonOptions(abs_tol=1e-12))
        np.testing.assert_allclose(x, [2.0, 1.0], rtol=1e-10)
        assert info.converged

    def test_domain_errors_trigger_damping(self):
        # full Newton from x=4 jumps to 2.0 - 1.5/... below zero; the guard
        # forces shorter steps and convergence to sqrt(2)
        def residual(x):
            if x[0] <= 0.0:
                raise DomainError("negative")
            return np.array([x[0] ** 2 - 2.0])

        def jacobian(x):
            return np.array([[0.5]])  # deliberately bad slope

        x, _ = newton_solve(residual, jacobian, np.array([0.2]),
                            NewtonOptions(abs_tol=1e-10, max_iter=200))
        assert x[0] == pytest.approx(math.sqrt(2.0), rel=1e-8)

    def test_iteration_budget_enforced(self):
        def residual(x):
            return np.array([math.exp(x[0]) + 1.0])  # no root exists

        def jacobian(x):
            return np.array([[math.exp(x[0])]])

        with pytest.raises(NonConvergence):
            newton_solve(residual, jacobian, np.array([0.0]),
                         NewtonOptions(abs_tol=1e-12, max_iter=8))

    def test_noise_floor_escape(self):
        # residual can never reach 1e-18, but increments collapse; step_tol
        # accepts the stagnated solution instead of raising
        def residual(x):
            return np.array([x[0] ** 2 - 2.0])

        def jacobian(x):
            return np.array([[2.0 * x[0]]])

        x, _ = newton_solve(residual, jacobian, np.array([1.0]),
                            NewtonOptions(abs_tol=1e-18, step_tol=1e-13, max_iter=60))
        assert x[0] == pytest.approx(math.sqrt(2.0), rel=1e-12)

    def test_jacobian_fd_matches_analytic(self):
        def fun(x):
            return np.array([x[0] * x[1] ** 2, math.sin(x[0]) + x[2], x[2] ** 3])

        x = np.array([0.7, -1.3, 0.4])
        jac = jacobian_fd(fun, x)
        expected = np.array([
            [x[1] ** 2, 2.0 * x[0] * x[1], 0.0],
            [math.cos(x[0]), 0.0, 1.0],
            [0.0, 0.0, 3.0 * x[2] ** 2],
        ])
        np.testing.assert_allclose(jac, expected, atol=1e-8)


class ToyDAE:
    """w' = -w z, 0 = z - (1 + sin(a t) w^2); smooth, mildly nonlinear."""

    n_diff = 1
    n_alg = 1

    def __init__(self, a=3.0):
        self.a = a

    def rhs(self, t, w, z):
        f = np.array([-w[0] * z[0]])
        g = np.array([z[0] - 1.0 - math.sin(self.a * t) * w[0] ** 2])
        return f, g

    def rhs_and_blocks(self, t, w, z):
        f, g = self.rhs(t, w, z)
        f_w = sp.csr_matrix(np.array([[-z[0]]]))
        f_z = sp.csr_matrix(np.array([[-w[0]]]))
        g_w = sp.csr_matrix(np.array([[-2.0 * math.sin(self.a * t) * w[0]]]))
        g_z = sp.csr_matrix(np.array([[1.0]]))
        return f, g, (f_w, f_z, g_w, g_z)

    def consistent_init(self, w, t, z_guess=None):
        return np.array([1.0 + math.sin(self.a * t) * w[0] ** 2])


class FailingDAE(ToyDAE):
    def rhs(self, t, w, z):
        raise DomainError("always out of range")

    def rhs_and_blocks(self, t, w, z):
        raise DomainError("always out of range")


@pytest.fixture(scope="module")
def toy_reference():
    system = ToyDAE()
    sol = integrate(system, (0.0, 2.0), np.array([1.0]),
                    options=IntegrateOptions(rtol=1e-12, atol_w=1e-14, atol_z=1e-13))
    return np.concatenate([sol.w[-1], sol.z[-1]])


class TestIntegrate:
    def test_algebraic_constraint_holds_everywhere(self):
        # stiff accuracy plus the dt-scaled algebraic Newton rows keep G at or
        # below the algebraic Newton tolerance at every accepted point
        system = ToyDAE()
        sol = integrate(system, (0.0, 2.0), np.array([1.0]),
                        options=IntegrateOptions(rtol=1e-8))
        for t, w, z in zip(sol.t, sol.w, sol.z):
            _, g = system.rhs(t, w, z)
            assert abs(g[0]) < 2e-8

    def test_tolerance_scaling(self, toy_reference):
        system = ToyDAE()
        errs = []
        for rtol in (1e-5, 1e-8):
            sol = integrate(system, (0.0, 2.0), np.array([1.0]),
                            options=IntegrateOptions(rtol=rtol, atol_w=rtol * 1e-2,
                                                     atol_z=rtol * 1e-1))
            y = np.concatenate([sol.w[-1], sol.z[-1]])
            errs.append(np.abs(y - toy_reference).max())
        assert errs[1] < errs[0]
        assert errs[1] < 1e-7

    def test_fixed_grid_radau_order(self, toy_reference):
        system = ToyDAE()
        errs = []
        for n in (4, 8, 16):
            sol = integrate(system, (0.0, 2.0), np.array([1.0]),
                            options=IntegrateOptions(fixed_steps=n))
            errs.append(abs(sol.w[-1][0] - toy_reference[0]))
        slope = np.log2(errs[0] / errs[1]), np.log2(errs[1] / errs[2])
        assert min(slope) > 3.5  # fifth order until roundoff

    def test_fixed_grid_euler_order(self, toy_reference):
        system = ToyDAE()
        errs = []
        for n in (32, 64, 128):
            sol = integrate(system, (0.0, 2.0), np.array([1.0]),
                            options=IntegrateOptions(fixed_steps=n, scheme="implicit_euler"))
            errs.append(abs(sol.w[-1][0] - toy_reference[0]))
        slopes = np.log2(errs[0] / errs[1]), np.log2(errs[1] / errs[2])
        assert all(0.8 < s < 1.2 for s in slopes)

    def test_adaptive_euler_converges(self, toy_reference):
        # first-order global accumulation: expect roughly n_steps * local tol
        system = ToyDAE()
        sol = integrate(system, (0.0, 2.0), np.array([1.0]),
                        options=IntegrateOptions(rtol=1e-7, scheme="implicit_euler",
                                                 atol_w=1e-9, atol_z=1e-8))
        assert abs(sol.w[-1][0] - toy_reference[0]) < 2e-4
        assert sol.stats["n_steps"] > 20  # doubling control is active

    def test_dense_output_interpolates(self):
        system = ToyDAE()
        sol = integrate(system, (0.0, 2.0), np.array([1.0]),
                        options=IntegrateOptions(rtol=1e-10, atol_w=1e-12,
                                                 dense_output=True))
        mid = 0.5 * (sol.t[3] + sol.t[4])
        y = sol.dense(mid)
        ref = integrate(system, (0.0, mid), np.array([1.0]),
                        options=IntegrateOptions(rtol=1e-12, atol_w=1e-14))
        assert y[0] == pytest.approx(ref.w[-1][0], rel=1e-9)
        with pytest.raises(ValueError, match="outside"):
            sol.dense(2.5)

    def test_t_eval_matches_dense(self):
        system = ToyDAE()
        pts = np.linspace(0.0, 2.0, 17)
        sol = integrate(system, (0.0, 2.0), np.array([1.0]), t_eval=pts,
                        options=IntegrateOptions(rtol=1e-9, dense_output=True))
        assert sol.t_eval.shape == (17,)
        for tk, wk in zip(sol.t_eval, sol.w_eval):
            assert wk[0] == pytest.approx(sol.dense(tk)[0], rel=1e-12, abs=1e-13)

    def test_stage_records_reproduce_increments(self):
        system = ToyDAE()
        sol = integrate(system, (0.0, 1.0), np.array([1.0]),
                        options=IntegrateOptions(rtol=1e-8, record_stages=True))
        k = 0
        w = sol.w[0][0]
        for rec in sol.stage_records:
            w += rec.dt * np.sum(rec.b * rec.f_stages[:, 0])
        assert w == pytest.approx(sol.w[-1][0], abs=1e-11)

    def test_domain_failure_underflows(self):
        with pytest.raises(StepSizeUnderflow):
            integrate(FailingDAE(), (0.0, 1.0), np.array([1.0]),
                      z0=np.array([1.0]),
                      options=IntegrateOptions(dt_min=1e-6))

    def test_step_budget_enforced(self):
        with pytest.raises(NonConvergence, match="exceeded"):
            integrate(ToyDAE(), (0.0, 2.0), np.array([1.0]),
                      options=IntegrateOptions(rtol=1e-10, max_steps=3))

    def test_bad_span_rejected(self):
        with pytest.raises(ValueError):
            integrate(ToyDAE(), (1.0, 1.0), np.array([1.0]))

    def test_consistent_project_generic(self):
        system = ToyDAE()
        z = consistent_project(system, 0.7, np.array([0.9]), np.array([0.0]))
        assert z[0] == pytest.approx(1.0 + math.sin(2.1) * 0.81, rel=1e-12)

    def test_stage_jacobian_structure(self):
        system = ToyDAE()
        dt = 0.1
        mat = stage_jacobian(system, 0.3, np.array([0.8]), np.array([1.2]), dt).toarray()
        _, _, (f_w, f_z, g_w, g_z) = system.rhs_and_blocks(0.3, np.array([0.8]),
                                                           np.array([1.2]))
        expected = np.array([
            [1.0 - dt * f_w[0, 0], -dt * f_z[0, 0]],
            [-dt * g_w[0, 0], -dt * g_z[0, 0]],
        ])
        np.testing.assert_allclose(mat, expected, rtol=1e-14)


class TestInterpolation:
    @given(coeffs=st.lists(st.floats(-5.0, 5.0), min_size=4, max_size=4),
           theta=st.floats(0.0, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_segment_reproduces_cubics(self, coeffs, theta):
        # degree-3 data through the four Radau collocation nodes is
        # reproduced exactly by the barycentric form
        scheme = radau_iia3()
        nodes = np.concatenate([[0.0], scheme.c])
        weights = _barycentric_weights(nodes)
        poly = np.polynomial.Polynomial(coeffs)
        seg = _Segment(0.0, 1.0, nodes, weights, poly(nodes)[:, None])
        assert seg.eval(theta)[0] == pytest.approx(poly(theta), rel=1e-10, abs=1e-10)

    def test_continuous_solution_segment_lookup(self):
        nodes = np.array([0.0, 1.0])
        weights = _barycentric_weights(nodes)
        segs = [
            _Segment(0.0, 1.0, nodes, weights, np.array([[0.0], [1.0]])),
            _Segment(1.0, 1.0, nodes, weights, np.array([[1.0], [3.0]])),
        ]
        sol = ContinuousSolution(segs)
        assert sol(0.5)[0] == pytest.approx(0.5)
        assert sol(1.0)[0] == pytest.approx(1.0)
        assert sol(1.5)[0] == pytest.approx(2.0)
        assert sol.t_max == pytest.approx(2.0)
