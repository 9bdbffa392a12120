import math

import numpy as np
import pytest
from scipy.integrate import solve_bvp

from rareis.reference import (CommittorSpec, DoubleWellSpec, GirsanovCheck,
                              OuSpec, committor_drift,
                              committor_radial_derivative, committor_value,
                              finite_dim_girsanov_check,
                              h_transform_hitting_test, ou_euler_chain_value,
                              ou_optimal_control, ou_transition, ou_value,
                              ou_value_mgf, pde_reference,
                              psi_from_regularized, regularized_from_psi,
                              regularized_from_value, value_from_regularized)


class TestCommittorValue:
    def test_d1_linear_midpoint(self):
        spec = CommittorSpec(1, 1.0, 3.0)
        assert math.isclose(committor_value(2.0, spec), 0.5)

    def test_d2_log_form(self):
        spec = CommittorSpec(2, 1.0, 3.0)
        assert math.isclose(committor_value(2.0, spec),
                            math.log(2.0) / math.log(3.0), rel_tol=1e-12)

    def test_boundary_values(self):
        for d in (1, 2, 3, 10):
            spec = CommittorSpec(d, 1.0, 2.5)
            assert abs(committor_value(1.0, spec)) < 1e-12
            assert abs(committor_value(2.5, spec) - 1.0) < 1e-12

    def test_monotone_in_dimension(self):
        r = 1.5
        vals = [committor_value(r, CommittorSpec(d, 1.0, 2.0))
                for d in (2, 3, 5, 10, 30, 100)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        assert vals[-1] > 0.999

    def test_radial_ode_residual(self):
        # h'' + (d-1)/r h' = 0 via central differences on interior points
        h = 1e-4
        for d in (1, 2, 3, 10):
            spec = CommittorSpec(d, 1.0, 3.0)
            r = np.linspace(1.1, 2.9, 25)
            hp = (committor_value(r + h, spec) - committor_value(r - h, spec)) / (2 * h)
            hpp = (committor_value(r + h, spec) - 2 * committor_value(r, spec)
                   + committor_value(r - h, spec)) / h**2
            residual = hpp + (d - 1) / r * hp
            assert np.max(np.abs(residual)) < 1e-3

    def test_d2_is_limit_of_general_formula(self):
        spec2 = CommittorSpec(2, 1.0, 3.0)
        r = np.linspace(1.05, 2.95, 9)
        exact = committor_value(r, spec2)
        for d_eps in (2 + 1e-6, 2 - 1e-6):
            p = 2.0 - d_eps
            approx = (1.0**p - r**p) / (1.0**p - 3.0**p)
            np.testing.assert_allclose(approx, exact, atol=1e-4)

    def test_against_bvp_solver(self):
        d = 10
        spec = CommittorSpec(d, 1.0, 2.0)

        def ode(r, y):
            return np.vstack([y[1], -(d - 1) / r * y[1]])

        def bc(ya, yb):
            return np.array([ya[0], yb[0] - 1.0])

        r = np.linspace(1.0, 2.0, 400)
        y0 = np.vstack([(r - 1.0), np.ones_like(r)])
        sol = solve_bvp(ode, bc, r, y0, tol=1e-8, max_nodes=100000)
        assert sol.success
        probe = np.linspace(1.05, 1.95, 13)
        np.testing.assert_allclose(committor_value(probe, spec),
                                   sol.sol(probe)[0], atol=1e-7)

    def test_out_of_range_rejected(self):
        spec = CommittorSpec(2, 1.0, 3.0)
        with pytest.raises(ValueError):
            committor_value(0.5, spec)
        with pytest.raises(ValueError):
            committor_value(3.5, spec)


class TestCommittorDrift:
    def test_points_outward(self):
        spec = CommittorSpec(2, 1.0, 3.0, eps=0.01)
        x = np.array([1.4, 0.7])
        drift = committor_drift(x, spec)
        assert np.dot(drift, x) > 0

    def test_matches_finite_differences(self):
        spec = CommittorSpec(2, 1.0, 3.0, eps=0.05)
        h = 1e-6
        for r in (1.3, 2.0, 2.7):
            x = np.array([r / math.sqrt(2)] * 2)
            num = (math.log(committor_value(r + h, spec) + spec.eps)
                   - math.log(committor_value(r - h, spec) + spec.eps)) / (2 * h)
            drift = committor_drift(x, spec)
            radial = float(np.dot(drift, x / r))
            assert math.isclose(radial, num, rel_tol=1e-5, abs_tol=1e-6)

    def test_large_eps_flattens(self):
        x = np.array([0.0, 2.0])
        small = committor_drift(x, CommittorSpec(2, 1.0, 3.0, eps=1e-3))
        large = committor_drift(x, CommittorSpec(2, 1.0, 3.0, eps=1e3))
        assert np.linalg.norm(large) < 1e-3 * np.linalg.norm(small)


class TestHTransform:
    def test_large_eps_recovers_unconditioned_committor(self):
        spec = CommittorSpec(2, 1.0, 3.0, eps=1e6)
        hit = h_transform_hitting_test(spec, M=3000, dt=0.01, seed=5, r0=2.0)
        h = committor_value(2.0, spec)
        se = math.sqrt(h * (1 - h) / 3000)
        assert abs(hit - h) < 5 * se + 0.02

    def test_start_near_outer_boundary(self):
        spec = CommittorSpec(2, 1.0, 3.0, eps=0.1)
        hit = h_transform_hitting_test(spec, M=1000, dt=0.001, seed=6, r0=2.97)
        assert hit > 0.95


class TestOuClosedForms:
    def test_terminal_limit(self):
        spec = OuSpec(alpha=1.3, mu=0.4, sigma=1.7, T=2.0)
        assert math.isclose(ou_value(0.9, 2.0, spec), 1.3 * 0.9)
        assert math.isclose(ou_optimal_control(0.9, 2.0, spec), -1.7 * 1.3)

    def test_reference_parameter_values(self):
        spec = OuSpec(alpha=1.0, mu=0.0, sigma=math.sqrt(2.0), T=5.0)
        v = ou_value(0.0, 0.0, spec)
        assert math.isclose(v, -0.5 * (1 - math.exp(-10.0)), rel_tol=1e-12)
        assert math.isclose(v, -0.499977, abs_tol=5e-7)
        u = ou_optimal_control(0.0, 0.0, spec)
        assert math.isclose(u, -math.sqrt(2.0) * math.exp(-5.0), rel_tol=1e-12)
        assert math.isclose(u, -0.009530, abs_tol=2e-6)

    def test_mgf_cross_check(self):
        spec = OuSpec(alpha=0.8, mu=-0.3, sigma=1.1, T=3.0)
        for x, t in ((0.0, 0.0), (1.5, 1.0), (-2.0, 2.9)):
            assert math.isclose(ou_value(x, t, spec), ou_value_mgf(x, t, spec),
                                rel_tol=1e-12)

    def test_triangle_with_monte_carlo(self):
        spec = OuSpec(alpha=1.0, mu=0.0, sigma=math.sqrt(2.0), T=2.0)
        mean, var = ou_transition(0.5, 0.0, spec)
        rng = np.random.default_rng(17)
        N = 200000
        samples = np.exp(-spec.alpha * (mean + math.sqrt(var)
                                        * rng.standard_normal(N)))
        mc = -math.log(samples.mean())
        se = samples.std(ddof=1) / math.sqrt(N) / samples.mean()
        assert abs(mc - ou_value(0.5, 0.0, spec)) < 3 * se

    def test_euler_chain_value_matches_mc(self):
        spec = OuSpec(alpha=1.0, mu=0.0, sigma=math.sqrt(2.0), T=5.0)
        dt = 0.05
        exact = ou_euler_chain_value(0.0, spec, dt)
        rng = np.random.default_rng(3)
        M, n = 200000, round(spec.T / dt)
        X = np.zeros(M)
        for _ in range(n):
            X = X + dt * (spec.mu - X) \
                + spec.sigma * math.sqrt(dt) * rng.standard_normal(M)
        w = np.exp(-spec.alpha * X)
        mc = -math.log(w.mean())
        se = w.std(ddof=1) / math.sqrt(M) / w.mean()
        assert abs(mc - exact) < 3 * se


class TestPdeReference:
    @pytest.fixture(scope="class")
    def solution(self):
        return pde_reference(DoubleWellSpec(sigma=0.5, T=1.0), nx=1201, nt=1600)

    def test_boundary_conditions(self, solution):
        np.testing.assert_allclose(solution.psi[:-1, -1], 1.0, atol=1e-12)
        np.testing.assert_allclose(solution.psi[-1, :-1], 0.0, atol=1e-12)

    def test_reference_value(self, solution):
        psi = solution.at(-1.0, 0.0)
        assert abs(psi - 2.62e-4) / 2.62e-4 < 0.05

    def test_monotonicity(self, solution):
        i0 = np.searchsorted(solution.x, -2.0)
        interior = solution.psi[0, i0:-1]
        assert np.all(np.diff(interior) >= -1e-12)
        j_probe = np.argmin(np.abs(solution.x + 1.0))
        in_time = solution.psi[:-1, j_probe]
        assert np.all(np.diff(in_time) <= 1e-12)

    def test_refinement_flag(self, solution):
        assert solution.converged
        assert solution.refinement_gap < 0.01

    def test_richardson_ratio_second_order(self):
        spec = DoubleWellSpec(sigma=0.5, T=1.0)
        vals = [pde_reference(spec, nx=nx, nt=nt, check_refinement=False).at(-1.0)
                for nx, nt in ((301, 400), (601, 800), (1201, 1600))]
        ratio = (vals[0] - vals[1]) / (vals[1] - vals[2])
        assert 3.0 < ratio < 5.0

    def test_domain_truncation_insensitive(self):
        vals = []
        for x_left in (-2.5, -3.0, -4.0):
            spec = DoubleWellSpec(sigma=0.5, T=1.0, x_left=x_left)
            vals.append(pde_reference(spec, nx=1201, nt=1600,
                                      check_refinement=False).at(-1.0))
        spread = (max(vals) - min(vals)) / min(vals)
        assert spread < 1e-3

    def test_tilted_potential_shape(self, solution):
        tilted = solution.tilted_potential
        assert tilted.shape == solution.psi.shape
        base = solution.spec.potential(solution.x)
        # regularization caps the tilt at -sigma^2 log(eps)
        assert np.all(tilted[0] <= base - solution.spec.sigma**2
                      * math.log(solution.spec.eps) + 1e-9)


class TestEpsConversions:
    def test_round_trips(self):
        eps = 0.01
        psi = np.array([1e-5, 2.62e-4, 0.3, 1.0])
        np.testing.assert_allclose(
            psi_from_regularized(regularized_from_psi(psi, eps), eps), psi)
        v = -np.log(psi)
        np.testing.assert_allclose(
            value_from_regularized(regularized_from_value(v, eps), eps), v,
            rtol=1e-10)

    def test_consistency_between_families(self):
        eps, psi = 0.05, 0.12
        v_eps = -math.log(psi + eps)
        assert math.isclose(value_from_regularized(v_eps, eps), -math.log(psi))


class TestFiniteDimGirsanov:
    def test_zero_control_exact(self):
        chk = finite_dim_girsanov_check(
            b=[0.3], sigma=[[1.2]], u=[0.0],
            f=lambda x: np.sin(x[:, 0]), N=500, seed=0)
        assert chk.diff == 0.0
        assert chk.z_score == 0.0

    def test_linear_function_mean(self):
        chk = finite_dim_girsanov_check(
            b=[0.7], sigma=[[1.5]], u=[0.9],
            f=lambda x: x[:, 0], N=200000, seed=1)
        assert abs(chk.z_score) < 3
        assert abs(chk.lhs - 0.7) < 0.02

    def test_exponential_function(self):
        chk = finite_dim_girsanov_check(
            b=[0.0], sigma=[[1.0]], u=[1.0],
            f=lambda x: np.exp(x[:, 0]), N=200000, seed=2)
        assert abs(chk.z_score) < 3
        assert abs(chk.lhs - math.exp(0.5)) < 0.05

    def test_multidimensional(self):
        chk = finite_dim_girsanov_check(
            b=[0.1, -0.2], sigma=[[1.0, 0.3], [0.0, 0.8]], u=[0.5, -0.4],
            f=lambda x: np.tanh(x[:, 0] + x[:, 1]), N=100000, seed=3)
        assert abs(chk.z_score) < 3
