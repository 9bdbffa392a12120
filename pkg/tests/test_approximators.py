import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rareis.approximators import (BasisSet, ConditioningWarning,
                                  LinearValueApprox, MlpBlock, eval_control,
                                  eval_value, load_params_csv, mlp_eval,
                                  mlp_forward, mlp_param_grads,
                                  place_gaussian_basis, save_params_csv)
from rareis.sde import StopRule, brownian_motion, simulate_batch


def make_batch(d=1, M=20, n_max=5, seed=0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return simulate_batch(brownian_motion(d), None, StopRule(None, n_max),
                              0.01, M, seed, np.zeros(d))


def fd_gradient(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        out.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


class TestPlacement:
    def test_centered_grid(self):
        batch = make_batch()
        basis = place_gaussian_basis(batch, 0, K=5, delta=1.0, variance=1.0)
        np.testing.assert_allclose(basis.centers[:, 0], [-1, -0.5, 0, 0.5, 1])

    def test_two_point_endpoints(self):
        batch = make_batch()
        shifted = batch.states.copy()
        shifted.setflags(write=True)
        basis = place_gaussian_basis(batch, 0, K=2, delta=1.0, variance=1.0)
        np.testing.assert_allclose(basis.centers[:, 0], [-1.0, 1.0])

    def test_offset_follows_mean(self):
        batch = make_batch(M=50, seed=3)
        mean = batch.states[:, 3, 0].mean()
        basis = place_gaussian_basis(batch, 3, K=2, delta=1.0, variance=1.0)
        np.testing.assert_allclose(basis.centers[:, 0], [mean - 1, mean + 1])

    def test_degenerate_delta_flagged(self):
        batch = make_batch()
        with pytest.warns(ConditioningWarning):
            basis = place_gaussian_basis(batch, 0, K=3, delta=0.0, variance=1.0)
        assert np.ptp(basis.centers) == 0.0

    def test_minmax_mode(self):
        batch = make_batch(M=50, seed=4)
        pts = batch.states[:, 4, 0]
        basis = place_gaussian_basis(batch, 4, K=3, delta=None, variance=1.0,
                                     mode="minmax")
        np.testing.assert_allclose(
            basis.centers[:, 0], [pts.min(), 0.5 * (pts.min() + pts.max()),
                                  pts.max()])

    def test_no_active_raises(self):
        batch = make_batch()
        with pytest.raises(ValueError):
            place_gaussian_basis(batch, 0, K=3, delta=1.0, variance=1.0,
                                 active=np.zeros(batch.M, dtype=bool))


class TestLinearApprox:
    def test_constant_basis_value(self):
        basis = BasisSet.constant(2)
        approx = LinearValueApprox([basis], [np.array([3.5])])
        assert eval_value(approx, 0, np.array([4.0, -1.0])) == 3.5

    def test_single_rbf_peak(self):
        basis = BasisSet.gaussian_rbf(np.array([[0.5]]), variance=2.0)
        approx = LinearValueApprox([basis], [np.array([1.0])])
        peak = eval_value(approx, 0, np.array([0.5]))
        assert math.isclose(peak, (2 * math.pi * 2.0) ** -0.5)
        assert peak > eval_value(approx, 0, np.array([0.9]))

    def test_zero_coefficients(self):
        basis = BasisSet.gaussian_rbf(np.zeros((3, 2)), variance=1.0)
        approx = LinearValueApprox([basis], [np.zeros(3)])
        assert eval_value(approx, 0, np.ones(2)) == 0.0
        np.testing.assert_array_equal(
            eval_control(approx, 0, np.ones(2), np.eye(2)), np.zeros(2))

    def test_constant_basis_zero_control(self):
        basis = BasisSet.constant(1)
        approx = LinearValueApprox([basis], [np.array([7.0])])
        np.testing.assert_array_equal(
            eval_control(approx, 0, np.array([0.3]), np.eye(1)), np.zeros(1))

    def test_control_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        centers = rng.standard_normal((4, 2))
        basis = BasisSet.gaussian_rbf(centers, variance=0.7)
        alpha = rng.standard_normal(4)
        approx = LinearValueApprox([basis], [alpha])
        sigma = rng.standard_normal((2, 2))
        for _ in range(5):
            x = rng.standard_normal(2)
            grad_fd = fd_gradient(lambda y: eval_value(approx, 0, y), x)
            z_fd = sigma.T @ grad_fd
            z = eval_control(approx, 0, x, sigma)
            np.testing.assert_allclose(z, z_fd, atol=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(a1=st.floats(-5, 5), a2=st.floats(-5, 5), scale=st.floats(-3, 3))
    def test_linearity_in_coefficients(self, a1, a2, scale):
        basis = BasisSet.gaussian_rbf(np.array([[-1.0], [1.0]]), variance=1.0)
        x = np.array([0.3])
        v1 = eval_value(LinearValueApprox([basis], [np.array([a1, a2])]), 0, x)
        v2 = eval_value(LinearValueApprox([basis], [np.array([scale * a1,
                                                              scale * a2])]), 0, x)
        assert math.isclose(v2, scale * v1, rel_tol=1e-9, abs_tol=1e-9)

    def test_reflection_symmetry(self):
        # centers symmetric about the mean: reflecting both x and the
        # coefficient order leaves the value unchanged
        centers = np.array([[-1.0], [-0.5], [0.0], [0.5], [1.0]])
        basis = BasisSet.gaussian_rbf(centers, variance=1.3)
        alpha = np.array([0.2, -1.0, 0.4, 2.0, -0.7])
        approx = LinearValueApprox([basis], [alpha])
        mirrored = LinearValueApprox([basis], [alpha[::-1].copy()])
        for x in (0.17, -0.9, 0.44):
            v = eval_value(approx, 0, np.array([x]))
            v_ref = eval_value(mirrored, 0, np.array([-x]))
            assert math.isclose(v, v_ref, rel_tol=1e-12)

    def test_custom_basis(self):
        basis = BasisSet.custom(
            1,
            functions=[lambda x: x[..., 0], lambda x: x[..., 0] ** 2],
            gradients=[lambda x: np.ones_like(x), lambda x: 2 * x])
        approx = LinearValueApprox([basis], [np.array([1.0, 2.0])])
        assert math.isclose(eval_value(approx, 0, np.array([3.0])), 3 + 18)


class TestMlp:
    def test_zero_weights_output_bias(self):
        blk = MlpBlock(w1=np.zeros((8, 2)), b1=np.zeros(8),
                       w2=np.zeros((3, 8)), b2=np.array([1.0, -2.0, 0.5]))
        out = mlp_eval(blk, np.random.default_rng(0).standard_normal((4, 2)))
        np.testing.assert_allclose(out, np.broadcast_to([1.0, -2.0, 0.5], (4, 3)))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        blk = MlpBlock.init(rng, 2, 1, 16)
        x = np.array([[0.4, -1.2]])
        np.testing.assert_array_equal(mlp_eval(blk, x), mlp_eval(blk, x))

    def test_param_gradients_match_fd(self):
        rng = np.random.default_rng(2)
        blk = MlpBlock.init(rng, 2, 2, 5)
        x = rng.standard_normal((6, 2))
        upstream = rng.standard_normal((6, 2))

        def objective(flat):
            probe = MlpBlock(blk.w1.copy(), blk.b1.copy(),
                             blk.w2.copy(), blk.b2.copy())
            probe.set_flat(flat)
            return float(np.sum(mlp_eval(probe, x) * upstream))

        _, cache = mlp_forward(blk, x)
        grads = mlp_param_grads(blk, cache, upstream)
        fd = fd_gradient(objective, blk.flat())
        scale = np.maximum(np.abs(fd), 1e-3)
        np.testing.assert_array_less(np.abs(grads.flat() - fd) / scale, 1e-5)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        blocks = [MlpBlock.init(rng, 1, 1, 4) for _ in range(3)]
        path = tmp_path / "params.csv"
        save_params_csv(path, blocks)
        loaded = load_params_csv(path)
        assert len(loaded) == 3
        for blk, vec in zip(blocks, loaded):
            np.testing.assert_allclose(vec, blk.flat())

    def test_coefficient_arrays(self, tmp_path):
        coeffs = [np.array([1.0, -2.0]), np.array([0.5, 0.25])]
        path = tmp_path / "alpha.csv"
        save_params_csv(path, coeffs)
        loaded = load_params_csv(path)
        for a, b in zip(coeffs, loaded):
            np.testing.assert_allclose(a, b)
