import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import chain_forward, grid_posterior_moments
from pnrdiff.diffusion import (
    ALPHABAR_FLOOR,
    base_loss,
    base_loss_grad,
    check_finite,
    forward_marginal_sample,
    predict_x0_from_eps,
    residual_target,
    reverse_step,
    reverse_step_from_eps,
)
from pnrdiff.schedule import build_linear_schedule, posterior_coeffs

finite = st.floats(-3, 3, allow_nan=False)
images = arrays(np.float64, (2, 1, 3, 4), elements=finite)


class TestForwardMarginal:
    def test_no_noise(self):
        x0 = np.random.default_rng(0).uniform(-1, 1, (2, 3, 4, 5))
        eps = np.ones_like(x0)
        np.testing.assert_array_equal(forward_marginal_sample(x0, 1.0, eps), x0)

    def test_pure_noise_limit(self):
        rng = np.random.default_rng(1)
        x0, eps = rng.uniform(-1, 1, (1, 1, 8, 8)), rng.standard_normal((1, 1, 8, 8))
        np.testing.assert_allclose(forward_marginal_sample(x0, 1e-12, eps), eps, atol=1e-6)

    def test_scalar_example(self):
        out = forward_marginal_sample(np.array([0.5]), 0.25, np.array([1.0]))
        np.testing.assert_allclose(out, [0.25 + np.sqrt(0.75)])
        np.testing.assert_allclose(out, [1.11603], atol=1e-5)

    def test_per_example_levels(self):
        x0 = np.ones((3, 1, 2, 2))
        eps = np.zeros_like(x0)
        ab = np.array([1.0, 0.25, 0.04]).reshape(3, 1, 1, 1)
        out = forward_marginal_sample(x0, ab, eps)
        np.testing.assert_allclose(out[:, 0, 0, 0], [1.0, 0.5, 0.2])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_marginal_sample(np.zeros((1, 1, 2, 2)), 0.5, np.zeros((1, 1, 2, 3)))

    @pytest.mark.parametrize("ab", [0.0, -0.1, 1.5])
    def test_alphabar_domain(self, ab):
        with pytest.raises(ValueError):
            forward_marginal_sample(np.zeros(3), ab, np.zeros(3))


class TestPredictX0:
    def test_direct_formula(self):
        np.testing.assert_allclose(predict_x0_from_eps(np.array([1.0]), np.array([0.0]), 0.25), [2.0])

    def test_noiseless_ignores_eps(self):
        xt = np.array([0.3, -0.7])
        np.testing.assert_array_equal(predict_x0_from_eps(xt, np.array([5.0, -2.0]), 1.0), xt)

    def test_round_trip_half(self):
        rng = np.random.default_rng(2)
        x0, eps = rng.uniform(-1, 1, (2, 3, 5, 5)), rng.standard_normal((2, 3, 5, 5))
        xt = forward_marginal_sample(x0, 0.5, eps)
        np.testing.assert_allclose(predict_x0_from_eps(xt, eps, 0.5), x0, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(images, images, st.floats(1e-4, 1.0))
    def test_round_trip_property(self, x0, eps, ab):
        xt = forward_marginal_sample(x0, ab, eps)
        np.testing.assert_allclose(predict_x0_from_eps(xt, eps, ab), x0, atol=1e-6)

    def test_floor(self):
        with pytest.raises(ValueError):
            predict_x0_from_eps(np.zeros(2), np.zeros(2), ALPHABAR_FLOOR / 10)
        predict_x0_from_eps(np.zeros(2), np.zeros(2), ALPHABAR_FLOOR)


class TestReverseStep:
    def test_first_step_returns_x0_hat(self):
        s = build_linear_schedule(5, 0.1, 0.3)
        rng = np.random.default_rng(3)
        x0_hat, xt, noise = (rng.standard_normal((1, 1, 4, 4)) for _ in range(3))
        np.testing.assert_array_equal(reverse_step(xt, x0_hat, 1, s, noise), x0_hat)

    def test_hand_example(self):
        s = build_linear_schedule(2, 0.1, 0.2)
        out = reverse_step(np.array([1.0]), np.array([1.0]), 2, s, np.array([0.0]))
        np.testing.assert_allclose(out, [0.99707], atol=1e-5)

    def test_noise_scaled_by_std(self):
        s = build_linear_schedule(2, 0.1, 0.2)
        _, _, beta = posterior_coeffs(s, 2)
        a = reverse_step(np.zeros(1), np.zeros(1), 2, s, np.ones(1))
        np.testing.assert_allclose(a, [np.sqrt(beta)])

    def test_linear_in_inputs(self):
        s = build_linear_schedule(10, 0.01, 0.2)
        rng = np.random.default_rng(4)
        x1, x2, z1, z2 = (rng.standard_normal((1, 2, 3, 3)) for _ in range(4))
        zero = np.zeros_like(x1)
        f = lambda x, z: reverse_step(z, x, 6, s, zero)  # noqa: E731
        np.testing.assert_allclose(f(2 * x1 - x2, 2 * z1 - z2), 2 * f(x1, z1) - f(x2, z2), atol=1e-12)

    def test_errors(self):
        s = build_linear_schedule(3, 0.1, 0.3)
        with pytest.raises(IndexError):
            reverse_step(np.zeros(2), np.zeros(2), 4, s, np.zeros(2))
        with pytest.raises(ValueError):
            reverse_step(np.zeros(2), np.zeros(3), 2, s, np.zeros(2))

    def test_distribution_matches_bayes_grid(self):
        s = build_linear_schedule(8, 0.02, 0.3)
        t, x0, xt = 5, 0.4, -0.2
        rng = np.random.default_rng(5)
        n = 100_000
        out = reverse_step(np.full(n, xt), np.full(n, x0), t, s, rng.standard_normal(n))
        mean, var = grid_posterior_moments(s.alphas[t - 1], s.alphabars[t - 1], x0, xt)
        assert abs(out.mean() - mean) < 0.02 * abs(mean)
        assert abs(out.var() - var) < 0.02 * var


class TestReverseStepFromEps:
    @pytest.mark.parametrize("t", [1, 2, 7, 20])
    def test_matches_explicit_x0_path(self, t):
        s = build_linear_schedule(20, 1e-4, 0.2)
        rng = np.random.default_rng(t)
        xt, eps_hat, noise = (rng.standard_normal((2, 1, 3, 3)) for _ in range(3))
        x0_hat = predict_x0_from_eps(xt, eps_hat, s.alphabars[t])
        np.testing.assert_allclose(reverse_step_from_eps(xt, eps_hat, t, s, noise),
                                   reverse_step(xt, x0_hat, t, s, noise), atol=1e-10)

    def test_finite_below_floor(self):
        s = build_linear_schedule(500, 1e-6, 0.5)
        assert s.alphabars[-1] < ALPHABAR_FLOOR
        xt = np.array([0.3, -1.2])
        out = reverse_step_from_eps(xt, xt, s.T, s, np.zeros(2))
        assert np.all(np.isfinite(out))
        # with eps_hat = x_t at pure noise the mean shrinks x_t by sqrt(alpha_T)
        np.testing.assert_allclose(out, xt * np.sqrt(s.alphas[-1]), rtol=1e-9)


class TestMarginalComposition:
    @pytest.mark.parametrize("T", [2, 5, 50])
    def test_chained_steps_match_closed_form(self, T):
        s = build_linear_schedule(T, 0.01, 0.2)
        n = 10_000
        x = chain_forward(0.7, s.alphas, np.random.default_rng(T), n)
        ab = s.alphabars[-1]
        mean, var = np.sqrt(ab) * 0.7, 1 - ab
        assert abs(x.mean() - mean) < 3 * np.sqrt(var / n)
        assert abs(x.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))


class TestLosses:
    def test_perfect_prediction(self):
        e = np.random.default_rng(0).standard_normal((2, 1, 4, 4))
        assert base_loss(e, e) == 0.0

    def test_unit_offset(self):
        assert base_loss(np.ones((1, 1, 3, 3)), np.zeros((1, 1, 3, 3))) == 1.0

    def test_signed_pair(self):
        assert base_loss(np.array([1.0, -1.0]), np.zeros(2)) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(images, images)
    def test_nonnegative_symmetric(self, a, b):
        assert base_loss(a, b) >= 0
        assert base_loss(a, b) == base_loss(b, a)
        assert (base_loss(a, b) == 0) == bool(np.array_equal(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            base_loss(np.zeros(3), np.zeros(4))

    def test_grad_matches_finite_difference(self):
        rng = np.random.default_rng(6)
        eps, hat = rng.standard_normal(12), rng.standard_normal(12)
        g = base_loss_grad(eps, hat)
        h = 1e-7
        for i in range(12):
            d = np.zeros(12)
            d[i] = h
            num = (base_loss(eps, hat + d) - base_loss(eps, hat - d)) / (2 * h)
            np.testing.assert_allclose(g[i], num, atol=1e-6)

    def test_residual_target(self):
        x0 = np.full((1, 1, 2, 2), 0.5)
        np.testing.assert_array_equal(residual_target(x0, x0), np.zeros_like(x0))
        np.testing.assert_allclose(residual_target(x0, np.full_like(x0, 0.2)), np.full_like(x0, 0.3))
        np.testing.assert_array_equal(residual_target(x0, np.zeros_like(x0)), x0)
        with pytest.raises(ValueError):
            residual_target(x0, np.zeros((1, 1, 2, 3)))

    def test_check_finite(self):
        check_finite(np.zeros(3))
        with pytest.raises(FloatingPointError):
            check_finite(np.array([0.0, np.nan]), "x")
