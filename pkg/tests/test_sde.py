import numpy as np
import pytest

from diffdistill.errors import ValidationError
from diffdistill.sde import (
    RngStream,
    ancestral_step,
    default_schedule,
    forward_noise,
    make_schedule,
    reverse_trajectory,
    x0_estimate,
)


class TestMakeSchedule:
    def test_hand_cumulative_product(self):
        s = make_schedule("linear", 2, 0.5, 0.5)
        np.testing.assert_allclose(s.betas, [0.5, 0.5])
        np.testing.assert_allclose(s.alpha_bars, [1.0, 0.5, 0.25])
        assert s.alpha_bar(0) == 1.0
        assert s.alpha_bar(2) == 0.25

    def test_classic_1000_step_terminal(self):
        s = make_schedule("linear", 1000, 1e-4, 0.02)
        brute = float(np.prod(1.0 - np.linspace(1e-4, 0.02, 1000)))
        assert s.alpha_bar(1000) == pytest.approx(brute, rel=1e-12)
        assert brute == pytest.approx(4.04e-5, rel=2e-3)

    def test_alpha_bar_strictly_decreasing(self):
        for args in [("linear", 50, 0.002, 0.4), ("linear", 7, 0.1, 0.3)]:
            s = make_schedule(*args)
            assert np.all(np.diff(s.alpha_bars) < 0)

    def test_bounds_rejected(self):
        with pytest.raises(ValidationError):
            make_schedule("linear", 1, 0.1, 0.2)
        with pytest.raises(ValidationError):
            make_schedule("linear", 10, 0.0, 0.2)
        with pytest.raises(ValidationError):
            make_schedule("linear", 10, 0.3, 0.2)
        with pytest.raises(ValidationError):
            make_schedule("linear", 10, 0.5, 1.0)
        with pytest.raises(ValidationError):
            make_schedule("cosine", 10, 0.1, 0.2)

    def test_default_schedule_rescaling(self):
        s = default_schedule()
        assert s.T == 50
        assert s.beta(1) == pytest.approx(1e-4 * 20)
        assert s.beta(50) == pytest.approx(0.02 * 20)

    def test_default_schedule_too_coarse(self):
        with pytest.raises(ValidationError):
            default_schedule(20)


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(7).normal(5)
        b = RngStream(7).normal(5)
        assert np.array_equal(a, b)

    def test_derived_streams_differ(self):
        root = RngStream(7)
        a = root.derive("traj", 0).normal(5)
        b = root.derive("traj", 1).normal(5)
        c = root.derive("refs", 0).normal(5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_derivation_path_stable(self):
        a = RngStream(3, key=("x", 4)).normal(3)
        b = RngStream(3).derive("x", 4).normal(3)
        assert np.array_equal(a, b)

    def test_choice_without_replacement(self):
        idx = RngStream(1).choice_without_replacement(10, 10)
        assert sorted(idx.tolist()) == list(range(10))
        with pytest.raises(ValidationError):
            RngStream(1).choice_without_replacement(3, 4)


class TestForwardNoise:
    def test_t_zero_returns_clean(self, schedule):
        x0 = np.array([1.0, -2.0])
        xt, eps = forward_noise(schedule, x0, 0)
        assert np.array_equal(xt, x0)
        assert np.array_equal(eps, np.zeros(2))

    def test_zero_eps_hook(self, schedule):
        x0 = np.array([2.0, 4.0])
        xt, _ = forward_noise(schedule, x0, 10, eps=np.zeros(2))
        np.testing.assert_allclose(xt, np.sqrt(schedule.alpha_bar(10)) * x0, rtol=1e-15)

    def test_monte_carlo_variance(self, schedule):
        # var of x_t at fixed x0 is (1 - alpha_bar_t) per dim, within 3 sigma-hat
        t = 17
        n = 100_000
        rng = RngStream(123)
        x0 = np.tile(np.array([0.7, -1.1]), (n, 1))
        xt, _ = forward_noise(schedule, x0, t, rng)
        target = 1.0 - schedule.alpha_bar(t)
        est = xt.var(axis=0)
        se = target * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(est - target) < 3 * se)

    def test_returns_the_draw(self, schedule):
        rng = RngStream(5)
        x0 = np.zeros(3)
        xt, eps = forward_noise(schedule, x0, 4, rng)
        np.testing.assert_allclose(xt, np.sqrt(1 - schedule.alpha_bar(4)) * eps, rtol=1e-15)

    def test_range_and_shape_errors(self, schedule):
        with pytest.raises(ValidationError):
            forward_noise(schedule, np.zeros(2), 51, RngStream(0))
        with pytest.raises(ValidationError):
            forward_noise(schedule, np.zeros(2), -1, RngStream(0))
        with pytest.raises(ValidationError):
            forward_noise(schedule, np.zeros(2), 3, eps=np.zeros(3))
        with pytest.raises(ValidationError):
            forward_noise(schedule, np.zeros(2), 3)


class TestAncestralStep:
    def test_final_step_deterministic(self, schedule):
        x = np.array([0.4, -0.2])
        e = np.array([0.1, 0.3])
        a = ancestral_step(schedule, x, e, 1, RngStream(0))
        b = ancestral_step(schedule, x, e, 1, RngStream(99))
        assert np.array_equal(a, b)
        drift = (schedule.beta(1) / np.sqrt(1 - schedule.alpha_bar(1))) * e
        np.testing.assert_allclose(a, (x - drift) / np.sqrt(1 - schedule.beta(1)), rtol=1e-14)

    def test_first_order_final_step_formula(self, schedule):
        x = np.array([0.4, -0.2])
        e = np.array([0.1, 0.3])
        got = ancestral_step(schedule, x, e, 1, RngStream(0), first_order=True)
        b = schedule.beta(1)
        drift = (b / np.sqrt(1 - schedule.alpha_bar(1))) * e
        np.testing.assert_allclose(got, (2 - np.sqrt(1 - b)) * x - drift, rtol=1e-14)

    def test_degenerate_tiny_beta(self):
        s = make_schedule("linear", 3, 1e-12, 1e-12)
        x = np.array([1.0, 2.0, 3.0])
        for first_order in (False, True):
            out = ancestral_step(s, x, np.zeros(3), 1, RngStream(0), first_order=first_order)
            np.testing.assert_allclose(out, x, rtol=1e-9)

    def test_bit_identical_given_seed(self, schedule):
        x = np.array([0.5, 0.5])
        e = np.array([-0.3, 0.2])
        a = ancestral_step(schedule, x, e, 20, RngStream(42, key=("s",)))
        b = ancestral_step(schedule, x, e, 20, RngStream(42, key=("s",)))
        assert np.array_equal(a, b)

    def test_shape_mismatch(self, schedule):
        with pytest.raises(ValidationError):
            ancestral_step(schedule, np.zeros(2), np.zeros(3), 5, RngStream(0))

    def test_batch_shape(self, schedule):
        out = ancestral_step(schedule, np.zeros((7, 2)), np.zeros((7, 2)), 5, RngStream(0))
        assert out.shape == (7, 2)


class TestX0Estimate:
    def test_round_trip_with_true_eps(self, schedule):
        rng = RngStream(11)
        x0 = rng.normal(4)
        for t in (1, 13, 50):
            xt, eps = forward_noise(schedule, x0, t, rng)
            np.testing.assert_allclose(x0_estimate(schedule, xt, eps, t), x0, atol=1e-10)

    def test_zero_eps_scales_by_alpha_bar(self, schedule):
        x = np.array([3.0, -1.0])
        got = x0_estimate(schedule, x, np.zeros(2), 9)
        np.testing.assert_allclose(got, x / np.sqrt(schedule.alpha_bar(9)), rtol=1e-15)

    def test_near_clean_step_is_identity(self):
        s = make_schedule("linear", 3, 1e-12, 1e-12)
        x = np.array([0.2, 0.4])
        np.testing.assert_allclose(x0_estimate(s, x, np.zeros(2), 1), x, rtol=1e-9)

    def test_affine_in_inputs(self, schedule):
        rng = RngStream(12)
        t = 21
        x1, x2, e1, e2 = (rng.normal(3) for _ in range(4))
        a, b = 0.37, -1.4
        lhs = x0_estimate(schedule, a * x1 + b * x2, a * e1 + b * e2, t)
        rhs = a * x0_estimate(schedule, x1, e1, t) + b * x0_estimate(schedule, x2, e2, t)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestReverseTrajectory:
    def test_deterministic(self, schedule):
        eps_fn = lambda x, t: 0.1 * x
        a = reverse_trajectory(schedule, eps_fn, RngStream(3).normal(2), RngStream(3, key=("w",)))
        b = reverse_trajectory(schedule, eps_fn, RngStream(3).normal(2), RngStream(3, key=("w",)))
        assert np.array_equal(a, b)

    def test_batched_matches_shape(self, schedule):
        out = reverse_trajectory(schedule, lambda x, t: np.zeros_like(x), np.zeros((5, 2)), RngStream(0))
        assert out.shape == (5, 2)
