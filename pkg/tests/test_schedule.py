import math

import numpy as np
import pytest

from gibbsdenoise.field import Field, RngStream
from gibbsdenoise.schedule import (DiffusionSchedule, forward_marginal_sample,
                                   max_sigma, noise_to_time, schedule_eval)


def quadrature_b_squared(s: DiffusionSchedule, t: float, n: int = 400001) -> float:
    """Trapezoid quadrature of b^2 = e^{-2F} int_0^t e^{2F(u)} beta(u) du."""
    u = np.linspace(0.0, t, n)
    big_f = 0.5 * (s.beta_min * u + 0.5 * (s.beta_max - s.beta_min) * u * u)
    integrand = np.exp(2.0 * (big_f - big_f[-1])) * s.beta(u)
    return float(np.trapezoid(integrand, u))


class TestScheduleEval:
    def test_boundary_values_at_zero(self):
        a, b, beta, big_f = schedule_eval(DiffusionSchedule(), 0.0)
        assert (a, b, big_f) == (1.0, 0.0, 0.0)
        assert beta == pytest.approx(0.1)

    def test_default_endpoint_against_quadrature(self):
        s = DiffusionSchedule()
        a, b, _, big_f = schedule_eval(s, 1.0)
        assert big_f == pytest.approx(0.5 * (0.1 + 19.9 / 2.0), rel=1e-15)
        assert a == pytest.approx(math.exp(-5.025), rel=1e-14)
        assert b == pytest.approx(math.sqrt(1 - math.exp(-10.05)), rel=1e-14)
        assert b**2 == pytest.approx(quadrature_b_squared(s, 1.0), abs=1e-8)

    def test_monotonicity(self):
        s = DiffusionSchedule()
        a3, b3, _, _ = schedule_eval(s, 0.3)
        a7, b7, _, _ = schedule_eval(s, 0.7)
        assert a3 > a7
        assert b3 < b7

    def test_rejects_time_outside_unit_interval(self):
        with pytest.raises(ValueError):
            schedule_eval(DiffusionSchedule(), 1.5)

    def test_closed_form_b_matches_quadrature_on_grid(self):
        s = DiffusionSchedule()
        for t in np.linspace(0.05, 1.0, 20):
            _, b, _, _ = schedule_eval(s, float(t))
            assert b**2 == pytest.approx(quadrature_b_squared(s, float(t)), abs=1e-8)

    def test_variance_preservation(self):
        s = DiffusionSchedule()
        for t in np.linspace(0.0, 1.0, 101):
            a, b, _, _ = schedule_eval(s, float(t))
            assert abs(a * a + b * b - 1.0) < 1e-12


class TestNoiseToTime:
    def test_small_sigma_maps_to_small_time(self):
        s = DiffusionSchedule()
        assert noise_to_time(s, 0.0) == 0.0
        assert noise_to_time(s, 1e-8) < 1e-6

    def test_capacity_boundary(self):
        s = DiffusionSchedule()
        assert noise_to_time(s, max_sigma(s)) == pytest.approx(1.0, abs=1e-9)
        with pytest.raises(ValueError, match="capacity"):
            noise_to_time(s, max_sigma(s) * 1.001)

    def test_quadratic_root_and_residual(self):
        s = DiffusionSchedule()
        t = noise_to_time(s, 0.2)
        # positive root of (19.9/4) t^2 + 0.05 t - ln(1.04)/2
        coeff = (19.9 / 4.0, 0.05, -0.5 * math.log(1.04))
        root = (-coeff[1] + math.sqrt(coeff[1]**2 - 4 * coeff[0] * coeff[2])) / (2 * coeff[0])
        assert t == pytest.approx(root, rel=1e-10)
        a, b, _, _ = schedule_eval(s, t)
        assert abs(b / a - 0.2) <= 1e-12 * 1.2

    def test_round_trip_identity_over_range(self):
        s = DiffusionSchedule()
        cap = max_sigma(s)
        for sigma in np.geomspace(1e-4, cap, 100):
            t = noise_to_time(s, float(sigma))
            a, b, _, _ = schedule_eval(s, t)
            assert abs(b / a - sigma) <= 1e-12 * (1.0 + sigma)

    def test_degenerate_constant_beta(self):
        s = DiffusionSchedule(beta_min=2.0, beta_max=2.0, n_steps=10)
        t = noise_to_time(s, 0.5)
        a, b, _, _ = schedule_eval(s, t)
        assert abs(b / a - 0.5) <= 1e-12 * 1.5


class TestMaxSigma:
    def test_equals_endpoint_ratio(self):
        s = DiffusionSchedule()
        a, b, _, _ = schedule_eval(s, 1.0)
        assert max_sigma(s) == pytest.approx(b / a, rel=1e-12)

    def test_smaller_beta_max_gives_smaller_capacity(self):
        assert max_sigma(DiffusionSchedule(beta_max=2.0)) < max_sigma(DiffusionSchedule())

    def test_vanishing_schedule_limit(self):
        s = DiffusionSchedule(beta_min=1e-9, beta_max=1e-9, n_steps=4)
        assert max_sigma(s) < 1e-4


class TestForwardMarginalSample:
    def test_time_zero_returns_input(self, rng):
        s = DiffusionSchedule()
        x = Field(rng.standard_normal((6, 6)))
        out = forward_marginal_sample(s, x, 0.0, [0.0], rng)
        assert np.array_equal(out.data, x.data)

    def test_endpoint_variance_white(self):
        s = DiffusionSchedule()
        rng = RngStream(7)
        x = Field.zeros((512, 512))
        pooled = np.concatenate([
            forward_marginal_sample(s, x, 1.0, [0.0], rng).data.ravel()
            for _ in range(4)
        ])
        _, b1, _, _ = schedule_eval(s, 1.0)
        assert pooled.size >= 10**6
        assert abs(pooled.var() / b1**2 - 1.0) < 0.01

    def test_mean_contracts_toward_scaled_input(self):
        s = DiffusionSchedule()
        rng = RngStream(8)
        x = Field(RngStream(9).standard_normal((8, 8)))
        n_draws = 10**4
        acc = np.zeros(x.dims)
        for _ in range(n_draws):
            acc += forward_marginal_sample(s, x, 0.5, [0.0], rng).data
        mean = acc / n_draws
        a, b, _, _ = schedule_eval(s, 0.5)
        se = b / math.sqrt(n_draws)
        assert np.abs(mean - a * x.data).max() < 4.0 * se

    def test_discrete_grid_matches_continuous_coefficients(self):
        s = DiffusionSchedule(n_steps=64)
        for i in [0, 1, 13, 64]:
            a, b, _, _ = schedule_eval(s, s.grid[i])
            assert math.sqrt(s.alpha_bars[i]) == pytest.approx(a, rel=1e-13)
            assert math.sqrt(1 - s.alpha_bars[i]) == pytest.approx(b, abs=1e-13)
