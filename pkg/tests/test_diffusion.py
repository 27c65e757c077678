import math

import numpy as np
import pytest
import torch

from app.core.config import DiffusionConfig
from app.core.errors import DegenerateDensityError, DomainError, InvalidInputError, ShapeMismatchError
from app.services.diffusion import (
    DiffusionCondition,
    DiffusionState,
    NoiseSchedule,
    analytic_gaussian_score,
    compose_output,
    forward_sample,
    posterior_step,
    reverse_step,
    sample_reverse,
    solver_mode,
)

SCHED = NoiseSchedule()
M0 = 2.0
GAMMA2 = 0.25


def gaussian_score_fn(mu, m0=M0, gamma2=GAMMA2):
    return lambda x, t: analytic_gaussian_score(x, t, m0, gamma2, mu, SCHED)


def reverse_moments(n_steps, mode, seed=0, size=(20_000,)):
    mu = torch.zeros(size, dtype=torch.float64)
    out = sample_reverse(mu, n_steps, 1.0, mode, SCHED, gaussian_score_fn(mu), seed)
    return float(out.mean()), float(out.var())


class TestNoiseSchedule:
    def test_closed_form_at_one(self):
        assert SCHED.cum(1.0) == pytest.approx(10.025, abs=1e-12)
        assert SCHED.lam(1.0) == pytest.approx(1 - math.exp(-10.025), abs=1e-9)

    def test_boundary_values(self):
        assert SCHED.lam(0.0) == 0.0
        assert SCHED.meancoef(0.0) == 1.0

    def test_lambda_strictly_increasing(self):
        grid = np.linspace(0.0, 1.0, 101)
        assert np.all(np.diff([SCHED.lam(t) for t in grid]) > 0)

    def test_variance_bookkeeping(self):
        for t in np.linspace(0.0, 1.0, 21):
            assert SCHED.meancoef(t) ** 2 + SCHED.lam(t) == pytest.approx(1.0, abs=1e-12)

    def test_from_config(self):
        sched = NoiseSchedule.from_config(DiffusionConfig(beta0=0.1, beta1=10.0))
        assert sched.beta(0.5) == pytest.approx(5.05)

    @pytest.mark.parametrize("beta0,beta1", [(0.0, 20.0), (5.0, 1.0), (-1.0, 1.0)])
    def test_invalid(self, beta0, beta1):
        with pytest.raises(InvalidInputError):
            NoiseSchedule(beta0=beta0, beta1=beta1)


class TestForwardSample:
    def test_time_zero_is_identity(self):
        x0, mu, eps = torch.randn(8, 5), torch.randn(8, 5), torch.randn(8, 5)
        assert torch.equal(forward_sample(x0, mu, 0.0, eps, SCHED), x0)

    def test_drift_fixed_point(self):
        mu, eps = torch.randn(8, 5, dtype=torch.float64), torch.randn(8, 5, dtype=torch.float64)
        for t in (0.1, 0.5, 1.0):
            torch.testing.assert_close(forward_sample(mu, mu, t, eps, SCHED), mu + math.sqrt(SCHED.lam(t)) * eps)

    def test_terminal_distribution(self):
        gen = torch.Generator().manual_seed(0)
        x0 = torch.full((10_000, 4), 3.0, dtype=torch.float64)
        mu = torch.tensor([-1.0, 0.0, 0.5, 2.0], dtype=torch.float64).expand(10_000, 4)
        eps = torch.randn(10_000, 4, generator=gen, dtype=torch.float64)
        diff = forward_sample(x0, mu, 1.0, eps, SCHED) - mu
        assert abs(float(diff.mean())) < 0.05
        assert abs(float(diff.var()) - 1) < 0.02

    def test_time_outside_range(self):
        x = torch.zeros(2, 2)
        with pytest.raises(DomainError):
            forward_sample(x, x, 1.5, x, SCHED)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            forward_sample(torch.zeros(2, 2), torch.zeros(2, 3), 0.5, torch.zeros(2, 2), SCHED)


class TestAnalyticScore:
    def test_zero_at_mean(self):
        mu = torch.randn(4, 3, dtype=torch.float64)
        a = SCHED.meancoef(0.4)
        mean_t = a * M0 + (1 - a) * mu
        score = analytic_gaussian_score(mean_t, 0.4, M0, GAMMA2, mu, SCHED)
        assert torch.equal(score, torch.zeros(4, 3, dtype=torch.float64))

    def test_point_mass_half_variance(self):
        # cum(t) = log 2 makes lambda(t) = 0.5
        beta0, beta1 = 0.05, 20.0
        target = math.log(2.0)
        t = (-beta0 + math.sqrt(beta0**2 + 2 * (beta1 - beta0) * target)) / (beta1 - beta0)
        assert SCHED.lam(t) == pytest.approx(0.5)
        mu = torch.zeros(3, 3, dtype=torch.float64)
        a = SCHED.meancoef(t)
        x = a * M0 + (1 - a) * mu + 1.0
        torch.testing.assert_close(analytic_gaussian_score(x, t, M0, 0.0, mu, SCHED), torch.full((3, 3), -2.0,
                                   dtype=torch.float64))

    def test_matches_finite_differences(self):
        mu = torch.randn(6, dtype=torch.float64)
        x = torch.randn(6, dtype=torch.float64)
        t = 0.3
        a = SCHED.meancoef(t)
        var = a * a * GAMMA2 + SCHED.lam(t)
        mean = a * M0 + (1 - a) * mu

        def log_density(v):
            return float((-0.5 * (v - mean) ** 2 / var).sum() - 3 * math.log(2 * math.pi * var))

        score = analytic_gaussian_score(x, t, M0, GAMMA2, mu, SCHED)
        h = 1e-5
        for i in range(6):
            step = torch.zeros(6, dtype=torch.float64)
            step[i] = h
            fd = (log_density(x + step) - log_density(x - step)) / (2 * h)
            assert fd == pytest.approx(float(score[i]), rel=1e-5, abs=1e-7)

    def test_degenerate(self):
        x = torch.zeros(2, 2)
        with pytest.raises(DegenerateDensityError):
            analytic_gaussian_score(x, 0.0, 0.0, 0.0, x, SCHED)


class TestReverseStep:
    def test_zero_drift(self):
        mu = torch.randn(4, 4)
        state = reverse_step(DiffusionState(x=mu.clone(), t=0.5), torch.zeros(4, 4), 0.1, SCHED, "ode", mu)
        assert torch.equal(state.x, mu)
        assert state.t == pytest.approx(0.4)

    def test_ode_moves_toward_mean(self):
        mu = torch.zeros(50, dtype=torch.float64)
        x = torch.randn(50, dtype=torch.float64) * 3 + 5
        t = 0.6
        h = 1e-3
        score = analytic_gaussian_score(x, t, M0, GAMMA2, mu, SCHED)
        stepped = reverse_step(DiffusionState(x=x, t=t), score, h, SCHED, "ode", mu)
        # distance to the marginal mean at each end of the step
        before = (x - SCHED.meancoef(t) * M0).abs()
        after = (stepped.x - SCHED.meancoef(t - h) * M0).abs()
        assert torch.all(after < before)

    def test_ode_deterministic(self):
        mu, x, score = torch.randn(3, 3), torch.randn(3, 3), torch.randn(3, 3)
        a = reverse_step(DiffusionState(x=x, t=1.0), score, 0.1, SCHED, "ode", mu)
        b = reverse_step(DiffusionState(x=x, t=1.0), score, 0.1, SCHED, "ode", mu)
        assert torch.equal(a.x, b.x)

    def test_sde_formula(self):
        mu, x, score, noise = (torch.randn(3, 3, dtype=torch.float64) for _ in range(4))
        h, t = 0.05, 0.7
        beta_h = SCHED.beta(t) * h
        expected = x - beta_h * (0.5 * (mu - x) - score) + math.sqrt(beta_h) * noise
        out = reverse_step(DiffusionState(x=x, t=t), score, h, SCHED, "sde", mu, noise)
        torch.testing.assert_close(out.x, expected)

    def test_errors(self):
        x = torch.zeros(2, 2)
        state = DiffusionState(x=x, t=0.05)
        with pytest.raises(DomainError):
            reverse_step(state, x, 0.1, SCHED, "ode", x)
        with pytest.raises(DomainError):
            reverse_step(state, x, 0.0, SCHED, "ode", x)
        with pytest.raises(InvalidInputError):
            reverse_step(state, x, 0.01, SCHED, "euler", x)
        with pytest.raises(InvalidInputError):
            reverse_step(state, x, 0.01, SCHED, "sde", x)

    def test_state_time_checked(self):
        with pytest.raises(DomainError):
            DiffusionState(x=torch.zeros(1), t=1.2)


class TestSampleReverse:
    def test_zero_steps_returns_prior(self):
        mu = torch.randn(4, 6)
        out = sample_reverse(mu, 0, 1.5, "ode", SCHED, lambda x, t: torch.zeros_like(x), seed=0)
        assert torch.equal(out, mu) and out is not mu

    def test_forced_init_with_zero_score(self):
        mu = torch.randn(4, 6)
        out = sample_reverse(mu, 1, 1.5, "ode", SCHED, lambda x, t: torch.zeros_like(x), seed=0, x_init=mu)
        assert torch.equal(out, mu)

    def test_temperature_sets_initial_variance(self):
        mu = torch.zeros(40_000, dtype=torch.float64)
        # this score cancels the ode drift, so one step returns the initial draw
        out = sample_reverse(mu, 1, 1.5, "ode", SCHED, lambda x, t: mu - x, seed=3)
        assert float(out.var()) == pytest.approx(1 / 1.5, rel=0.02)

    def test_seeded(self):
        mu = torch.randn(5, 7)
        fn = lambda x, t: torch.zeros_like(x)  # noqa: E731
        a = sample_reverse(mu, 4, 1.5, "sde", SCHED, fn, seed=11)
        assert torch.equal(a, sample_reverse(mu, 4, 1.5, "sde", SCHED, fn, seed=11))
        assert not torch.equal(a, sample_reverse(mu, 4, 1.5, "sde", SCHED, fn, seed=12))

    def test_gaussian_oracle_ode(self):
        mean, var = reverse_moments(100, "ode")
        assert abs(mean - M0) < 0.05
        assert var == pytest.approx(GAMMA2, rel=0.1)

    def test_gaussian_oracle_sde(self):
        mean, var = reverse_moments(100, "sde")
        assert abs(mean - M0) < 0.05
        assert var == pytest.approx(GAMMA2, rel=0.15)

    def test_ode_error_decreases_with_steps(self):
        # for Gaussian data the exact flow is affine, so every start point has a known end point
        a1 = SCHED.meancoef(1.0)
        var1 = a1 * a1 * GAMMA2 + SCHED.lam(1.0)
        errors = {}
        for steps in (5, 10, 100):
            per_seed = []
            for seed in range(10):
                mu = torch.zeros(500, dtype=torch.float64)
                x1 = torch.randn(500, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
                exact = M0 + math.sqrt(GAMMA2 / var1) * (x1 - a1 * M0)
                out = sample_reverse(mu, steps, 1.0, "ode", SCHED, gaussian_score_fn(mu), seed, x_init=x1)
                per_seed.append(float((out - exact).mean().abs()))
            errors[steps] = float(np.median(per_seed))
        assert errors[100] < errors[10] < errors[5]

    def test_posterior_step_recovers_point_mass(self):
        mu = torch.randn(6, 4, dtype=torch.float64)
        m0 = torch.randn(6, 4, dtype=torch.float64)
        fn = lambda x, t: analytic_gaussian_score(x, t, m0, 0.0, mu, SCHED)  # noqa: E731
        out = sample_reverse(mu, 7, 1.5, "sde", SCHED, fn, seed=0, ml_posterior=True)
        torch.testing.assert_close(out, m0)

    def test_posterior_step_to_zero(self):
        mu = torch.zeros(3, dtype=torch.float64)
        x = torch.randn(3, dtype=torch.float64)
        score = analytic_gaussian_score(x, 0.2, M0, 0.0, mu, SCHED)
        out = posterior_step(DiffusionState(x=x, t=0.2), score, 0.2, SCHED, mu, torch.randn(3, dtype=torch.float64))
        assert out.t == 0.0
        torch.testing.assert_close(out.x, torch.full((3,), M0, dtype=torch.float64))

    @pytest.mark.parametrize("steps,tau", [(-1, 1.0), (3, 0.0)])
    def test_bad_arguments(self, steps, tau):
        mu = torch.zeros(2)
        with pytest.raises(DomainError):
            sample_reverse(mu, steps, tau, "ode", SCHED, lambda x, t: x, seed=0)


def test_solver_mode():
    assert solver_mode("pf") == "ode"
    assert solver_mode("ml") == "sde"


class TestComposeOutput:
    def test_identities(self):
        a, b = torch.randn(80, 9), torch.randn(80, 9)
        assert torch.equal(compose_output(a, torch.zeros_like(a)), a)
        assert torch.equal(compose_output(torch.zeros_like(b), b), b)
        assert torch.equal(compose_output(a, b), compose_output(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            compose_output(torch.zeros(80, 3), torch.zeros(80, 4))

    def test_condition_shapes(self):
        with pytest.raises(ShapeMismatchError):
            DiffusionCondition(mu=torch.zeros(80, 3), style=torch.zeros(8), formant=torch.zeros(80, 4))
