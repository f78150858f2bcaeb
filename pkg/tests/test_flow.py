"""Flow matching: interpolation identities, the matching loss, and the
Euler sampler against closed-form oracles."""

import numpy as np
import pytest

from psdt import flow, tensor as T
from psdt.flow import (DivergenceError, SamplerConfig, euler_integrate,
                       euler_sample, interpolate, target_velocity)


class TestInterpolate:
    def test_endpoint_t0_is_x0_bit_exact(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(2, 3, 4))
        eps = rng.standard_normal(x0.shape)
        assert np.array_equal(interpolate(x0, eps, 0.0), x0)

    def test_endpoint_t1_is_eps_bit_exact(self):
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=(2, 3, 4))
        eps = rng.standard_normal(x0.shape)
        assert np.array_equal(interpolate(x0, eps, 1.0), eps)

    def test_midpoint(self):
        z = interpolate(np.zeros((1, 4)), np.full((1, 4), 2.0), 0.5)
        assert np.allclose(z, 1.0, atol=1e-15)

    def test_t_outside_unit_interval_rejected(self):
        x = np.zeros((1, 2))
        with pytest.raises(ValueError):
            interpolate(x, x, 1.5)
        with pytest.raises(ValueError):
            interpolate(x, x, -0.1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            interpolate(np.zeros((1, 2)), np.zeros((1, 3)), 0.5)


class TestTargetVelocity:
    def test_equal_endpoints_give_zero(self):
        x = np.random.default_rng(0).normal(size=(2, 5))
        assert np.array_equal(target_velocity(x, x), np.zeros_like(x))

    def test_matches_numeric_time_derivative(self):
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=(1, 6))
        eps = rng.standard_normal(x0.shape)
        h = 1e-6
        numeric = (interpolate(x0, eps, 0.5 + h) - interpolate(x0, eps, 0.5 - h)) / (2 * h)
        assert np.abs(numeric - target_velocity(x0, eps)).max() < 1e-8

    def test_antisymmetry(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(3, 3))
        eps = rng.standard_normal(x0.shape)
        assert np.array_equal(target_velocity(x0, eps), -target_velocity(eps, x0))


class TestCfmLoss:
    def test_oracle_model_gets_zero_loss(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(4, 1, 8, 8))

        def oracle(z, t, tids):
            return T.tensor(flow.target_velocity(x0, eps_holder[0]))

        eps_holder = [None]
        draw = np.random.default_rng(7)
        t = flow.sample_timesteps(draw, 4)
        eps_holder[0] = draw.standard_normal(x0.shape)
        loss = flow.cfm_loss_given(oracle, x0, np.zeros(4, dtype=int), t, eps_holder[0])
        assert loss.item() == 0.0

    def test_zero_model_matches_direct_computation(self):
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=(3, 1, 8, 8)).astype(np.float64)

        def zero_model(z, t, tids):
            return T.tensor(np.zeros_like(x0))

        loss = flow.cfm_loss(zero_model, x0, np.zeros(3, dtype=int),
                             np.random.default_rng(11))
        # reproduce the draws: same seed, same order
        d = np.random.default_rng(11)
        t = flow.sample_timesteps(d, 3)
        eps = d.standard_normal(x0.shape)
        expect = ((eps - x0) ** 2).mean()
        assert loss.item() == pytest.approx(expect, rel=1e-12)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(2, 1, 4, 4))

        def zero_model(z, t, tids):
            return T.tensor(np.zeros_like(x0))

        l1 = flow.cfm_loss(zero_model, x0, np.zeros(2, dtype=int),
                           np.random.default_rng(5)).item()
        l2 = flow.cfm_loss(zero_model, x0, np.zeros(2, dtype=int),
                           np.random.default_rng(5)).item()
        assert l1 == l2

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(2, 1, 4, 4))

        def noisy_model(z, t, tids):
            return T.tensor(rng.standard_normal(x0.shape))

        loss = flow.cfm_loss(noisy_model, x0, np.zeros(2, dtype=int),
                             np.random.default_rng(6)).item()
        assert loss >= 0.0

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            flow.cfm_loss(lambda z, t, i: None, np.zeros((0, 1, 4, 4)),
                          np.zeros(0, dtype=int), np.random.default_rng(0))

    def test_zero_model_oracle_closed_form(self):
        x0 = np.array([[0.5, -0.5], [1.0, 0.0]])
        assert flow.zero_model_loss_oracle(x0) == pytest.approx(1.0 + (x0 ** 2).mean())


class TestEuler:
    def test_constant_field_recovers_data_exactly(self):
        rng = np.random.default_rng(0)
        x0_hat = rng.normal(size=(2, 1, 6, 6))
        eps_hat = rng.standard_normal(x0_hat.shape)
        v = eps_hat - x0_hat
        for steps in (1, 3, 8, 50):
            z = euler_integrate(lambda z, t: v, eps_hat, steps)
            assert np.abs(z - x0_hat).max() < 1e-12

    def test_one_step_equals_single_big_step(self):
        rng = np.random.default_rng(1)
        z0 = rng.normal(size=(1, 4))
        field = lambda z, t: 0.3 * z + t[:, None]
        z = euler_integrate(field, z0, 1)
        assert np.allclose(z, z0 - field(z0, np.ones(1)), atol=1e-15)

    @pytest.mark.parametrize("steps", [8, 32, 128])
    def test_exp_decay_error_bound(self, steps):
        # dz/dt = -z integrated from t=1 to 0 has z(0) = e * z(1)
        z1 = np.array([[1.0, -2.0, 0.5]])
        z = euler_integrate(lambda z, t: -z, z1, steps)
        rel = np.abs(z - np.e * z1).max() / np.abs(np.e * z1).max()
        assert rel < 2.0 / steps

    def test_bit_reproducible_given_seed(self):
        field = lambda z, t: -0.5 * z
        a = euler_sample(field, (2, 1, 4, 4), 16, np.random.default_rng(9))
        b = euler_sample(field, (2, 1, 4, 4), 16, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_divergence_error_reports_step(self):
        def exploding(z, t):
            return np.full_like(z, np.inf) if t[0] < 0.8 else -z

        with pytest.raises(DivergenceError) as exc:
            euler_integrate(exploding, np.ones((1, 2)), 10)
        # t = 10/10, 9/10, 8/10 fine; the 4th step at t=7/10 explodes
        assert exc.value.step == 4

    def test_step_count_validated(self):
        with pytest.raises(ValueError):
            euler_integrate(lambda z, t: z, np.ones((1, 1)), 0)
        with pytest.raises(ValueError):
            SamplerConfig(steps=0)


def test_flow_sample_fields_consistent():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(1, 2, 2))
    eps = rng.standard_normal(x0.shape)
    fs = flow.make_flow_sample(x0, eps, 0.25)
    assert np.array_equal(fs.z_t, interpolate(x0, eps, 0.25))
    assert np.array_equal(fs.u_t, eps - x0)
