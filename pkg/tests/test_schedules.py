"""
schedules モジュールのユニットテスト

Tweedie 推定、DDIM / Euler ステップ、順方向ノイズ、β_t、シード付き乱数を検証。
"""

import math

import pytest
import torch

from frame_guidance.base_backend import ScheduleError, ShapeError
from frame_guidance.schedules import (
    NoiseSchedule,
    beta_from_alpha_bar,
    check_step,
    child_seed,
    cosine_schedule,
    ddim_step,
    euler_flow_step,
    flow_schedule,
    forward_noise,
    make_schedule,
    standard_normal,
    tweedie_clean,
    tweedie_clean_flow,
    velocity_target,
)

pytestmark = pytest.mark.unit


def _with_alpha_bar(values):
    return NoiseSchedule(kind="diffusion", T=len(values) - 1, alpha_bar=tuple(values))


class TestNoiseSchedule:
    """スケジュールの構築と検証"""

    def test_cosine_endpoints(self):
        sched = cosine_schedule(50)
        assert sched.alpha_bar[0] == 1.0
        assert sched.alpha_bar[50] == 0.0
        assert len(sched.alpha_bar) == 51
        assert all(b < a for a, b in zip(sched.alpha_bar, sched.alpha_bar[1:]))

    def test_flow_uniform_sigma(self):
        sched = flow_schedule(8)
        assert sched.sigma == tuple(t / 8 for t in range(9))

    def test_make_schedule_unknown_kind(self):
        with pytest.raises(ScheduleError):
            make_schedule("ddpm", 10)

    def test_validate_rejects_non_monotone(self):
        with pytest.raises(ScheduleError, match="単調"):
            _with_alpha_bar([1.0, 0.5, 0.6, 0.0]).validate()

    def test_validate_rejects_wrong_length(self):
        with pytest.raises(ScheduleError):
            NoiseSchedule(kind="diffusion", T=3, alpha_bar=(1.0, 0.0)).validate()

    @pytest.mark.parametrize("t", [-1, 11, 2.5, True])
    def test_check_step_rejects(self, t):
        with pytest.raises(ScheduleError):
            check_step(t, cosine_schedule(10))


class TestTweedie:
    """Tweedie 推定"""

    def test_zero_velocity_scales_latent(self):
        sched = _with_alpha_bar([1.0, 0.25, 0.0])
        z = torch.randn(3, 4, 4, 2, dtype=torch.float64)
        assert torch.allclose(tweedie_clean(z, torch.zeros_like(z), 1, sched), 0.5 * z)

    def test_clean_endpoint(self):
        sched = cosine_schedule(10)
        z = torch.randn(2, 3, dtype=torch.float64)
        assert torch.equal(tweedie_clean(z, torch.randn_like(z), 0, sched), z)

    def test_shape_mismatch(self):
        sched = cosine_schedule(10)
        with pytest.raises(ShapeError):
            tweedie_clean(torch.zeros(2, 3), torch.zeros(3, 2), 4, sched)

    def test_requires_diffusion_schedule(self):
        with pytest.raises(ScheduleError):
            tweedie_clean(torch.zeros(2), torch.zeros(2), 1, flow_schedule(4))

    @pytest.mark.parametrize("t", [1, 7, 25, 49, 50])
    def test_gaussian_posterior_mean(self, gaussian_oracle, t):
        """厳密な事後平均速度から Tweedie 推定が事後平均と一致する"""
        sched = cosine_schedule(50)
        oracle = gaussian_oracle(sched, mu=0.3, s=0.7)
        z = standard_normal((1000,), seed=t, dtype=torch.float64)
        expected, _ = oracle.posterior(z, t)
        assert torch.max(torch.abs(tweedie_clean(z, oracle(z, t), t, sched) - expected)) < 1e-10

    def test_round_trip_with_true_velocity(self):
        sched = cosine_schedule(50)
        z0 = standard_normal((4, 4, 4, 2), 1, torch.float64)
        eps = standard_normal((4, 4, 4, 2), 2, torch.float64)
        for t in (1, 20, 49):
            z_t = forward_noise(z0, t, eps, sched)
            v = velocity_target(z0, eps, t, sched)
            assert torch.max(torch.abs(tweedie_clean(z_t, v, t, sched) - z0)) < 1e-10

    def test_flow_pure_noise(self):
        sched = flow_schedule(10)
        z = torch.randn(5, dtype=torch.float64)
        assert torch.equal(tweedie_clean_flow(z, z, 10, sched), torch.zeros_like(z))

    def test_flow_zero_velocity(self):
        sched = flow_schedule(10)
        z = torch.randn(5, dtype=torch.float64)
        assert torch.equal(tweedie_clean_flow(z, torch.zeros_like(z), 3, sched), z)

    def test_flow_straight_path_recovers_endpoint(self):
        sched = flow_schedule(10)
        x0 = standard_normal((6,), 3, torch.float64)
        x1 = standard_normal((6,), 4, torch.float64)
        for t in range(11):
            sigma = sched.sigma_at(t)
            z_t = (1 - sigma) * x0 + sigma * x1
            assert torch.allclose(tweedie_clean_flow(z_t, x1 - x0, t, sched), x0, atol=1e-12)


class TestForwardNoise:
    """順方向ノイズ"""

    @pytest.mark.parametrize("kind", ["diffusion", "flow"])
    def test_endpoints(self, kind):
        sched = make_schedule(kind, 10)
        z0 = torch.randn(3, 4, dtype=torch.float64)
        eps = torch.randn(3, 4, dtype=torch.float64)
        assert torch.equal(forward_noise(z0, 0, eps, sched), z0)
        assert torch.equal(forward_noise(z0, 10, eps, sched), eps)

    def test_second_moment(self):
        """1万サンプルの二次モーメントが ᾱ_t·Var(z_0) + (1−ᾱ_t) に 3 標準誤差以内で一致"""
        sched = cosine_schedule(50)
        t, s = 20, 0.5
        n = 10_000
        z0 = s * standard_normal((n,), 10, torch.float64)
        eps = standard_normal((n,), 11, torch.float64)
        z_t = forward_noise(z0, t, eps, sched)
        a_bar = sched.alpha_bar_at(t)
        expected = a_bar * s * s + (1 - a_bar)
        second = z_t ** 2
        se = second.std().item() / math.sqrt(n)
        assert abs(second.mean().item() - expected) < 3 * se


def _ddim_rollout(sched, oracle, z):
    for t in range(sched.T, 0, -1):
        z = ddim_step(z, tweedie_clean(z, oracle(z, t), t, sched), t, sched)
    return z


def _ddim_variance(sched, s):
    """DDIM の線形写像による終端分散 (ᾱ_T = 0 から開始)"""
    var = 1.0
    for t in range(sched.T, 0, -1):
        a, b = math.sqrt(sched.alpha_bar[t]), math.sqrt(1 - sched.alpha_bar[t])
        a_prev, b_prev = math.sqrt(sched.alpha_bar[t - 1]), math.sqrt(1 - sched.alpha_bar[t - 1])
        marginal = a * a * s * s + b * b
        gain = (a_prev * a * s * s + b_prev * b) / marginal
        var = gain * gain * var
    return var


class TestDDIM:
    """決定的 DDIM"""

    def test_noise_free_step(self):
        sched = cosine_schedule(10)
        z0 = torch.randn(2, 3, dtype=torch.float64)
        z_t = math.sqrt(sched.alpha_bar_at(5)) * z0
        expected = math.sqrt(sched.alpha_bar_at(4)) * z0
        assert torch.allclose(ddim_step(z_t, z0, 5, sched), expected, atol=1e-12)

    def test_last_step_returns_prediction(self):
        sched = cosine_schedule(10)
        z0 = torch.randn(2, 3, dtype=torch.float64)
        assert torch.equal(ddim_step(torch.randn_like(z0), z0, 1, sched), z0)

    def test_rejects_t_zero(self):
        sched = cosine_schedule(10)
        with pytest.raises(ScheduleError):
            ddim_step(torch.zeros(2), torch.zeros(2), 0, sched)

    def test_rejects_alpha_bar_one(self):
        sched = NoiseSchedule(kind="diffusion", T=2, alpha_bar=(1.0, 1.0, 0.0))
        with pytest.raises(ScheduleError):
            ddim_step(torch.zeros(2), torch.zeros(2), 1, sched)

    def test_determinism(self, gaussian_oracle):
        sched = cosine_schedule(20)
        oracle = gaussian_oracle(sched, mu=0.1, s=0.5)
        z = standard_normal((64,), 5, torch.float64)
        assert torch.equal(_ddim_rollout(sched, oracle, z), _ddim_rollout(sched, oracle, z))

    def test_oracle_rollout_50_steps(self, gaussian_oracle):
        """50 ステップ: 平均は 3 標準誤差以内、分散は DDIM の線形写像による理論値に一致"""
        sched = cosine_schedule(50)
        mu, s, n = 0.4, 0.6, 10_000
        oracle = gaussian_oracle(sched, mu=mu, s=s)
        z0 = _ddim_rollout(sched, oracle, standard_normal((n,), 0, torch.float64))

        theory = _ddim_variance(sched, s)
        assert theory <= s * s
        assert abs(z0.mean().item() - mu) < 3 * math.sqrt(theory / n)
        assert abs(z0.var().item() - theory) < 3 * theory * math.sqrt(2.0 / (n - 1))

    @pytest.mark.slow
    def test_oracle_rollout_fine_steps(self, gaussian_oracle):
        """1000 ステップでは平均・分散ともにデータの値に 3 標準誤差以内で一致"""
        sched = cosine_schedule(1000)
        mu, s, n = 0.4, 0.6, 10_000
        oracle = gaussian_oracle(sched, mu=mu, s=s)
        z0 = _ddim_rollout(sched, oracle, standard_normal((n,), 0, torch.float64))
        assert abs(z0.mean().item() - mu) < 3 * s / math.sqrt(n)
        assert abs(z0.var().item() - s * s) < 3 * s * s * math.sqrt(2.0 / (n - 1))


class TestEulerFlow:
    """フローマッチングの Euler ステップ"""

    def test_zero_velocity(self):
        sched = flow_schedule(10)
        z = torch.randn(4, dtype=torch.float64)
        assert torch.equal(euler_flow_step(z, torch.zeros_like(z), 4, sched), z)

    def test_equal_sigma_step(self):
        sched = NoiseSchedule(kind="flow", T=2, sigma=(0.0, 0.5, 0.5))
        z = torch.randn(4, dtype=torch.float64)
        assert torch.equal(euler_flow_step(z, torch.randn_like(z), 2, sched), z)

    @pytest.mark.parametrize("T", [1, 3, 10, 50])
    def test_constant_field_reaches_endpoint(self, T):
        sched = flow_schedule(T)
        x0 = standard_normal((8,), 1, torch.float64)
        x1 = standard_normal((8,), 2, torch.float64)
        z = x1.clone()
        for t in range(T, 0, -1):
            z = euler_flow_step(z, x1 - x0, t, sched)
        assert torch.max(torch.abs(z - x0)) < 1e-10

    def test_rejects_t_zero(self):
        with pytest.raises(ScheduleError):
            euler_flow_step(torch.zeros(2), torch.zeros(2), 0, flow_schedule(4))


class TestBeta:
    """β_t = ᾱ_t / ᾱ_{t−1}"""

    def test_first_inference_step_zero(self):
        sched = cosine_schedule(50)
        beta = beta_from_alpha_bar(50, sched)
        assert math.sqrt(beta) == 0.0
        assert math.sqrt(1 - beta) == 1.0

    def test_constant_alpha_bar(self):
        sched = NoiseSchedule(kind="diffusion", T=3, alpha_bar=(1.0, 0.5, 0.5, 0.0))
        assert beta_from_alpha_bar(2, sched) == 1.0

    def test_first_steps_increase(self):
        sched = cosine_schedule(50)
        roots = [math.sqrt(beta_from_alpha_bar(t, sched)) for t in (50, 49, 48)]
        assert roots[0] < roots[1] < roots[2]

    def test_range(self):
        sched = cosine_schedule(50)
        assert all(0.0 <= beta_from_alpha_bar(t, sched) <= 1.0 for t in range(1, 51))

    def test_malformed_schedule(self):
        sched = NoiseSchedule(kind="diffusion", T=3, alpha_bar=(1.0, 0.0, 0.0, 0.0))
        with pytest.raises(ScheduleError):
            beta_from_alpha_bar(2, sched)


class TestVelocityTarget:
    """速度回帰ターゲット"""

    def test_diffusion_clean_endpoint(self):
        sched = cosine_schedule(10)
        z0 = torch.randn(5, dtype=torch.float64)
        eps = torch.randn(5, dtype=torch.float64)
        assert torch.equal(velocity_target(z0, eps, 10, sched), -z0)

    def test_flow_constant_along_path(self):
        sched = flow_schedule(10)
        z0 = torch.randn(5, dtype=torch.float64)
        eps = torch.randn(5, dtype=torch.float64)
        targets = torch.stack([velocity_target(z0, eps, t, sched) for t in range(11)])
        assert torch.equal(targets.var(dim=0), torch.zeros(5, dtype=torch.float64))


class TestSeeds:
    """シード付き乱数"""

    def test_standard_normal_reproducible(self):
        assert torch.equal(standard_normal((3, 4), 7), standard_normal((3, 4), 7))
        assert not torch.equal(standard_normal((3, 4), 7), standard_normal((3, 4), 8))

    def test_child_seed_depends_on_keys(self):
        assert child_seed(0, 5, 1) == child_seed(0, 5, 1)
        assert child_seed(0, 5, 1) != child_seed(0, 5, 2)
        assert child_seed(0, 5, 1) != child_seed(1, 5, 1)
