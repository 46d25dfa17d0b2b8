"""
Tests for Controllers - 線形・RBF方策と正弦スクワッシング
"""

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import core  # noqa: F401
from core.belief import GaussianBelief
from core.checkpoint import load_policy, save_policy
from core.controllers import (
    MIN_LENGTHSCALE,
    ControlBounds,
    LinearPolicy,
    RBFPolicy,
    initialize_linear_policy,
    initialize_rbf_policy,
    moments_of_action,
    squash_control,
)
from core.errors import ContractViolationError


def _rbf_policy(seed: int = 0, n_basis: int = 6) -> RBFPolicy:
    rng = np.random.default_rng(seed)
    return initialize_rbf_policy(
        ControlBounds.symmetric(2.0), n_basis, np.zeros(2), 0.5 * np.eye(2), rng
    )


class TestControlBounds:
    """制御範囲のテスト"""

    def test_symmetric(self):
        """対称範囲の中心と振幅"""
        bounds = ControlBounds.symmetric([1.0, 3.0])
        np.testing.assert_allclose(bounds.mid, [0.0, 0.0])
        np.testing.assert_allclose(bounds.amp, [1.0, 3.0])

    def test_inverted_bounds_rejected(self):
        """lower ≥ upper は拒否されるか"""
        with pytest.raises(ContractViolationError):
            ControlBounds(np.array([1.0]), np.array([0.0])).validate()


class TestSquashing:
    """正弦スクワッシングのテスト"""

    def test_point_input_matches_deterministic_squash(self):
        """分散ゼロなら mid + a·sin(v/a) に一致するか"""
        bounds = ControlBounds(np.array([-1.0]), np.array([3.0]))
        out = squash_control(GaussianBelief(np.array([0.7]), np.zeros((1, 1))), bounds)
        assert out.mean[0] == pytest.approx(1.0 + 2.0 * np.sin(0.7 / 2.0))
        assert out.cov[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_moments_match_monte_carlo(self):
        """スクワッシング後の平均・分散がモンテカルロと一致するか"""
        bounds = ControlBounds.symmetric(1.5)
        pre = GaussianBelief(np.array([0.4]), np.array([[0.8]]))
        out = squash_control(pre, bounds)

        rng = np.random.default_rng(0)
        v = rng.normal(0.4, np.sqrt(0.8), size=400_000)
        u = 1.5 * np.sin(v / 1.5)
        assert out.mean[0] == pytest.approx(u.mean(), abs=5e-3)
        assert out.cov[0, 0] == pytest.approx(u.var(), abs=5e-3)


class TestPolicies:
    """方策のテスト"""

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(min_value=-50.0, max_value=50.0), min_size=2, max_size=2))
    def test_act_stays_in_bounds(self, x):
        """実行時制御が常に範囲内に収まるか"""
        policy = LinearPolicy(np.array([[5.0, -3.0]]), np.array([0.5]), ControlBounds.symmetric(2.0))
        u = policy.act(x)
        assert -2.0 <= u[0] <= 2.0

    def test_act_rejects_wrong_state_dim(self):
        """状態次元が違えば拒否されるか"""
        policy = _rbf_policy()
        with pytest.raises(ContractViolationError):
            policy.act([0.0, 0.0, 0.0])

    def test_linear_moments_match_monte_carlo(self):
        """線形方策の制御モーメントと相互共分散がモンテカルロと一致するか"""
        policy = LinearPolicy(np.array([[0.6, -0.4]]), np.array([0.2]), ControlBounds.symmetric(1.0))
        mean = np.array([0.3, -0.2])
        cov = np.array([[0.2, 0.05], [0.05, 0.1]])
        u_belief, xu_cov = moments_of_action(policy, GaussianBelief(mean, cov))

        rng = np.random.default_rng(1)
        xs = rng.multivariate_normal(mean, cov, size=400_000)
        us = np.sin(xs @ policy.weights.T + policy.offset)
        assert u_belief.mean[0] == pytest.approx(us.mean(), abs=5e-3)
        assert u_belief.cov[0, 0] == pytest.approx(us.var(), abs=5e-3)
        sample_cross = ((xs - xs.mean(axis=0)) * (us - us.mean())).mean(axis=0)
        np.testing.assert_allclose(xu_cov[:, 0], sample_cross, atol=5e-3)

    def test_rbf_moments_match_monte_carlo(self):
        """RBF方策のスクワッシング前の平均・分散がモンテカルロと一致するか"""
        policy = _rbf_policy(seed=4)
        mean = np.array([0.1, -0.3])
        cov = np.array([[0.3, 0.0], [0.0, 0.2]])
        v_mean, v_cov, _ = policy.raw_moments(policy.theta, mean, cov)

        rng = np.random.default_rng(2)
        xs = rng.multivariate_normal(mean, cov, size=400_000)
        diff = (xs[:, None, :] - policy.centers[None, :, :]) / policy.lengthscales
        vs = np.exp(-0.5 * np.sum(diff ** 2, axis=-1)) @ policy.weights
        assert float(v_mean[0]) == pytest.approx(vs[:, 0].mean(), abs=5e-3)
        assert float(v_cov[0, 0]) == pytest.approx(vs[:, 0].var(), abs=5e-3)

    @pytest.mark.parametrize("variant", ["linear", "rbf"])
    def test_moment_gradient_matches_finite_differences(self, variant):
        """制御モーメントのθについての勾配が中心差分と一致するか"""
        if variant == "rbf":
            policy = _rbf_policy(seed=3, n_basis=4)
        else:
            policy = LinearPolicy(np.array([[0.6, -0.4]]), np.array([0.2]), ControlBounds.symmetric(2.0))
        state = GaussianBelief(np.array([0.2, -0.1]), np.array([[0.3, 0.05], [0.05, 0.2]]))

        def summary(u_belief, xu_cov):
            return float(np.sum(u_belief.mean) + np.sum(u_belief.cov) + np.sum(xu_cov))

        def traced(theta):
            u_mean, u_cov, xu_cov = policy.control_moments(
                theta, jnp.asarray(state.mean), jnp.asarray(state.cov)
            )
            return jnp.sum(u_mean) + jnp.sum(u_cov) + jnp.sum(xu_cov)

        theta = policy.theta
        grad = np.asarray(jax.grad(traced)(jnp.asarray(theta)))
        h = 1e-6
        for i in range(theta.size):
            step = np.zeros_like(theta)
            step[i] = h
            plus = summary(*moments_of_action(policy.with_theta(theta + step), state))
            minus = summary(*moments_of_action(policy.with_theta(theta - step), state))
            assert grad[i] == pytest.approx((plus - minus) / (2 * h), rel=1e-4, abs=1e-7)

    def test_theta_round_trip(self):
        """with_thetaでθが保存されるか"""
        policy = _rbf_policy()
        theta = policy.theta + 0.1
        np.testing.assert_array_equal(policy.with_theta(theta).theta, theta)

    def test_theta_size_checked(self):
        """θの長さが違えば拒否されるか"""
        with pytest.raises(ContractViolationError):
            _rbf_policy().with_theta(np.zeros(3))

    def test_rbf_lengthscale_bounds(self):
        """RBFの長さスケールだけ下限つきになるか"""
        policy = _rbf_policy(n_basis=3)
        bounds = policy.parameter_bounds()
        assert len(bounds) == policy.theta.size
        assert bounds[6] == (MIN_LENGTHSCALE, None)
        assert bounds[0] == (None, None)

    def test_rbf_initialization_is_seeded(self):
        """同じ乱数シードで同じ初期方策になるか"""
        np.testing.assert_array_equal(_rbf_policy(seed=9).theta, _rbf_policy(seed=9).theta)
        assert _rbf_policy(seed=9).n_basis == 6

    def test_linear_initialization_shapes(self):
        """線形方策の初期化の形"""
        policy = initialize_linear_policy(ControlBounds.symmetric([1.0, 2.0]), 3, np.random.default_rng(0))
        assert policy.weights.shape == (2, 3)
        np.testing.assert_array_equal(policy.offset, np.zeros(2))

    def test_linear_shape_mismatch(self):
        """重みと制御次元が合わなければ拒否されるか"""
        with pytest.raises(ContractViolationError):
            LinearPolicy(np.zeros((2, 3)), np.zeros(2), ControlBounds.symmetric(1.0))

    def test_policy_checkpoint_round_trip(self, tmp_path):
        """保存・読み込みでθと制御範囲が一致するか"""
        policy = _rbf_policy()
        restored = load_policy(save_policy(policy, tmp_path / "policy.json"))

        assert isinstance(restored, RBFPolicy)
        np.testing.assert_array_equal(restored.theta, policy.theta)
        np.testing.assert_array_equal(restored.bounds.upper, policy.bounds.upper)
