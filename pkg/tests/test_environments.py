"""
Tests for Environments - シミュレータの遷移・報酬・終端・観測
"""

import numpy as np
import pytest

import core  # noqa: F401
from core.errors import ContractViolationError
from environments import CartPole, LinearCars, MountainCar, default_registry, make_pendulum_swingup
from environments.cartpole import ANGLE_THRESHOLD, cartpole_derivatives, cartpole_energy, cartpole_step
from environments.linear_cars import junction_constraint, linear_cars_step
from environments.mountain_car import GOAL_POSITION, mountain_car_reward, mountain_car_step
from environments.pendulum_swingup import pendulum_swingup_reward, pendulum_swingup_step


class TestLinearCars:
    """2台の車の環境のテスト"""

    def test_step_without_force(self):
        """u=0 なら位置だけが v·dt 進むか"""
        next_state = linear_cars_step([-5.0, 1.0, -5.0, 1.0], [0.0])
        np.testing.assert_allclose(next_state, [-4.9, 1.0, -4.9, 1.0])

    def test_force_accelerates_only_first_car(self):
        """力は車1の速度にだけ効くか"""
        next_state = linear_cars_step([0.0, 0.0, 0.0, 0.5], [2.0])
        np.testing.assert_allclose(next_state, [0.0, 0.2, 0.05, 0.5])

    def test_junction_safety(self):
        """両車が交差点内なら危険、片方が外なら安全"""
        spec = junction_constraint(1.0)
        assert not spec.is_safe([0.0, 1.0, 0.0, 1.0])
        assert spec.is_safe([5.0, 1.0, 0.0, 1.0])
        assert spec.is_safe([0.0, 1.0, -3.0, 1.0])

    def test_reward_is_first_car_position(self):
        """報酬が遷移後の車1の位置か"""
        env = LinearCars(observation_noise_std=0.0)
        env.reset(np.random.default_rng(0))
        before = env.state
        _, reward, terminal = env.step([0.0])
        assert reward == pytest.approx(before[0] + 0.1 * before[1])
        assert not terminal


class TestMountainCar:
    """マウンテンカーのテスト"""

    def test_flat_point_keeps_velocity(self):
        """位置 -π/6（傾きゼロ）で u=0 なら速度が変わらないか"""
        next_state = mountain_car_step([-np.pi / 6, 0.01], [0.0])
        assert next_state[1] == pytest.approx(0.01, abs=1e-12)

    def test_velocity_is_clipped(self):
        """速度が上限で止まるか"""
        next_state = mountain_car_step([-0.5, 0.0699], [1.0])
        assert next_state[1] <= 0.07

    def test_left_wall_stops_car(self):
        """左端に当たると速度が0になるか"""
        next_state = mountain_car_step([-1.2, -0.05], [-1.0])
        assert next_state[0] == -1.2
        assert next_state[1] == 0.0

    def test_goal_reward_and_terminal(self):
        """ゴール到達で+100と終端"""
        assert mountain_car_reward([0.0], [GOAL_POSITION, 0.0]) == pytest.approx(100.0)
        assert mountain_car_reward([1.0], [0.0, 0.0]) == pytest.approx(-0.1)
        assert MountainCar().terminal(np.array([0.5, 0.0]))

    def test_goal_requires_goal_velocity(self):
        """ゴール位置でも速度が goal_velocity 未満なら終端でも+100でもないか"""
        assert not MountainCar().terminal(np.array([0.5, -0.01]))
        assert mountain_car_reward([0.0], [0.5, -0.01]) == pytest.approx(0.0)
        strict = MountainCar(goal_velocity=0.02)
        assert not strict.terminal(np.array([0.5, 0.01]))
        assert strict.terminal(np.array([0.5, 0.03]))


class TestPendulumSwingup:
    """振り子のテスト"""

    def test_upright_reward_is_zero(self):
        """倒立・静止・無トルクで報酬0"""
        assert pendulum_swingup_reward([0.0, 0.0], [0.0]) == pytest.approx(0.0)
        assert pendulum_swingup_reward([2 * np.pi, 0.0], [0.0]) == pytest.approx(0.0, abs=1e-12)

    def test_upright_is_equilibrium(self):
        """倒立・静止は平衡点か"""
        np.testing.assert_allclose(pendulum_swingup_step([0.0, 0.0], [0.0]), [0.0, 0.0])

    def test_trig_observation(self):
        """観測が (cos φ, sin φ, φ̇) になり cos² + sin² = 1 か"""
        env = make_pendulum_swingup(observation_noise_std=0.0)
        assert env.spec.state_dim == 3
        obs = env.reset(np.random.default_rng(0))
        assert obs[0] ** 2 + obs[1] ** 2 == pytest.approx(1.0)
        obs, _, _ = env.step([1.0])
        assert obs[0] ** 2 + obs[1] ** 2 == pytest.approx(1.0)
        assert env.state.shape == (2,)

    def test_trig_initial_moments(self):
        """初期分布の (cos, sin) の平均がガウス角度の厳密値か"""
        env = make_pendulum_swingup()
        assert env.spec.init_mean[0] == pytest.approx(-np.exp(-0.005))
        assert env.spec.init_mean[1] == pytest.approx(0.0, abs=1e-12)


class TestCartPole:
    """倒立振子のテスト"""

    def test_equilibrium_unchanged(self):
        """直立・静止・無外力なら状態が変わらないか"""
        np.testing.assert_allclose(cartpole_step(np.zeros(4), [0.0]), np.zeros(4), atol=1e-15)

    def test_energy_conserved_without_force(self):
        """無外力で100ステップ後もエネルギーが保存されるか"""
        state = np.array([0.0, 0.0, 0.05, 0.0])
        initial = cartpole_energy(state)
        for _ in range(100):
            state = cartpole_step(state, [0.0])
        assert cartpole_energy(state) == pytest.approx(initial, abs=1e-4)

    def test_rk4_matches_fine_euler(self):
        """RK4の1ステップが細かいオイラー積分と一致するか"""
        state = np.array([0.1, -0.2, 0.05, 0.3])
        rk4 = cartpole_step(state, [3.0])

        euler = state.copy()
        n = 10_000
        for _ in range(n):
            euler = euler + (0.02 / n) * cartpole_derivatives(euler, 3.0)
        np.testing.assert_allclose(rk4, euler, atol=1e-5)

    def test_terminal_on_angle_only(self):
        """角度が閾値を超えたときだけ終端、報酬は生存ステップで1"""
        env = CartPole()
        assert env.terminal(np.array([0.0, 0.0, ANGLE_THRESHOLD + 1e-3, 0.0]))
        assert not env.terminal(np.array([50.0, 0.0, 0.0, 0.0]))
        assert env.reward(None, None, np.zeros(4)) == 1.0


class TestEnvironmentAPI:
    """共通APIのテスト"""

    def test_noise_only_on_observation(self):
        """観測ノイズは観測にだけ入り、潜在状態には入らないか"""
        env = LinearCars(observation_noise_std=0.5)
        obs = env.reset(np.random.default_rng(1))
        assert not np.allclose(obs, env.state)
        latent = env.state
        env.step([0.0])
        np.testing.assert_allclose(env.state, linear_cars_step(latent, [0.0]))

    def test_out_of_range_control_clipped(self):
        """範囲外の制御がクリップされるか"""
        env = LinearCars(observation_noise_std=0.0)
        env.reset(np.random.default_rng(0))
        before = env.state
        env.step([10.0])
        assert env.state[1] == pytest.approx(before[1] + 0.1 * 2.0)

    def test_step_before_reset_rejected(self):
        """reset前のstepは拒否されるか"""
        with pytest.raises(ContractViolationError):
            MountainCar().step([0.0])

    def test_same_rng_same_initial_state(self):
        """同じ乱数シードで同じ初期状態になるか"""
        a = CartPole().reset(np.random.default_rng(5))
        b = CartPole().reset(np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_registry(self):
        """レジストリから名前で作れて、未知の名前は拒否されるか"""
        assert default_registry.list() == ["cartpole", "linear_cars", "mountain_car", "pendulum_swingup"]
        assert default_registry.create("mountain_car").spec.state_dim == 2
        assert default_registry.create("pendulum_swingup").spec.state_dim == 3
        with pytest.raises(ContractViolationError):
            default_registry.create("acrobot")
