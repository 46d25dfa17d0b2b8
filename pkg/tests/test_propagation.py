"""
Tests for Propagation - モーメントマッチングによる信念伝播

1ステップの平均・分散は、GP事後分布をガウス入力でサンプリングした
モンテカルロ推定（事後分散の期待値を加えたもの）と比べる。
"""

import numpy as np
import pytest

import core  # noqa: F401
from core.belief import GaussianBelief, JointStateControl
from core.controllers import ControlBounds, LinearPolicy, initialize_rbf_policy
from core.errors import ContractViolationError
from core.gp_dynamics import (
    DynamicsModel,
    KernelHyperparams,
    RegressionDataset,
    fit_hyperparameters,
    predict_point,
)
from core.propagation import join_state_control, moment_match_step, rollout_beliefs
from environments.linear_cars import LinearCars


def _scalar_model() -> DynamicsModel:
    rng = np.random.default_rng(0)
    x = rng.uniform(-2.0, 2.0, size=(30, 1))
    u = rng.uniform(-1.0, 1.0, size=(30, 1))
    targets = 0.3 * np.sin(x) + 0.1 * u
    return DynamicsModel.with_default_hyperparameters(RegressionDataset(np.hstack([x, u]), targets))


def _planar_model() -> DynamicsModel:
    rng = np.random.default_rng(1)
    x = rng.uniform(-2.0, 2.0, size=(40, 2))
    u = rng.uniform(-1.0, 1.0, size=(40, 1))
    targets = np.column_stack([0.3 * np.sin(x[:, 0]) + 0.1 * u[:, 0], 0.2 * np.cos(x[:, 1]) * x[:, 0]])
    return DynamicsModel.with_default_hyperparameters(RegressionDataset(np.hstack([x, u]), targets))


def _posterior_samples(model: DynamicsModel, z: np.ndarray, output: int = 0):
    """サンプル入力ごとのGP事後平均と潜在分散（元の単位）"""
    gp = model.per_output[output]
    norm = model.normalizer
    x_train = norm.inputs(model.dataset.inputs)
    zn = norm.inputs(z)
    diff = (zn[:, None, :] - x_train[None, :, :]) / gp.hyper.lengthscales
    k = gp.hyper.signal_variance * np.exp(-0.5 * np.sum(diff ** 2, axis=-1))
    mean = k @ gp.alpha
    latent = gp.hyper.signal_variance - np.sum((k @ gp.inv_gram) * k, axis=1)
    scale = norm.target_std[output]
    return mean * scale, latent * scale ** 2, gp.hyper.noise_variance * scale ** 2


class TestMomentMatching:
    """1ステップのモーメントマッチングのテスト"""

    def test_mean_and_variance_match_monte_carlo(self):
        """次状態の平均・分散がモンテカルロ推定と一致するか"""
        model = _scalar_model()
        mean = np.array([0.4, -0.2])
        cov = np.array([[0.15, 0.03], [0.03, 0.1]])
        joint = JointStateControl(GaussianBelief(mean, cov), cov[:1, 1:])

        predicted = moment_match_step(model, joint)

        rng = np.random.default_rng(5)
        z = rng.multivariate_normal(mean, cov, size=100_000)
        f_mean, latent, noise = _posterior_samples(model, z)
        y = z[:, 0] + f_mean
        mc_mean = y.mean()
        mc_var = y.var() + latent.mean() + noise

        assert predicted.mean[0] == pytest.approx(mc_mean, abs=5e-3)
        assert predicted.cov[0, 0] == pytest.approx(mc_var, rel=2e-2)

    def test_point_input_reduces_to_posterior_mean(self):
        """入力分散ゼロなら状態 + 事後平均になるか"""
        model = _scalar_model()
        z = np.array([0.5, 0.3])
        joint = JointStateControl(GaussianBelief(z, np.zeros((2, 2))), np.zeros((1, 1)))

        predicted = moment_match_step(model, joint)
        f_mean, latent, noise = _posterior_samples(model, z[None, :])

        assert predicted.mean[0] == pytest.approx(z[0] + f_mean[0], abs=1e-8)
        assert predicted.cov[0, 0] == pytest.approx(latent[0] + noise, rel=1e-6)

    def test_two_outputs_match_monte_carlo(self):
        """2出力でも平均と共分散（出力間の相関を含む）がモンテカルロ推定と一致するか"""
        model = _planar_model()
        mean = np.array([0.3, -0.4, 0.1])
        cov = np.array([[0.2, 0.05, 0.02], [0.05, 0.15, -0.01], [0.02, -0.01, 0.1]])
        joint = JointStateControl(GaussianBelief(mean, cov), cov[:2, 2:])

        predicted = moment_match_step(model, joint)

        rng = np.random.default_rng(6)
        z = rng.multivariate_normal(mean, cov, size=100_000)
        columns, extra = [], []
        for d in range(2):
            f_mean, latent, noise = _posterior_samples(model, z, output=d)
            columns.append(z[:, d] + f_mean)
            extra.append(latent.mean() + noise)
        y = np.column_stack(columns)
        mc_cov = np.cov(y, rowvar=False, bias=True) + np.diag(extra)

        np.testing.assert_allclose(predicted.mean, y.mean(axis=0), atol=1e-2)
        error = np.linalg.norm(predicted.cov - mc_cov) / np.linalg.norm(mc_cov)
        assert error <= 5e-2

    def test_vanishing_input_covariance_approaches_point_prediction(self):
        """入力共分散 εI を小さくすると点入力の予測との差が単調に縮むか"""
        model = _scalar_model()
        z = np.array([0.5, 0.3])
        point = predict_point(model, z)

        gaps = []
        for eps in (1e-2, 1e-4, 1e-6):
            joint = JointStateControl(GaussianBelief(z, eps * np.eye(2)), np.zeros((1, 1)))
            predicted = moment_match_step(model, joint)
            gaps.append(
                abs(predicted.mean[0] - (z[0] + point.mean[0]))
                + abs(predicted.cov[0, 0] - point.cov[0, 0])
            )
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 1e-5

    def test_joint_dimension_checked(self):
        """同時分布の次元がモデル入力次元と違えば拒否されるか"""
        model = _scalar_model()
        joint = JointStateControl(GaussianBelief(np.zeros(3), np.eye(3)), np.zeros((1, 2)))
        with pytest.raises(ContractViolationError):
            moment_match_step(model, joint)

    def test_join_state_control_stacks_moments(self):
        """(x, u) の同時分布の左上ブロックが状態分布のままか"""
        policy = LinearPolicy(np.array([[0.5]]), np.array([0.0]), ControlBounds.symmetric(1.0))
        state = GaussianBelief(np.array([0.2]), np.array([[0.05]]))
        joint = join_state_control(state, policy)

        assert joint.state_dim == 1
        assert joint.control_dim == 1
        assert joint.belief.cov[0, 0] == pytest.approx(0.05)
        assert joint.cross_cov[0, 0] == pytest.approx(joint.belief.cov[0, 1])


class TestRollout:
    """複数ステップ伝播のテスト"""

    def _linear_cars_model(self) -> DynamicsModel:
        env = LinearCars()
        rng = np.random.default_rng(3)
        datasets = []
        for _ in range(3):
            states = [env.reset(rng)]
            controls = []
            for _ in range(20):
                u = env.spec.control_bounds.sample(rng)
                obs, _, _ = env.step(u)
                states.append(obs)
                controls.append(u)
            datasets.append(RegressionDataset.from_episode(np.array(states), np.array(controls)))
        return DynamicsModel.with_default_hyperparameters(RegressionDataset.concat(datasets))

    def test_traces_finite_on_linear_cars(self):
        """LinearCarsのモデルで全ステップの共分散が有限・対称か"""
        model = self._linear_cars_model()
        policy = LinearPolicy(
            np.array([[-0.2, -0.5, 0.0, 0.0]]), np.array([0.0]), ControlBounds.symmetric(2.0)
        )
        init = GaussianBelief(np.array([-5.0, 1.0, -5.0, 1.0]), 0.1 * np.eye(4))
        traj = rollout_beliefs(model, policy, init, horizon=25)

        assert traj.means.shape == (25, 4)
        assert traj.covs.shape == (25, 4, 4)
        traces = np.trace(traj.covs, axis1=1, axis2=2)
        assert np.all(np.isfinite(traces))
        assert np.all(traces < 1e6)
        np.testing.assert_allclose(traj.covs, np.swapaxes(traj.covs, 1, 2), atol=1e-12)

    def test_linear_system_matches_linear_gaussian_prediction(self):
        """線形系を学習したモデルと線形方策で、10ステップの平均が厳密な線形ガウス予測と1e-3以内で一致するか"""
        a, b, gain = -0.1, 0.2, -0.5
        states, controls = np.meshgrid(np.linspace(-1.5, 2.0, 12), np.linspace(-1.5, 1.0, 12))
        inputs = np.column_stack([states.ravel(), controls.ravel()])
        noise = 1e-4 * np.random.default_rng(0).normal(size=inputs.shape[0])
        targets = a * inputs[:, 0] + b * inputs[:, 1] + noise
        model = fit_hyperparameters(
            DynamicsModel.with_default_hyperparameters(RegressionDataset(inputs, targets[:, None])),
            restarts=2,
            seed=0,
        )
        policy = LinearPolicy(np.array([[gain]]), np.array([0.0]), ControlBounds.symmetric(100.0))

        traj = rollout_beliefs(model, policy, GaussianBelief(np.array([1.0]), np.array([[0.01]])), horizon=10)

        expected = (1.0 + a + b * gain) ** np.arange(1, 11)
        np.testing.assert_allclose(traj.means[:, 0], expected, atol=1e-3)

    def test_beliefs_are_positive_semidefinite(self):
        """RBF方策でも各ステップの共分散が半正定値か"""
        model = _scalar_model()
        policy = initialize_rbf_policy(
            ControlBounds.symmetric(1.0), 5, np.zeros(1), 0.1 * np.eye(1), np.random.default_rng(0)
        )
        traj = rollout_beliefs(model, policy, GaussianBelief(np.zeros(1), 0.05 * np.eye(1)), horizon=10)

        for belief in traj.beliefs:
            assert np.linalg.eigvalsh(belief.cov).min() >= -1e-12

    def test_horizon_must_be_positive(self):
        """H < 1 は拒否されるか"""
        model = _scalar_model()
        policy = LinearPolicy(np.array([[0.1]]), np.array([0.0]), ControlBounds.symmetric(1.0))
        with pytest.raises(ContractViolationError):
            rollout_beliefs(model, policy, GaussianBelief(np.zeros(1), np.eye(1)), horizon=0)

    def test_policy_dimension_checked(self):
        """方策とモデルの状態次元が違えば拒否されるか"""
        model = _scalar_model()
        policy = LinearPolicy(np.array([[0.1, 0.1]]), np.array([0.0]), ControlBounds.symmetric(1.0))
        with pytest.raises(ContractViolationError):
            rollout_beliefs(model, policy, GaussianBelief(np.zeros(2), np.eye(2)), horizon=3)


class TestNormalization:
    """データ正規化のテスト"""

    def test_normalization_is_reparameterization(self):
        """正規化ありのモデルと、同等なハイパーパラメータの正規化なしモデルで2ステップ予測が一致するか"""
        normalized = _scalar_model()
        scale_in = normalized.normalizer.input_std
        scale_out = normalized.normalizer.target_std
        raw_hypers = [
            KernelHyperparams(
                hyper.lengthscales * scale_in,
                hyper.signal_variance * scale_out[d] ** 2,
                hyper.noise_variance * scale_out[d] ** 2,
            )
            for d, hyper in enumerate(normalized.hypers)
        ]
        raw = DynamicsModel(normalized.dataset, raw_hypers, normalize=False)

        policy = LinearPolicy(np.array([[-0.3]]), np.array([0.1]), ControlBounds.symmetric(1.0))
        init = GaussianBelief(np.array([0.4]), np.array([[0.05]]))
        a = rollout_beliefs(normalized, policy, init, horizon=2)
        b = rollout_beliefs(raw, policy, init, horizon=2)

        np.testing.assert_allclose(a.means, b.means, atol=1e-6)
        np.testing.assert_allclose(a.covs, b.covs, atol=1e-6)
        point_a = predict_point(normalized, [0.2, -0.4])
        point_b = predict_point(raw, [0.2, -0.4])
        assert point_a.mean[0] == pytest.approx(point_b.mean[0], abs=1e-6)
        assert point_a.cov[0, 0] == pytest.approx(point_b.cov[0, 0], abs=1e-6)
