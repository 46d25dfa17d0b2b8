"""
Tests for GP Dynamics - 遷移モデルの学習と予測

カーネル・NLML は scipy の密な多変量正規分布を参照値として確認する。
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import gamma, multivariate_normal

import core  # noqa: F401  (x64 を有効化)
from core.checkpoint import load_model, save_model
from core.errors import ContractViolationError, IllConditionedModelError
from core.gp_dynamics import (
    DynamicsModel,
    GammaPrior,
    HyperPrior,
    KernelHyperparams,
    RegressionDataset,
    _LogSpaceObjective,
    fit_hyperparameters,
    kernel_eval,
    negative_log_marginal_likelihood,
    predict_point,
)
from core.linalg import JITTER_LADDER, stable_cholesky


def _sine_dataset(n: int = 30, seed: int = 0) -> RegressionDataset:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=(n, 1))
    u = rng.uniform(-1.0, 1.0, size=(n, 1))
    targets = np.sin(x) + 0.5 * u + 0.01 * rng.normal(size=(n, 1))
    return RegressionDataset(np.hstack([x, u]), targets)


finite = st.floats(min_value=-5.0, max_value=5.0, allow_nan=False)


class TestKernel:
    """SE-ARDカーネルのテスト"""

    def test_same_point_equals_signal_variance(self):
        """同じ点での値が信号分散に一致するか"""
        hyper = KernelHyperparams(np.array([0.5, 2.0]), 1.7, 0.01)
        assert kernel_eval([0.3, -1.0], [0.3, -1.0], hyper) == pytest.approx(1.7)

    def test_scalar_closed_form(self):
        """a=[0], b=[2], ℓ=1, σ_f²=1 で exp(-2) になるか"""
        hyper = KernelHyperparams(np.array([1.0]), 1.0, 0.01)
        assert kernel_eval([0.0], [2.0], hyper) == pytest.approx(np.exp(-2.0))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
    def test_symmetric_and_bounded(self, a, b):
        """k(a, b) = k(b, a) かつ 0 ≤ k ≤ σ_f²"""
        hyper = KernelHyperparams(np.array([0.7, 1.0, 3.0]), 2.0, 0.01)
        k_ab = kernel_eval(a, b, hyper)
        assert k_ab == pytest.approx(kernel_eval(b, a, hyper))
        assert 0.0 <= k_ab <= 2.0

    def test_dimension_mismatch_rejected(self):
        """次元不一致はContractViolationErrorになるか"""
        hyper = KernelHyperparams(np.array([1.0, 1.0]), 1.0, 0.01)
        with pytest.raises(ContractViolationError):
            kernel_eval([0.0, 1.0, 2.0], [0.0, 1.0, 2.0], hyper)

    def test_non_finite_input_rejected(self):
        """非有限入力は拒否されるか"""
        hyper = KernelHyperparams(np.array([1.0]), 1.0, 0.01)
        with pytest.raises(ContractViolationError):
            kernel_eval([np.nan], [0.0], hyper)


class TestRegressionDataset:
    """データセット構築のテスト"""

    def test_from_episode_builds_delta_targets(self):
        """ターゲットが状態差分になるか"""
        states = np.array([[0.0, 1.0], [0.5, 1.5], [1.5, 1.0]])
        controls = np.array([[0.1], [-0.2]])
        dataset = RegressionDataset.from_episode(states, controls)

        assert dataset.n_points == 2
        assert dataset.input_dim == 3
        np.testing.assert_allclose(dataset.inputs[1], [0.5, 1.5, -0.2])
        np.testing.assert_allclose(dataset.targets, [[0.5, 0.5], [1.0, -0.5]])

    def test_row_count_mismatch_rejected(self):
        """状態数と制御数が合わないエピソードは拒否されるか"""
        with pytest.raises(ContractViolationError):
            RegressionDataset.from_episode(np.zeros((3, 2)), np.zeros((3, 1)))

    def test_concat_stacks_rows(self):
        """concatで行が積み上がるか"""
        a = _sine_dataset(5, seed=1)
        b = _sine_dataset(7, seed=2)
        assert RegressionDataset.concat([a, b]).n_points == 12


class TestMarginalLikelihood:
    """NLMLのテスト"""

    def test_two_point_value_matches_dense_logpdf(self):
        """2点データでNLMLが密な多変量正規の対数密度と一致するか"""
        inputs = np.array([[0.1, -0.4], [0.9, 0.3]])
        targets = np.array([[0.2], [-0.5]])
        hyper = KernelHyperparams(np.array([0.7, 1.3]), 1.5, 0.1)
        model = DynamicsModel(RegressionDataset(inputs, targets), [hyper], normalize=False)

        gram = np.array([[kernel_eval(a, b, hyper) for b in inputs] for a in inputs]) + 0.1 * np.eye(2)
        expected = -multivariate_normal(mean=np.zeros(2), cov=gram).logpdf(targets[:, 0])

        assert negative_log_marginal_likelihood(model, 0) == pytest.approx(expected, rel=1e-9)

    def test_prior_subtracts_log_density(self):
        """事前分布を入れるとその対数密度だけNLMLが増減するか"""
        dataset = _sine_dataset(10)
        model = DynamicsModel.with_default_hyperparameters(dataset, normalize=False)
        prior = HyperPrior(signal_variance=GammaPrior(2.0, 1.0))
        hyper = model.hypers[0]

        plain = negative_log_marginal_likelihood(model, 0)
        with_prior = negative_log_marginal_likelihood(model, 0, priors=prior)
        log_p = gamma(a=2.0, scale=1.0).logpdf(hyper.signal_variance)

        assert with_prior == pytest.approx(plain - log_p, rel=1e-9)

    def test_gradient_matches_finite_differences(self):
        """対数空間のNLML勾配が10通りの設定で中心差分と一致するか"""
        dataset = _sine_dataset(15)
        objective = _LogSpaceObjective(dataset.inputs, dataset.targets[:, 0], None, None)
        rng = np.random.default_rng(11)
        h = 1e-5
        for _ in range(10):
            params = np.concatenate(
                [rng.uniform(-1.0, 1.0, size=3), rng.uniform(-5.0, -1.0, size=1)]
            )
            _, grad = objective(params)
            for i in range(params.size):
                step = np.zeros_like(params)
                step[i] = h
                fd = (objective(params + step)[0] - objective(params - step)[0]) / (2 * h)
                assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_output_dim_out_of_range(self):
        """範囲外の出力次元は拒否されるか"""
        model = DynamicsModel.with_default_hyperparameters(_sine_dataset(10))
        with pytest.raises(ContractViolationError):
            negative_log_marginal_likelihood(model, 1)


class TestFitting:
    """ハイパーパラメータ学習のテスト"""

    def test_default_hyperparameters(self):
        """初期値がターゲット分散・ノイズ比0.01になるか"""
        dataset = _sine_dataset(20)
        model = DynamicsModel.with_default_hyperparameters(dataset, normalize=True)
        hyper = model.hypers[0]

        assert hyper.noise_variance == pytest.approx(0.01 * hyper.signal_variance)
        np.testing.assert_allclose(hyper.lengthscales, np.ones(2), rtol=1e-9)

    def test_fit_never_worse_than_initial(self):
        """学習後のNLMLが初期値以下になるか"""
        dataset = _sine_dataset(25)
        initial = DynamicsModel.with_default_hyperparameters(dataset)
        fitted = fit_hyperparameters(initial, restarts=2, seed=3)

        assert negative_log_marginal_likelihood(fitted, 0) <= negative_log_marginal_likelihood(initial, 0) + 1e-9

    def test_recovers_generating_lengthscale(self):
        """既知のGP（ℓ=1, σ_f²=1, σ_n²=0.01, 50点）から長さスケールを×/÷2以内で復元するか"""
        rng = np.random.default_rng(2)
        x = rng.uniform(-4.0, 4.0, size=(50, 1))
        truth = KernelHyperparams(np.array([1.0]), 1.0, 0.01)
        gram = np.array([[kernel_eval(a, b, truth) for b in x] for a in x])
        y = rng.multivariate_normal(np.zeros(50), gram + 0.01 * np.eye(50))

        dataset = RegressionDataset(x, y[:, None])
        fitted = fit_hyperparameters(
            DynamicsModel.with_default_hyperparameters(dataset, normalize=False), restarts=3, seed=0
        )
        lengthscale = fitted.hypers[0].lengthscales[0]
        assert 0.5 <= lengthscale <= 2.0

    def test_fixed_noise_is_kept(self):
        """fixed_noise指定時はノイズ分散が固定されるか"""
        fitted = fit_hyperparameters(
            DynamicsModel.with_default_hyperparameters(_sine_dataset(20)),
            restarts=1,
            fixed_noise=0.05,
        )
        assert fitted.hypers[0].noise_variance == 0.05

    def test_single_point_rejected(self):
        """1点のデータでは学習しないか"""
        dataset = RegressionDataset([[0.0, 0.0]], [[1.0]])
        with pytest.raises(ContractViolationError):
            fit_hyperparameters(DynamicsModel.with_default_hyperparameters(dataset))

    def test_predict_point_interpolates_training_data(self):
        """学習点付近の予測平均がデータに近く、遠方では分散が大きいか"""
        dataset = _sine_dataset(40)
        model = fit_hyperparameters(DynamicsModel.with_default_hyperparameters(dataset), restarts=1)

        near = predict_point(model, dataset.inputs[0])
        far = predict_point(model, [25.0, 25.0])

        assert near.mean[0] == pytest.approx(dataset.targets[0, 0], abs=0.1)
        assert far.cov[0, 0] > near.cov[0, 0]

    def test_predict_point_reverts_to_prior_far_away(self):
        """全データから20長さスケール以上離れると平均0・分散 σ_f² + σ_n² に戻るか"""
        dataset = _sine_dataset(20)
        hyper = KernelHyperparams(np.array([0.5, 0.5]), 1.5, 0.01)
        model = DynamicsModel(dataset, [hyper], normalize=False)

        far = predict_point(model, [15.0, 15.0])
        assert far.mean[0] == pytest.approx(0.0, abs=1e-6)
        assert far.cov[0, 0] == pytest.approx(1.5 + 0.01, abs=1e-6)

    def test_predict_point_invariant_to_row_order(self):
        """学習データの行を並べ替えても予測が1e-10以内で一致するか"""
        dataset = _sine_dataset(25)
        hyper = KernelHyperparams(np.array([0.8, 1.2]), 0.7, 0.02)
        order = np.random.default_rng(4).permutation(dataset.n_points)
        shuffled = RegressionDataset(dataset.inputs[order], dataset.targets[order])

        model = DynamicsModel(dataset, [hyper])
        permuted = DynamicsModel(shuffled, [hyper])
        for z in ([0.3, -0.2], [1.7, 0.9], [-3.0, 2.0]):
            a, b = predict_point(model, z), predict_point(permuted, z)
            assert a.mean[0] == pytest.approx(b.mean[0], abs=1e-10)
            assert a.cov[0, 0] == pytest.approx(b.cov[0, 0], abs=1e-10)

    def test_predict_point_shape_checked(self):
        """入力次元が違えば拒否されるか"""
        model = DynamicsModel.with_default_hyperparameters(_sine_dataset(10))
        with pytest.raises(ContractViolationError):
            predict_point(model, [0.0, 0.0, 0.0])

    def test_checkpoint_round_trip(self, tmp_path):
        """保存・読み込みでハイパーパラメータとデータが一致するか"""
        model = DynamicsModel.with_default_hyperparameters(_sine_dataset(12))
        path = save_model(model, tmp_path / "model.json")
        restored = load_model(path)

        np.testing.assert_array_equal(restored.dataset.inputs, model.dataset.inputs)
        assert restored.hypers[0].signal_variance == model.hypers[0].signal_variance
        np.testing.assert_array_equal(restored.hypers[0].lengthscales, model.hypers[0].lengthscales)


class TestStableCholesky:
    """ジッター付きCholeskyのテスト"""

    def test_positive_definite_needs_no_jitter(self):
        """正定値行列ではジッターを使わないか"""
        matrix = np.array([[2.0, 0.5], [0.5, 1.0]])
        chol, jitter = stable_cholesky(matrix)
        assert jitter == 0.0
        np.testing.assert_allclose(chol @ chol.T, matrix)

    def test_singular_matrix_escalates(self):
        """特異行列ではジッターを足して分解できるか"""
        matrix = np.ones((3, 3))
        chol, jitter = stable_cholesky(matrix)
        assert jitter > 0.0
        np.testing.assert_allclose(chol @ chol.T, matrix, atol=1e-5)

    def test_negative_definite_fails_with_levels(self):
        """全段階で失敗したら試したジッター段階つきで例外になるか"""
        with pytest.raises(IllConditionedModelError) as excinfo:
            stable_cholesky(-np.eye(3))
        assert tuple(excinfo.value.jitter_levels) == JITTER_LADDER
