"""
GP Dynamics - ガウス過程による遷移関数の学習

機能:
- (状態, 制御) → 状態差分 の回帰データセット管理
- 出力次元ごとに独立なSE-ARDカーネルGP
- 負の対数周辺尤度（Gammaハイパー事前分布つき）と勾配
- L-BFGS-Bによるハイパーパラメータ推定（対数空間、リスタートつき）
- 点入力での予測
"""

from typing import Dict, List, NamedTuple, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import structlog
from jax.scipy.special import gammaln
from scipy.linalg import cho_solve as np_cho_solve
from scipy.optimize import minimize

from core.belief import GaussianBelief
from core.errors import ContractViolationError, IllConditionedModelError
from core.linalg import JITTER_LADDER, cho_solve, jax_cholesky, stable_cholesky

logger = structlog.get_logger()

NOISE_FLOOR_RATIO = 1e-6
RESTART_SIGMA = 0.5
LOG_2PI = float(np.log(2.0 * np.pi))
_MIN_STD = 1e-12
_PENALTY = 1e10


class RegressionDataset:
    """遷移ペアの入力 [N, n+m] と状態差分ターゲット [N, n]"""

    def __init__(self, inputs, targets):
        inputs = np.array(inputs, dtype=float, ndmin=2)
        targets = np.array(targets, dtype=float, ndmin=2)

        if inputs.shape[0] != targets.shape[0]:
            raise ContractViolationError(
                f"inputs and targets row counts differ: {inputs.shape[0]} != {targets.shape[0]}"
            )
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
            raise ContractViolationError("dataset contains non-finite values")

        self.inputs = inputs
        self.targets = targets

    @classmethod
    def from_episode(cls, states, controls) -> "RegressionDataset":
        """
        記録済みエピソードからデータセットを作る

        Args:
            states: 状態列 [T+1, n]
            controls: 制御列 [T, m]
        """
        states = np.asarray(states, dtype=float)
        controls = np.asarray(controls, dtype=float).reshape(len(controls), -1)
        if states.shape[0] != controls.shape[0] + 1:
            raise ContractViolationError(
                f"episode has {states.shape[0]} states for {controls.shape[0]} controls"
            )
        inputs = np.hstack([states[:-1], controls])
        targets = np.diff(states, axis=0)
        return cls(inputs, targets)

    @classmethod
    def concat(cls, datasets: Sequence["RegressionDataset"]) -> "RegressionDataset":
        datasets = [d for d in datasets if d.n_points > 0]
        if not datasets:
            raise ContractViolationError("cannot concatenate empty datasets")
        return cls(
            np.vstack([d.inputs for d in datasets]),
            np.vstack([d.targets for d in datasets]),
        )

    @property
    def n_points(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.targets.shape[1])


class KernelHyperparams(NamedTuple):
    """SE-ARDカーネルのハイパーパラメータ（1出力次元分）"""

    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float

    def validate(self) -> "KernelHyperparams":
        ell = np.asarray(self.lengthscales, dtype=float)
        if not np.all(np.isfinite(ell)) or np.any(ell <= 0.0):
            raise ContractViolationError("lengthscales must be finite and > 0")
        if not self.signal_variance > 0.0:
            raise ContractViolationError("signal_variance must be > 0")
        floor = NOISE_FLOOR_RATIO * self.signal_variance
        if not self.noise_variance >= floor * (1.0 - 1e-12):
            raise ContractViolationError(
                f"noise_variance must be >= {floor:.3e} (noise floor)"
            )
        return KernelHyperparams(ell, float(self.signal_variance), float(self.noise_variance))


class GammaPrior(NamedTuple):
    """Gamma(shape, rate) 事前分布"""

    shape: float
    rate: float

    def validate(self) -> "GammaPrior":
        if not (self.shape > 0 and self.rate > 0):
            raise ContractViolationError("gamma prior shape and rate must be > 0")
        return self

    def log_density(self, x):
        return (
            self.shape * jnp.log(self.rate)
            - gammaln(self.shape)
            + (self.shape - 1.0) * jnp.log(x)
            - self.rate * x
        )


class HyperPrior(NamedTuple):
    """ハイパーパラメータごとの任意のGamma事前分布"""

    lengthscales: Optional[GammaPrior] = None
    signal_variance: Optional[GammaPrior] = None
    noise_variance: Optional[GammaPrior] = None

    def log_density(self, lengthscales, signal_variance, noise_variance):
        total = jnp.asarray(0.0)
        if self.lengthscales is not None:
            total = total + jnp.sum(self.lengthscales.log_density(lengthscales))
        if self.signal_variance is not None:
            total = total + self.signal_variance.log_density(signal_variance)
        if self.noise_variance is not None:
            total = total + self.noise_variance.log_density(noise_variance)
        return total


class Normalizer(NamedTuple):
    """入力は平均・標準偏差で標準化、ターゲット（差分）は標準偏差のみでスケール"""

    input_mean: np.ndarray
    input_std: np.ndarray
    target_std: np.ndarray

    @classmethod
    def identity(cls, input_dim: int, output_dim: int) -> "Normalizer":
        return cls(np.zeros(input_dim), np.ones(input_dim), np.ones(output_dim))

    @classmethod
    def fit(cls, dataset: RegressionDataset, enabled: bool = True) -> "Normalizer":
        if not enabled:
            return cls.identity(dataset.input_dim, dataset.output_dim)
        input_std = dataset.inputs.std(axis=0)
        target_std = dataset.targets.std(axis=0)
        return cls(
            dataset.inputs.mean(axis=0),
            np.where(input_std > _MIN_STD, input_std, 1.0),
            np.where(target_std > _MIN_STD, target_std, 1.0),
        )

    def inputs(self, raw):
        return (raw - self.input_mean) / self.input_std

    def targets(self, raw):
        return raw / self.target_std


class OutputGP(NamedTuple):
    """1出力次元分のハイパーパラメータとキャッシュ済み因子"""

    hyper: KernelHyperparams
    chol: np.ndarray      # chol(K + σ²I)
    alpha: np.ndarray     # (K + σ²I)⁻¹ y
    inv_gram: np.ndarray  # (K + σ²I)⁻¹


class ModelArrays(NamedTuple):
    """jit関数に渡すための配列表現（pytree）"""

    inputs: jnp.ndarray          # 正規化済み [N, D]
    lengthscales: jnp.ndarray    # [E, D]
    signal_variance: jnp.ndarray  # [E]
    noise_variance: jnp.ndarray  # [E]
    beta: jnp.ndarray            # [E, N]
    inv_gram: jnp.ndarray        # [E, N, N]
    input_mean: jnp.ndarray      # [D]
    input_std: jnp.ndarray       # [D]
    target_std: jnp.ndarray      # [E]


def squared_distances(a, b, lengthscales):
    """長さスケールで割った二乗距離行列"""
    a = a / lengthscales
    b = b / lengthscales
    return (
        jnp.sum(a ** 2, axis=-1)[:, None]
        + jnp.sum(b ** 2, axis=-1)[None, :]
        - 2.0 * a @ b.T
    ).clip(0.0)


def gram_matrix(a, b, lengthscales, signal_variance):
    return signal_variance * jnp.exp(-0.5 * squared_distances(a, b, lengthscales))


def kernel_eval(a, b, hyper: KernelHyperparams) -> float:
    """
    SE-ARDカーネル k(a, b) = σ_f² exp(-½ Σ ((a_d - b_d)/ℓ_d)²)

    Args:
        a: 入力ベクトル
        b: 入力ベクトル
        hyper: カーネルハイパーパラメータ

    Returns:
        共分散値
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    ell = np.asarray(hyper.lengthscales, dtype=float).ravel()
    if not (a.shape == b.shape == ell.shape):
        raise ContractViolationError(
            f"kernel input dims do not match: a {a.shape}, b {b.shape}, lengthscales {ell.shape}"
        )
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ContractViolationError("kernel inputs must be finite")
    return float(hyper.signal_variance * np.exp(-0.5 * np.sum(((a - b) / ell) ** 2)))


def _factorize(inputs: np.ndarray, targets: np.ndarray, hyper: KernelHyperparams) -> OutputGP:
    gram = np.asarray(
        gram_matrix(jnp.asarray(inputs), jnp.asarray(inputs), hyper.lengthscales, hyper.signal_variance)
    )
    gram = gram + hyper.noise_variance * np.eye(inputs.shape[0])
    chol, _ = stable_cholesky(gram, context="gp gram")
    alpha = np_cho_solve((chol, True), targets)
    inv_gram = np_cho_solve((chol, True), np.eye(inputs.shape[0]))
    return OutputGP(hyper, chol, alpha, 0.5 * (inv_gram + inv_gram.T))


class DynamicsModel:
    """
    出力次元ごとに独立なGPを束ねた遷移モデル

    ハイパーパラメータは正規化空間で保持し、予測は元の単位で返す。
    生成後は不変として扱い、再学習は新しいインスタンスを返す。
    """

    def __init__(
        self,
        dataset: RegressionDataset,
        hypers: Sequence[KernelHyperparams],
        normalize: bool = True,
    ):
        if dataset.n_points < 1:
            raise ContractViolationError("dataset must not be empty")
        if len(hypers) != dataset.output_dim:
            raise ContractViolationError(
                f"expected {dataset.output_dim} hyperparameter sets, got {len(hypers)}"
            )

        self.dataset = dataset
        self.normalize = normalize
        self.normalizer = Normalizer.fit(dataset, normalize)

        x = self.normalizer.inputs(dataset.inputs)
        y = self.normalizer.targets(dataset.targets)
        self.per_output: List[OutputGP] = []
        for d, hyper in enumerate(hypers):
            hyper = KernelHyperparams(*hyper).validate()
            if hyper.lengthscales.shape != (dataset.input_dim,):
                raise ContractViolationError(
                    f"output {d}: lengthscales must have {dataset.input_dim} entries"
                )
            self.per_output.append(_factorize(x, y[:, d], hyper))

    @classmethod
    def with_default_hyperparameters(
        cls, dataset: RegressionDataset, normalize: bool = True
    ) -> "DynamicsModel":
        """入力の標準偏差・ターゲット分散から初期ハイパーパラメータを決める"""
        normalizer = Normalizer.fit(dataset, normalize)
        x = normalizer.inputs(dataset.inputs)
        y = normalizer.targets(dataset.targets)

        ell = x.std(axis=0)
        ell = np.where(ell > _MIN_STD, ell, 1.0)
        hypers = []
        for d in range(dataset.output_dim):
            variance = float(y[:, d].var())
            if variance <= _MIN_STD:
                variance = 1.0
            hypers.append(KernelHyperparams(ell.copy(), variance, 0.01 * variance))
        return cls(dataset, hypers, normalize)

    def with_hyperparameters(self, hypers: Sequence[KernelHyperparams]) -> "DynamicsModel":
        return DynamicsModel(self.dataset, hypers, self.normalize)

    def with_dataset(self, dataset: RegressionDataset) -> "DynamicsModel":
        """ハイパーパラメータを引き継いだまま、データを差し替える"""
        return DynamicsModel(dataset, self.hypers, self.normalize)

    @property
    def hypers(self) -> List[KernelHyperparams]:
        return [gp.hyper for gp in self.per_output]

    @property
    def state_dim(self) -> int:
        return self.dataset.output_dim

    @property
    def control_dim(self) -> int:
        return self.dataset.input_dim - self.dataset.output_dim

    @property
    def input_dim(self) -> int:
        return self.dataset.input_dim

    def as_arrays(self) -> ModelArrays:
        return ModelArrays(
            inputs=jnp.asarray(self.normalizer.inputs(self.dataset.inputs)),
            lengthscales=jnp.asarray(np.stack([gp.hyper.lengthscales for gp in self.per_output])),
            signal_variance=jnp.asarray([gp.hyper.signal_variance for gp in self.per_output]),
            noise_variance=jnp.asarray([gp.hyper.noise_variance for gp in self.per_output]),
            beta=jnp.asarray(np.stack([gp.alpha for gp in self.per_output])),
            inv_gram=jnp.asarray(np.stack([gp.inv_gram for gp in self.per_output])),
            input_mean=jnp.asarray(self.normalizer.input_mean),
            input_std=jnp.asarray(self.normalizer.input_std),
            target_std=jnp.asarray(self.normalizer.target_std),
        )

    def get_stats(self) -> Dict[str, object]:
        return {
            "n_points": self.dataset.n_points,
            "input_dim": self.input_dim,
            "output_dim": self.state_dim,
            "normalize": self.normalize,
            "signal_variance": [gp.hyper.signal_variance for gp in self.per_output],
            "noise_variance": [gp.hyper.noise_variance for gp in self.per_output],
        }


def _nlml_value(x, y, lengthscales, signal_variance, noise_variance, priors: Optional[HyperPrior]):
    """jnpで書いたNLML（ジッター付き）"""
    n = x.shape[0]
    gram = gram_matrix(x, x, lengthscales, signal_variance) + noise_variance * jnp.eye(n)
    chol, _ = jax_cholesky(gram)
    alpha = cho_solve(chol, y)
    value = 0.5 * y @ alpha + jnp.sum(jnp.log(jnp.diag(chol))) + 0.5 * n * LOG_2PI
    if priors is not None:
        value = value - priors.log_density(lengthscales, signal_variance, noise_variance)
    return value


def negative_log_marginal_likelihood(
    model: DynamicsModel, output_dim: int, priors: Optional[HyperPrior] = None
) -> float:
    """
    1出力次元分の負の対数周辺尤度

    ½ yᵀα + Σ log diag(L) + (N/2) log 2π − log p(θ)

    Args:
        model: 遷移モデル
        output_dim: 出力次元のインデックス
        priors: ハイパー事前分布（任意）

    Returns:
        NLML値
    """
    if not 0 <= output_dim < model.state_dim:
        raise ContractViolationError(f"output_dim {output_dim} out of range")

    gp = model.per_output[output_dim]
    y = model.normalizer.targets(model.dataset.targets)[:, output_dim]
    n = y.shape[0]
    value = 0.5 * float(y @ gp.alpha) + float(np.sum(np.log(np.diag(gp.chol)))) + 0.5 * n * LOG_2PI
    if priors is not None:
        value -= float(
            priors.log_density(
                jnp.asarray(gp.hyper.lengthscales),
                gp.hyper.signal_variance,
                gp.hyper.noise_variance,
            )
        )
    return value


class _LogSpaceObjective:
    """対数空間パラメータ [log ℓ, log σ_f², log(σ_n² − floor)] でのNLMLと勾配"""

    def __init__(self, x, y, priors: Optional[HyperPrior], fixed_noise: Optional[float]):
        self.dim = x.shape[1]
        self.fixed_noise = fixed_noise
        x = jnp.asarray(x)
        y = jnp.asarray(y)

        def objective(params):
            ell, sf2, noise = self._unpack_jnp(params)
            return _nlml_value(x, y, ell, sf2, noise, priors)

        self._value_and_grad = jax.jit(jax.value_and_grad(objective))

    def _unpack_jnp(self, params):
        ell = jnp.exp(params[: self.dim])
        sf2 = jnp.exp(params[self.dim])
        if self.fixed_noise is not None:
            noise = jnp.asarray(self.fixed_noise)
        else:
            noise = NOISE_FLOOR_RATIO * sf2 + jnp.exp(params[self.dim + 1])
        return ell, sf2, noise

    def pack(self, hyper: KernelHyperparams) -> np.ndarray:
        params = list(np.log(hyper.lengthscales)) + [np.log(hyper.signal_variance)]
        if self.fixed_noise is None:
            excess = hyper.noise_variance - NOISE_FLOOR_RATIO * hyper.signal_variance
            params.append(np.log(max(excess, 1e-300)))
        return np.asarray(params, dtype=float)

    def unpack(self, params: np.ndarray) -> KernelHyperparams:
        ell, sf2, noise = self._unpack_jnp(jnp.asarray(params))
        return KernelHyperparams(np.asarray(ell), float(sf2), float(noise))

    def bounds(self) -> List[tuple]:
        sf2_upper = 12.0
        if self.fixed_noise is not None:
            sf2_upper = min(sf2_upper, float(np.log(self.fixed_noise / NOISE_FLOOR_RATIO)))
        bounds = [(-7.0, 7.0)] * self.dim + [(-12.0, sf2_upper)]
        if self.fixed_noise is None:
            bounds.append((-30.0, 10.0))
        return bounds

    def __call__(self, params: np.ndarray):
        value, grad = self._value_and_grad(jnp.asarray(params))
        value = float(value)
        grad = np.asarray(grad, dtype=float)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            return _PENALTY, np.zeros_like(params)
        return value, grad


def fit_hyperparameters(
    model: DynamicsModel,
    priors: Optional[HyperPrior] = None,
    restarts: int = 3,
    fixed_noise: Optional[float] = None,
    seed: int = 0,
    warm_start: Optional[Sequence[KernelHyperparams]] = None,
    maxiter: int = 500,
) -> DynamicsModel:
    """
    出力次元ごとにNLMLを最小化してハイパーパラメータを推定する

    最初の開始点はモデルの現在値。残りは対数正規摂動 (σ=0.5)。
    結果のNLMLが初期値より悪化することはない。

    Args:
        model: 初期ハイパーパラメータを持つモデル
        priors: ハイパー事前分布
        restarts: 開始点の数
        fixed_noise: 指定時はノイズ分散をこの値に固定
        seed: 摂動用の乱数シード
        warm_start: 追加の開始点（前回の学習結果など）
        maxiter: 1開始点あたりの最大反復数

    Returns:
        学習済みモデル（新しいインスタンス）
    """
    if restarts < 1:
        raise ContractViolationError("restarts must be >= 1")
    if model.dataset.n_points < 2:
        raise ContractViolationError("fit_hyperparameters needs at least 2 data points")
    if fixed_noise is not None and not fixed_noise > 0:
        raise ContractViolationError("fixed_noise must be > 0")
    if priors is not None:
        for prior in priors:
            if prior is not None:
                prior.validate()

    rng = np.random.default_rng(seed)
    x = model.normalizer.inputs(model.dataset.inputs)
    y = model.normalizer.targets(model.dataset.targets)

    fitted: List[KernelHyperparams] = []
    for d in range(model.state_dim):
        objective = _LogSpaceObjective(x, y[:, d], priors, fixed_noise)
        bounds = np.asarray(objective.bounds())

        init = model.per_output[d].hyper
        if fixed_noise is not None:
            init = KernelHyperparams(
                init.lengthscales,
                min(init.signal_variance, fixed_noise / NOISE_FLOOR_RATIO),
                fixed_noise,
            )
        starts = [np.clip(objective.pack(init), bounds[:, 0], bounds[:, 1])]
        if warm_start is not None and d < len(warm_start):
            starts.append(np.clip(objective.pack(warm_start[d]), bounds[:, 0], bounds[:, 1]))
        for _ in range(restarts - 1):
            perturbed = starts[0] + rng.normal(0.0, RESTART_SIGMA, size=starts[0].shape)
            starts.append(np.clip(perturbed, bounds[:, 0], bounds[:, 1]))

        init_value, _ = objective(starts[0])
        best_params, best_value = starts[0], init_value
        failures = 0
        for start in starts:
            start_value, _ = objective(start)
            if start_value >= _PENALTY:
                failures += 1
                continue
            result = minimize(
                objective,
                start,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": maxiter},
            )
            value = float(result.fun)
            candidate, candidate_value = (result.x, value) if value < start_value else (start, start_value)
            if candidate_value < best_value:
                best_params, best_value = candidate, candidate_value

        if best_value >= _PENALTY:
            raise IllConditionedModelError(
                f"output {d}: every restart failed Cholesky ({failures}/{len(starts)})",
                JITTER_LADDER,
            )

        hyper = objective.unpack(best_params)
        if fixed_noise is not None:
            hyper = KernelHyperparams(hyper.lengthscales, hyper.signal_variance, float(fixed_noise))
        fitted.append(hyper)
        logger.info(
            "GP output fitted",
            output_dim=d,
            nlml=round(best_value, 6),
            initial_nlml=round(float(init_value), 6),
            starts=len(starts),
        )

    return model.with_hyperparameters(fitted)


def predict_point(model: DynamicsModel, z) -> GaussianBelief:
    """
    点入力 z = (x, u) に対する状態差分の予測分布（元の単位）

    Returns:
        対角共分散のGaussianBelief
    """
    z = np.asarray(z, dtype=float).ravel()
    if z.shape != (model.input_dim,):
        raise ContractViolationError(f"query must have {model.input_dim} entries, got {z.shape}")

    x = model.normalizer.inputs(model.dataset.inputs)
    zn = model.normalizer.inputs(z)[None, :]
    means, variances = [], []
    for gp in model.per_output:
        k_star = np.asarray(
            gram_matrix(jnp.asarray(x), jnp.asarray(zn), gp.hyper.lengthscales, gp.hyper.signal_variance)
        )[:, 0]
        mean = float(k_star @ gp.alpha)
        v = np_cho_solve((gp.chol, True), k_star)
        variance = gp.hyper.signal_variance - float(k_star @ v) + gp.hyper.noise_variance
        means.append(mean)
        variances.append(max(variance, gp.hyper.noise_variance))

    scale = model.normalizer.target_std
    return GaussianBelief(np.asarray(means) * scale, np.diag(np.asarray(variances) * scale ** 2))
