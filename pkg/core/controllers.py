"""
Controllers - パラメトリックな決定論的フィードバック方策

機能:
- 線形方策 u = Θx + b
- RBF方策 u = Σ w_i exp(-½ ||(x - c_i)/ℓ||²)
- 正弦スクワッシングによる制御の有界化（ガウス入力モーメントが閉形式）
- パラメータベクトル θ の平坦化・復元、L-BFGS-B用の境界
- 初期化（ランダムリスタートでも再利用）
"""

from typing import List, NamedTuple, Optional, Tuple

import jax.numpy as jnp
import numpy as np
import structlog

from core.belief import GaussianBelief
from core.errors import ContractViolationError
from core.linalg import symmetrize
from core.moments import se_input_moments

logger = structlog.get_logger()

MIN_LENGTHSCALE = 1e-6


class ControlBounds(NamedTuple):
    """制御の各次元の下限・上限"""

    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def symmetric(cls, limit) -> "ControlBounds":
        limit = np.atleast_1d(np.asarray(limit, dtype=float))
        return cls(-limit, limit.copy())

    def validate(self) -> "ControlBounds":
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape:
            raise ContractViolationError("control bounds lower/upper shapes differ")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ContractViolationError("control bounds must be finite")
        if np.any(lower >= upper):
            raise ContractViolationError("control bounds lower must be < upper")
        return ControlBounds(lower, upper)

    @property
    def dim(self) -> int:
        return int(np.size(self.lower))

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.upper) + np.asarray(self.lower))

    @property
    def amp(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.upper) - np.asarray(self.lower))

    def clip(self, u) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)


def squash_moments(mean, cov, mid, amp):
    """
    u = mid + a·sin(v/a) のガウス入力モーメント

    Returns:
        (mean [m], cov [m, m], cos_factor [m])。cov(v, u) = Σ_v diag(cos_factor)
    """
    w_mean = mean / amp
    w_cov = cov / jnp.outer(amp, amp)
    w_var = jnp.diag(w_cov)

    decay = jnp.exp(-0.5 * w_var)
    out_mean = mid + amp * decay * jnp.sin(w_mean)

    lq = -0.5 * (w_var[:, None] + w_var[None, :])
    q = jnp.exp(lq)
    diff = w_mean[:, None] - w_mean[None, :]
    total = w_mean[:, None] + w_mean[None, :]
    out_cov = (jnp.exp(lq + w_cov) - q) * jnp.cos(diff) - (jnp.exp(lq - w_cov) - q) * jnp.cos(total)
    out_cov = symmetrize(jnp.outer(amp, amp) * out_cov / 2.0)

    return out_mean, out_cov, decay * jnp.cos(w_mean)


def squash_control(pre: GaussianBelief, bounds: ControlBounds) -> GaussianBelief:
    """生の制御分布を正弦スクワッシングに通した分布"""
    bounds = bounds.validate()
    mean, cov, _ = squash_moments(
        jnp.asarray(pre.mean, dtype=float),
        jnp.asarray(pre.cov, dtype=float),
        jnp.asarray(bounds.mid),
        jnp.asarray(bounds.amp),
    )
    return GaussianBelief(np.asarray(mean), np.asarray(cov))


class Policy:
    """方策の共通インターフェース"""

    kind = "base"

    def __init__(self, state_dim: int, bounds: ControlBounds):
        self.state_dim = int(state_dim)
        self.bounds = bounds.validate()

    @property
    def control_dim(self) -> int:
        return self.bounds.dim

    @property
    def theta(self) -> np.ndarray:
        raise NotImplementedError

    def with_theta(self, theta) -> "Policy":
        raise NotImplementedError

    def parameter_bounds(self) -> List[Tuple[Optional[float], Optional[float]]]:
        return [(None, None)] * self.theta.size

    def raw_action(self, theta, x):
        """スクワッシング前の出力（jnp）"""
        raise NotImplementedError

    def raw_moments(self, theta, mean, cov):
        """スクワッシング前の (平均, 共分散, cov(x, v))（jnp）"""
        raise NotImplementedError

    def control_moments(self, theta, mean, cov):
        """
        スクワッシング後の制御モーメント（jnp、微分可能）

        Returns:
            (mean [m], cov [m, m], cov(x, u) [n, m])
        """
        v_mean, v_cov, xv_cov = self.raw_moments(theta, mean, cov)
        u_mean, u_cov, factor = squash_moments(
            v_mean, v_cov, jnp.asarray(self.bounds.mid), jnp.asarray(self.bounds.amp)
        )
        return u_mean, u_cov, xv_cov * factor[None, :]

    def act(self, x) -> np.ndarray:
        """実行時の制御。スクワッシング後にさらにハードクリップする"""
        x = np.asarray(x, dtype=float).ravel()
        if x.shape != (self.state_dim,):
            raise ContractViolationError(f"state must have {self.state_dim} entries, got {x.shape}")
        v = np.asarray(self.raw_action(jnp.asarray(self.theta), jnp.asarray(x)))
        u = self.bounds.mid + self.bounds.amp * np.sin(v / self.bounds.amp)
        return self.bounds.clip(u)

    def to_dict(self) -> dict:
        raise NotImplementedError


class LinearPolicy(Policy):
    """線形方策 v = Θx + b"""

    kind = "linear"

    def __init__(self, weights, offset, bounds: ControlBounds):
        weights = np.array(weights, dtype=float, ndmin=2)
        super().__init__(weights.shape[1], bounds)
        offset = np.atleast_1d(np.asarray(offset, dtype=float))
        if weights.shape[0] != self.control_dim or offset.shape != (self.control_dim,):
            raise ContractViolationError(
                f"linear policy shapes do not match control dim {self.control_dim}"
            )
        self.weights = weights
        self.offset = offset

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.offset])

    def _split(self, theta):
        n_w = self.control_dim * self.state_dim
        weights = theta[:n_w].reshape(self.control_dim, self.state_dim)
        return weights, theta[n_w:]

    def with_theta(self, theta) -> "LinearPolicy":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.theta.size,):
            raise ContractViolationError(f"theta must have {self.theta.size} entries")
        weights, offset = self._split(theta)
        return LinearPolicy(weights, offset, self.bounds)

    def raw_action(self, theta, x):
        weights, offset = self._split(theta)
        return weights @ x + offset

    def raw_moments(self, theta, mean, cov):
        weights, offset = self._split(theta)
        return weights @ mean + offset, symmetrize(weights @ cov @ weights.T), cov @ weights.T

    def to_dict(self) -> dict:
        return {
            "variant": self.kind,
            "weights": self.weights.tolist(),
            "offset": self.offset.tolist(),
        }


class RBFPolicy(Policy):
    """RBF方策。全制御次元で中心・長さスケールを共有する"""

    kind = "rbf"

    def __init__(self, centers, lengthscales, weights, bounds: ControlBounds):
        centers = np.array(centers, dtype=float, ndmin=2)
        super().__init__(centers.shape[1], bounds)
        lengthscales = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        weights = np.array(weights, dtype=float, ndmin=2)
        if lengthscales.shape != (self.state_dim,):
            raise ContractViolationError("rbf lengthscales must match state dim")
        if np.any(lengthscales <= 0.0):
            raise ContractViolationError("rbf lengthscales must be > 0")
        if weights.shape != (centers.shape[0], self.control_dim):
            raise ContractViolationError(
                f"rbf weights must be [{centers.shape[0]}, {self.control_dim}], got {weights.shape}"
            )
        self.centers = centers
        self.lengthscales = lengthscales
        self.weights = weights

    @property
    def n_basis(self) -> int:
        return int(self.centers.shape[0])

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.centers.ravel(), self.lengthscales, self.weights.ravel()])

    def _split(self, theta):
        n_c = self.n_basis * self.state_dim
        centers = theta[:n_c].reshape(self.n_basis, self.state_dim)
        lengthscales = theta[n_c:n_c + self.state_dim]
        weights = theta[n_c + self.state_dim:].reshape(self.n_basis, self.control_dim)
        return centers, lengthscales, weights

    def with_theta(self, theta) -> "RBFPolicy":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.theta.size,):
            raise ContractViolationError(f"theta must have {self.theta.size} entries")
        centers, lengthscales, weights = self._split(theta)
        return RBFPolicy(centers, lengthscales, weights, self.bounds)

    def parameter_bounds(self):
        n_c = self.n_basis * self.state_dim
        return (
            [(None, None)] * n_c
            + [(MIN_LENGTHSCALE, None)] * self.state_dim
            + [(None, None)] * (self.n_basis * self.control_dim)
        )

    def raw_action(self, theta, x):
        centers, lengthscales, weights = self._split(theta)
        phi = jnp.exp(-0.5 * jnp.sum(((x - centers) / lengthscales) ** 2, axis=-1))
        return phi @ weights

    def raw_moments(self, theta, mean, cov):
        centers, lengthscales, weights = self._split(theta)
        m = self.control_dim
        return se_input_moments(
            mean,
            cov,
            centers,
            jnp.broadcast_to(lengthscales, (m, self.state_dim)),
            jnp.ones(m),
            weights.T,
            inv_gram=None,
        )

    def to_dict(self) -> dict:
        return {
            "variant": self.kind,
            "centers": self.centers.tolist(),
            "lengthscales": self.lengthscales.tolist(),
            "weights": self.weights.tolist(),
        }


def moments_of_action(policy: Policy, state: GaussianBelief) -> Tuple[GaussianBelief, np.ndarray]:
    """
    状態分布の下での制御分布と状態・制御の相互共分散

    Args:
        policy: 方策
        state: 状態のガウス信念

    Returns:
        (制御のGaussianBelief, cov(x, u) [n, m])
    """
    mean = np.asarray(state.mean, dtype=float)
    if mean.shape != (policy.state_dim,):
        raise ContractViolationError(
            f"state belief has dim {mean.shape}, policy expects {policy.state_dim}"
        )
    u_mean, u_cov, xu_cov = policy.control_moments(
        jnp.asarray(policy.theta), jnp.asarray(mean), jnp.asarray(state.cov, dtype=float)
    )
    return GaussianBelief(np.asarray(u_mean), np.asarray(u_cov)), np.asarray(xu_cov)


def _state_spread(states: Optional[np.ndarray], state_dim: int) -> np.ndarray:
    if states is None or len(states) < 2:
        return np.zeros(state_dim)
    return np.asarray(states, dtype=float).reshape(-1, state_dim).var(axis=0)


def initialize_rbf_policy(
    bounds: ControlBounds,
    n_basis: int,
    mu0,
    sigma0,
    rng: np.random.Generator,
    states: Optional[np.ndarray] = None,
) -> RBFPolicy:
    """
    RBF方策の初期化

    中心は N(μ0, Σ0 + diag(var(観測状態))) から、重みは N(0, a²/B) からサンプル。
    長さスケールは観測状態の次元ごとの標準偏差（ゼロなら1）。
    """
    if n_basis < 1:
        raise ContractViolationError("n_basis must be >= 1")
    bounds = bounds.validate()
    mu0 = np.asarray(mu0, dtype=float)
    spread = _state_spread(states, mu0.shape[0])

    cov = np.asarray(sigma0, dtype=float) + np.diag(spread)
    centers = rng.multivariate_normal(mu0, cov, size=n_basis)
    weights = rng.normal(0.0, 1.0, size=(n_basis, bounds.dim)) * (bounds.amp / np.sqrt(n_basis))
    lengthscales = np.where(spread > 0.0, np.sqrt(spread), 1.0)

    logger.debug("RBF policy initialized", n_basis=n_basis, state_dim=mu0.shape[0])
    return RBFPolicy(centers, lengthscales, weights, bounds)


def initialize_linear_policy(
    bounds: ControlBounds, state_dim: int, rng: np.random.Generator
) -> LinearPolicy:
    """小さな乱数重み・オフセット0で線形方策を初期化"""
    bounds = bounds.validate()
    weights = rng.normal(0.0, 0.1, size=(bounds.dim, state_dim)) * bounds.amp[:, None]
    return LinearPolicy(weights, np.zeros(bounds.dim), bounds)
