"""
Objectives - 期待報酬・安全確率・複合目的関数

機能:
- 報酬仕様（指数型・線形・重み付き和）とガウス信念下での期待値
- 軸平行な箱制約の AND/OR 木（深さ2まで）
- 矩形領域の多変量正規確率（Genzの変数分離法 + 準モンテカルロ）
- エピソード報酬 R、エピソード安全確率 Q、複合目的 J = R + ξQ
"""

from itertools import combinations
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import jax.numpy as jnp
import numpy as np
import structlog
from jax.scipy.special import ndtr, ndtri

from core.belief import GaussianBelief, PredictedTrajectory
from core.errors import ContractViolationError

logger = structlog.get_logger()

MAX_DEPTH = 2
MAX_DISJUNCTS = 3
DEGENERATE_VARIANCE = 1e-12
_INF_SUBSTITUTE = 1e8
_PROB_CLIP = 1e-15
_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71)


# --- 報酬 ---------------------------------------------------------------

class ExponentialReward:
    """r(x) = exp(-½ (x - t)ᵀ W (x - t))"""

    kind = "exponential"

    def __init__(self, target, weight):
        self.target = np.atleast_1d(np.asarray(target, dtype=float))
        weight = np.asarray(weight, dtype=float)
        if weight.ndim == 1:
            weight = np.diag(weight)
        self.weight = weight

    def validate(self, state_dim: int) -> "ExponentialReward":
        if self.target.shape != (state_dim,) or self.weight.shape != (state_dim, state_dim):
            raise ContractViolationError(
                f"exponential reward dims do not match state dim {state_dim}"
            )
        if not np.allclose(self.weight, self.weight.T):
            raise ContractViolationError("reward weight must be symmetric")
        if np.linalg.eigvalsh(self.weight).min() <= 0.0:
            raise ContractViolationError("reward weight must be positive definite")
        return self

    def value(self, x) -> float:
        d = np.asarray(x, dtype=float) - self.target
        return float(np.exp(-0.5 * d @ self.weight @ d))

    def expected(self, mean, cov):
        n = self.target.shape[0]
        w = jnp.asarray(self.weight)
        d = mean - self.target
        inflated = jnp.eye(n) + cov @ w
        scaled = w @ jnp.linalg.solve(inflated, d)
        return jnp.exp(-0.5 * d @ scaled) / jnp.sqrt(jnp.linalg.det(inflated))

    def scale(self, mu0) -> float:
        return 1.0

    def to_dict(self) -> dict:
        return {"variant": self.kind, "target": self.target.tolist(), "weight": self.weight.tolist()}


class LinearReward:
    """r(x) = cᵀx"""

    kind = "linear"

    def __init__(self, direction):
        self.direction = np.atleast_1d(np.asarray(direction, dtype=float))

    def validate(self, state_dim: int) -> "LinearReward":
        if self.direction.shape != (state_dim,):
            raise ContractViolationError(f"linear reward must have {state_dim} entries")
        return self

    def value(self, x) -> float:
        return float(self.direction @ np.asarray(x, dtype=float))

    def expected(self, mean, cov):
        return jnp.asarray(self.direction) @ mean

    def scale(self, mu0) -> float:
        return max(abs(float(self.direction @ np.asarray(mu0, dtype=float))), float(np.linalg.norm(self.direction)))

    def to_dict(self) -> dict:
        return {"variant": self.kind, "direction": self.direction.tolist()}


class WeightedSumReward:
    """Σ c_i r_i(x)"""

    kind = "weighted_sum"

    def __init__(self, terms: Sequence[Tuple[object, float]]):
        if not terms:
            raise ContractViolationError("weighted sum reward needs at least one term")
        self.terms = [(reward, float(coef)) for reward, coef in terms]

    def validate(self, state_dim: int) -> "WeightedSumReward":
        for reward, _ in self.terms:
            reward.validate(state_dim)
        return self

    def value(self, x) -> float:
        return sum(coef * reward.value(x) for reward, coef in self.terms)

    def expected(self, mean, cov):
        return sum(coef * reward.expected(mean, cov) for reward, coef in self.terms)

    def scale(self, mu0) -> float:
        return sum(abs(coef) * reward.scale(mu0) for reward, coef in self.terms)

    def to_dict(self) -> dict:
        return {
            "variant": self.kind,
            "terms": [{"coefficient": coef, "reward": reward.to_dict()} for reward, coef in self.terms],
        }


RewardSpec = Union[ExponentialReward, LinearReward, WeightedSumReward]


def expected_exponential_reward(belief: GaussianBelief, spec: ExponentialReward) -> float:
    """
    det(I + ΣW)^(-½) · exp(-½ dᵀ W (I + ΣW)⁻¹ d)

    Σ = 0 のとき r(μ) と一致し、値は (0, 1] に入る。
    """
    spec.validate(belief.dim)
    return float(spec.expected(jnp.asarray(belief.mean, dtype=float), jnp.asarray(belief.cov, dtype=float)))


def expected_linear_reward(belief: GaussianBelief, spec: LinearReward) -> float:
    spec.validate(belief.dim)
    return float(spec.direction @ np.asarray(belief.mean, dtype=float))


def reward_scale(spec: RewardSpec, mu0) -> float:
    """1ステップあたりの報酬の大きさの目安（ξの初期値に使う）"""
    return float(spec.scale(mu0))


# --- 制約 ---------------------------------------------------------------

class BoxConstraint(NamedTuple):
    """lower ≤ x[dim] ≤ upper"""

    dim: int
    lower: float = -np.inf
    upper: float = np.inf

    def validate(self) -> "BoxConstraint":
        if self.dim < 0:
            raise ContractViolationError("box dim must be >= 0")
        if not self.lower < self.upper:
            raise ContractViolationError(
                f"box on dim {self.dim}: lower ({self.lower}) must be < upper ({self.upper})"
            )
        return self

    def contains(self, x) -> bool:
        return bool(self.lower <= x[self.dim] <= self.upper)


class AllOf(NamedTuple):
    children: Tuple

    def contains(self, x) -> bool:
        return all(child.contains(x) for child in self.children)


class AnyOf(NamedTuple):
    children: Tuple

    def contains(self, x) -> bool:
        return any(child.contains(x) for child in self.children)


ConstraintExpr = Union[BoxConstraint, AllOf, AnyOf]

# 矩形 = {dim: (lower, upper)}
Rectangle = Dict[int, Tuple[float, float]]


def _depth(expr: ConstraintExpr) -> int:
    if isinstance(expr, BoxConstraint):
        return 0
    return 1 + max(_depth(child) for child in expr.children)


def _boxes(expr: ConstraintExpr) -> List[BoxConstraint]:
    if isinstance(expr, BoxConstraint):
        return [expr]
    return [box for child in expr.children for box in _boxes(child)]


def _intersect(a: Rectangle, b: Rectangle) -> Rectangle:
    out = dict(a)
    for dim, (lo, hi) in b.items():
        if dim in out:
            out[dim] = (max(out[dim][0], lo), min(out[dim][1], hi))
        else:
            out[dim] = (lo, hi)
    return out


def _dnf(expr: ConstraintExpr) -> List[Rectangle]:
    if isinstance(expr, BoxConstraint):
        return [{expr.dim: (float(expr.lower), float(expr.upper))}]
    if isinstance(expr, AnyOf):
        return [rect for child in expr.children for rect in _dnf(child)]
    terms: List[Rectangle] = [{}]
    for child in expr.children:
        terms = [_intersect(t, c) for t in terms for c in _dnf(child)]
    return terms


def validate_expr(expr: ConstraintExpr, state_dim: Optional[int] = None) -> List[Rectangle]:
    """
    制約木を検証し、選言標準形（矩形のリスト）を返す

    深さ2まで、展開後の項数は3まで。
    """
    if not isinstance(expr, (BoxConstraint, AllOf, AnyOf)):
        raise ContractViolationError(f"unsupported constraint node {type(expr).__name__}")
    boxes = _boxes(expr)
    if not boxes:
        raise ContractViolationError("constraint expression needs at least one box")
    for box in boxes:
        box.validate()
        if state_dim is not None and box.dim >= state_dim:
            raise ContractViolationError(
                f"box dim {box.dim} out of range for state dim {state_dim}"
            )
    if _depth(expr) > MAX_DEPTH:
        raise ContractViolationError(f"constraint tree deeper than {MAX_DEPTH}")
    terms = _dnf(expr)
    if len(terms) > MAX_DISJUNCTS:
        raise ContractViolationError(
            f"constraint expands to {len(terms)} disjunctive terms (max {MAX_DISJUNCTS})"
        )
    return terms


class RectangleIntegrator:
    """
    多変量正規分布の矩形確率（Genzの変数分離法）

    ランダムシフト付きRichtmyer格子上の準モンテカルロ。シフトは固定なので、
    推定値は平均・共分散の滑らかで決定論的な関数になる（勾配計算可能）。
    """

    def __init__(self, n_points: int = 5000, n_shifts: int = 8, seed: int = 0, tolerance: float = 1e-4):
        if n_points < 1 or n_shifts < 2:
            raise ContractViolationError("integrator needs n_points >= 1 and n_shifts >= 2")
        self.n_points = n_points
        self.n_shifts = n_shifts
        self.seed = seed
        self.tolerance = tolerance
        self._lattices: Dict[int, np.ndarray] = {}

    def lattice(self, dim: int) -> np.ndarray:
        """[n_shifts, n_points, dim] の一様点"""
        if dim not in self._lattices:
            if dim > len(_PRIMES):
                raise ContractViolationError(f"integrator supports at most {len(_PRIMES)} dims")
            generator = np.sqrt(np.asarray(_PRIMES[:dim], dtype=float)) % 1.0
            rng = np.random.default_rng(self.seed)
            shifts = rng.uniform(size=(self.n_shifts, dim))
            index = np.arange(1, self.n_points + 1, dtype=float)[:, None]
            base = (index * generator) % 1.0
            self._lattices[dim] = (base[None, :, :] + shifts[:, None, :]) % 1.0
        return self._lattices[dim]

    def per_shift(self, lower, upper, mean, cov):
        """シフトごとの推定値 [n_shifts]（jnp）"""
        dim = mean.shape[0]
        lower = jnp.clip(lower - mean, -_INF_SUBSTITUTE, _INF_SUBSTITUTE)
        upper = jnp.clip(upper - mean, -_INF_SUBSTITUTE, _INF_SUBSTITUTE)
        chol = jnp.linalg.cholesky(cov + DEGENERATE_VARIANCE * jnp.eye(dim))

        if dim == 1:
            value = ndtr(upper[0] / chol[0, 0]) - ndtr(lower[0] / chol[0, 0])
            return jnp.full(self.n_shifts, value)

        w = jnp.asarray(self.lattice(dim - 1))  # [K, P, d-1]
        shape = w.shape[:2]
        lo = jnp.broadcast_to(ndtr(lower[0] / chol[0, 0]), shape)
        hi = jnp.broadcast_to(ndtr(upper[0] / chol[0, 0]), shape)
        weight = hi - lo
        ys = []
        for i in range(1, dim):
            u = jnp.clip(lo + w[:, :, i - 1] * (hi - lo), _PROB_CLIP, 1.0 - _PROB_CLIP)
            ys.append(ndtri(u))
            shift = sum(chol[i, j] * ys[j] for j in range(i))
            lo = ndtr((lower[i] - shift) / chol[i, i])
            hi = ndtr((upper[i] - shift) / chol[i, i])
            weight = weight * (hi - lo)
        return jnp.mean(weight, axis=1)

    @staticmethod
    def split_degenerate(lower, upper, mean, cov):
        """
        分散 1e-12 未満の次元を平均での指示関数に置き換える

        分散ゼロの次元は他の次元と無相関なので、確率は
        （退化次元の指示関数の積）×（残りの次元の矩形確率）に分かれる。
        退化次元の境界は無限大に広げて積分から外す。

        Returns:
            (積分用の下限, 積分用の上限, 指示関数の積)
        """
        degenerate = jnp.diag(cov) < DEGENERATE_VARIANCE
        inside = (mean >= lower) & (mean <= upper)
        indicator = jnp.all(inside | ~degenerate).astype(float)
        lower = jnp.where(degenerate, -jnp.inf, lower)
        upper = jnp.where(degenerate, jnp.inf, upper)
        return lower, upper, indicator

    def probability(self, lower, upper, mean, cov):
        """
        P(lower ≤ x ≤ upper), x ~ N(mean, cov)（jnp、微分可能）

        制約次元の分散が 1e-12 未満ならその次元だけ平均での指示関数で評価する。
        """
        lower = jnp.asarray(lower, dtype=float)
        upper = jnp.asarray(upper, dtype=float)
        lower, upper, indicator = self.split_degenerate(lower, upper, mean, cov)
        estimate = jnp.mean(self.per_shift(lower, upper, mean, cov))
        return jnp.clip(indicator * estimate, 0.0, 1.0)

    def probability_with_error(self, lower, upper, mean, cov) -> Tuple[float, float]:
        """
        ホスト側評価用。誤差推定（シフト間の標準誤差）が許容値を下回った時点でシフトを打ち切る

        Returns:
            (確率, 誤差推定)
        """
        mean = jnp.asarray(mean, dtype=float)
        cov = jnp.asarray(cov, dtype=float)
        lower, upper, indicator = self.split_degenerate(
            jnp.asarray(lower, dtype=float), jnp.asarray(upper, dtype=float), mean, cov
        )
        if float(indicator) == 0.0:
            return 0.0, 0.0
        values = np.asarray(self.per_shift(lower, upper, mean, cov))
        used = values
        for k in range(2, len(values) + 1):
            used = values[:k]
            if used.std(ddof=1) / np.sqrt(k) < self.tolerance:
                break
        error = float(used.std(ddof=1) / np.sqrt(len(used)))
        return float(np.clip(used.mean(), 0.0, 1.0)), error


def _rectangle_probability(rect: Rectangle, mean, cov, integrator: RectangleIntegrator):
    if any(lo >= hi for lo, hi in rect.values()):
        return jnp.asarray(0.0)
    dims = sorted(d for d, (lo, hi) in rect.items() if np.isfinite(lo) or np.isfinite(hi))
    if not dims:
        return jnp.asarray(1.0)
    idx = jnp.asarray(dims)
    lower = jnp.asarray([rect[d][0] for d in dims])
    upper = jnp.asarray([rect[d][1] for d in dims])
    return integrator.probability(lower, upper, mean[idx], cov[jnp.ix_(idx, idx)])


def region_probability(terms: List[Rectangle], mean, cov, integrator: RectangleIntegrator):
    """矩形の和集合の確率（包除原理、jnp）"""
    total = jnp.asarray(0.0)
    for size in range(1, len(terms) + 1):
        sign = 1.0 if size % 2 == 1 else -1.0
        for subset in combinations(terms, size):
            rect: Rectangle = {}
            for term in subset:
                rect = _intersect(rect, term)
            total = total + sign * _rectangle_probability(rect, mean, cov, integrator)
    return jnp.clip(total, 0.0, 1.0)


class SafetySpec:
    """
    安全制約の仕様

    Args:
        expr: 箱制約のAND/OR木
        epsilon: 許容リスク ε ∈ (0, 1)
        xi: 目的関数での安全確率の重み ξ
        region: exprが安全集合を表すなら "safe"、危険集合なら "unsafe"
    """

    def __init__(self, expr: ConstraintExpr, epsilon: float, xi: float, region: str = "safe"):
        if region not in ("safe", "unsafe"):
            raise ContractViolationError("region must be 'safe' or 'unsafe'")
        if not 0.0 < epsilon < 1.0:
            raise ContractViolationError("epsilon must be in (0, 1)")
        if not xi >= 0.0:
            raise ContractViolationError("xi must be >= 0")
        self.terms = validate_expr(expr)
        self.expr = expr
        self.epsilon = float(epsilon)
        self.xi = float(xi)
        self.region = region

    def with_xi(self, xi: float) -> "SafetySpec":
        return SafetySpec(self.expr, self.epsilon, xi, self.region)

    def validate(self, state_dim: int) -> "SafetySpec":
        validate_expr(self.expr, state_dim)
        return self

    def is_safe(self, x) -> bool:
        inside = self.expr.contains(np.asarray(x, dtype=float))
        return inside if self.region == "safe" else not inside

    def step_probability(self, mean, cov, integrator: RectangleIntegrator):
        """1ステップの安全確率 q（jnp）"""
        p = region_probability(self.terms, mean, cov, integrator)
        return p if self.region == "safe" else 1.0 - p

    def to_dict(self) -> dict:
        return {"region": self.region, "epsilon": self.epsilon, "xi": self.xi, "expr": expr_to_dict(self.expr)}


def expr_to_dict(expr: ConstraintExpr) -> dict:
    if isinstance(expr, BoxConstraint):
        return {"dim": expr.dim, "lower": float(expr.lower), "upper": float(expr.upper)}
    key = "all" if isinstance(expr, AllOf) else "any"
    return {key: [expr_to_dict(child) for child in expr.children]}


def safe_probability(
    belief: GaussianBelief,
    expr: ConstraintExpr,
    region: str = "safe",
    integrator: Optional[RectangleIntegrator] = None,
) -> float:
    """
    信念の安全集合上の確率 ∫_S N(μ, Σ) dx

    Args:
        belief: 状態のガウス信念
        expr: 制約木
        region: exprが表す集合（"safe" / "unsafe"）
        integrator: 矩形積分器（省略時はシード0の既定設定）

    Returns:
        [0, 1] の確率
    """
    terms = validate_expr(expr, belief.dim)
    integrator = integrator or RectangleIntegrator()
    mean = jnp.asarray(belief.mean, dtype=float)
    cov = jnp.asarray(belief.cov, dtype=float)
    p = float(region_probability(terms, mean, cov, integrator))
    return p if region == "safe" else 1.0 - p


# --- エピソード量 -------------------------------------------------------

def step_rewards(means, covs, reward: RewardSpec):
    return jnp.stack([reward.expected(means[t], covs[t]) for t in range(means.shape[0])])


def step_safe_probabilities(means, covs, safety: SafetySpec, integrator: RectangleIntegrator):
    return jnp.stack(
        [safety.step_probability(means[t], covs[t], integrator) for t in range(means.shape[0])]
    )


def log_space_product(probabilities):
    """∏ q_t を対数和で計算する。q_t = 0 が一つでもあれば 0"""
    floor = jnp.finfo(jnp.float64).tiny
    log_total = jnp.sum(jnp.log(jnp.maximum(probabilities, floor)))
    return jnp.where(jnp.any(probabilities <= 0.0), 0.0, jnp.exp(log_total))


def evaluate_trajectory(
    traj: PredictedTrajectory,
    reward: RewardSpec,
    safety: Optional[SafetySpec] = None,
    integrator: Optional[RectangleIntegrator] = None,
) -> PredictedTrajectory:
    """各ステップの期待報酬と安全確率を埋めた軌道を返す"""
    means = jnp.asarray(traj.means)
    covs = jnp.asarray(traj.covs)
    rewards = np.asarray(step_rewards(means, covs, reward))
    if safety is None:
        safe = np.ones(traj.horizon)
    else:
        safe = np.asarray(step_safe_probabilities(means, covs, safety, integrator or RectangleIntegrator()))
    return PredictedTrajectory(np.asarray(traj.means), np.asarray(traj.covs), rewards, safe)


def episode_return(traj: PredictedTrajectory, reward: RewardSpec) -> float:
    """R = Σ_t E[r(x_t)]"""
    if traj.horizon < 1:
        raise ContractViolationError("trajectory must not be empty")
    return float(jnp.sum(step_rewards(jnp.asarray(traj.means), jnp.asarray(traj.covs), reward)))


def episode_safety(
    traj: PredictedTrajectory, spec: SafetySpec, integrator: Optional[RectangleIntegrator] = None
) -> float:
    """
    Q = ∏_t q(x_t)

    per_step_safe_prob が埋まっていれば（evaluate_trajectory の結果）、それを spec の下で
    計算済みとみなしてそのまま使う。別の制約で評価し直すときは evaluate_trajectory からやり直す。
    ξ は Q に関係しないので with_xi で作った spec なら再計算は不要。
    """
    if traj.horizon < 1:
        raise ContractViolationError("trajectory must not be empty")
    if np.all(np.isfinite(traj.per_step_safe_prob)):
        probabilities = jnp.asarray(traj.per_step_safe_prob)
    else:
        probabilities = step_safe_probabilities(
            jnp.asarray(traj.means), jnp.asarray(traj.covs), spec, integrator or RectangleIntegrator()
        )
    return float(log_space_product(probabilities))


def composite_objective(
    traj: PredictedTrajectory,
    reward: RewardSpec,
    spec: SafetySpec,
    integrator: Optional[RectangleIntegrator] = None,
) -> float:
    """J = R + ξQ"""
    return episode_return(traj, reward) + spec.xi * episode_safety(traj, spec, integrator)
