"""
Optimizer - 方策パラメータの勾配ベース最適化

機能:
- ロールアウト目的関数 J(θ) = R(θ) + ξQ(θ) とその勾配（jit済み、ξは再コンパイルなしで変更可）
- L-BFGS-B（メモリ10）による最大化、評価のメモ化、最良点の追跡
- リスタート（摂動、勾配ほぼゼロ時の再初期化）
- 発散した評価点はペナルティとして扱う
"""

from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import jax
import jax.numpy as jnp
import numpy as np
import structlog
from scipy.optimize import minimize

from core.belief import DIVERGENCE_TRACE, GaussianBelief
from core.controllers import Policy
from core.errors import ContractViolationError, OptimizationFailedError
from core.gp_dynamics import DynamicsModel
from core.objectives import (
    RectangleIntegrator,
    RewardSpec,
    SafetySpec,
    log_space_product,
    step_rewards,
    step_safe_probabilities,
)
from core.propagation import propagate

logger = structlog.get_logger()

LBFGS_MEMORY = 10
DIVERGENCE_PENALTY = 1e12
ZERO_GRADIENT = 1e-8
MAX_ZERO_GRADIENT_RESTARTS = 2
PERTURBATION_SCALE = 0.1


class ObjectiveResult(NamedTuple):
    """1回の目的関数評価"""

    value: float
    gradient: np.ndarray
    reward: float
    safety: float
    xi: float
    diverged: bool


class OptimizationReport(NamedTuple):
    """最適化の結果"""

    theta_opt: np.ndarray
    J_opt: float
    R_opt: float
    Q_opt: float
    iterations_used: int
    converged: bool
    gradient_norm_final: float
    restarts_used: int
    evaluations: int
    diverged_evaluations: int
    xi: float

    def to_dict(self) -> Dict[str, object]:
        return {
            "J_opt": self.J_opt,
            "R_opt": self.R_opt,
            "Q_opt": self.Q_opt,
            "iterations_used": self.iterations_used,
            "converged": self.converged,
            "gradient_norm_final": self.gradient_norm_final,
            "restarts_used": self.restarts_used,
            "evaluations": self.evaluations,
            "diverged_evaluations": self.diverged_evaluations,
            "xi": self.xi,
        }


class PlanningContext(NamedTuple):
    """目的関数の評価に必要なもの一式"""

    model: DynamicsModel
    policy: Policy
    reward: RewardSpec
    safety: Optional[SafetySpec]
    init: GaussianBelief
    horizon: int
    integrator: Optional[RectangleIntegrator] = None


class ObjectiveEvaluator:
    """
    ロールアウト目的関数のjit済み評価器

    モデル配列・初期信念・ξは引数として渡すため、ξの変更では再コンパイルしない。
    """

    def __init__(self, context: PlanningContext):
        if context.horizon < 1:
            raise ContractViolationError("horizon must be >= 1")
        self.context = context
        self.arrays = context.model.as_arrays()
        self.init_mean = jnp.asarray(context.init.mean, dtype=float)
        self.init_cov = jnp.asarray(context.init.cov, dtype=float)

        policy = context.policy
        reward = context.reward
        safety = context.safety
        integrator = context.integrator or RectangleIntegrator()
        horizon = context.horizon

        def total(theta, arrays, init_mean, init_cov, xi):
            means, covs = propagate(policy, theta, arrays, init_mean, init_cov, horizon)
            r = jnp.sum(step_rewards(means, covs, reward))
            if safety is None:
                q = jnp.asarray(1.0)
            else:
                q = log_space_product(step_safe_probabilities(means, covs, safety, integrator))
            max_trace = jnp.max(jnp.trace(covs, axis1=1, axis2=2))
            return r + xi * q, (r, q, max_trace)

        self._value_and_grad = jax.jit(jax.value_and_grad(total, has_aux=True))

    @property
    def xi(self) -> float:
        return 0.0 if self.context.safety is None else self.context.safety.xi

    def __call__(self, theta, xi: Optional[float] = None) -> ObjectiveResult:
        theta = np.asarray(theta, dtype=float)
        xi = self.xi if xi is None else float(xi)
        (value, (r, q, max_trace)), grad = self._value_and_grad(
            jnp.asarray(theta), self.arrays, self.init_mean, self.init_cov, xi
        )
        value, r, q = float(value), float(r), float(q)
        grad = np.asarray(grad, dtype=float)

        diverged = (
            not np.isfinite(value)
            or not np.all(np.isfinite(grad))
            or not float(max_trace) <= DIVERGENCE_TRACE
        )
        if diverged:
            logger.debug("Objective diverged", max_trace=float(max_trace))
            return ObjectiveResult(-np.inf, np.zeros_like(theta), r, q, xi, True)
        return ObjectiveResult(value, grad, r, q, xi, False)


def objective_and_gradient(theta, context: PlanningContext) -> ObjectiveResult:
    """
    θでの J = R + ξQ と ∂J/∂θ

    発散時は J = -inf、勾配ゼロ、diverged=True を返す。
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ContractViolationError("theta must be finite")
    return ObjectiveEvaluator(context)(theta)


def maximize(
    objective_fn: Callable[[np.ndarray], ObjectiveResult],
    theta0,
    maxiter: int = 100,
    restarts: int = 1,
    bounds: Optional[Sequence[Tuple[Optional[float], Optional[float]]]] = None,
    seed: int = 0,
    reinitialize: Optional[Callable[[np.random.Generator], np.ndarray]] = None,
) -> Tuple[np.ndarray, ObjectiveResult, Dict[str, object]]:
    """
    L-BFGS-Bで目的関数を最大化する

    初期点を含め、評価済みの点のうち最良のものを返す。

    Args:
        objective_fn: θ → ObjectiveResult
        theta0: 初期パラメータ
        maxiter: リスタート1回あたりの最大反復数
        restarts: リスタート回数（初期点からの1回を含む）
        bounds: L-BFGS-B用の境界
        seed: 摂動用の乱数シード
        reinitialize: 勾配ほぼゼロ時に新しい開始点を返す関数（省略時は摂動）

    Returns:
        (最良θ, その評価結果, 診断情報)
    """
    if maxiter < 1:
        raise ContractViolationError("maxiter must be >= 1")
    if restarts < 1:
        raise ContractViolationError("restarts must be >= 1")

    theta0 = np.asarray(theta0, dtype=float)
    rng = np.random.default_rng(seed)
    cache: Dict[bytes, ObjectiveResult] = {}
    best: Dict[str, object] = {"theta": None, "result": None}
    diagnostics: List[Dict[str, object]] = []
    counters = {"evaluations": 0, "diverged": 0}

    def evaluate(theta: np.ndarray) -> ObjectiveResult:
        key = theta.tobytes()
        if key not in cache:
            result = objective_fn(theta.copy())
            cache[key] = result
            counters["evaluations"] += 1
            if result.diverged:
                counters["diverged"] += 1
            elif best["result"] is None or result.value > best["result"].value:
                best["theta"] = theta.copy()
                best["result"] = result
        return cache[key]

    def negated(theta):
        result = evaluate(np.asarray(theta, dtype=float))
        if result.diverged:
            return DIVERGENCE_PENALTY, np.zeros_like(theta)
        return -result.value, -result.gradient

    def clip(theta):
        if bounds is None:
            return theta
        lower = np.array([-np.inf if lo is None else lo for lo, _ in bounds])
        upper = np.array([np.inf if hi is None else hi for _, hi in bounds])
        return np.clip(theta, lower, upper)

    total_restarts = restarts
    zero_gradient_restarts = 0
    iterations = 0
    converged = False
    run = 0
    start = theta0
    while run < total_restarts:
        result = minimize(
            negated,
            start,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": maxiter, "maxcor": LBFGS_MEMORY},
        )
        iterations += int(result.nit)
        grad_norm = float(np.linalg.norm(result.jac)) if result.jac is not None else np.inf
        diagnostics.append(
            {
                "restart": run,
                "iterations": int(result.nit),
                "success": bool(result.success),
                "message": str(result.message),
                "value": -float(result.fun),
                "gradient_norm": grad_norm,
            }
        )
        converged = converged or bool(result.success)

        near_zero = grad_norm < ZERO_GRADIENT and not evaluate(np.asarray(result.x)).diverged
        if near_zero and zero_gradient_restarts < MAX_ZERO_GRADIENT_RESTARTS:
            zero_gradient_restarts += 1
            total_restarts += 1
            logger.warning("Near-zero gradient, restarting", restart=run, gradient_norm=grad_norm)
            start = clip(reinitialize(rng)) if reinitialize is not None else None
        else:
            start = None

        run += 1
        if run < total_restarts:
            if start is None:
                anchor = best["theta"] if best["theta"] is not None else theta0
                start = clip(anchor + rng.normal(size=anchor.shape) * PERTURBATION_SCALE * (np.abs(anchor) + 1.0))

    if best["result"] is None:
        raise OptimizationFailedError(
            f"all {total_restarts} restarts diverged", diagnostics=diagnostics
        )

    info = {
        "iterations": iterations,
        "converged": converged,
        "restarts": total_restarts,
        "evaluations": counters["evaluations"],
        "diverged_evaluations": counters["diverged"],
        "diagnostics": diagnostics,
    }
    return best["theta"], best["result"], info


def improve_policy(
    policy: Policy,
    context: PlanningContext,
    maxiter: int = 100,
    restarts: int = 1,
    seed: int = 0,
    reinitialize: Optional[Callable[[np.random.Generator], np.ndarray]] = None,
    evaluator: Optional[ObjectiveEvaluator] = None,
) -> OptimizationReport:
    """
    方策パラメータを最適化する

    Args:
        policy: 開始点の方策
        context: 評価コンテキスト（context.policy は形状の参照にのみ使う）
        maxiter: リスタートごとの反復上限
        restarts: リスタート回数
        seed: 乱数シード
        reinitialize: 再初期化関数
        evaluator: 再利用する評価器（ξ変更時の再コンパイル回避）

    Returns:
        OptimizationReport
    """
    evaluator = evaluator or ObjectiveEvaluator(context._replace(policy=policy))
    xi = 0.0 if context.safety is None else context.safety.xi

    theta, result, info = maximize(
        lambda th: evaluator(th, xi),
        policy.theta,
        maxiter=maxiter,
        restarts=restarts,
        bounds=policy.parameter_bounds(),
        seed=seed,
        reinitialize=reinitialize,
    )

    report = OptimizationReport(
        theta_opt=theta,
        J_opt=result.value,
        R_opt=result.reward,
        Q_opt=result.safety,
        iterations_used=info["iterations"],
        converged=info["converged"],
        gradient_norm_final=float(np.linalg.norm(result.gradient)),
        restarts_used=info["restarts"],
        evaluations=info["evaluations"],
        diverged_evaluations=info["diverged_evaluations"],
        xi=xi,
    )
    logger.info(
        "Policy optimized",
        J=round(report.J_opt, 6),
        R=round(report.R_opt, 6),
        Q=round(report.Q_opt, 6),
        xi=xi,
        iterations=report.iterations_used,
        evaluations=report.evaluations,
    )
    return report
