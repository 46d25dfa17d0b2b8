"""
Propagation - モーメントマッチングによる信念の伝播

機能:
- 状態信念と方策から (状態, 制御) の同時ガウス分布を作る
- GPモデルを通した1ステップのモーメントマッチング（差分予測に状態平均を足し戻す）
- ホライズンH分の反復伝播（lax.scan、θについて微分可能）
"""

from typing import Tuple

import jax
import jax.numpy as jnp
import numpy as np
import structlog

from core.belief import GaussianBelief, JointStateControl, PredictedTrajectory
from core.controllers import Policy
from core.errors import ContractViolationError
from core.gp_dynamics import DynamicsModel, ModelArrays
from core.linalg import symmetrize
from core.moments import se_input_moments

logger = structlog.get_logger()


def joint_moments(policy: Policy, theta, mean, cov) -> Tuple[jnp.ndarray, jnp.ndarray]:
    """(x, u) の平均と共分散を積み上げる（jnp）"""
    u_mean, u_cov, xu_cov = policy.control_moments(theta, mean, cov)
    joint_mean = jnp.concatenate([mean, u_mean])
    top = jnp.concatenate([cov, xu_cov], axis=1)
    bottom = jnp.concatenate([xu_cov.T, u_cov], axis=1)
    return joint_mean, jnp.concatenate([top, bottom], axis=0)


def transition_moments(arrays: ModelArrays, joint_mean, joint_cov, state_dim: int):
    """
    同時分布 N(joint_mean, joint_cov) を入力としたときの次状態の分布（jnp）

    Returns:
        (次状態の平均 [n], 共分散 [n, n])
    """
    std = arrays.input_std
    m = (joint_mean - arrays.input_mean) / std
    s = joint_cov / jnp.outer(std, std)

    d_mean, d_cov, io_cov = se_input_moments(
        m,
        s,
        arrays.inputs,
        arrays.lengthscales,
        arrays.signal_variance,
        arrays.beta,
        arrays.inv_gram,
    )
    d_cov = d_cov + jnp.diag(arrays.noise_variance)

    ts = arrays.target_std
    d_mean = d_mean * ts
    d_cov = d_cov * jnp.outer(ts, ts)
    io_cov = std[:, None] * io_cov * ts[None, :]
    x_delta_cov = io_cov[:state_dim]

    mean = joint_mean[:state_dim] + d_mean
    cov = joint_cov[:state_dim, :state_dim] + d_cov + x_delta_cov + x_delta_cov.T
    return mean, symmetrize(cov)


def propagate(policy: Policy, theta, arrays: ModelArrays, init_mean, init_cov, horizon: int):
    """
    ホライズン分の平均・共分散の列（jnp、jit/grad可能）

    Returns:
        (means [H, n], covs [H, n, n])
    """
    state_dim = policy.state_dim

    def step(carry, _):
        mean, cov = carry
        joint_mean, joint_cov = joint_moments(policy, theta, mean, cov)
        next_mean, next_cov = transition_moments(arrays, joint_mean, joint_cov, state_dim)
        return (next_mean, next_cov), (next_mean, next_cov)

    _, (means, covs) = jax.lax.scan(step, (init_mean, init_cov), None, length=horizon)
    return means, covs


def _check_dims(model: DynamicsModel, policy: Policy, belief: GaussianBelief):
    if policy.state_dim != belief.dim:
        raise ContractViolationError(
            f"policy expects state dim {policy.state_dim}, belief has {belief.dim}"
        )
    if model.state_dim != belief.dim or model.control_dim != policy.control_dim:
        raise ContractViolationError(
            f"model dims (state {model.state_dim}, control {model.control_dim}) do not match "
            f"belief {belief.dim} / policy {policy.control_dim}"
        )


def join_state_control(state: GaussianBelief, policy: Policy) -> JointStateControl:
    """
    x ~ N(μ, Σ) のもとでの (x, π(x)) の同時モーメント

    線形方策では（スクワッシング前まで）厳密、RBF方策ではモーメントマッチング。
    """
    if policy.state_dim != state.dim:
        raise ContractViolationError(
            f"policy expects state dim {policy.state_dim}, belief has {state.dim}"
        )
    mean = jnp.asarray(state.mean, dtype=float)
    cov = jnp.asarray(state.cov, dtype=float)
    joint_mean, joint_cov = joint_moments(policy, jnp.asarray(policy.theta), mean, cov)
    joint_cov = np.asarray(joint_cov)
    return JointStateControl(
        GaussianBelief(np.asarray(joint_mean), joint_cov),
        joint_cov[: state.dim, state.dim:],
    )


def moment_match_step(model: DynamicsModel, joint: JointStateControl) -> GaussianBelief:
    """
    1ステップのモーメントマッチング

    Args:
        model: 学習済み遷移モデル
        joint: (状態, 制御) の同時分布

    Returns:
        次状態の信念（対称化・検証済み）
    """
    if joint.belief.dim != model.input_dim:
        raise ContractViolationError(
            f"joint belief has dim {joint.belief.dim}, model input dim is {model.input_dim}"
        )
    mean, cov = transition_moments(
        model.as_arrays(),
        jnp.asarray(joint.belief.mean, dtype=float),
        jnp.asarray(joint.belief.cov, dtype=float),
        model.state_dim,
    )
    return GaussianBelief(np.asarray(mean), np.asarray(cov)).validated()


def rollout_beliefs(
    model: DynamicsModel, policy: Policy, init: GaussianBelief, horizon: int
) -> PredictedTrajectory:
    """
    初期信念からHステップ分の予測信念を得る

    報酬・安全確率は未記入（objectivesで埋める）。

    Args:
        model: 遷移モデル
        policy: 方策
        init: 初期状態分布 N(μ0, Σ0)
        horizon: ステップ数 H

    Returns:
        PredictedTrajectory
    """
    if horizon < 1:
        raise ContractViolationError("horizon must be >= 1")
    init = init.validated()
    _check_dims(model, policy, init)

    means, covs = propagate(
        policy,
        jnp.asarray(policy.theta),
        model.as_arrays(),
        jnp.asarray(init.mean),
        jnp.asarray(init.cov),
        horizon,
    )
    means = np.array(means)
    covs = np.array(covs)
    for t in range(horizon):
        belief = GaussianBelief(means[t], covs[t]).validated(step=t)
        covs[t] = belief.cov

    logger.debug("Beliefs propagated", horizon=horizon, final_trace=float(np.trace(covs[-1])))
    empty = np.full(horizon, np.nan)
    return PredictedTrajectory(means, covs, empty, empty.copy())
