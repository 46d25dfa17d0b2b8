"""
Linear algebra helpers - ジッター付きCholesky分解

機能:
- 段階的ジッター（平均対角成分に対する相対値）でのCholesky分解
- JAX版（微分可能、トレース内で使用）とnumpy版（ホスト側キャッシュ用）
"""

from typing import Tuple

import jax.numpy as jnp
from jax.scipy.linalg import solve_triangular
import numpy as np
import structlog

from core.errors import IllConditionedModelError

logger = structlog.get_logger()

JITTER_LADDER: Tuple[float, ...] = (1e-10, 1e-8, 1e-6)


def stable_cholesky(matrix: np.ndarray, context: str = "gram") -> Tuple[np.ndarray, float]:
    """
    ジッターを段階的に増やしながらCholesky分解する

    Args:
        matrix: 対称正定値（であるべき）行列
        context: ログ用の識別子

    Returns:
        (下三角因子, 使用したジッター量)
    """
    matrix = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise IllConditionedModelError(f"{context} matrix contains non-finite values", ())

    scale = float(np.mean(np.diag(matrix)))
    if scale <= 0.0:
        scale = 1.0
    eye = np.eye(matrix.shape[0])

    try:
        return np.linalg.cholesky(matrix), 0.0
    except np.linalg.LinAlgError:
        pass

    tried = []
    for level in JITTER_LADDER:
        tried.append(level)
        jitter = level * scale
        try:
            chol = np.linalg.cholesky(matrix + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        logger.warning("Cholesky jitter escalated", context=context, jitter=jitter)
        return chol, jitter

    raise IllConditionedModelError(f"Cholesky factorization of {context} matrix failed", tried)


def jax_cholesky(matrix: jnp.ndarray) -> Tuple[jnp.ndarray, jnp.ndarray]:
    """
    トレース内で使えるジッター付きCholesky分解

    分解結果にNaNが出たら次の段階のジッターを試す。最終段階でも失敗した場合は
    NaNを含む因子がそのまま返るので、呼び出し側で有限性を確認すること。

    Returns:
        (下三角因子, 使用したジッター量)
    """
    scale = jnp.mean(jnp.diag(matrix))
    scale = jnp.where(scale > 0.0, scale, 1.0)
    eye = jnp.eye(matrix.shape[0])

    chol = jnp.linalg.cholesky(matrix)
    used = jnp.asarray(0.0)
    for level in JITTER_LADDER:
        ok = jnp.all(jnp.isfinite(chol))
        candidate = jnp.linalg.cholesky(matrix + level * scale * eye)
        chol = jnp.where(ok, chol, candidate)
        used = jnp.where(ok, used, level * scale)
    return chol, used


def cho_solve(chol: jnp.ndarray, rhs: jnp.ndarray) -> jnp.ndarray:
    """L Lᵀ x = rhs を解く"""
    tmp = solve_triangular(chol, rhs, lower=True)
    return solve_triangular(chol.T, tmp, lower=False)


def symmetrize(matrix):
    return 0.5 * (matrix + matrix.T)
