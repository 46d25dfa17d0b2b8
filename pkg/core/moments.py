"""
SE Input Moments - ガウス入力下でのSEカーネル回帰出力のモーメント

機能:
- 入力 x ~ N(m, s) に対する E[f(x)]・Cov[f(x)]・Cov[x, f(x)] の閉形式
- GPダイナミクス（モデル不確かさ込み）とRBF方策（不確かさなし）で共用

出力次元 E 個の独立なSE回帰器を一括で扱う。すべてjnpで書かれており、
jit・勾配計算の対象になる。
"""

from typing import Optional, Tuple

import jax.numpy as jnp

from core.linalg import symmetrize


def se_input_moments(
    m: jnp.ndarray,
    s: jnp.ndarray,
    inputs: jnp.ndarray,
    lengthscales: jnp.ndarray,
    signal_variance: jnp.ndarray,
    beta: jnp.ndarray,
    inv_gram: Optional[jnp.ndarray] = None,
) -> Tuple[jnp.ndarray, jnp.ndarray, jnp.ndarray]:
    """
    ガウス入力に対する出力モーメントを計算する

    Args:
        m: 入力平均 [D]
        s: 入力共分散 [D, D]
        inputs: 訓練入力（またはRBF中心） [N, D]
        lengthscales: 出力次元ごとのARD長さスケール [E, D]
        signal_variance: 出力次元ごとの信号分散 [E]
        beta: 重みベクトル (K+σ²I)⁻¹y [E, N]
        inv_gram: (K+σ²I)⁻¹ [E, N, N]。Noneなら事後分散の項を含めない

    Returns:
        (mean [E], cov [E, E], input_output_cov [D, E])
    """
    num_out = lengthscales.shape[0]
    dim = m.shape[0]
    eye = jnp.eye(dim)

    centered = inputs - m                                   # [N, D]
    scaled = centered[None, :, :] / lengthscales[:, None, :]  # [E, N, D]

    # 平均: B = Λ⁻½ s Λ⁻½ + I
    inflation = s[None, :, :] / (lengthscales[:, :, None] * lengthscales[:, None, :]) + eye
    t = jnp.swapaxes(jnp.linalg.solve(inflation, jnp.swapaxes(scaled, 1, 2)), 1, 2)
    weighted = jnp.exp(-0.5 * jnp.sum(scaled * t, axis=-1)) * beta  # [E, N]
    coeff = signal_variance / jnp.sqrt(jnp.linalg.det(inflation))   # [E]
    mean = coeff * jnp.sum(weighted, axis=-1)

    # 入出力共分散 C = s V
    v = jnp.einsum("end,en->de", t / lengthscales[:, None, :], weighted) * coeff[None, :]
    input_output_cov = s @ v

    # 共分散
    inv_sq = 1.0 / lengthscales ** 2                        # [E, D]
    pair = inv_sq[:, None, :] + inv_sq[None, :, :]          # [E, E, D]
    r = s[None, None, :, :] * pair[:, :, None, :] + eye     # s diag(.) + I
    q = jnp.linalg.solve(r, jnp.broadcast_to(s, r.shape)) / 2.0
    q = 0.5 * (q + jnp.swapaxes(q, -1, -2))

    z = centered[None, :, :] * inv_sq[:, None, :]           # [E, N, D]
    qa = jnp.einsum("aid,abdk,aik->abi", z, q, z)
    qb = jnp.einsum("bjd,abdk,bjk->abj", z, q, z)
    cross = jnp.einsum("aid,abdk,bjk->abij", z, q, z)
    maha = qa[:, :, :, None] + qb[:, :, None, :] + 2.0 * cross

    log_k = jnp.log(signal_variance)[:, None] - 0.5 * jnp.sum(scaled ** 2, axis=-1)  # [E, N]
    big_l = jnp.exp(log_k[:, None, :, None] + log_k[None, :, None, :] + maha)
    big_l = big_l / jnp.sqrt(jnp.linalg.det(r))[:, :, None, None]

    cov = jnp.einsum("ai,abij,bj->ab", beta, big_l, beta)
    if inv_gram is not None:
        idx = jnp.arange(num_out)
        diag_l = big_l[idx, idx]                            # [E, N, N]
        trace_term = jnp.einsum("eij,eji->e", inv_gram, diag_l)
        cov = cov + jnp.diag(signal_variance - trace_term)
    cov = symmetrize(cov - jnp.outer(mean, mean))

    return mean, cov, input_output_cov
