"""
Run Configuration - 学習ループのハイパーパラメータ

機能:
- 初期ランダムロールアウト数・エピソード数・ホライズン・サブサンプリング
- 初期状態分布、許容リスク ε、ξ の適応ルール
- 最適化・GP学習・評価エピソードの設定

J / N / H / SUBS / m_init / S_init / maxiter / th はそのままの名前でも受け付ける。
"""

from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class RunConfig(BaseModel):
    """学習ループの設定"""

    model_config = ConfigDict(populate_by_name=True, extra="forbid", frozen=True)

    # ループ
    J_init_rollouts: int = Field(1, alias="J", ge=1)
    N_episodes: int = Field(1, alias="N", ge=1)
    horizon: int = Field(25, alias="H", ge=1)
    subs: int = Field(1, alias="SUBS", ge=1)

    # 初期状態分布
    mu0: List[float] = Field(alias="m_init")
    sigma0: List[List[float]] = Field(alias="S_init")

    # 安全ゲート
    epsilon: float = Field(0.05, alias="th", gt=0.0, lt=1.0)
    xi_init: Optional[float] = Field(None, gt=0.0)
    xi_up: float = Field(2.0, gt=1.0)
    xi_down: float = Field(0.7, gt=0.0, lt=1.0)
    conservative_fraction: float = Field(0.25, gt=0.0, lt=1.0)
    xi_min: float = Field(1e-2, gt=0.0)
    max_gate_retries: int = Field(5, ge=0)

    # 方策
    controller: Literal["rbf", "linear"] = "rbf"
    n_basis: int = Field(10, ge=1)

    # 最適化
    maxiter: int = Field(50, ge=1)
    restarts: int = Field(1, ge=1)

    # GPモデル
    normalize_data: bool = True
    fixed_noise: Optional[float] = Field(None, gt=0.0)
    gp_restarts: int = Field(3, ge=1)

    # 評価・終了条件
    eval_repeats: int = Field(0, ge=0)
    success_return: Optional[float] = None
    seed: int = 0

    @model_validator(mode="after")
    def _check_initial_distribution(self) -> "RunConfig":
        n = len(self.mu0)
        if n < 1:
            raise ValueError("m_init must have at least one entry")
        sigma = np.asarray(self.sigma0, dtype=float)
        if sigma.shape != (n, n):
            raise ValueError(f"S_init must be {n}x{n} to match m_init")
        if not np.allclose(sigma, sigma.T):
            raise ValueError("S_init must be symmetric")
        if np.linalg.eigvalsh(sigma).min() < -1e-12:
            raise ValueError("S_init must be positive semi-definite")
        if not np.all(np.isfinite(self.mu0)):
            raise ValueError("m_init must be finite")
        return self

    @property
    def init_mean(self) -> np.ndarray:
        return np.asarray(self.mu0, dtype=float)

    @property
    def init_cov(self) -> np.ndarray:
        return np.asarray(self.sigma0, dtype=float)

    def to_dict(self):
        return self.model_dump()
