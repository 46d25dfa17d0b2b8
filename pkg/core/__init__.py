"""
Safe Policy Search - Core Module

数値計算の中核:
- belief: ガウス信念と予測軌道
- gp_dynamics: GP遷移モデルの学習と予測
- controllers: 線形 / RBF方策とスクワッシング
- propagation: モーメントマッチングによる信念伝播
- objectives: 期待報酬・安全確率・複合目的
- optimizer: L-BFGS-Bによる方策改善
- checkpoint: モデル・方策のJSON永続化
"""

import jax

# 勾配チェックとCholeskyの精度のため倍精度で動かす
jax.config.update("jax_enable_x64", True)

from .belief import GaussianBelief, JointStateControl, PredictedTrajectory  # noqa: E402
from .errors import (  # noqa: E402
    BeliefDivergenceError,
    ConfigError,
    ContractViolationError,
    ExperimentError,
    IllConditionedModelError,
    OptimizationFailedError,
    PolicySearchError,
)

__all__ = [
    "GaussianBelief",
    "JointStateControl",
    "PredictedTrajectory",
    "PolicySearchError",
    "ContractViolationError",
    "IllConditionedModelError",
    "BeliefDivergenceError",
    "OptimizationFailedError",
    "ConfigError",
    "ExperimentError",
]
