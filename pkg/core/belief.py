"""
Gaussian Belief - 状態（または状態・制御）のガウス信念

平均ベクトルと共分散行列の組。NamedTupleなのでJAXのpytreeとしてそのまま
jit/scanを通過できる。検証系のメソッドはホスト側（numpy）専用。
"""

from typing import List, NamedTuple

import numpy as np

from core.errors import BeliefDivergenceError, ContractViolationError

SYMMETRY_TOL = 1e-10
EIGEN_TOL = 1e-9
DIVERGENCE_TRACE = 1e6


class GaussianBelief(NamedTuple):
    """N(mean, cov)"""

    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def point(cls, mean) -> "GaussianBelief":
        """共分散ゼロの信念"""
        mean = np.asarray(mean, dtype=float)
        return cls(mean, np.zeros((mean.shape[0], mean.shape[0])))

    @property
    def dim(self) -> int:
        return int(np.shape(self.mean)[0])

    def to_numpy(self) -> "GaussianBelief":
        return GaussianBelief(np.asarray(self.mean, dtype=float), np.asarray(self.cov, dtype=float))

    def validated(self, step: int = None) -> "GaussianBelief":
        """
        不変条件を確認し、対称化した信念を返す

        - 非有限値・トレース > 1e6 は発散とみなす
        - 固有値が -1e-9 を下回ったら発散、[-1e-9, 0) は 0 に切り上げる
        """
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)

        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise ContractViolationError(
                f"belief shapes do not match: mean {mean.shape}, cov {cov.shape}"
            )

        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise BeliefDivergenceError("belief contains non-finite values", step=step)

        trace = float(np.trace(cov))
        if trace > DIVERGENCE_TRACE:
            raise BeliefDivergenceError(
                f"belief covariance trace {trace:.3e} exceeds {DIVERGENCE_TRACE:.0e}",
                step=step,
                trace=trace,
            )

        cov = 0.5 * (cov + cov.T)
        eigvals, eigvecs = np.linalg.eigh(cov)
        if eigvals.min() < -EIGEN_TOL:
            raise BeliefDivergenceError(
                f"belief covariance has eigenvalue {eigvals.min():.3e} below -{EIGEN_TOL:.0e}",
                step=step,
                trace=trace,
            )
        if eigvals.min() < 0.0:
            cov = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
            cov = 0.5 * (cov + cov.T)

        return GaussianBelief(mean, cov)


class JointStateControl(NamedTuple):
    """状態と制御を縦に積んだ同時ガウス分布"""

    belief: GaussianBelief  # [n + m]
    cross_cov: np.ndarray   # [n, m] cov(x, u)

    @property
    def state_dim(self) -> int:
        return int(np.shape(self.cross_cov)[0])

    @property
    def control_dim(self) -> int:
        return int(np.shape(self.cross_cov)[1])


class PredictedTrajectory(NamedTuple):
    """ホライズンH分の予測信念と、各ステップの期待報酬・安全確率"""

    means: np.ndarray            # [H, n]
    covs: np.ndarray             # [H, n, n]
    per_step_reward: np.ndarray  # [H]
    per_step_safe_prob: np.ndarray  # [H]

    @property
    def horizon(self) -> int:
        return int(np.shape(self.means)[0])

    @property
    def beliefs(self) -> List[GaussianBelief]:
        return [GaussianBelief(self.means[t], self.covs[t]) for t in range(self.horizon)]

    @classmethod
    def from_beliefs(cls, beliefs: List[GaussianBelief]) -> "PredictedTrajectory":
        """報酬・安全確率は未記入（NaN）のまま軌道を組み立てる"""
        if not beliefs:
            raise ContractViolationError("trajectory must contain at least one belief")
        means = np.stack([np.asarray(b.mean, dtype=float) for b in beliefs])
        covs = np.stack([np.asarray(b.cov, dtype=float) for b in beliefs])
        empty = np.full(len(beliefs), np.nan)
        return cls(means, covs, empty, empty.copy())
