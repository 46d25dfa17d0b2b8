"""
Records - エピソード記録と学習状態・実行サマリ

機能:
- EpisodeRecord: 観測軌道・制御・報酬・違反フラグ・方策スナップショット
- TrainingState: モデル・方策・安全仕様（現在のξ）・履歴
- RunSummary: エピソード一覧と集計（違反数、ブロック数、最良安全リターン）
"""

from typing import Any, Dict, List, Optional

import numpy as np

from core.controllers import Policy
from core.gp_dynamics import DynamicsModel
from core.objectives import SafetySpec

EPISODE_KINDS = ("random", "learned", "blocked", "eval")
SCHEMA_VERSION = 1


class EpisodeRecord:
    """1エピソード分の記録（ブロックされた回は遷移ゼロの記録になる）"""

    def __init__(
        self,
        episode: int,
        kind: str,
        states,
        controls,
        native_rewards,
        violated: bool = False,
        violation_step: Optional[int] = None,
        latent_states=None,
        policy_snapshot: Optional[Policy] = None,
        iteration: int = 0,
        xi: Optional[float] = None,
        predicted_risk: Optional[float] = None,
        wall_ms: int = 0,
    ):
        if kind not in EPISODE_KINDS:
            raise ValueError(f"kind must be one of {EPISODE_KINDS}")
        self.episode = episode
        self.kind = kind
        self.states = np.asarray(states, dtype=float)
        self.controls = np.asarray(controls, dtype=float)
        self.native_rewards = np.asarray(native_rewards, dtype=float)
        self.latent_states = self.states if latent_states is None else np.asarray(latent_states, dtype=float)
        self.violated = bool(violated)
        self.violation_step = violation_step
        self.policy_snapshot = policy_snapshot
        self.iteration = iteration
        self.xi = xi
        self.predicted_risk = predicted_risk
        self.wall_ms = int(wall_ms)

    @classmethod
    def blocked(cls, episode: int, iteration: int, state_dim: int, control_dim: int,
                policy: Policy, xi: float, predicted_risk: float) -> "EpisodeRecord":
        return cls(
            episode=episode,
            kind="blocked",
            states=np.zeros((0, state_dim)),
            controls=np.zeros((0, control_dim)),
            native_rewards=np.zeros(0),
            policy_snapshot=policy,
            iteration=iteration,
            xi=xi,
            predicted_risk=predicted_risk,
        )

    @property
    def steps(self) -> int:
        return int(self.controls.shape[0])

    @property
    def native_return(self) -> float:
        return float(self.native_rewards.sum())

    @property
    def is_blocked(self) -> bool:
        return self.kind == "blocked"

    @property
    def executed(self) -> bool:
        return self.kind != "blocked"

    def to_row(self, run_id: str, seed: int) -> Dict[str, Any]:
        """episodes.csv の1行"""
        return {
            "run_id": run_id,
            "seed": seed,
            "episode": self.episode,
            "kind": self.kind,
            "steps": self.steps,
            "native_return": self.native_return,
            "violated": int(self.violated),
            "violation_step": "" if self.violation_step is None else self.violation_step,
            "blocked": int(self.is_blocked),
            "xi": "" if self.xi is None else self.xi,
            "predicted_risk": "" if self.predicted_risk is None else self.predicted_risk,
            "wall_ms": self.wall_ms,
        }

    def to_event(self) -> Dict[str, Any]:
        """JSONLイベント用（軌道本体を含む）"""
        return {
            "episode": self.episode,
            "iteration": self.iteration,
            "kind": self.kind,
            "steps": self.steps,
            "native_return": self.native_return,
            "violated": self.violated,
            "violation_step": self.violation_step,
            "xi": self.xi,
            "predicted_risk": self.predicted_risk,
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "native_rewards": self.native_rewards.tolist(),
        }


class TrainingState:
    """学習ループの状態"""

    def __init__(
        self,
        model: DynamicsModel,
        policy: Policy,
        safety: Optional[SafetySpec],
        history: Optional[List[EpisodeRecord]] = None,
        iteration: int = 0,
    ):
        self.model = model
        self.policy = policy
        self.safety = safety
        self.history = history or []
        self.iteration = iteration

    @property
    def xi(self) -> Optional[float]:
        return None if self.safety is None else self.safety.xi

    def executed_steps(self) -> int:
        """モデルデータに入った遷移数（random と learned のみ）"""
        return sum(r.steps for r in self.history if r.kind in ("random", "learned"))


class RunSummary:
    """1シード分の実行結果"""

    def __init__(
        self,
        run_id: str,
        seed: int,
        env: str,
        epsilon: Optional[float],
        episodes: List[EpisodeRecord],
        iterations: List[Dict[str, Any]],
    ):
        self.run_id = run_id
        self.seed = seed
        self.env = env
        self.epsilon = epsilon
        self.episodes = episodes
        self.iterations = iterations

    @property
    def aggregates(self) -> Dict[str, Any]:
        executed = [r for r in self.episodes if r.executed]
        safe_returns = [r.native_return for r in executed if not r.violated]
        return {
            "constraint_violations": sum(1 for r in executed if r.violated),
            "blocked_episodes": sum(1 for r in self.episodes if r.is_blocked),
            "best_safe_return": max(safe_returns) if safe_returns else None,
            "executed_episodes": sum(1 for r in executed if r.kind in ("random", "learned")),
            "final_return": self.iterations[-1]["return"] if self.iterations else None,
        }

    def rows(self) -> List[Dict[str, Any]]:
        return [r.to_row(self.run_id, self.seed) for r in self.episodes]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "run_id": self.run_id,
            "seed": self.seed,
            "env": self.env,
            "epsilon": self.epsilon,
            "aggregates": self.aggregates,
            "iterations": self.iterations,
            "episodes": self.rows(),
        }
