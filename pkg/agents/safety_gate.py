"""
Safety Gate - 予測リスクに基づく方策の展開可否判定

機能:
- リスク = 1 - Q_pred を許容値 ε と比較
- ε 超過ならブロックし ξ を引き上げる
- リスクが十分小さい（conservative_fraction·ε 以下）なら ξ を下げる（下限 xi_min）
- 判定履歴と統計
"""

from typing import Any, Dict, List, NamedTuple

import structlog

from agents.config import RunConfig
from core.errors import ContractViolationError
from core.objectives import SafetySpec

logger = structlog.get_logger()

DEPLOY = "deploy"
BLOCKED = "blocked"


class GateDecision(NamedTuple):
    decision: str
    xi: float
    risk: float

    @property
    def deploy(self) -> bool:
        return self.decision == DEPLOY


def safety_gate(q_pred: float, spec: SafetySpec, config: RunConfig) -> GateDecision:
    """
    予測安全確率から展開可否と新しいξを決める

    Args:
        q_pred: 予測エピソード安全確率 Q ∈ [0, 1]
        spec: 安全仕様（現在のξとεを持つ）
        config: ξ更新の係数

    Returns:
        GateDecision
    """
    if not 0.0 <= q_pred <= 1.0:
        raise ContractViolationError(f"predicted safety must be in [0, 1], got {q_pred}")

    risk = 1.0 - q_pred
    if risk > spec.epsilon:
        return GateDecision(BLOCKED, spec.xi * config.xi_up, risk)
    if risk <= config.conservative_fraction * spec.epsilon:
        return GateDecision(DEPLOY, max(spec.xi * config.xi_down, config.xi_min), risk)
    return GateDecision(DEPLOY, spec.xi, risk)


class SafetyGate:
    """判定を記録しながら安全ゲートを適用する"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.decisions: List[Dict[str, Any]] = []

    def check(self, q_pred: float, spec: SafetySpec, iteration: int = 0) -> GateDecision:
        result = safety_gate(q_pred, spec, self.config)
        self.decisions.append(
            {
                "iteration": iteration,
                "decision": result.decision,
                "risk": result.risk,
                "xi_before": spec.xi,
                "xi_after": result.xi,
            }
        )
        log = logger.warning if result.decision == BLOCKED else logger.info
        log(
            "Safety gate decision",
            decision=result.decision,
            risk=round(result.risk, 6),
            epsilon=spec.epsilon,
            xi=result.xi,
            iteration=iteration,
        )
        return result

    def get_stats(self) -> Dict[str, Any]:
        blocked = sum(1 for d in self.decisions if d["decision"] == BLOCKED)
        return {
            "total_checks": len(self.decisions),
            "blocked": blocked,
            "deployed": len(self.decisions) - blocked,
        }
