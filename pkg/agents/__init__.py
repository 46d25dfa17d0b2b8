"""
Safe Policy Search - Agents Module

学習ループ関連:
- config: 学習ループの設定 (RunConfig)
- records: エピソード記録・学習状態・実行サマリ
- safety_gate: 予測リスクによる展開可否判定とξの適応
- policy_search_agent: モデル学習・方策改善・実行を繰り返すエージェント
"""

from .config import RunConfig
from .policy_search_agent import PolicySearchAgent
from .records import EpisodeRecord, RunSummary, TrainingState
from .safety_gate import GateDecision, SafetyGate, safety_gate

__all__ = [
    "RunConfig",
    "PolicySearchAgent",
    "EpisodeRecord",
    "RunSummary",
    "TrainingState",
    "GateDecision",
    "SafetyGate",
    "safety_gate",
]
