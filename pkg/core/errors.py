"""
Errors - 方策探索ライブラリ共通の例外

すべての例外は PolicySearchError を継承する。
"""

from typing import Any, Dict, List, Optional, Sequence, Tuple


class PolicySearchError(Exception):
    """ライブラリ共通の基底例外"""


class ContractViolationError(PolicySearchError, ValueError):
    """次元不一致・非有限値など、呼び出し側の契約違反"""


class IllConditionedModelError(PolicySearchError):
    """すべてのジッター段階でCholesky分解に失敗した"""

    def __init__(self, message: str, jitter_levels: Sequence[float] = ()):
        super().__init__(message)
        self.jitter_levels = list(jitter_levels)

    def __str__(self) -> str:
        levels = ", ".join(f"{j:.0e}" for j in self.jitter_levels)
        return f"{self.args[0]} (jitter tried: [{levels}])"


class BeliefDivergenceError(PolicySearchError):
    """予測分布の共分散が発散した、または半正定値性を失った"""

    def __init__(self, message: str, step: Optional[int] = None, trace: Optional[float] = None):
        super().__init__(message)
        self.step = step
        self.trace = trace


class OptimizationFailedError(PolicySearchError):
    """すべてのリスタートが発散した"""

    def __init__(self, message: str, diagnostics: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class ConfigError(PolicySearchError, ValueError):
    """実験設定ファイルの構文・スキーマエラー"""

    def __init__(self, message: str, issues: Optional[List[Tuple[str, str]]] = None):
        super().__init__(message)
        # (location, message) のリスト。locationは "line 12" や "constraints.expr.all.0.lower"
        self.issues = issues or []

    def __str__(self) -> str:
        if not self.issues:
            return str(self.args[0])
        details = "; ".join(f"{loc}: {msg}" for loc, msg in self.issues)
        return f"{self.args[0]}: {details}"


class ExperimentError(PolicySearchError):
    """実験途中の失敗。それまでの履歴を保持する"""

    def __init__(self, message: str, history: Optional[List[Any]] = None):
        super().__init__(message)
        self.history = history or []
