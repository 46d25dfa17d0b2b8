"""
Runner Configuration - 実行環境の設定と実験ファイルのスキーマ

機能:
- 環境変数による出力先・同時実行数・ログレベル・実時間記録の設定
- TOML実験ファイル（[env] [reward] [constraints] [loop] [controller] [optimizer]）の読み込み
- 行番号つきの構文エラー、フィールドパスつきのスキーマエラー
- 実験設定から環境・報酬・安全仕様・RunConfig を組み立てる
"""

import os
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from agents.config import RunConfig
from core.errors import ConfigError, ContractViolationError
from core.objectives import (
    AllOf,
    AnyOf,
    BoxConstraint,
    ExponentialReward,
    LinearReward,
    SafetySpec,
    WeightedSumReward,
    validate_expr,
)
from environments import default_registry
from environments.base import Environment


class RunnerConfig:
    """Runnerの設定を管理するクラス"""

    def __init__(self):
        # 出力
        self.output_dir = os.getenv("RUNNER_OUTPUT_DIR", "storage/runs")

        # 同時実行設定
        self.max_concurrency = int(os.getenv("RUNNER_MAX_CONCURRENCY", "4"))

        # ログ設定
        self.log_level = os.getenv("RUNNER_LOG_LEVEL", "INFO").upper()

        # falseなら wall_ms を0で書き出す（成果物をバイト単位で再現可能にする）
        self.record_wall_time = os.getenv("RUNNER_RECORD_WALL_TIME", "false").lower() == "true"

    def to_dict(self) -> Dict[str, Any]:
        """設定を辞書形式で返す"""
        return {
            "output_dir": self.output_dir,
            "max_concurrency": self.max_concurrency,
            "log_level": self.log_level,
            "record_wall_time": self.record_wall_time,
        }

    def validate(self) -> bool:
        """設定の妥当性をチェック"""
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")

        if self.log_level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError("log_level must be one of DEBUG, INFO, WARNING, ERROR, CRITICAL")

        if not self.output_dir:
            raise ValueError("output_dir must not be empty")

        return True


# --- 実験ファイルのスキーマ ---------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class EnvSection(_Section):
    name: Literal["linear_cars", "mountain_car", "pendulum_swingup", "cartpole"]
    observation_noise_std: float = Field(1e-3, ge=0.0)


class RewardSection(_Section):
    variant: Literal["exponential", "linear", "weighted_sum"]
    target: Optional[List[float]] = None
    weight: Optional[List[float]] = None  # 対角成分
    direction: Optional[List[float]] = None
    coefficient: float = 1.0
    terms: Optional[List["RewardSection"]] = None

    @model_validator(mode="after")
    def _check_variant_fields(self) -> "RewardSection":
        if self.variant == "exponential":
            if self.target is None or self.weight is None:
                raise ValueError("exponential reward needs target and weight")
            if len(self.target) != len(self.weight):
                raise ValueError("target and weight must have the same length")
            if any(w <= 0 for w in self.weight):
                raise ValueError("weight entries must be > 0")
        elif self.variant == "linear":
            if self.direction is None:
                raise ValueError("linear reward needs direction")
        elif not self.terms:
            raise ValueError("weighted_sum reward needs terms")
        return self

    def build(self):
        if self.variant == "exponential":
            return ExponentialReward(self.target, np.diag(self.weight))
        if self.variant == "linear":
            return LinearReward(self.direction)
        return WeightedSumReward([(term.build(), term.coefficient) for term in self.terms])


class ExprNode(_Section):
    """箱制約 {dim, lower, upper} または {all = [...]} / {any = [...]}"""

    dim: Optional[int] = Field(None, ge=0)
    lower: Optional[float] = None
    upper: Optional[float] = None
    all_of: Optional[List["ExprNode"]] = Field(None, alias="all")
    any_of: Optional[List["ExprNode"]] = Field(None, alias="any")

    @model_validator(mode="after")
    def _check_shape(self) -> "ExprNode":
        kinds = [self.dim is not None, self.all_of is not None, self.any_of is not None]
        if sum(kinds) != 1:
            raise ValueError("node must be exactly one of a box (dim), 'all' or 'any'")
        if self.dim is not None:
            lower = -np.inf if self.lower is None else self.lower
            upper = np.inf if self.upper is None else self.upper
            if not lower < upper:
                raise ValueError(f"lower ({lower}) must be < upper ({upper})")
        elif self.lower is not None or self.upper is not None:
            raise ValueError("lower/upper are only allowed on boxes")
        children = self.all_of if self.all_of is not None else self.any_of
        if children is not None and not children:
            raise ValueError("'all'/'any' needs at least one child")
        return self

    def build(self):
        if self.dim is not None:
            return BoxConstraint(
                self.dim,
                -np.inf if self.lower is None else self.lower,
                np.inf if self.upper is None else self.upper,
            )
        if self.all_of is not None:
            return AllOf(tuple(child.build() for child in self.all_of))
        return AnyOf(tuple(child.build() for child in self.any_of))


RewardSection.model_rebuild()
ExprNode.model_rebuild()


class ConstraintsSection(_Section):
    region: Literal["safe", "unsafe"] = "safe"
    epsilon: float = Field(0.05, alias="th", gt=0.0, lt=1.0)
    expr: ExprNode


class LoopSection(_Section):
    J: int = Field(ge=1)
    N: int = Field(ge=1)
    H: int = Field(ge=1)
    SUBS: int = Field(1, ge=1)
    m_init: List[float]
    S_init: List[List[float]]
    seed: int = 0
    eval_repeats: int = Field(0, ge=0)
    success_return: Optional[float] = None
    normalize_data: bool = True
    fixed_noise: Optional[float] = Field(None, gt=0.0)
    gp_restarts: int = Field(3, ge=1)
    xi_init: Optional[float] = Field(None, gt=0.0)
    xi_up: float = Field(2.0, gt=1.0)
    xi_down: float = Field(0.7, gt=0.0, lt=1.0)
    conservative_fraction: float = Field(0.25, gt=0.0, lt=1.0)
    xi_min: float = Field(1e-2, gt=0.0)
    max_gate_retries: int = Field(5, ge=0)


class ControllerSection(_Section):
    variant: Literal["rbf", "linear"] = "rbf"
    n_basis: int = Field(10, ge=1)


class OptimizerSection(_Section):
    maxiter: int = Field(50, ge=1)
    restarts: int = Field(1, ge=1)


class ExperimentConfig(_Section):
    """実験ファイル全体"""

    env: EnvSection
    reward: RewardSection
    constraints: Optional[ConstraintsSection] = None
    loop: LoopSection
    controller: ControllerSection = ControllerSection()
    optimizer: OptimizerSection = OptimizerSection()

    name: str = "experiment"

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        """
        TOMLファイルを読み込んで検証する

        Raises:
            ConfigError: 構文エラー（行番号つき）・スキーマエラー（フィールドパスつき）
        """
        path = Path(path)
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            match = re.search(r"line (\d+)", str(e))
            location = f"line {match.group(1)}" if match else "file"
            raise ConfigError(f"invalid TOML in {path}", [(location, str(e))]) from e

        raw.setdefault("name", path.stem)
        config = cls.from_dict(raw, source=str(path))
        config.check()
        return config

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], source: str = "<dict>") -> "ExperimentConfig":
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise ConfigError(f"invalid experiment config {source}", _issues(e)) from e

    def check(self) -> None:
        """次元の整合性など、環境を作ってみないと分からない検証"""
        issues: List[Tuple[str, str]] = []
        n = default_registry.create(self.env.name).spec.state_dim

        if len(self.loop.m_init) != n:
            issues.append(("loop.m_init", f"must have {n} entries for env {self.env.name}"))
        try:
            self.build_reward().validate(n)
        except ContractViolationError as e:
            issues.append(("reward", str(e)))
        if self.constraints is not None:
            try:
                validate_expr(self.constraints.expr.build(), n)
            except ContractViolationError as e:
                issues.append(("constraints.expr", str(e)))
        try:
            self.run_config()
        except ConfigError as e:
            issues.extend(e.issues)

        if issues:
            raise ConfigError(f"invalid experiment config {self.name}", issues)

    def build_env(self) -> Environment:
        env = default_registry.create(self.env.name, observation_noise_std=self.env.observation_noise_std)
        return env.with_constraint(self.build_safety())

    def build_reward(self):
        return self.reward.build()

    def build_safety(self) -> Optional[SafetySpec]:
        if self.constraints is None:
            return None
        return SafetySpec(
            self.constraints.expr.build(),
            epsilon=self.constraints.epsilon,
            xi=1.0,
            region=self.constraints.region,
        )

    def run_config(self, seed: Optional[int] = None, **overrides) -> RunConfig:
        loop = self.loop
        values = {
            "J": loop.J,
            "N": loop.N,
            "H": loop.H,
            "SUBS": loop.SUBS,
            "m_init": loop.m_init,
            "S_init": loop.S_init,
            "th": self.constraints.epsilon if self.constraints is not None else 0.05,
            "xi_init": loop.xi_init,
            "xi_up": loop.xi_up,
            "xi_down": loop.xi_down,
            "conservative_fraction": loop.conservative_fraction,
            "xi_min": loop.xi_min,
            "max_gate_retries": loop.max_gate_retries,
            "controller": self.controller.variant,
            "n_basis": self.controller.n_basis,
            "maxiter": self.optimizer.maxiter,
            "restarts": self.optimizer.restarts,
            "normalize_data": loop.normalize_data,
            "fixed_noise": loop.fixed_noise,
            "gp_restarts": loop.gp_restarts,
            "eval_repeats": loop.eval_repeats,
            "success_return": loop.success_return,
            "seed": loop.seed if seed is None else seed,
        }
        values.update(overrides)
        try:
            return RunConfig.model_validate(values)
        except ValidationError as e:
            raise ConfigError("invalid loop settings", _issues(e, prefix="loop")) from e


def _issues(error: ValidationError, prefix: str = "") -> List[Tuple[str, str]]:
    issues = []
    for item in error.errors():
        path = ".".join(str(p) for p in item["loc"])
        if prefix:
            path = f"{prefix}.{path}" if path else prefix
        issues.append((path or "<root>", item["msg"]))
    return issues


# デフォルト設定インスタンス
default_config = RunnerConfig()
