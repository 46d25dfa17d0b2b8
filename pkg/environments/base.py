"""
Environment Base - エピソード型シミュレータの共通インターフェース

機能:
- EnvSpec（次元・制御範囲・刻み幅・初期分布・観測ノイズ）
- reset / step / is_safe / clone の統一API
- 観測ノイズは観測にのみ加え、潜在状態には加えない
- 角度次元を (cos, sin) に置き換える観測ラッパー
- 名前で環境を引けるレジストリ
"""

import copy
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import structlog

from core.controllers import ControlBounds
from core.errors import ContractViolationError
from core.objectives import SafetySpec

logger = structlog.get_logger()

DEFAULT_OBSERVATION_NOISE = 1e-3


class EnvSpec(NamedTuple):
    """環境の仕様"""

    name: str
    state_dim: int
    control_dim: int
    control_bounds: ControlBounds
    dt: float
    init_mean: np.ndarray
    init_cov: np.ndarray
    observation_noise_std: np.ndarray

    def validate(self) -> "EnvSpec":
        if self.state_dim < 1 or self.control_dim < 1:
            raise ContractViolationError("state_dim and control_dim must be >= 1")
        if not self.dt > 0:
            raise ContractViolationError("dt must be > 0")
        if self.control_bounds.validate().dim != self.control_dim:
            raise ContractViolationError("control bounds must match control_dim")
        if np.shape(self.init_mean) != (self.state_dim,):
            raise ContractViolationError("init_mean must match state_dim")
        if np.shape(self.init_cov) != (self.state_dim, self.state_dim):
            raise ContractViolationError("init_cov must be [state_dim, state_dim]")
        if np.shape(self.observation_noise_std) != (self.state_dim,):
            raise ContractViolationError("observation_noise_std must match state_dim")
        return self


class Environment:
    """
    エピソード型環境の基底クラス

    サブクラスは transition / reward / terminal を純粋関数として実装する。
    """

    def __init__(self, spec: EnvSpec, constraint: Optional[SafetySpec] = None):
        self.spec = spec.validate()
        self.constraint = constraint
        self._state: Optional[np.ndarray] = None
        self._rng: Optional[np.random.Generator] = None

    # --- サブクラスで実装 ---
    def transition(self, state: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward(self, state: np.ndarray, u: np.ndarray, next_state: np.ndarray) -> float:
        raise NotImplementedError

    def terminal(self, state: np.ndarray) -> bool:
        return False

    def sample_initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.spec.init_mean, self.spec.init_cov)

    # --- 共通API ---
    @property
    def state(self) -> np.ndarray:
        """潜在状態（ノイズなし）のコピー"""
        if self._state is None:
            raise ContractViolationError("environment has not been reset")
        return self._state.copy()

    @property
    def observation_dim(self) -> int:
        return self.spec.state_dim

    def clean_observation(self, state: np.ndarray) -> np.ndarray:
        return np.asarray(state, dtype=float).copy()

    def observe(self, state: np.ndarray) -> np.ndarray:
        clean = self.clean_observation(state)
        std = self.spec.observation_noise_std
        return clean + self._rng.normal(size=clean.shape) * std

    def with_constraint(self, constraint: Optional[SafetySpec]) -> "Environment":
        self.constraint = constraint
        return self

    def is_safe(self, state: np.ndarray) -> bool:
        """潜在状態（の雑音なし観測）が安全集合に入っているか"""
        if self.constraint is None:
            return True
        return self.constraint.is_safe(self.clean_observation(state))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._rng = rng
        self._state = np.asarray(self.sample_initial_state(rng), dtype=float)
        return self.observe(self._state)

    def step(self, u) -> Tuple[np.ndarray, float, bool]:
        """
        1ステップ進める

        Args:
            u: 制御入力（範囲外はクリップして警告）

        Returns:
            (観測, ネイティブ報酬, 終端フラグ)
        """
        if self._state is None:
            raise ContractViolationError("environment has not been reset")
        u = np.atleast_1d(np.asarray(u, dtype=float))
        bounds = self.spec.control_bounds
        clipped = bounds.clip(u)
        if not np.array_equal(clipped, u):
            logger.warning("Control clipped", env=self.spec.name, control=u.tolist())

        next_state = self.transition(self._state, clipped)
        reward = self.reward(self._state, clipped, next_state)
        self._state = next_state
        return self.observe(next_state), float(reward), bool(self.terminal(next_state))

    def clone(self) -> "Environment":
        return copy.deepcopy(self)


class TrigObservationWrapper(Environment):
    """角度次元 φ を (cos φ, sin φ) に置き換えた観測を返すラッパー"""

    def __init__(self, env: Environment, angle_dims: Sequence[int]):
        self.env = env
        self.angle_dims = sorted(int(d) for d in angle_dims)
        inner = env.spec
        if any(d < 0 or d >= inner.state_dim for d in self.angle_dims):
            raise ContractViolationError("angle dims out of range")

        mean, var = self._encode_moments(inner.init_mean, np.diag(inner.init_cov))
        noise = self._expand(inner.observation_noise_std)
        spec = inner._replace(
            state_dim=inner.state_dim + len(self.angle_dims),
            init_mean=mean,
            init_cov=np.diag(var),
            observation_noise_std=noise,
        )
        super().__init__(spec, env.constraint)

    def _expand(self, values: np.ndarray) -> np.ndarray:
        out: List[float] = []
        for d, v in enumerate(values):
            out.extend([v, v] if d in self.angle_dims else [v])
        return np.asarray(out, dtype=float)

    def _encode_moments(self, mean: np.ndarray, var: np.ndarray):
        """角度の (cos, sin) の平均・分散（ガウス角度に対する厳密値）"""
        out_mean: List[float] = []
        out_var: List[float] = []
        for d, (m, v) in enumerate(zip(mean, var)):
            if d in self.angle_dims:
                decay = np.exp(-0.5 * v)
                e_cos, e_sin = np.cos(m) * decay, np.sin(m) * decay
                e_cos2 = 0.5 * (1.0 + np.cos(2 * m) * np.exp(-2.0 * v))
                e_sin2 = 0.5 * (1.0 - np.cos(2 * m) * np.exp(-2.0 * v))
                out_mean.extend([e_cos, e_sin])
                out_var.extend([max(e_cos2 - e_cos ** 2, 0.0), max(e_sin2 - e_sin ** 2, 0.0)])
            else:
                out_mean.append(m)
                out_var.append(v)
        return np.asarray(out_mean), np.asarray(out_var)

    def clean_observation(self, state: np.ndarray) -> np.ndarray:
        out: List[float] = []
        for d, value in enumerate(np.asarray(state, dtype=float)):
            if d in self.angle_dims:
                out.extend([np.cos(value), np.sin(value)])
            else:
                out.append(value)
        return np.asarray(out)

    @property
    def state(self) -> np.ndarray:
        return self.env.state

    def transition(self, state, u):
        return self.env.transition(state, u)

    def reward(self, state, u, next_state):
        return self.env.reward(state, u, next_state)

    def terminal(self, state):
        return self.env.terminal(state)

    def sample_initial_state(self, rng):
        return self.env.sample_initial_state(rng)

    def reset(self, rng):
        self._rng = rng
        self.env.reset(rng)
        return self.observe(self.env.state)

    def step(self, u):
        _, reward, terminal = self.env.step(u)
        return self.observe(self.env.state), reward, terminal


class EnvironmentRegistry:
    """環境ファクトリの登録と管理"""

    def __init__(self):
        self.factories: Dict[str, Callable[..., Environment]] = {}
        self.descriptions: Dict[str, str] = {}

    def register(self, name: str, factory: Callable[..., Environment], description: str = "") -> None:
        self.factories[name] = factory
        self.descriptions[name] = description
        logger.debug("Environment registered", env=name)

    def get(self, name: str) -> Optional[Callable[..., Environment]]:
        return self.factories.get(name)

    def create(self, name: str, **kwargs) -> Environment:
        factory = self.get(name)
        if factory is None:
            raise ContractViolationError(
                f"unknown environment {name!r} (known: {', '.join(sorted(self.factories))})"
            )
        return factory(**kwargs)

    def list(self) -> List[str]:
        return sorted(self.factories)
