"""
Linear Cars - 交差点に向かう2台の車

車1は力で加速でき、車2は等速で進む。どちらかが交差点の外（|p| > a）に
いれば安全。状態は [p1, v1, p2, v2]。
"""

from typing import NamedTuple, Optional

import numpy as np

from core.controllers import ControlBounds
from core.objectives import AllOf, BoxConstraint, SafetySpec
from environments.base import DEFAULT_OBSERVATION_NOISE, EnvSpec, Environment


class LinearCarsParams(NamedTuple):
    dt: float = 0.1
    mass: float = 1.0
    u_max: float = 2.0
    half_width: float = 1.0


def linear_cars_step(state, u, params: LinearCarsParams = LinearCarsParams()) -> np.ndarray:
    """オイラー積分で1ステップ。車2は制御されない"""
    p1, v1, p2, v2 = np.asarray(state, dtype=float)
    force = float(np.atleast_1d(u)[0])
    return np.array(
        [
            p1 + params.dt * v1,
            v1 + params.dt * force / params.mass,
            p2 + params.dt * v2,
            v2,
        ]
    )


def junction_constraint(half_width: float, epsilon: float = 0.05, xi: float = 1.0) -> SafetySpec:
    """危険集合 |p1| ≤ a AND |p2| ≤ a（= 安全集合 |p1| > a OR |p2| > a の補集合）"""
    expr = AllOf(
        (
            BoxConstraint(0, -half_width, half_width),
            BoxConstraint(2, -half_width, half_width),
        )
    )
    return SafetySpec(expr, epsilon=epsilon, xi=xi, region="unsafe")


class LinearCars(Environment):
    """2台の車の交差点環境"""

    def __init__(
        self,
        params: LinearCarsParams = LinearCarsParams(),
        init_mean=(-5.0, 1.0, -5.0, 1.0),
        init_cov=None,
        observation_noise_std: float = DEFAULT_OBSERVATION_NOISE,
        constraint: Optional[SafetySpec] = None,
    ):
        self.params = params
        spec = EnvSpec(
            name="linear_cars",
            state_dim=4,
            control_dim=1,
            control_bounds=ControlBounds.symmetric(params.u_max),
            dt=params.dt,
            init_mean=np.asarray(init_mean, dtype=float),
            init_cov=0.1 * np.eye(4) if init_cov is None else np.asarray(init_cov, dtype=float),
            observation_noise_std=np.full(4, observation_noise_std),
        )
        super().__init__(spec, constraint or junction_constraint(params.half_width))

    def transition(self, state, u):
        return linear_cars_step(state, u, self.params)

    def reward(self, state, u, next_state):
        # 車1の位置（前進するほど高い）
        return float(next_state[0])
