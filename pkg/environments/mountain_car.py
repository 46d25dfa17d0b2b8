"""
Mountain Car - 連続制御版マウンテンカー

状態は [position, velocity]。ゴール（position ≥ 0.45 かつ velocity ≥ 0）到達で+100、
制御コストとして毎ステップ -0.1u²。
"""

import numpy as np

from core.controllers import ControlBounds
from environments.base import DEFAULT_OBSERVATION_NOISE, EnvSpec, Environment

MIN_POSITION = -1.2
MAX_POSITION = 0.6
MAX_SPEED = 0.07
GOAL_POSITION = 0.45
GOAL_VELOCITY = 0.0
POWER = 0.0015


def mountain_car_step(state, u) -> np.ndarray:
    position, velocity = np.asarray(state, dtype=float)
    force = min(max(float(np.atleast_1d(u)[0]), -1.0), 1.0)

    velocity += force * POWER - 0.0025 * np.cos(3 * position)
    velocity = min(max(velocity, -MAX_SPEED), MAX_SPEED)
    position += velocity
    position = min(max(position, MIN_POSITION), MAX_POSITION)
    if position == MIN_POSITION and velocity < 0:
        velocity = 0.0
    return np.array([position, velocity])


def reached_goal(state, goal_velocity: float = GOAL_VELOCITY) -> bool:
    return bool(state[0] >= GOAL_POSITION and state[1] >= goal_velocity)


def mountain_car_reward(u, next_state, goal_velocity: float = GOAL_VELOCITY) -> float:
    force = min(max(float(np.atleast_1d(u)[0]), -1.0), 1.0)
    reward = 100.0 if reached_goal(next_state, goal_velocity) else 0.0
    return reward - 0.1 * force ** 2


class MountainCar(Environment):
    def __init__(
        self,
        init_mean=(-0.5, 0.0),
        init_cov=None,
        observation_noise_std: float = DEFAULT_OBSERVATION_NOISE,
        constraint=None,
        goal_velocity: float = GOAL_VELOCITY,
    ):
        self.goal_velocity = float(goal_velocity)
        spec = EnvSpec(
            name="mountain_car",
            state_dim=2,
            control_dim=1,
            control_bounds=ControlBounds.symmetric(1.0),
            dt=1.0,
            init_mean=np.asarray(init_mean, dtype=float),
            init_cov=np.diag([0.01, 1e-4]) if init_cov is None else np.asarray(init_cov, dtype=float),
            observation_noise_std=np.full(2, observation_noise_std),
        )
        super().__init__(spec, constraint)

    def transition(self, state, u):
        return mountain_car_step(state, u)

    def reward(self, state, u, next_state):
        return mountain_car_reward(u, next_state, self.goal_velocity)

    def terminal(self, state):
        return reached_goal(state, self.goal_velocity)
