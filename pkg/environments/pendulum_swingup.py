"""
Pendulum Swing-up - 下向きから振り上げる単振り子

潜在状態は [φ, φ̇]（φ = 0 が倒立）。観測は TrigObservationWrapper で
(cos φ, sin φ, φ̇) にする。
"""

import numpy as np

from core.controllers import ControlBounds
from environments.base import DEFAULT_OBSERVATION_NOISE, EnvSpec, Environment, TrigObservationWrapper

GRAVITY = 10.0
MASS = 1.0
LENGTH = 1.0
DT = 0.05
MAX_SPEED = 8.0
MAX_TORQUE = 2.0


def angle_normalize(x: float) -> float:
    return ((x + np.pi) % (2 * np.pi)) - np.pi


def pendulum_swingup_step(state, u) -> np.ndarray:
    phi, phi_dot = np.asarray(state, dtype=float)
    torque = float(np.clip(np.atleast_1d(u)[0], -MAX_TORQUE, MAX_TORQUE))

    new_phi_dot = phi_dot + (3 * GRAVITY / (2 * LENGTH) * np.sin(phi) + 3.0 / (MASS * LENGTH ** 2) * torque) * DT
    new_phi_dot = float(np.clip(new_phi_dot, -MAX_SPEED, MAX_SPEED))
    new_phi = phi + new_phi_dot * DT
    return np.array([new_phi, new_phi_dot])


def pendulum_swingup_reward(state, u) -> float:
    """遷移前の状態で評価するコストの符号反転"""
    phi, phi_dot = np.asarray(state, dtype=float)
    torque = float(np.clip(np.atleast_1d(u)[0], -MAX_TORQUE, MAX_TORQUE))
    return -(angle_normalize(phi) ** 2 + 0.1 * phi_dot ** 2 + 0.001 * torque ** 2)


class PendulumSwingup(Environment):
    def __init__(self, observation_noise_std: float = DEFAULT_OBSERVATION_NOISE, constraint=None):
        spec = EnvSpec(
            name="pendulum_swingup",
            state_dim=2,
            control_dim=1,
            control_bounds=ControlBounds.symmetric(MAX_TORQUE),
            dt=DT,
            init_mean=np.array([np.pi, 0.0]),
            init_cov=np.diag([0.01, 0.01]),
            observation_noise_std=np.full(2, observation_noise_std),
        )
        super().__init__(spec, constraint)

    def transition(self, state, u):
        return pendulum_swingup_step(state, u)

    def reward(self, state, u, next_state):
        return pendulum_swingup_reward(state, u)


def make_pendulum_swingup(**kwargs) -> TrigObservationWrapper:
    """観測を (cos φ, sin φ, φ̇) にした振り子"""
    return TrigObservationWrapper(PendulumSwingup(**kwargs), angle_dims=[0])
