"""
Cart-pole - 台車上の倒立振子（古典的な運動方程式、RK4積分）

状態は [x, ẋ, φ, φ̇]。|φ| が閾値を超えたら終端、生き残ったステップごとに+1。
"""

import numpy as np

from core.controllers import ControlBounds
from environments.base import DEFAULT_OBSERVATION_NOISE, EnvSpec, Environment

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
HALF_LENGTH = 0.5
FORCE_MAG = 10.0
DT = 0.02
ANGLE_THRESHOLD = 12 * 2 * np.pi / 360


def cartpole_derivatives(state, force: float) -> np.ndarray:
    _, x_dot, phi, phi_dot = state
    total_mass = CART_MASS + POLE_MASS
    pole_ml = POLE_MASS * HALF_LENGTH
    cos, sin = np.cos(phi), np.sin(phi)

    temp = (force + pole_ml * phi_dot ** 2 * sin) / total_mass
    phi_acc = (GRAVITY * sin - cos * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos ** 2 / total_mass)
    )
    x_acc = temp - pole_ml * phi_acc * cos / total_mass
    return np.array([x_dot, x_acc, phi_dot, phi_acc])


def cartpole_step(state, u, dt: float = DT) -> np.ndarray:
    """古典的4次ルンゲ＝クッタで1ステップ"""
    state = np.asarray(state, dtype=float)
    force = float(np.clip(np.atleast_1d(u)[0], -FORCE_MAG, FORCE_MAG))
    k1 = cartpole_derivatives(state, force)
    k2 = cartpole_derivatives(state + 0.5 * dt * k1, force)
    k3 = cartpole_derivatives(state + 0.5 * dt * k2, force)
    k4 = cartpole_derivatives(state + dt * k3, force)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def cartpole_energy(state) -> float:
    """無外力系の全エネルギー（運動 + 位置）"""
    _, x_dot, phi, phi_dot = np.asarray(state, dtype=float)
    m, l = POLE_MASS, HALF_LENGTH
    kinetic = (
        0.5 * (CART_MASS + m) * x_dot ** 2
        + m * l * np.cos(phi) * x_dot * phi_dot
        + 0.5 * (4.0 / 3.0) * m * l ** 2 * phi_dot ** 2
    )
    return float(kinetic + m * GRAVITY * l * np.cos(phi))


class CartPole(Environment):
    def __init__(
        self,
        init_cov=None,
        observation_noise_std: float = DEFAULT_OBSERVATION_NOISE,
        constraint=None,
    ):
        spec = EnvSpec(
            name="cartpole",
            state_dim=4,
            control_dim=1,
            control_bounds=ControlBounds.symmetric(FORCE_MAG),
            dt=DT,
            init_mean=np.zeros(4),
            init_cov=0.0025 * np.eye(4) if init_cov is None else np.asarray(init_cov, dtype=float),
            observation_noise_std=np.full(4, observation_noise_std),
        )
        super().__init__(spec, constraint)

    def transition(self, state, u):
        return cartpole_step(state, u)

    def reward(self, state, u, next_state):
        return 0.0 if self.terminal(next_state) else 1.0

    def terminal(self, state):
        return bool(abs(state[2]) > ANGLE_THRESHOLD)
