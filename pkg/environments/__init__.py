"""
Safe Policy Search - Environments Module

依存ライブラリなしのシミュレータ群:
- linear_cars: 交差点に向かう2台の車（安全制約つき）
- mountain_car: 連続制御版マウンテンカー
- pendulum_swingup: 振り子の振り上げ（三角関数エンコード観測）
- cartpole: 台車上の倒立振子
"""

from .base import EnvSpec, Environment, EnvironmentRegistry, TrigObservationWrapper
from .cartpole import CartPole
from .linear_cars import LinearCars, junction_constraint
from .mountain_car import MountainCar
from .pendulum_swingup import PendulumSwingup, make_pendulum_swingup

default_registry = EnvironmentRegistry()
default_registry.register("linear_cars", LinearCars, "Two cars approaching a junction")
default_registry.register("mountain_car", MountainCar, "Continuous mountain car")
default_registry.register("pendulum_swingup", make_pendulum_swingup, "Pendulum swing-up, trig observation")
default_registry.register("cartpole", CartPole, "Classic cart-pole, RK4")

__all__ = [
    "EnvSpec",
    "Environment",
    "EnvironmentRegistry",
    "TrigObservationWrapper",
    "LinearCars",
    "MountainCar",
    "PendulumSwingup",
    "CartPole",
    "junction_constraint",
    "make_pendulum_swingup",
    "default_registry",
]
