"""Kinematic bicycle model and the control/state value types used everywhere."""

from __future__ import annotations

import math
from dataclasses import dataclass


def clamp(value: float, lo: float, hi: float) -> float:
    return lo if value < lo else hi if value > hi else value


def wrap_angle(angle: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Action:
    """Normalized control input.

    steer is in [-1, 1] (positive turns left), throttle and brake in [0, 1].
    Values are clamped into range on construction; non-finite values are
    rejected.
    """

    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    def __post_init__(self) -> None:
        for name in ("steer", "throttle", "brake"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"non-finite {name}: {value!r}")
        object.__setattr__(self, "steer", clamp(self.steer, -1.0, 1.0))
        object.__setattr__(self, "throttle", clamp(self.throttle, 0.0, 1.0))
        object.__setattr__(self, "brake", clamp(self.brake, 0.0, 1.0))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.steer, self.throttle, self.brake)


CHANNELS = ("steer", "throttle", "brake")


@dataclass(frozen=True)
class VehicleState:
    """Planar pose plus speed; heading is normalized to (-pi, pi]."""

    x: float
    y: float
    heading: float
    speed: float
    time: float = 0.0

    def __post_init__(self) -> None:
        for name in ("x", "y", "heading", "speed", "time"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"non-finite {name}: {value!r}")
        if self.speed < 0.0:
            raise ValueError(f"negative speed: {self.speed!r}")
        object.__setattr__(self, "heading", wrap_angle(self.heading))


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.5          # m
    max_accel: float = 4.0          # m/s^2 at full throttle
    max_brake: float = 8.0          # m/s^2 at full brake
    max_steer_angle: float = 0.5    # rad at |steer| = 1
    drag: float = 0.004             # 1/m, quadratic speed loss


def step(state: VehicleState, action: Action, dt: float, params: VehicleParams) -> VehicleState:
    """Advance the vehicle one tick with explicit Euler integration.

    All derivatives are evaluated at the current state: position moves along
    the current heading at the current speed, the heading rate uses the
    current speed, and the longitudinal acceleration is
    max_accel * throttle - max_brake * brake - drag * speed^2.
    Speed is clamped at zero (no reverse).
    """
    if not (math.isfinite(dt) and dt > 0.0):
        raise ValueError(f"dt must be positive and finite, got {dt!r}")
    accel = (
        params.max_accel * action.throttle
        - params.max_brake * action.brake
        - params.drag * state.speed * state.speed
    )
    heading_rate = (state.speed / params.wheelbase) * math.tan(
        params.max_steer_angle * action.steer
    )
    return VehicleState(
        x=state.x + state.speed * math.cos(state.heading) * dt,
        y=state.y + state.speed * math.sin(state.heading) * dt,
        heading=wrap_angle(state.heading + heading_rate * dt),
        speed=max(0.0, state.speed + accel * dt),
        time=state.time + dt,
    )
