"""Per-channel arbitration between the assisting agent and the student.

Each control channel is mixed independently:

    executed = alpha * agent + (1 - alpha) * student

with its own authority weight ``alpha`` in [0, 1]. Assistance modes are
presets over the three weights; the coached channel of a per-skill mode is
handed entirely to the student so their own attempt is observable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .vehicle import Action

STRONG_ALPHA = 0.8
WEAK_ALPHA = 0.05
MODE_NAMES = ("unassisted", "strong_sa", "weak_sa", "skill_sa")
COACHABLE_CHANNELS = ("steer", "throttle", "brake")


@dataclass(frozen=True)
class BlendConfig:
    """Agent authority per channel; 1 means the agent drives that channel."""

    steer: float
    throttle: float
    brake: float

    def __post_init__(self) -> None:
        for name in ("steer", "throttle", "brake"):
            a = getattr(self, name)
            if not (math.isfinite(a) and 0.0 <= a <= 1.0):
                raise ValueError(f"alpha for {name} must be in [0, 1], got {a!r}")

    def as_dict(self) -> dict[str, float]:
        return {"steer": self.steer, "throttle": self.throttle, "brake": self.brake}


@dataclass(frozen=True)
class SaMode:
    """Assistance mode tag; ``target`` is set only for per-skill assistance."""

    kind: str
    target: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in MODE_NAMES:
            raise ValueError(f"unknown mode kind: {self.kind!r}")
        if self.kind == "skill_sa":
            if self.target not in COACHABLE_CHANNELS:
                raise ValueError(f"skill_sa target must be a control channel, got {self.target!r}")
        elif self.target is not None:
            raise ValueError(f"mode {self.kind} takes no target")

    def __str__(self) -> str:
        if self.kind == "skill_sa":
            return f"skill_sa:{self.target}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "SaMode":
        text = text.strip()
        if ":" in text:
            kind, _, target = text.partition(":")
            return cls(kind=kind, target=target)
        return cls(kind=text)


UNASSISTED = SaMode("unassisted")
STRONG_SA = SaMode("strong_sa")
WEAK_SA = SaMode("weak_sa")


def skill_sa(channel: str) -> SaMode:
    return SaMode("skill_sa", channel)


def mode_to_config(mode: SaMode) -> BlendConfig:
    """Authority preset for a mode.

    Unassisted is all zeros, strong assistance 0.8 on every channel, weak
    assistance 0.05 on every channel, and per-skill assistance is strong on
    every channel except the coached one, which the student owns outright.
    """
    if mode.kind == "unassisted":
        return BlendConfig(0.0, 0.0, 0.0)
    if mode.kind == "strong_sa":
        return BlendConfig(STRONG_ALPHA, STRONG_ALPHA, STRONG_ALPHA)
    if mode.kind == "weak_sa":
        return BlendConfig(WEAK_ALPHA, WEAK_ALPHA, WEAK_ALPHA)
    alphas = {ch: STRONG_ALPHA for ch in COACHABLE_CHANNELS}
    alphas[mode.target] = 0.0
    return BlendConfig(**alphas)


def blend(agent: Action, student: Action, config: BlendConfig) -> Action:
    """Mix the two actions channel-wise; inputs in range never get clamped."""
    return Action(
        steer=config.steer * agent.steer + (1.0 - config.steer) * student.steer,
        throttle=config.throttle * agent.throttle + (1.0 - config.throttle) * student.throttle,
        brake=config.brake * agent.brake + (1.0 - config.brake) * student.brake,
    )


def apply_revert(config: BlendConfig, lateral_offset: float, revert_threshold: float) -> BlendConfig:
    """Hand full control back to the student while they are far off track.

    Stateless safety rule evaluated every tick: when the unsigned lateral
    offset strictly exceeds the threshold, all agent authority drops to zero;
    assistance resumes as soon as the vehicle is back within bounds.
    """
    if abs(lateral_offset) > revert_threshold:
        return BlendConfig(0.0, 0.0, 0.0)
    return config
