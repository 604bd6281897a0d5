"""Domain types shared by every part of the hub.

Everything here is a plain value: no I/O, safe to share read-only across
threads. Scene coordinates are meters, right-handed, +Y up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union


class ModelError(ValueError):
    """Raised when a value-level invariant is violated at construction."""


@dataclass(frozen=True)
class Vector3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ModelError(f"Vector3.{name} must be finite, got {v!r}")

    def distance_to(self, other: "Vector3") -> float:
        return math.sqrt(
            (self.x - other.x) ** 2 + (self.y - other.y) ** 2 + (self.z - other.z) ** 2
        )

    def sub(self, other: "Vector3") -> "Vector3":
        return Vector3(self.x - other.x, self.y - other.y, self.z - other.z)

    def add(self, other: "Vector3") -> "Vector3":
        return Vector3(self.x + other.x, self.y + other.y, self.z + other.z)


@dataclass(frozen=True)
class ColorRGB:
    r: float
    g: float
    b: float

    def __post_init__(self):
        for name in ("r", "g", "b"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
                raise ModelError(f"ColorRGB.{name} must be in [0, 1], got {v!r}")


@dataclass(frozen=True)
class ColorHSB:
    """Color in the bridge's native units; fields stay put while `on` is false."""

    on: bool
    hue: int  # 0..65535
    sat: int  # 0..254
    bri: int  # 1..254

    def __post_init__(self):
        if not 0 <= self.hue <= 65535:
            raise ModelError(f"ColorHSB.hue out of range: {self.hue!r}")
        if not 0 <= self.sat <= 254:
            raise ModelError(f"ColorHSB.sat out of range: {self.sat!r}")
        if not 1 <= self.bri <= 254:
            raise ModelError(f"ColorHSB.bri out of range: {self.bri!r}")


# Hub-assigned logical time, integer milliseconds.
TimestampMs = int


class Origin(str, Enum):
    VIRTUAL = "virtual"
    PHYSICAL = "physical"


class Embodiment(str, Enum):
    VIRTUAL_ONLY = "virtual_only"
    PHYSICAL_ONLY = "physical_only"
    DUAL = "dual"


class Interaction(str, Enum):
    NONE = "none"
    VIRTUAL_TO_PHYSICAL = "virtual_to_physical"
    PHYSICAL_TO_VIRTUAL = "physical_to_virtual"
    TWO_WAY = "two_way"


class Agency(str, Enum):
    PASSIVE = "passive"
    REACTIVE = "reactive"
    AUTONOMOUS = "autonomous"


@dataclass(frozen=True)
class AgentCriteria:
    embodiment: Embodiment
    interaction: Interaction
    agency: Agency


Value = Union[bool, float, int, ColorRGB, Vector3]


@dataclass(frozen=True)
class VersionedValue:
    """One variable observation; seq strictly increases per (variable, origin)."""

    value: Value
    ts: TimestampMs
    origin: Origin
    seq: int

    def __post_init__(self):
        if self.ts < 0:
            raise ModelError("timestamp must be non-negative")
        if self.seq < 0:
            raise ModelError("seq must be non-negative")


@dataclass
class StateSnapshot:
    vars: dict[str, VersionedValue] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.vars:
            if not name:
                raise ModelError("variable names must be non-empty")


class Transform(str, Enum):
    IDENTITY = "identity"
    RGB_TO_HSB = "rgb_to_hsb"


@dataclass(frozen=True)
class Mapping:
    virtual_var: str
    physical_var: str
    transform: Transform = Transform.IDENTITY


@dataclass
class SyncLink:
    id: str
    agent_id: str
    device_id: str
    mode: Interaction
    mappings: list[Mapping] = field(default_factory=list)


@dataclass
class Agent:
    """A shared object embodied virtually, physically, or both at once."""

    id: str
    criteria: AgentCriteria
    virtual: StateSnapshot = field(default_factory=StateSnapshot)
    device: Optional[str] = None
    links: list[str] = field(default_factory=list)


# Link modes permitted for each declared interaction capability. A two-way
# agent may carry narrower one-way links; the reverse never holds.
_ALLOWED_MODES = {
    Interaction.NONE: frozenset(),
    Interaction.VIRTUAL_TO_PHYSICAL: frozenset({Interaction.VIRTUAL_TO_PHYSICAL}),
    Interaction.PHYSICAL_TO_VIRTUAL: frozenset({Interaction.PHYSICAL_TO_VIRTUAL}),
    Interaction.TWO_WAY: frozenset(
        {
            Interaction.VIRTUAL_TO_PHYSICAL,
            Interaction.PHYSICAL_TO_VIRTUAL,
            Interaction.TWO_WAY,
        }
    ),
}


def validate_agent(agent: Agent, links: list[SyncLink]) -> list[str]:
    """Return every violated consistency rule; an empty list means ok.

    Violations are data, not faults: callers decide whether to reject.
    """
    violations = []
    if not agent.id:
        violations.append("agent id must be non-empty")

    crit = agent.criteria
    device_bound = agent.device is not None or any(l.device_id for l in links)
    if device_bound and crit.embodiment == Embodiment.VIRTUAL_ONLY:
        violations.append("device-bound agent must not be VirtualOnly")
    if crit.interaction == Interaction.TWO_WAY and crit.embodiment != Embodiment.DUAL:
        violations.append("TwoWay interaction requires Dual embodiment")

    for link in links:
        if link.agent_id != agent.id:
            violations.append(f"link {link.id} does not reference agent {agent.id}")
            continue
        if link.mode == Interaction.NONE:
            violations.append(f"link {link.id} mode must not be None")
        elif link.mode not in _ALLOWED_MODES[crit.interaction]:
            violations.append(
                f"link {link.id} mode {link.mode.value} inconsistent with "
                f"agent interaction {crit.interaction.value}"
            )
        if link.mode == Interaction.TWO_WAY and crit.embodiment != Embodiment.DUAL:
            violations.append(f"link {link.id} is TwoWay but agent is not Dual")
        for m in link.mappings:
            if m.virtual_var not in agent.virtual.vars:
                violations.append(
                    f"link {link.id} maps unknown virtual var {m.virtual_var!r}"
                )
    return violations


def value_to_json(v: Value):
    """Wire/file representation of a variable value."""
    if isinstance(v, bool):
        return v
    if isinstance(v, (int, float)):
        return v
    if isinstance(v, ColorRGB):
        return {"r": v.r, "g": v.g, "b": v.b}
    if isinstance(v, Vector3):
        return {"x": v.x, "y": v.y, "z": v.z}
    if isinstance(v, ColorHSB):
        return {"on": v.on, "hue": v.hue, "sat": v.sat, "bri": v.bri}
    raise ModelError(f"unsupported value type: {type(v).__name__}")


def value_from_json(raw) -> Value:
    if isinstance(raw, bool):
        return raw
    if isinstance(raw, (int, float)):
        return raw
    if isinstance(raw, dict):
        keys = set(raw)
        if keys == {"r", "g", "b"}:
            return ColorRGB(raw["r"], raw["g"], raw["b"])
        if keys == {"x", "y", "z"}:
            return Vector3(raw["x"], raw["y"], raw["z"])
        if keys == {"on", "hue", "sat", "bri"}:
            return ColorHSB(raw["on"], raw["hue"], raw["sat"], raw["bri"])
    raise ModelError(f"unrecognized value shape: {raw!r}")
