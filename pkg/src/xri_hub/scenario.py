"""Deterministic simulation loop and the two bundled scenes.

The lamp scene seats a draggable virtual bulb in a socket to switch a
smart plug; the galaxy scene orbits colored planets around a sun and lets
a draggable rocket pick a planet's color for four ambient bulbs. Both are
plain data (agents, devices, links, geometry) loaded from a YAML config;
the tick loop runs a fixed phase order so identical inputs replay
identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .hub import BusEvent, SyncHub
from .devices.gateway import DeviceDescriptor, DeviceKind
from .model import (
    Agency,
    Agent,
    AgentCriteria,
    ColorRGB,
    Embodiment,
    Interaction,
    Mapping,
    ModelError,
    Origin,
    StateSnapshot,
    SyncLink,
    Transform,
    Vector3,
    VersionedValue,
    validate_agent,
    value_from_json,
    value_to_json,
)
from .sync import Command, CommandTarget, RelationshipClass


class ScenarioError(Exception):
    pass


# -- pure geometry ----------------------------------------------------------


def socket_test(bulb_pos: Vector3, socket_pos: Vector3, socket_radius: float) -> bool:
    """Seated iff the bulb is strictly inside the socket sphere."""
    if socket_radius <= 0:
        raise ScenarioError("socket radius must be positive")
    return bulb_pos.distance_to(socket_pos) < socket_radius


def collision_test(
    rocket_pos: Vector3, rocket_radius: float, planet_pos: Vector3, planet_radius: float
) -> bool:
    """Spheres collide iff center distance is strictly under the radius sum."""
    if rocket_radius <= 0 or planet_radius <= 0:
        raise ScenarioError("radii must be positive")
    return rocket_pos.distance_to(planet_pos) < rocket_radius + planet_radius


def rotate_about_vertical(pos: Vector3, center: Vector3, angle: float) -> Vector3:
    """Rotate about the +Y axis through center; positive angle takes +X toward -Z."""
    dx = pos.x - center.x
    dz = pos.z - center.z
    c = math.cos(angle)
    s = math.sin(angle)
    return Vector3(center.x + dx * c + dz * s, pos.y, center.z - dx * s + dz * c)


@dataclass
class Planet:
    name: str
    pos: Vector3
    radius: float
    omega: float  # rad/s, signed
    color: ColorRGB


def orbit_step(planets: list[Planet], sun_pos: Vector3, dt: float) -> list[Vector3]:
    """New planet positions after dt seconds of exact rotation (no drift)."""
    if dt <= 0:
        raise ScenarioError("dt must be positive")
    return [rotate_about_vertical(p.pos, sun_pos, p.omega * dt) for p in planets]


def pick_color(planet: Planet) -> ColorRGB:
    return planet.color


# -- scenario data ----------------------------------------------------------


@dataclass
class LampScenario:
    socket_pos: Vector3
    socket_radius: float
    agent_id: str
    plug_id: str
    bulb_var: str = "bulb_pos"
    power_var: str = "power"

    def __post_init__(self):
        if self.socket_radius <= 0:
            raise ScenarioError("socket_radius must be positive")


@dataclass
class GalaxyScenario:
    sun_pos: Vector3
    planets: list[Planet]
    rocket_agent: str
    rocket_radius: float
    bulb_ids: list[str]
    pos_var: str = "pos"
    color_var: str = "color"

    def __post_init__(self):
        if len(self.bulb_ids) != 4:
            raise ScenarioError("galaxy scenario needs exactly 4 bulb ids")
        if any(p.radius <= 0 for p in self.planets):
            raise ScenarioError("planet radii must be positive")


@dataclass
class EmulatorDef:
    name: str
    kind: str  # bridge | plug
    port: int
    username: str = "hubuser"
    key: str = "demo-key"
    lights: int = 4


@dataclass
class DeviceDef:
    id: str
    kind: DeviceKind
    emulator: str
    light: str = "1"


@dataclass
class ScenarioConfig:
    name: str
    tick_rate: int
    scene: object  # LampScenario | GalaxyScenario
    agents: list[Agent]
    devices: list[DeviceDef]
    emulators: dict[str, EmulatorDef]
    links: list[SyncLink]

    @property
    def dt_ms(self) -> int:
        return round(1000 / self.tick_rate)

    @property
    def kind(self) -> str:
        return "lamp" if isinstance(self.scene, LampScenario) else "galaxy"


def _vec(raw) -> Vector3:
    try:
        return Vector3(float(raw["x"]), float(raw["y"]), float(raw["z"]))
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"expected {{x,y,z}} vector, got {raw!r}") from exc


def _color(raw) -> ColorRGB:
    try:
        return ColorRGB(float(raw["r"]), float(raw["g"]), float(raw["b"]))
    except (KeyError, TypeError, ModelError) as exc:
        raise ScenarioError(f"expected {{r,g,b}} color, got {raw!r}") from exc


def bundled_scenario_path(name: str) -> Path:
    candidate = resources.files("xri_hub").joinpath("data", f"{name}.yaml")
    if not candidate.is_file():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return Path(str(candidate))


def load_scenario(ref: str) -> ScenarioConfig:
    """Load a scenario by bundled name ("lamp", "galaxy") or file path."""
    path = Path(ref)
    if not path.exists() and "/" not in ref and not ref.endswith(".yaml"):
        path = bundled_scenario_path(ref)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {ref}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = f" (line {mark.line + 1})" if mark else ""
            raise ScenarioError(f"{path}: invalid YAML{line}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: scenario must be a mapping")
    return parse_scenario(raw)


def parse_scenario(raw: dict) -> ScenarioConfig:
    try:
        name = raw["name"]
        tick_rate = int(raw.get("tick_rate", 20))
        if tick_rate <= 0:
            raise ScenarioError("tick_rate must be positive")

        emulators = {}
        for ename, eraw in raw.get("emulators", {}).items():
            emulators[ename] = EmulatorDef(
                name=ename,
                kind=eraw["kind"],
                port=int(eraw["port"]),
                username=eraw.get("username", "hubuser"),
                key=eraw.get("key", "demo-key"),
                lights=int(eraw.get("lights", 4)),
            )

        agents = []
        for araw in raw.get("agents", []):
            vars_ = {}
            for vname, vraw in araw.get("vars", {}).items():
                vars_[vname] = VersionedValue(
                    value_from_json(vraw), ts=0, origin=Origin.VIRTUAL, seq=0
                )
            agents.append(
                Agent(
                    id=araw["id"],
                    criteria=AgentCriteria(
                        Embodiment(araw["embodiment"]),
                        Interaction(araw["interaction"]),
                        Agency(araw.get("agency", "reactive")),
                    ),
                    virtual=StateSnapshot(vars_),
                    device=araw.get("device"),
                )
            )

        devices = []
        for draw in raw.get("devices", []):
            devices.append(
                DeviceDef(
                    id=draw["id"],
                    kind=DeviceKind(draw["kind"]),
                    emulator=draw["emulator"],
                    light=str(draw.get("light", "1")),
                )
            )

        links = []
        for lraw in raw.get("links", []):
            links.append(
                SyncLink(
                    id=lraw["id"],
                    agent_id=lraw["agent"],
                    device_id=lraw["device"],
                    mode=Interaction(lraw["mode"]),
                    mappings=[
                        Mapping(
                            m["virtual"],
                            m["physical"],
                            Transform(m.get("transform", "identity")),
                        )
                        for m in lraw.get("mappings", [])
                    ],
                )
            )

        sraw = raw["scene"]
        if sraw["kind"] == "lamp":
            scene = LampScenario(
                socket_pos=_vec(sraw["socket_pos"]),
                socket_radius=float(sraw["socket_radius"]),
                agent_id=sraw["agent"],
                plug_id=sraw["plug"],
            )
        elif sraw["kind"] == "galaxy":
            scene = GalaxyScenario(
                sun_pos=_vec(sraw["sun_pos"]),
                planets=[
                    Planet(
                        name=p["name"],
                        pos=_vec(p["pos"]),
                        radius=float(p["radius"]),
                        omega=float(p["omega"]),
                        color=_color(p["color"]),
                    )
                    for p in sraw["planets"]
                ],
                rocket_agent=sraw["rocket"]["agent"],
                rocket_radius=float(sraw["rocket"]["radius"]),
                bulb_ids=list(sraw["bulbs"]),
            )
        else:
            raise ScenarioError(f"unknown scene kind {sraw['kind']!r}")
    except (KeyError, TypeError, ValueError, ModelError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"bad scenario config: {exc!r}") from exc

    config = ScenarioConfig(
        name=name,
        tick_rate=tick_rate,
        scene=scene,
        agents=agents,
        devices=devices,
        emulators=emulators,
        links=links,
    )
    _check_consistency(config)
    return config


def _check_consistency(config: ScenarioConfig) -> None:
    agent_links: dict[str, list[SyncLink]] = {}
    for link in config.links:
        agent_links.setdefault(link.agent_id, []).append(link)
    problems = []
    for agent in config.agents:
        problems.extend(validate_agent(agent, agent_links.get(agent.id, [])))
    device_ids = {d.id for d in config.devices}
    for link in config.links:
        if link.device_id not in device_ids:
            problems.append(f"link {link.id} references unknown device {link.device_id}")
    for dev in config.devices:
        if dev.emulator not in config.emulators:
            problems.append(f"device {dev.id} references unknown emulator {dev.emulator}")
    if problems:
        raise ScenarioError("; ".join(problems))


# -- transition rules --------------------------------------------------------


def lamp_transition(
    prev_seated: bool, now_seated: bool, button_events: int, current_power: bool
) -> list[tuple[bool, Origin]]:
    """Edge-triggered power intents for one tick.

    Seat edges are virtual-side actions; each button event toggles the
    power value reconciled so far and is physical-side.
    """
    intents: list[tuple[bool, Origin]] = []
    power = current_power
    if not prev_seated and now_seated:
        power = True
        intents.append((True, Origin.VIRTUAL))
    elif prev_seated and not now_seated:
        power = False
        intents.append((False, Origin.VIRTUAL))
    for _ in range(button_events):
        power = not power
        intents.append((power, Origin.PHYSICAL))
    return intents


class ScenarioRunner:
    """Owns the per-tick phase order: inputs, motion, triggers, sync, sample."""

    def __init__(self, hub: SyncHub, config: ScenarioConfig, descriptors: list[DeviceDescriptor]):
        self.hub = hub
        self.config = config
        self.scene = config.scene
        for agent in config.agents:
            hub.register_agent(agent)
        for descr in descriptors:
            hub.register_device(descr)
        for link in config.links:
            hub.register_link(link)
        # edge baselines come from the configured initial state so a boundary
        # crossed by the very first client update still fires
        if isinstance(self.scene, GalaxyScenario):
            self._prev_seated = False
            self._colliding = {
                p.name
                for p in self.scene.planets
                if collision_test(self._rocket_pos(), self.scene.rocket_radius, p.pos, p.radius)
            }
        else:
            self._prev_seated = socket_test(
                self._lamp_bulb_pos(), self.scene.socket_pos, self.scene.socket_radius
            )
            self._colliding = set()

    # -- lamp ----------------------------------------------------------------

    def _lamp_bulb_pos(self) -> Vector3:
        agent = self.hub.agents[self.scene.agent_id]
        return agent.virtual.vars[self.scene.bulb_var].value

    def _lamp_power(self) -> bool:
        agent = self.hub.agents[self.scene.agent_id]
        return bool(agent.virtual.vars[self.scene.power_var].value)

    async def _run_lamp_triggers(self) -> None:
        seated = socket_test(
            self._lamp_bulb_pos(), self.scene.socket_pos, self.scene.socket_radius
        )
        # button presses reach the hub through the plug callback, not here
        for value, origin in lamp_transition(self._prev_seated, seated, 0, self._lamp_power()):
            await self.hub.apply_update(
                self.scene.agent_id,
                self.scene.power_var,
                value,
                origin,
                source_id=self.scene.agent_id,
            )
        self._prev_seated = seated

    # -- galaxy ----------------------------------------------------------------

    def _rocket_pos(self) -> Vector3:
        agent = self.hub.agents[self.scene.rocket_agent]
        return agent.virtual.vars[self.scene.pos_var].value

    async def _run_galaxy_tick(self, dt: float) -> None:
        for planet, new_pos in zip(
            self.scene.planets, orbit_step(self.scene.planets, self.scene.sun_pos, dt)
        ):
            planet.pos = new_pos

        rocket_pos = self._rocket_pos()
        entered = []
        now_colliding = set()
        for planet in self.scene.planets:
            hit = collision_test(rocket_pos, self.scene.rocket_radius, planet.pos, planet.radius)
            if hit:
                now_colliding.add(planet.name)
                if planet.name not in self._colliding:
                    entered.append(planet)
        self._colliding = now_colliding
        if entered:
            # simultaneous contacts resolve to the first planet in config order
            await self.propagate_ambient(pick_color(entered[0]))

    async def propagate_ambient(self, color: ColorRGB) -> list[Command]:
        """Adopt the picked color and emit one command per ambient bulb."""
        result = await self.hub.apply_update(
            self.scene.rocket_agent,
            self.scene.color_var,
            color,
            Origin.VIRTUAL,
            source_id=self.scene.rocket_agent,
        )
        return [c for c in result.commands if c.target == CommandTarget.DEVICE]

    def _publish_scene(self) -> None:
        if isinstance(self.scene, GalaxyScenario):
            data = {
                "sun": value_to_json(self.scene.sun_pos),
                "planets": [
                    {
                        "name": p.name,
                        "pos": value_to_json(p.pos),
                        "radius": p.radius,
                        "color": value_to_json(p.color),
                    }
                    for p in self.scene.planets
                ],
            }
        else:
            data = {
                "socket_pos": value_to_json(self.scene.socket_pos),
                "socket_radius": self.scene.socket_radius,
            }
        self.hub._publish(
            BusEvent(
                ts=self.hub.now(),
                kind="scene",
                cls=RelationshipClass.OBJECT_AGENT_TO_OBJECT_AGENT,
                agent=None,
                data=data,
                source="scenario",
            )
        )

    async def run_tick(self) -> None:
        await self.hub.drain_client_updates()
        if isinstance(self.scene, GalaxyScenario):
            await self._run_galaxy_tick(1.0 / self.config.tick_rate)
        else:
            await self._run_lamp_triggers()
        await self.hub.pump()
        self.hub.sample_coherence()
        self._publish_scene()
