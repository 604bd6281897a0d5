"""Headless scripted demos: timed event lists with inline assertions.

A demo runs the full stack in one process on a logical clock: the real
emulator HTTP apps are mounted in-process, hub adapters speak actual
protocol bytes to them, and every tick is replayed in a fixed phase
order, so identical scripts yield byte-identical logs. Exit status: 0 all
assertions pass, 1 assertion failure, 2 bad script/config.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace
from typing import Optional

import httpx
import yaml

from .devices.bridge import BridgeCore, create_bridge_app
from .devices.gateway import DeviceDescriptor, DeviceKind, HttpDeviceGateway
from .devices.plug import PlugCore, create_plug_app
from .hub import LogicalClock, SyncHub
from .model import value_from_json
from .scenario import ScenarioConfig, ScenarioError, ScenarioRunner, load_scenario
from .sync import values_equal

DEFAULT_GRACE_TICKS = 2  # sync rounds a divergence may last before it counts


class DemoScriptError(Exception):
    pass


@dataclass
class DemoAssertion:
    at_tick: Optional[int]  # None = end of run
    kind: str
    spec: dict
    ok: Optional[bool] = None
    detail: str = ""


@dataclass
class DemoScript:
    scenario_ref: str
    duration_s: float
    seed: int
    events: list[dict]
    final_asserts: list[dict]
    base_dir: Path


def load_demo_script(path: str) -> DemoScript:
    p = Path(path)
    if not p.exists():
        raise DemoScriptError(f"demo script not found: {path}")
    with open(p) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = f" (line {mark.line + 1})" if mark else ""
            raise DemoScriptError(f"{path}: invalid YAML{line}: {exc}") from exc
    if not isinstance(raw, dict):
        raise DemoScriptError(f"{path}: demo script must be a mapping")
    try:
        return DemoScript(
            scenario_ref=raw["scenario"],
            duration_s=float(raw["duration_s"]),
            seed=int(raw.get("seed", 0)),
            events=list(raw.get("events", [])),
            final_asserts=list(raw.get("final_asserts", [])),
            base_dir=p.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DemoScriptError(f"{path}: bad demo script: {exc!r}") from exc


class DirectHubCallback:
    """In-process stand-in for the hub's /events endpoint, with a kill switch
    so scripts can simulate a hub outage on the device->hub leg."""

    def __init__(self, hub: SyncHub):
        self.hub = hub
        self.down = False

    async def post_event(self, payload: dict) -> bool:
        if self.down:
            return False
        await self.hub.handle_device_event(
            payload["device"], payload["var"], payload["value"], payload["press_seq"]
        )
        return True


@dataclass
class DemoWorld:
    """Everything one in-process demo run needs, wired over ASGI transports."""

    config: ScenarioConfig
    clock: LogicalClock
    hub: SyncHub
    runner: ScenarioRunner
    client: httpx.AsyncClient
    callback: DirectHubCallback
    plug_cores: dict[str, PlugCore]
    bridge_cores: dict[str, BridgeCore]
    emulator_endpoints: dict[str, str]  # emulator name -> in-process base URL
    device_endpoints: dict[str, str]  # device id -> emulator base URL

    async def aclose(self):
        await self.client.aclose()


def build_demo_world(config: ScenarioConfig, grace_ms: Optional[int] = None) -> DemoWorld:
    clock = LogicalClock(dt_ms=config.dt_ms)
    if grace_ms is None:
        grace_ms = DEFAULT_GRACE_TICKS * config.dt_ms
    hub = SyncHub(clock=clock, gateway=None, grace_ms=grace_ms)
    callback = DirectHubCallback(hub)

    mounts = {}
    emulator_endpoints = {}
    device_endpoints = {}
    bridge_cores = {}
    plug_cores = {}
    descriptors = []

    for name, emu in config.emulators.items():
        if emu.kind == "bridge":
            core = BridgeCore(n_lights=emu.lights, username=emu.username, clock=clock.now_ms)
            bridge_cores[name] = core
            host = f"http://{name}.sim"
            mounts[host] = httpx.ASGITransport(app=create_bridge_app(core))
            emulator_endpoints[name] = host

    for dev in config.devices:
        emu = config.emulators[dev.emulator]
        if dev.kind == DeviceKind.PLUG:
            core = PlugCore(
                device_id=dev.id, key=emu.key, callback=callback,
                clock=clock.now_ms, retry_delay_s=0.0,
            )
            plug_cores[dev.id] = core
            host = f"http://{dev.id}.sim"
            mounts[host] = httpx.ASGITransport(app=create_plug_app(core))
            emulator_endpoints.setdefault(dev.emulator, host)
            device_endpoints[dev.id] = host
            descriptors.append(
                DeviceDescriptor(id=dev.id, kind=dev.kind, endpoint=host, key=emu.key)
            )
        else:
            host = emulator_endpoints[dev.emulator]
            device_endpoints[dev.id] = host
            descriptors.append(
                DeviceDescriptor(
                    id=dev.id,
                    kind=dev.kind,
                    endpoint=f"{host}/api/{emu.username}",
                    light=dev.light,
                )
            )

    client = httpx.AsyncClient(mounts=mounts)
    hub.gateway = HttpDeviceGateway(client)
    runner = ScenarioRunner(hub, config, descriptors)
    hub.register_session(SimpleNamespace(source_id="session:script"))
    return DemoWorld(
        config=config,
        clock=clock,
        hub=hub,
        runner=runner,
        client=client,
        callback=callback,
        plug_cores=plug_cores,
        bridge_cores=bridge_cores,
        emulator_endpoints=emulator_endpoints,
        device_endpoints=device_endpoints,
    )


@dataclass
class DemoResult:
    ok: bool
    assertions: list[DemoAssertion]
    first_failure: Optional[DemoAssertion]
    events_csv: Optional[Path]
    coherence_csv: Optional[Path]
    ticks: int

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 1


class DemoRun:
    def __init__(self, script: DemoScript, out_dir: Optional[Path] = None):
        self.script = script
        self.out_dir = Path(out_dir) if out_dir else None
        ref = script.scenario_ref
        candidate = script.base_dir / ref
        self.config = load_scenario(str(candidate) if candidate.exists() else ref)
        self.n_ticks = round(script.duration_s * self.config.tick_rate)
        self.world = build_demo_world(self.config)
        self._assertions: list[DemoAssertion] = []
        self._hub_down_until: Optional[int] = None
        random.seed(script.seed)

    def _tick_of(self, at_s: float) -> int:
        tick = round(at_s * self.config.tick_rate)
        if not 0 <= tick < self.n_ticks:
            raise DemoScriptError(f"event at {at_s}s falls outside the {self.n_ticks}-tick run")
        return tick

    async def run(self) -> DemoResult:
        actions: dict[int, list[dict]] = {}
        checks: dict[int, list[dict]] = {}
        for ev in self.script.events:
            try:
                tick = self._tick_of(float(ev["at"]))
                bucket = checks if ev["do"].startswith("assert_") else actions
            except (KeyError, TypeError) as exc:
                raise DemoScriptError(f"bad event {ev!r}: {exc!r}") from exc
            bucket.setdefault(tick, []).append(ev)

        world = self.world
        try:
            for tick in range(self.n_ticks):
                if self._hub_down_until is not None and tick >= self._hub_down_until:
                    self._hub_down_until = None
                    world.callback.down = False
                for core in world.plug_cores.values():
                    await core.flush()  # deterministic stand-in for the live flusher
                for ev in actions.get(tick, []):
                    await self._execute(ev)
                await world.runner.run_tick()
                for ev in checks.get(tick, []):
                    await self._check(ev, at_tick=tick)
                world.clock.advance()
            for ev in self.script.final_asserts:
                await self._check(ev, at_tick=None)
        finally:
            await world.aclose()

        failures = [a for a in self._assertions if a.ok is False]
        result = DemoResult(
            ok=not failures,
            assertions=self._assertions,
            first_failure=failures[0] if failures else None,
            events_csv=None,
            coherence_csv=None,
            ticks=self.n_ticks,
        )
        if self.out_dir is not None:
            result.events_csv, result.coherence_csv = self._write_logs()
        return result

    async def _execute(self, ev: dict) -> None:
        do = ev["do"]
        world = self.world
        if do == "client_update":
            world.hub.queue_client_update(
                "session:script", ev["agent"], ev["var"], value_from_json(ev["value"])
            )
        elif do == "press_button":
            endpoint = world.device_endpoints[ev["device"]]
            await world.client.post(f"{endpoint}/press")
        elif do == "outage":
            if "device" in ev:
                endpoint = world.device_endpoints[ev["device"]]
            else:
                endpoint = world.emulator_endpoints[ev["emulator"]]
            await world.client.post(
                f"{endpoint}/_sim/outage", json={"duration_s": float(ev["duration_s"])}
            )
            world.hub.recorder.log(
                tick=world.clock.tick,
                t_ms=world.hub.now(),
                kind="outage",
                device=ev.get("device", ""),
                detail=f"duration_s={ev['duration_s']}",
            )
        elif do == "hub_outage":
            world.callback.down = True
            self._hub_down_until = world.clock.tick + round(
                float(ev["duration_s"]) * self.config.tick_rate
            )
        else:
            raise DemoScriptError(f"unknown demo action {do!r}")

    async def _check(self, ev: dict, at_tick: Optional[int]) -> None:
        do = ev["do"]
        world = self.world
        ok = False
        detail = ""
        try:
            if do == "assert_agent":
                agent = world.hub.agents[ev["agent"]]
                got = agent.virtual.vars[ev["var"]].value
                want = value_from_json(ev["equals"])
                ok = values_equal(got, want)
                detail = f"{ev['agent']}.{ev['var']} = {got!r}, want {want!r}"
            elif do == "assert_device":
                descr = next(d for d in world.hub.devices.values() if d.id == ev["device"])
                state = await world.hub.gateway.read_state(descr)
                got = state[ev["var"]]
                want = value_from_json(ev["equals"])
                ok = values_equal(got, want)
                detail = f"{ev['device']}.{ev['var']} = {got!r}, want {want!r}"
            elif do == "assert_noise":
                end = (
                    (at_tick + 1) * self.config.dt_ms
                    if at_tick is not None
                    else self.n_ticks * self.config.dt_ms
                )
                report = world.hub.coherence_report(
                    ev["link"], window=(0, end), grace_ms=int(ev.get("grace_ms", 0))
                )
                want = float(ev["equals"])
                tol = float(ev.get("tol", 0.0))
                ok = abs(report.noise_score - want) <= tol
                detail = f"noise({ev['link']}) = {report.noise_score:.4f}, want {want} ± {tol}"
            elif do == "assert_command_count":
                rows = [
                    r
                    for r in world.hub.recorder.rows
                    if r["kind"] == "command"
                    and r["status"] == "delivered"
                    and (not ev.get("link") or r["link"] == ev["link"])
                    and (not ev.get("device") or r["device"] == ev["device"])
                ]
                n = len(rows)
                if "equals" in ev:
                    ok = n == int(ev["equals"])
                    detail = f"{n} delivered commands, want {ev['equals']}"
                else:
                    ok = n <= int(ev["max"])
                    detail = f"{n} delivered commands, max {ev['max']}"
            else:
                raise DemoScriptError(f"unknown assertion {do!r}")
        except DemoScriptError:
            raise
        except Exception as exc:
            ok = False
            detail = f"assertion raised {exc!r}"

        record = DemoAssertion(at_tick=at_tick, kind=do, spec=ev, ok=ok, detail=detail)
        self._assertions.append(record)
        world.hub.recorder.log(
            tick="" if at_tick is None else at_tick,
            t_ms=world.hub.now(),
            kind="assert",
            status="pass" if ok else "fail",
            detail=f"{do}: {detail}",
        )

    def _write_logs(self) -> tuple[Path, Path]:
        from .metrics import write_coherence_csv, write_event_csv

        window = (0, self.n_ticks * self.config.dt_ms)
        events_path = write_event_csv(self.world.hub.recorder, self.out_dir / "events.csv")
        coherence_path = write_coherence_csv(
            self.world.hub, self.out_dir / "coherence.csv", window
        )
        return events_path, coherence_path


async def run_demo(script_path: str, out_dir: Optional[str] = None) -> DemoResult:
    script = load_demo_script(script_path)
    try:
        run = DemoRun(script, out_dir=Path(out_dir) if out_dir else None)
    except ScenarioError as exc:
        raise DemoScriptError(str(exc)) from exc
    return await run.run()
