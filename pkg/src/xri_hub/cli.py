"""Operator entry point.

Subcommands: serve (live hub + emulators), demo (headless scripted replay),
metrics (summarize run logs), sim-devices (emulators standalone). Every
flag can also come from an XRI_HUB_* environment variable; explicit flags
win over the environment, which wins over defaults.

Exit codes are a contract: 0 success, 1 demo assertion failure, 2 bad
config (unparseable files, port clashes, missing logs).
"""

from __future__ import annotations

import asyncio
import sys
import threading
import time
from pathlib import Path

import click
import httpx
import uvicorn
import yaml

from . import __version__
from .demo import DemoScriptError, run_demo
from .devices.bridge import BridgeCore, create_bridge_app
from .devices.gateway import DeviceDescriptor, DeviceKind, HttpDeviceGateway
from .devices.plug import HttpHubCallback, PlugCore, create_plug_app
from .hub import HubConfigError, SyncHub, WallClock
from .metrics import MetricsError, load_summary, render_summary
from .scenario import ScenarioError, ScenarioRunner, load_scenario
from .service import create_hub_app

CONTEXT_SETTINGS = {"auto_envvar_prefix": "XRI_HUB", "help_option_names": ["-h", "--help"]}


@click.group(context_settings=CONTEXT_SETTINGS)
@click.version_option(__version__)
def main():
    """Synchronization hub for shared virtual/physical objects."""


def _fail_config(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(2)


def _start_uvicorn_thread(app, host: str, port: int, label: str) -> uvicorn.Server:
    config = uvicorn.Config(app, host=host, port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True, name=label)
    thread.start()
    deadline = time.time() + 5.0
    while not server.started:
        if not thread.is_alive():
            _fail_config(f"{label} failed to start on {host}:{port} (port in use?)")
        if time.time() > deadline:
            _fail_config(f"{label} did not start within 5s")
        time.sleep(0.02)
    return server


def _build_emulators(config, host, bridge_port, plug_port, callback_url, wall_ms):
    """Instantiate emulator cores/apps; returns (apps, descriptors, endpoints)."""
    apps = []
    endpoints = {}
    descriptors = []
    bridge_hosts = {}

    for name, emu in config.emulators.items():
        if emu.kind == "bridge":
            port = bridge_port or emu.port
            core = BridgeCore(n_lights=emu.lights, username=emu.username, clock=wall_ms)
            apps.append((create_bridge_app(core), port, f"bridge emulator {name}"))
            bridge_hosts[name] = f"http://{host}:{port}"
            endpoints[name] = bridge_hosts[name]

    for dev in config.devices:
        emu = config.emulators[dev.emulator]
        if dev.kind == DeviceKind.PLUG:
            port = plug_port or emu.port
            core = PlugCore(
                device_id=dev.id, key=emu.key, callback=HttpHubCallback(callback_url),
                clock=wall_ms,
            )
            apps.append((create_plug_app(core, background_flush=True), port, f"plug emulator {dev.id}"))
            base = f"http://{host}:{port}"
            endpoints[dev.emulator] = base
            endpoints[dev.id] = base
            descriptors.append(
                DeviceDescriptor(
                    id=dev.id, kind=dev.kind, endpoint=base, callback=callback_url, key=emu.key
                )
            )
        else:
            base = bridge_hosts[dev.emulator]
            endpoints[dev.id] = base
            descriptors.append(
                DeviceDescriptor(
                    id=dev.id,
                    kind=dev.kind,
                    endpoint=f"{base}/api/{emu.username}",
                    callback=callback_url,
                    light=dev.light,
                )
            )
    return apps, descriptors, endpoints


def _start_fault_injector(faults_path: str, endpoints: dict):
    with open(faults_path) as fh:
        schedule = yaml.safe_load(fh) or []
    if not isinstance(schedule, list):
        _fail_config(f"{faults_path}: fault script must be a list")

    def run():
        start = time.time()
        with httpx.Client() as client:
            for entry in sorted(schedule, key=lambda e: float(e["at"])):
                delay = start + float(entry["at"]) - time.time()
                if delay > 0:
                    time.sleep(delay)
                target = entry.get("device") or entry.get("emulator")
                base = endpoints.get(target)
                if base is None:
                    continue
                try:
                    client.post(
                        f"{base}/_sim/outage", json={"duration_s": float(entry["duration_s"])}
                    )
                except httpx.HTTPError:
                    pass

    threading.Thread(target=run, daemon=True, name="fault-injector").start()


@main.command()
@click.option("--scenario", default="lamp", show_default=True,
              help="Bundled scenario name or YAML path.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8400, show_default=True, help="Hub HTTP/websocket port.")
@click.option("--tcp-port", default=8401, show_default=True,
              help="Newline-delimited TCP fallback port (0 disables).")
@click.option("--bridge-port", default=0, help="Override the scenario's bridge port.")
@click.option("--plug-port", default=0, help="Override the scenario's plug port.")
@click.option("--tick-rate", default=0, help="Override the scenario tick rate (Hz).")
@click.option("--seed", default=0, show_default=True, help="Recorded in logs for replays.")
@click.option("--faults", default=None, type=click.Path(), help="Timed outage script (YAML).")
@click.option("--metrics-out", default=None, type=click.Path(),
              help="Directory for events.csv/coherence.csv on shutdown.")
@click.option("--frontend", default="frontend/dist", show_default=True,
              help="Static scene-client bundle to serve at /.")
def serve(scenario, host, port, tcp_port, bridge_port, plug_port, tick_rate, seed,
          faults, metrics_out, frontend):
    """Run the hub live: scenario loop, emulators, websocket sessions."""
    try:
        config = load_scenario(scenario)
    except ScenarioError as exc:
        _fail_config(str(exc))
    if tick_rate:
        if tick_rate <= 0:
            _fail_config("tick rate must be positive")
        config.tick_rate = tick_rate

    wall = WallClock(dt_ms=config.dt_ms)
    callback_url = f"http://{host}:{port}"
    apps, descriptors, endpoints = _build_emulators(
        config, host, bridge_port, plug_port, callback_url, wall.now_ms
    )

    ports = [port] + ([tcp_port] if tcp_port else []) + [p for _, p, _ in apps]
    if len(set(ports)) != len(ports):
        _fail_config(f"ports must be distinct, got {ports}")

    hub = SyncHub(clock=wall, gateway=HttpDeviceGateway(httpx.AsyncClient()))
    try:
        runner = ScenarioRunner(hub, config, descriptors)
    except (HubConfigError, ScenarioError) as exc:
        _fail_config(str(exc))

    emulator_servers = [
        _start_uvicorn_thread(app, host, app_port, label) for app, app_port, label in apps
    ]
    if faults:
        _start_fault_injector(faults, endpoints)

    app = create_hub_app(
        hub,
        runner,
        run_ticks=True,
        tcp_host=host,
        tcp_port=tcp_port or None,
        frontend_dir=frontend,
        metrics_out=metrics_out,
    )
    click.echo(
        f"xri-hub serving scenario {config.name!r} on http://{host}:{port} "
        f"(ws /ws, tcp {tcp_port or 'off'}, seed {seed})"
    )
    try:
        uvicorn.run(app, host=host, port=port, log_level="info")
    except OSError as exc:
        _fail_config(f"cannot bind {host}:{port}: {exc}")
    finally:
        for server in emulator_servers:
            server.should_exit = True
    if metrics_out:
        click.echo(f"metrics written to {metrics_out}")


def _resolve_demo_script(ref: str) -> str:
    path = Path(ref)
    if path.exists():
        return str(path)
    from .scenario import bundled_scenario_path

    for candidate in (f"demo_{ref}", ref):
        try:
            return str(bundled_scenario_path(candidate))
        except ScenarioError:
            continue
    _fail_config(f"demo script not found: {ref}")


@main.command()
@click.argument("script")
@click.option("--out", default="demo-logs", show_default=True,
              help="Directory for events.csv and coherence.csv.")
@click.option("--quiet", is_flag=True, help="Only print failures and the verdict.")
def demo(script, out, quiet):
    """Replay a scripted demo headless (bundled: lamp, galaxy, outage)."""
    script_path = _resolve_demo_script(script)
    try:
        result = asyncio.run(run_demo(script_path, out_dir=out))
    except (DemoScriptError, ScenarioError, HubConfigError) as exc:
        _fail_config(str(exc))
    for a in result.assertions:
        if not quiet or not a.ok:
            at = "end" if a.at_tick is None else f"tick {a.at_tick}"
            click.echo(f"[{'PASS' if a.ok else 'FAIL'}] {at} {a.kind}: {a.detail}")
    click.echo(f"logs: {result.events_csv} {result.coherence_csv}")
    if result.ok:
        click.echo(f"demo ok ({result.ticks} ticks)")
        sys.exit(0)
    click.echo(f"demo FAILED: {result.first_failure.kind}: {result.first_failure.detail}",
               err=True)
    sys.exit(1)


@main.command()
@click.argument("log_path")
def metrics(log_path):
    """Summarize a run log: noise per link, latencies, command counts."""
    try:
        summary = load_summary(log_path)
    except MetricsError as exc:
        _fail_config(str(exc))
    click.echo(render_summary(summary))


@main.command("sim-devices")
@click.option("--scenario", default="lamp", show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--bridge-port", default=0, help="Override the scenario's bridge port.")
@click.option("--plug-port", default=0, help="Override the scenario's plug port.")
@click.option("--hub-url", default="http://127.0.0.1:8400", show_default=True,
              help="Where device-originated events are pushed.")
def sim_devices(scenario, host, bridge_port, plug_port, hub_url):
    """Run the device emulators standalone (no hub)."""
    try:
        config = load_scenario(scenario)
    except ScenarioError as exc:
        _fail_config(str(exc))
    wall = WallClock(dt_ms=config.dt_ms)
    apps, _, _ = _build_emulators(config, host, bridge_port, plug_port, hub_url, wall.now_ms)
    if not apps:
        _fail_config(f"scenario {config.name!r} declares no emulators")
    servers = [_start_uvicorn_thread(app, host, port, label) for app, port, label in apps]
    for _, port, label in apps:
        click.echo(f"{label} on http://{host}:{port}")
    click.echo("Ctrl-C to stop")
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        for server in servers:
            server.should_exit = True


if __name__ == "__main__":
    main()
