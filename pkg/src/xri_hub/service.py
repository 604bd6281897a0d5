"""FastAPI service around the hub: REST registry views, the device event
callback, the websocket session endpoint, and a newline-delimited TCP
fallback for headless drivers.

All writes go through the same paths demos use; the REST surface is
read-only apart from POST /events (the device callback).
"""

from __future__ import annotations

import asyncio
import itertools
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .hub import BusEvent, SyncHub
from .model import ModelError, value_from_json, value_to_json
from .scenario import GalaxyScenario, ScenarioRunner
from .sync import RelationshipClass, UnknownLinkError
from .wire import Frame, Session, encode_frame, handle_incoming


class VersionedValueOut(BaseModel):
    value: Any
    ts: int
    origin: str
    seq: int


class AgentOut(BaseModel):
    id: str
    embodiment: str
    interaction: str
    agency: str
    device: Optional[str] = None
    links: list[str]
    vars: dict[str, VersionedValueOut]


class DeviceOut(BaseModel):
    id: str
    kind: str
    endpoint: str
    light: Optional[str] = None
    key: Optional[str] = None
    shadow: dict[str, Any]
    coherent: bool


class MappingOut(BaseModel):
    virtual: str
    physical: str
    transform: str


class LinkOut(BaseModel):
    id: str
    agent: str
    device: str
    mode: str
    mappings: list[MappingOut]
    coherent: bool


class CoherenceOut(BaseModel):
    link: str
    window: tuple[int, int]
    noise_score: float
    spans: list[tuple[int, int]]


class DeviceEventIn(BaseModel):
    device: str
    var: str
    value: Any
    press_seq: int


class DeviceEventOut(BaseModel):
    accepted: bool
    duplicate: bool


class ScenarioOut(BaseModel):
    name: str
    kind: str
    tick_rate: int
    scene: dict


class HealthOut(BaseModel):
    status: str
    now_ms: int


def _agent_out(hub: SyncHub, agent_id: str) -> AgentOut:
    agent = hub.agents[agent_id]
    return AgentOut(
        id=agent.id,
        embodiment=agent.criteria.embodiment.value,
        interaction=agent.criteria.interaction.value,
        agency=agent.criteria.agency.value,
        device=agent.device,
        links=list(agent.links),
        vars={
            name: VersionedValueOut(
                value=value_to_json(vv.value), ts=vv.ts, origin=vv.origin.value, seq=vv.seq
            )
            for name, vv in agent.virtual.vars.items()
        },
    )


def _scene_out(runner: ScenarioRunner) -> ScenarioOut:
    scene = runner.scene
    if isinstance(scene, GalaxyScenario):
        payload = {
            "sun_pos": value_to_json(scene.sun_pos),
            "rocket": {"agent": scene.rocket_agent, "radius": scene.rocket_radius},
            "planets": [
                {
                    "name": p.name,
                    "pos": value_to_json(p.pos),
                    "radius": p.radius,
                    "omega": p.omega,
                    "color": value_to_json(p.color),
                }
                for p in scene.planets
            ],
            "bulbs": list(scene.bulb_ids),
        }
    else:
        payload = {
            "socket_pos": value_to_json(scene.socket_pos),
            "socket_radius": scene.socket_radius,
            "agent": scene.agent_id,
            "plug": scene.plug_id,
            "bulb_var": scene.bulb_var,
            "power_var": scene.power_var,
        }
    return ScenarioOut(
        name=runner.config.name,
        kind=runner.config.kind,
        tick_rate=runner.config.tick_rate,
        scene=payload,
    )


def frame_for_bus_event(session: Session, event: BusEvent, now: int) -> Optional[Frame]:
    """Project one hub bus event into a frame for this session, or None if
    the session's subscription does not match."""
    sub = session.subscription
    if sub is None or not sub.matches(event.agent, event.cls):
        return None
    if event.kind == "command":
        return session.make_frame(
            "command",
            now,
            agent=event.agent,
            payload={"target": "scene_clients", "var": event.var, "value": event.value},
        )
    if event.kind == "coherence":
        return session.make_frame("coherence_report", now, agent=event.agent, payload=event.data)
    payload = {"class": event.cls.value, "kind": event.kind}
    if event.origin is not None:
        payload["origin"] = event.origin
    if event.var is not None:
        payload["var"] = event.var
        payload["value"] = event.value
    if event.source:
        payload["source"] = event.source
    if event.device is not None:
        payload["device"] = event.device
    if event.data is not None:
        payload["data"] = event.data
    return session.make_frame("event", now, agent=event.agent, payload=payload)


class SessionHandle:
    def __init__(self, session: Session):
        self.session = session
        self.queue: asyncio.Queue[Frame] = asyncio.Queue()


def create_hub_app(
    hub: SyncHub,
    runner: Optional[ScenarioRunner] = None,
    *,
    run_ticks: bool = False,
    tcp_host: str = "127.0.0.1",
    tcp_port: Optional[int] = None,
    frontend_dir: Optional[str] = None,
    metrics_out: Optional[str] = None,
    coherence_window_ms: int = 10_000,
) -> FastAPI:
    session_ids = itertools.count(1)
    handles: dict[str, SessionHandle] = {}

    def publish_to_sessions(event: BusEvent) -> None:
        now = hub.now()
        for handle in handles.values():
            frame = frame_for_bus_event(handle.session, event, now)
            if frame is not None:
                handle.queue.put_nowait(frame)

    hub.subscribe_bus(publish_to_sessions)

    def publish_coherence_reports() -> None:
        now = hub.now()
        for link_id, state in hub.links.items():
            report = hub.coherence_report(
                link_id, window=(max(0, now - coherence_window_ms), max(now, 1))
            )
            hub._publish(
                BusEvent(
                    ts=now,
                    kind="coherence",
                    cls=RelationshipClass.OBJECT_AGENT_TO_OBJECT_AGENT,
                    agent=state.link.agent_id,
                    data={
                        "link": link_id,
                        "window": list(report.window),
                        "noise_score": report.noise_score,
                        "spans": [list(s) for s in report.incoherent_spans],
                    },
                )
            )

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        tick_task = None
        tcp_server = None
        if run_ticks and runner is not None:
            tick_task = asyncio.create_task(_tick_loop(runner, publish_coherence_reports))
        if tcp_port is not None:
            tcp_server = await asyncio.start_server(
                lambda r, w: _tcp_session(r, w, hub, handles, session_ids),
                tcp_host,
                tcp_port,
            )
        app.state.first_sample_ms = hub.now()
        try:
            yield
        finally:
            if tick_task is not None:
                tick_task.cancel()
            if tcp_server is not None:
                tcp_server.close()
                await tcp_server.wait_closed()
            if metrics_out:
                from .metrics import write_coherence_csv, write_event_csv

                out = Path(metrics_out)
                write_event_csv(hub.recorder, out / "events.csv")
                write_coherence_csv(
                    hub, out / "coherence.csv", (app.state.first_sample_ms, max(hub.now(), 1))
                )

    app = FastAPI(title="xri-hub", lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.get("/healthz", response_model=HealthOut)
    def healthz():
        return HealthOut(status="ok", now_ms=hub.now())

    @app.get("/api/scenario", response_model=ScenarioOut)
    def scenario():
        if runner is None:
            return JSONResponse({"detail": "no scenario loaded"}, status_code=404)
        return _scene_out(runner)

    @app.get("/api/agents", response_model=list[AgentOut])
    def agents():
        return [_agent_out(hub, aid) for aid in hub.agents]

    @app.get("/api/state/{agent_id}", response_model=AgentOut)
    def agent_state(agent_id: str):
        if agent_id not in hub.agents:
            return JSONResponse({"detail": f"unknown agent {agent_id}"}, status_code=404)
        return _agent_out(hub, agent_id)

    @app.get("/api/devices", response_model=list[DeviceOut])
    def devices():
        out = []
        for descr in hub.devices.values():
            shadow: dict[str, Any] = {}
            coherent = True
            for state in hub.links.values():
                if state.link.device_id != descr.id:
                    continue
                from .sync import link_coherent

                coherent = coherent and link_coherent(state)
                for pvar, value in state.shadow.items():
                    shadow[pvar] = value_to_json(value)
            out.append(
                DeviceOut(
                    id=descr.id,
                    kind=descr.kind.value,
                    endpoint=descr.endpoint,
                    light=descr.light,
                    key=descr.key,
                    shadow=shadow,
                    coherent=coherent,
                )
            )
        return out

    @app.get("/api/links", response_model=list[LinkOut])
    def links():
        from .sync import link_coherent

        return [
            LinkOut(
                id=state.link.id,
                agent=state.link.agent_id,
                device=state.link.device_id,
                mode=state.link.mode.value,
                mappings=[
                    MappingOut(
                        virtual=m.virtual_var, physical=m.physical_var, transform=m.transform.value
                    )
                    for m in state.link.mappings
                ],
                coherent=link_coherent(state),
            )
            for state in hub.links.values()
        ]

    @app.get("/api/coherence/{link_id}", response_model=CoherenceOut)
    def coherence(link_id: str):
        if link_id not in hub.links:
            return JSONResponse({"detail": f"unknown link {link_id}"}, status_code=404)
        now = max(hub.now(), 1)
        report = hub.coherence_report(link_id, window=(max(0, now - coherence_window_ms), now))
        return CoherenceOut(
            link=link_id,
            window=report.window,
            noise_score=report.noise_score,
            spans=report.incoherent_spans,
        )

    @app.post("/events", response_model=DeviceEventOut)
    async def device_event(event: DeviceEventIn):
        try:
            value = value_from_json(event.value)
        except ModelError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=422)
        try:
            result = await hub.handle_device_event(
                event.device, event.var, value, event.press_seq
            )
        except UnknownLinkError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=404)
        return DeviceEventOut(**result)

    @app.websocket("/ws")
    async def websocket_session(ws: WebSocket):
        await ws.accept()
        session = Session(str(next(session_ids)))
        handle = SessionHandle(session)
        handles[session.id] = handle

        async def writer():
            while True:
                frame = await handle.queue.get()
                await ws.send_text(encode_frame(frame).decode("utf-8"))

        writer_task = asyncio.create_task(writer())
        try:
            while True:
                data = await ws.receive_text()
                for reply in handle_incoming(session, data, hub):
                    handle.queue.put_nowait(reply)
        except WebSocketDisconnect:
            pass
        finally:
            writer_task.cancel()
            handles.pop(session.id, None)

    if frontend_dir and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app


async def _tick_loop(runner: ScenarioRunner, publish_coherence) -> None:
    dt = 1.0 / runner.config.tick_rate
    loop = asyncio.get_running_loop()
    advance = getattr(runner.hub.clock, "advance", None)
    next_at = loop.time()
    ticks = 0
    while True:
        await runner.run_tick()
        if advance is not None:
            advance()  # logical clocks move one tick per loop pass
        ticks += 1
        if ticks % runner.config.tick_rate == 0:
            publish_coherence()  # once a second
        next_at += dt
        await asyncio.sleep(max(0.0, next_at - loop.time()))


async def _tcp_session(reader, writer, hub: SyncHub, handles: dict, session_ids) -> None:
    """Newline-delimited frame transport for headless drivers."""
    session = Session(f"tcp{next(session_ids)}")
    handle = SessionHandle(session)
    handles[session.id] = handle

    async def pump_out():
        while True:
            frame = await handle.queue.get()
            writer.write(encode_frame(frame) + b"\n")
            await writer.drain()

    out_task = asyncio.create_task(pump_out())
    try:
        while True:
            line = await reader.readline()
            if not line:
                break
            line = line.strip()
            if not line:
                continue
            for reply in handle_incoming(session, line, hub):
                handle.queue.put_nowait(reply)
    finally:
        out_task.cancel()
        handles.pop(session.id, None)
        writer.close()
