"""The agent controller: registry, update routing, delivery, coherence.

All state changes funnel through SyncHub.apply_update / handle_device_event,
which re-stamp timestamps on receipt (client clocks are advisory only) and
drive the per-link reconciliation in sync.py. Device I/O happens once per
tick in pump(), giving demos a deterministic delivery order.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .devices.gateway import DeliveryError, DeviceDescriptor, SchemaMismatchError
from .model import (
    Agent,
    Origin,
    StateSnapshot,
    SyncLink,
    Value,
    VersionedValue,
    validate_agent,
    value_to_json,
)
from .sync import (
    CoherenceReport,
    CoherenceTracker,
    Command,
    CommandTarget,
    LinkState,
    RelationshipClass,
    SourceKind,
    UnknownLinkError,
    UpdateEvent,
    classify_event,
    coherence_check,
    delivery_succeeded,
    ingest_update,
    invert_transform,
    link_coherent,
    observe_physical,
    pump_link,
)


class HubConfigError(Exception):
    pass


class LogicalClock:
    """Tick-driven time for deterministic runs."""

    def __init__(self, dt_ms: int = 50):
        self.dt_ms = dt_ms
        self.tick = 0

    def now_ms(self) -> int:
        return self.tick * self.dt_ms

    def advance(self) -> int:
        self.tick += 1
        return self.now_ms()


class WallClock:
    tick = None

    def __init__(self, dt_ms: int = 50):
        self.dt_ms = dt_ms  # nominal tick spacing, used by coherence tracking
        self._last = 0

    def now_ms(self) -> int:
        now = int(time.time() * 1000)
        self._last = max(self._last, now)  # never step backwards
        return self._last


@dataclass(frozen=True)
class ApplyResult:
    applied: bool
    commands: list  # every Command the ingest emitted (device and scene targets)


@dataclass(frozen=True)
class BusEvent:
    ts: int
    kind: str  # update | command | device_state | scene | coherence
    cls: RelationshipClass
    agent: Optional[str] = None
    device: Optional[str] = None
    var: Optional[str] = None
    value: object = None  # already JSON-shaped
    origin: Optional[str] = None
    source: str = ""
    data: Optional[dict] = None


class EventRecorder:
    """Flat event log kept for CSV export and the metrics summary."""

    COLUMNS = [
        "tick",
        "t_ms",
        "kind",
        "class",
        "agent",
        "device",
        "link",
        "var",
        "origin",
        "value",
        "status",
        "latency_ms",
        "detail",
    ]

    def __init__(self):
        self.rows: list[dict] = []

    def log(self, **fields) -> None:
        row = {c: "" for c in self.COLUMNS}
        for k, v in fields.items():
            if k not in row:
                raise KeyError(f"unknown log column {k!r}")
            if isinstance(v, (dict, list)):
                v = json.dumps(v, separators=(",", ":"), sort_keys=True)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            row[k] = v
        self.rows.append(row)


class SyncHub:
    def __init__(self, clock=None, gateway=None, grace_ms: int = 100):
        self.clock = clock or WallClock()
        self.gateway = gateway
        self.grace_ms = grace_ms
        self.agents: dict[str, Agent] = {}
        self.devices: dict[str, DeviceDescriptor] = {}
        self.links: dict[str, LinkState] = {}
        self.trackers: dict[str, CoherenceTracker] = {}
        self.topology: dict[str, SourceKind] = {}
        self.recorder = EventRecorder()
        self._links_by_var: dict[tuple[str, str], list[str]] = {}
        self._links_by_device_var: dict[tuple[str, str], list[str]] = {}
        self._seq: dict[tuple[str, str, Origin], int] = {}
        self._press_seen: dict[str, int] = {}
        self._pending_client: dict[tuple[str, str], tuple[Value, str]] = {}
        self._subscribers: list[Callable[[BusEvent], None]] = []
        self._dt_ms = getattr(self.clock, "dt_ms", 50)

    # -- registry ------------------------------------------------------------

    def register_agent(self, agent: Agent) -> None:
        if agent.id in self.agents:
            raise HubConfigError(f"duplicate agent id {agent.id!r}")
        self.agents[agent.id] = agent
        self.topology[agent.id] = SourceKind.AGENT

    def register_device(self, descr: DeviceDescriptor) -> None:
        if descr.id in self.devices:
            raise HubConfigError(f"duplicate device id {descr.id!r}")
        self.devices[descr.id] = descr
        self.topology[descr.id] = SourceKind.DEVICE_SENSOR
        self._press_seen[descr.id] = 0

    def register_link(self, link: SyncLink) -> None:
        if link.id in self.links:
            raise HubConfigError(f"duplicate link id {link.id!r}")
        agent = self.agents.get(link.agent_id)
        if agent is None:
            raise HubConfigError(f"link {link.id} references unknown agent {link.agent_id!r}")
        if link.device_id not in self.devices:
            raise HubConfigError(f"link {link.id} references unknown device {link.device_id!r}")
        violations = validate_agent(agent, [link])
        if violations:
            raise HubConfigError(f"link {link.id}: " + "; ".join(violations))
        for m in link.mappings:
            key = (link.agent_id, m.virtual_var)
            for other_id in self._links_by_var.get(key, []):
                if self.links[other_id].link.mode != link.mode:
                    # mixed directions on one var would let registers drift apart
                    raise HubConfigError(
                        f"var {m.virtual_var!r} mapped by links with different modes"
                    )
        state = LinkState(link)
        self.links[link.id] = state
        agent.links.append(link.id)
        self.trackers[link.id] = CoherenceTracker(link.id, dt_ms=self._dt_ms)
        for m in link.mappings:
            self._links_by_var.setdefault((link.agent_id, m.virtual_var), []).append(link.id)
            self._links_by_device_var.setdefault(
                (link.device_id, m.physical_var), []
            ).append(link.id)

    def register_session(self, session) -> None:
        self.topology[session.source_id] = SourceKind.HUMAN_CLIENT

    def agent_exists(self, agent_id: str) -> bool:
        return agent_id in self.agents

    def var_exists(self, agent_id: str, var: str) -> bool:
        agent = self.agents.get(agent_id)
        return agent is not None and var in agent.virtual.vars

    def subscribe_bus(self, fn: Callable[[BusEvent], None]) -> None:
        self._subscribers.append(fn)

    def now(self) -> int:
        return self.clock.now_ms()

    # -- inbound updates -------------------------------------------------------

    def queue_client_update(self, source_id: str, agent_id: str, var: str, value: Value):
        """Keep-latest coalescing per var per tick; drained by run_tick."""
        self._pending_client[(agent_id, var)] = (value, source_id)

    async def drain_client_updates(self) -> None:
        pending, self._pending_client = self._pending_client, {}
        for (agent_id, var), (value, source_id) in pending.items():
            await self.apply_update(agent_id, var, value, Origin.VIRTUAL, source_id)

    def _next_seq(self, agent_id: str, var: str, origin: Origin) -> int:
        key = (agent_id, var, origin)
        self._seq[key] = self._seq.get(key, 0) + 1
        return self._seq[key]

    async def apply_update(
        self,
        agent_id: str,
        var: str,
        value: Value,
        origin: Origin,
        source_id: str,
    ) -> ApplyResult:
        """Stamp, reconcile, and route one update."""
        agent = self.agents.get(agent_id)
        if agent is None:
            raise UnknownLinkError(f"unknown agent {agent_id!r}")
        ts = self.now()
        vv = VersionedValue(value, ts=ts, origin=origin, seq=self._next_seq(agent_id, var, origin))

        link_ids = self._links_by_var.get((agent_id, var), [])
        applied = False
        emitted: list[Command] = []
        if not link_ids:
            applied = self._apply_to_snapshot(agent.virtual, var, vv)
        for link_id in link_ids:
            state = self.links[link_id]
            emitted.extend(
                ingest_update(state, UpdateEvent(link_id, var, vv, source_id=source_id))
            )
            if state.current.get(var) is vv:
                applied = True
        if link_ids and applied:
            self._apply_to_snapshot(agent.virtual, var, vv)
        scene_commands = [c for c in emitted if c.target == CommandTarget.SCENE_CLIENTS]

        cls = classify_event(UpdateEvent("", var, vv, source_id=source_id), self.topology)
        self.recorder.log(
            tick=self._tick_field(),
            t_ms=ts,
            kind="update" if applied else "update_dropped",
            **{"class": cls.value},
            agent=agent_id,
            var=var,
            origin=origin.value,
            value=value_to_json(value),
            status="applied" if applied else "dropped",
            detail=source_id,
        )
        if applied:
            self._publish(
                BusEvent(
                    ts=ts,
                    kind="update",
                    cls=cls,
                    agent=agent_id,
                    var=var,
                    value=value_to_json(value),
                    origin=origin.value,
                    source=source_id,
                )
            )
        for cmd in scene_commands:
            self._publish_scene_command(cmd, cls)
        return ApplyResult(applied, emitted)

    @staticmethod
    def _apply_to_snapshot(snapshot: StateSnapshot, var: str, vv: VersionedValue) -> bool:
        from .sync import reconcile

        cur = snapshot.vars.get(var)
        if cur is not None and reconcile(cur, vv) is cur:
            return False
        snapshot.vars[var] = vv
        return True

    async def handle_device_event(
        self, device_id: str, var: str, value: Value, press_seq: int
    ) -> dict:
        """Ingest a device-originated change; duplicates ack but do nothing."""
        if device_id not in self.devices:
            raise UnknownLinkError(f"unknown device {device_id!r}")
        if press_seq <= self._press_seen[device_id]:
            return {"accepted": True, "duplicate": True}
        self._press_seen[device_id] = press_seq

        ts = self.now()
        link_ids = self._links_by_device_var.get((device_id, var), [])
        if not link_ids:
            raise UnknownLinkError(f"device {device_id!r} var {var!r} not linked")
        self.recorder.log(
            tick=self._tick_field(),
            t_ms=ts,
            kind="press",
            device=device_id,
            var=var,
            origin=Origin.PHYSICAL.value,
            value=value_to_json(value),
            detail=f"press_seq={press_seq}",
        )
        for link_id in link_ids:
            state = self.links[link_id]
            mapping = state.mapping_for_physical(var)
            observe_physical(state, var, value)
            virtual_value = invert_transform(mapping.transform, value)
            await self.apply_update(
                state.link.agent_id,
                mapping.virtual_var,
                virtual_value,
                Origin.PHYSICAL,
                source_id=device_id,
            )
        return {"accepted": True, "duplicate": False}

    def _publish(self, event: BusEvent) -> None:
        for fn in self._subscribers:
            fn(event)

    def _publish_scene_command(self, cmd: Command, cls: RelationshipClass) -> None:
        self._publish(
            BusEvent(
                ts=self.now(),
                kind="command",
                cls=cls,
                agent=cmd.agent_id,
                var=cmd.var,
                value=value_to_json(cmd.value),
                origin=Origin.PHYSICAL.value,
                source=cmd.link_id,
            )
        )

    # -- per-tick work ---------------------------------------------------------

    async def pump(self) -> list[Command]:
        """One propagation round: deliver pendings, repair divergence."""
        delivered = []
        now = self.now()
        for link_id, state in self.links.items():
            for cmd in pump_link(state, now):
                ok = await self._deliver(state, cmd)
                if ok:
                    delivered.append(cmd)
        return delivered

    async def _deliver(self, state: LinkState, cmd: Command) -> bool:
        descr = self.devices[cmd.device_id]
        try:
            await self.gateway.send_command(descr, cmd)
        except DeliveryError as exc:
            if not exc.retriable:
                state.pending.pop(cmd.var, None)  # config faults never converge
                state.failed[cmd.var] = cmd.value
            self.recorder.log(
                tick=self._tick_field(),
                t_ms=self.now(),
                kind="command",
                agent=cmd.agent_id,
                device=cmd.device_id,
                link=cmd.link_id,
                var=cmd.var,
                value=value_to_json(cmd.value),
                status="failed",
                detail=str(exc),
            )
            return False
        except SchemaMismatchError:
            state.pending.pop(cmd.var, None)
            raise
        delivery_succeeded(state, cmd.var, cmd.value)
        now = self.now()
        self.recorder.log(
            tick=self._tick_field(),
            t_ms=now,
            kind="command",
            **{"class": RelationshipClass.OBJECT_AGENT_TO_OBJECT_AGENT.value},
            agent=cmd.agent_id,
            device=cmd.device_id,
            link=cmd.link_id,
            var=cmd.var,
            value=value_to_json(cmd.value),
            status="delivered",
            latency_ms=now - cmd.cause_ts,
        )
        self._publish(
            BusEvent(
                ts=now,
                kind="device_state",
                cls=RelationshipClass.OBJECT_AGENT_TO_OBJECT_AGENT,
                agent=cmd.agent_id,
                device=cmd.device_id,
                var=cmd.var,
                value=value_to_json(cmd.value),
                origin=Origin.VIRTUAL.value,
                source=cmd.link_id,
            )
        )
        return True

    def sample_coherence(self) -> None:
        now = self.now()
        for link_id, state in self.links.items():
            self.trackers[link_id].sample(now, link_coherent(state))

    def coherence_report(
        self,
        link_id: str,
        window: Optional[tuple[int, int]] = None,
        grace_ms: Optional[int] = None,
    ) -> CoherenceReport:
        tracker = self.trackers[link_id]
        if window is None:
            samples = tracker.samples
            if not samples:
                window = (0, max(self.now(), 1))
            else:
                window = (samples[0][0], samples[-1][0] + tracker.dt_ms)
        return coherence_check(
            tracker, window, self.grace_ms if grace_ms is None else grace_ms
        )

    def _tick_field(self):
        tick = getattr(self.clock, "tick", None)
        return "" if tick is None else tick
