"""Reconciliation core: versioned updates in, convergence commands out.

Conflicts resolve last-writer-wins on hub-assigned timestamps, physical
origin beating virtual on ties (the physical environment is the one users
still rely on, so it is treated as ground truth), sequence number last.
Divergence between the two embodiments of a link is tracked per tick and
summarized as a noise score: the time-fraction a link spent incoherent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping as TMapping
from typing import Optional

from .colors import hsb_to_rgb, rgb_to_hsb
from .model import (
    ColorHSB,
    ColorRGB,
    Origin,
    Interaction,
    SyncLink,
    TimestampMs,
    Transform,
    Value,
    Vector3,
    VersionedValue,
)

SCALAR_TOLERANCE = 1e-6
COLOR_TOLERANCE = 1.0 / 254.0  # per channel, after transform (quantization allowance)


class SyncError(Exception):
    pass


class TypeMismatchError(SyncError):
    pass


class UnknownLinkError(SyncError):
    pass


class UnmappedVarError(SyncError):
    pass


class UnknownSourceError(SyncError):
    pass


class EmptyWindowError(SyncError):
    pass


def _value_kind(v: Value) -> str:
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, (int, float)):
        return "scalar"
    if isinstance(v, ColorRGB):
        return "color"
    if isinstance(v, Vector3):
        return "vector"
    if isinstance(v, ColorHSB):
        return "hsb"
    raise TypeMismatchError(f"unsupported value type {type(v).__name__}")


def values_equal(a: Value, b: Value) -> bool:
    """Equality under the comparison tolerances used for coherence checks."""
    ka, kb = _value_kind(a), _value_kind(b)
    if ka != kb:
        return False
    if ka == "bool":
        return a is b or a == b
    if ka == "scalar":
        return abs(a - b) <= SCALAR_TOLERANCE
    if ka == "color":
        return (
            abs(a.r - b.r) <= COLOR_TOLERANCE
            and abs(a.g - b.g) <= COLOR_TOLERANCE
            and abs(a.b - b.b) <= COLOR_TOLERANCE
        )
    if ka == "vector":
        return (
            abs(a.x - b.x) <= SCALAR_TOLERANCE
            and abs(a.y - b.y) <= SCALAR_TOLERANCE
            and abs(a.z - b.z) <= SCALAR_TOLERANCE
        )
    # HSB values compare by what the light would actually show
    return values_equal(hsb_to_rgb(a), hsb_to_rgb(b))


def apply_transform(t: Transform, v: Value) -> Value:
    if t == Transform.IDENTITY:
        return v
    if t == Transform.RGB_TO_HSB:
        if not isinstance(v, ColorRGB):
            raise TypeMismatchError("RgbToHsb transform requires a ColorRGB value")
        return rgb_to_hsb(v)
    raise SyncError(f"unknown transform {t!r}")


def invert_transform(t: Transform, v: Value) -> Value:
    if t == Transform.IDENTITY:
        return v
    if t == Transform.RGB_TO_HSB:
        if not isinstance(v, ColorHSB):
            raise TypeMismatchError("RgbToHsb inverse requires a ColorHSB value")
        return hsb_to_rgb(v)
    raise SyncError(f"unknown transform {t!r}")


_ORIGIN_RANK = {Origin.VIRTUAL: 0, Origin.PHYSICAL: 1}


def _version_key(v: VersionedValue) -> tuple:
    return (v.ts, _ORIGIN_RANK[v.origin], v.seq)


def reconcile(a: VersionedValue, b: VersionedValue) -> VersionedValue:
    """Pick the winner under the total order (ts, origin, seq).

    Deterministic and argument-order independent whenever the version keys
    differ; equal keys denote the same stream position, where valid streams
    carry identical values.
    """
    if _value_kind(a.value) != _value_kind(b.value):
        raise TypeMismatchError(
            f"cannot reconcile {_value_kind(a.value)} against {_value_kind(b.value)}"
        )
    return b if _version_key(b) > _version_key(a) else a


class CommandTarget(str, Enum):
    DEVICE = "device"
    SCENE_CLIENTS = "scene_clients"


@dataclass(frozen=True)
class Command:
    target: CommandTarget
    device_id: Optional[str]  # None broadcasts to scene clients
    agent_id: str
    var: str  # physical var for DEVICE targets, virtual var otherwise
    value: Value
    link_id: str
    cause_ts: TimestampMs


@dataclass(frozen=True)
class UpdateEvent:
    link_id: str
    var: str  # virtual-side variable name
    value: VersionedValue
    source_id: str = ""


@dataclass
class PendingDelivery:
    value: Value  # physical-space
    cause_ts: TimestampMs
    attempts: int = 0


@dataclass
class LinkState:
    """Per-link live state: canonical registers plus the device shadow.

    `current` holds the reconciled virtual-space value per mapped variable.
    `shadow` holds what the hub believes the device currently shows, in
    physical space, fed by delivery acks and device-originated events.
    """

    link: SyncLink
    current: dict[str, VersionedValue] = field(default_factory=dict)
    shadow: dict[str, Value] = field(default_factory=dict)
    pending: dict[str, PendingDelivery] = field(default_factory=dict)
    # values the device permanently refused; retried only after the canonical changes
    failed: dict[str, Value] = field(default_factory=dict)

    def mapping_for_virtual(self, var: str):
        for m in self.link.mappings:
            if m.virtual_var == var:
                return m
        raise UnmappedVarError(f"var {var!r} not mapped in link {self.link.id}")

    def mapping_for_physical(self, pvar: str):
        for m in self.link.mappings:
            if m.physical_var == pvar:
                return m
        raise UnmappedVarError(f"physical var {pvar!r} not mapped in link {self.link.id}")


def ingest_update(state: LinkState, e: UpdateEvent) -> list[Command]:
    """Reconcile one update against the link register.

    Winning values that actually differ emit exactly the commands needed to
    re-converge the opposite side; losers and duplicates change nothing.
    """
    if e.link_id != state.link.id:
        raise UnknownLinkError(f"event for link {e.link_id!r} fed to {state.link.id!r}")
    m = state.mapping_for_virtual(e.var)
    mode = state.link.mode

    # One-way links ignore updates flowing against their direction.
    if e.value.origin == Origin.PHYSICAL and mode == Interaction.VIRTUAL_TO_PHYSICAL:
        return []

    cur = state.current.get(e.var)
    if cur is not None and reconcile(cur, e.value) is cur:
        return []  # stale or duplicate

    state.current[e.var] = e.value
    state.failed.pop(m.physical_var, None)
    if cur is not None and values_equal(cur.value, e.value.value):
        return []  # newer version of the same value: no echo

    commands: list[Command] = []
    if e.value.origin == Origin.VIRTUAL:
        if mode in (Interaction.VIRTUAL_TO_PHYSICAL, Interaction.TWO_WAY):
            out = apply_transform(m.transform, e.value.value)
            state.pending[m.physical_var] = PendingDelivery(out, e.value.ts)
            commands.append(
                Command(
                    target=CommandTarget.DEVICE,
                    device_id=state.link.device_id,
                    agent_id=state.link.agent_id,
                    var=m.physical_var,
                    value=out,
                    link_id=state.link.id,
                    cause_ts=e.value.ts,
                )
            )
    else:
        # the physical side moved past any queued push; delivering the stale
        # loser would reorder the last-writer-wins outcome on the device
        state.pending.pop(m.physical_var, None)
        if mode in (Interaction.PHYSICAL_TO_VIRTUAL, Interaction.TWO_WAY):
            commands.append(
                Command(
                    target=CommandTarget.SCENE_CLIENTS,
                    device_id=None,
                    agent_id=state.link.agent_id,
                    var=e.var,
                    value=e.value.value,
                    link_id=state.link.id,
                    cause_ts=e.value.ts,
                )
            )
    return commands


def observe_physical(state: LinkState, pvar: str, value: Value) -> None:
    """Record what the device itself reports; clears any pending push that
    this observation already satisfies."""
    state.mapping_for_physical(pvar)
    state.shadow[pvar] = value
    pend = state.pending.get(pvar)
    if pend is not None and values_equal(pend.value, value):
        del state.pending[pvar]


def pump_link(state: LinkState, now: TimestampMs) -> list[Command]:
    """One propagation round: retry pending deliveries and repair divergence.

    Repair only pushes hub-to-device (links that may flow that way); the
    reverse leg is event-driven by the devices themselves.
    """
    commands: list[Command] = []
    if state.link.mode == Interaction.PHYSICAL_TO_VIRTUAL:
        return commands

    for m in state.link.mappings:
        cur = state.current.get(m.virtual_var)
        pend = state.pending.get(m.physical_var)
        if pend is not None:
            pend.attempts += 1
            commands.append(
                Command(
                    target=CommandTarget.DEVICE,
                    device_id=state.link.device_id,
                    agent_id=state.link.agent_id,
                    var=m.physical_var,
                    value=pend.value,
                    link_id=state.link.id,
                    cause_ts=pend.cause_ts,
                )
            )
            continue
        if cur is None:
            continue
        want = apply_transform(m.transform, cur.value)
        gave_up = state.failed.get(m.physical_var)
        if gave_up is not None and values_equal(want, gave_up):
            continue
        have = state.shadow.get(m.physical_var)
        if have is None or not values_equal(want, have):
            state.pending[m.physical_var] = PendingDelivery(want, now)
            commands.append(
                Command(
                    target=CommandTarget.DEVICE,
                    device_id=state.link.device_id,
                    agent_id=state.link.agent_id,
                    var=m.physical_var,
                    value=want,
                    link_id=state.link.id,
                    cause_ts=now,
                )
            )
    return commands


def delivery_succeeded(state: LinkState, pvar: str, value: Value) -> None:
    state.shadow[pvar] = value
    pend = state.pending.get(pvar)
    if pend is not None and values_equal(pend.value, value):
        del state.pending[pvar]


def link_coherent(state: LinkState) -> bool:
    """True when every mapped pair agrees within tolerance right now."""
    for m in state.link.mappings:
        cur = state.current.get(m.virtual_var)
        if cur is None:
            continue
        have = state.shadow.get(m.physical_var)
        if have is None:
            return False
        if not values_equal(apply_transform(m.transform, cur.value), have):
            return False
    return True


@dataclass(frozen=True)
class CoherenceReport:
    link_id: str
    window: tuple[TimestampMs, TimestampMs]
    incoherent_spans: list[tuple[TimestampMs, TimestampMs]]
    noise_score: float


class CoherenceTracker:
    """Per-link ring of tick samples feeding noise-score reports."""

    def __init__(self, link_id: str, dt_ms: int, capacity: int = 20 * 60 * 10):
        self.link_id = link_id
        self.dt_ms = dt_ms
        self.samples: list[tuple[TimestampMs, bool]] = []
        self._capacity = capacity

    def sample(self, ts: TimestampMs, coherent: bool) -> None:
        self.samples.append((ts, coherent))
        if len(self.samples) > self._capacity:
            del self.samples[: len(self.samples) - self._capacity]


def coherence_check(
    tracker: CoherenceTracker,
    window: tuple[TimestampMs, TimestampMs],
    grace_ms: int = 100,
) -> CoherenceReport:
    """Summarize divergence inside the window.

    A divergent run only counts once it lasts strictly longer than the
    grace period; qualifying runs contribute their full duration.
    """
    start, end = window
    if end <= start:
        raise EmptyWindowError(f"window ({start}, {end}) has no duration")

    dt = tracker.dt_ms
    spans: list[tuple[int, int]] = []
    run_start: Optional[int] = None
    prev_ts: Optional[int] = None
    for ts, coherent in tracker.samples:
        if ts < start or ts >= end:
            continue
        if not coherent:
            if run_start is None or (prev_ts is not None and ts - prev_ts > dt):
                if run_start is not None:
                    spans.append((run_start, prev_ts + dt))
                run_start = ts
            prev_ts = ts
        else:
            if run_start is not None:
                spans.append((run_start, prev_ts + dt))
                run_start = None
            prev_ts = None
    if run_start is not None:
        spans.append((run_start, prev_ts + dt))

    kept = [(s, min(e, end)) for s, e in spans if (min(e, end) - s) > grace_ms]
    incoherent = sum(e - s for s, e in kept)
    return CoherenceReport(
        link_id=tracker.link_id,
        window=(start, end),
        incoherent_spans=kept,
        noise_score=incoherent / (end - start),
    )


class RelationshipClass(str, Enum):
    HUMAN_TO_HUMAN = "human_to_human"
    ENVIRONMENT_TO_HUMAN = "environment_to_human"
    OBJECT_AGENT_TO_OBJECT_AGENT = "object_agent_to_object_agent"


class SourceKind(str, Enum):
    HUMAN_CLIENT = "human_client"
    DEVICE_SENSOR = "device_sensor"
    AGENT = "agent"


_CLASS_BY_SOURCE = {
    SourceKind.HUMAN_CLIENT: RelationshipClass.HUMAN_TO_HUMAN,
    SourceKind.DEVICE_SENSOR: RelationshipClass.ENVIRONMENT_TO_HUMAN,
    SourceKind.AGENT: RelationshipClass.OBJECT_AGENT_TO_OBJECT_AGENT,
}


def classify_event(e: UpdateEvent, topology: TMapping[str, SourceKind]) -> RelationshipClass:
    """Route a bus event into one of the three relationship categories.

    Human-originated traffic surfaces to other humans, device and sensor
    traffic renders into the scene for humans, and agent-driven propagation
    stays object-agent to object-agent.
    """
    kind = topology.get(e.source_id)
    if kind is None:
        raise UnknownSourceError(f"unknown event source {e.source_id!r}")
    return _CLASS_BY_SOURCE[kind]
