"""Session-layer framing between the hub and scene clients.

One canonical JSON object per text frame, fixed top-level key order
(v, type, seq, ts, agent, payload); payload keys are sorted recursively so
encodings are byte-stable. Carried over a browser websocket or, for
headless drivers, newline-delimited TCP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .model import ModelError, value_from_json
from .sync import RelationshipClass

PROTOCOL_VERSION = 1

FRAME_TYPES = (
    "hello",
    "subscribe",
    "state_update",
    "command",
    "event",
    "coherence_report",
    "error",
    "ack",
)

# client -> hub frame types the dispatcher will act on
_CLIENT_TYPES = {"hello", "subscribe", "state_update", "ack", "error"}

# required / optional payload keys per frame type
_PAYLOAD_KEYS = {
    "hello": (set(), {"client", "proto"}),
    "subscribe": ({"agents"}, {"classes"}),
    "state_update": ({"var", "value"}, set()),
    "command": ({"target", "var", "value"}, {"device"}),
    "event": ({"class", "kind"}, {"origin", "var", "value", "source", "device", "data"}),
    "coherence_report": ({"link", "window", "noise_score", "spans"}, set()),
    "error": ({"code"}, {"detail"}),
    "ack": ({"of_seq", "status"}, {"detail"}),
}


class FrameError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


@dataclass
class Frame:
    type: str
    seq: int
    ts: int
    agent: Optional[str] = None
    payload: dict = field(default_factory=dict)
    v: int = PROTOCOL_VERSION


def _canonical(obj):
    if isinstance(obj, dict):
        return {k: _canonical(obj[k]) for k in sorted(obj)}
    if isinstance(obj, list):
        return [_canonical(x) for x in obj]
    return obj


def _validate_payload(ftype: str, payload) -> None:
    if not isinstance(payload, dict):
        raise FrameError("bad_frame", "payload must be an object")
    required, optional = _PAYLOAD_KEYS[ftype]
    keys = set(payload)
    missing = required - keys
    if missing:
        raise FrameError("bad_frame", f"{ftype} payload missing {sorted(missing)}")
    unknown = keys - required - optional
    if unknown:
        raise FrameError("bad_frame", f"{ftype} payload has unknown keys {sorted(unknown)}")


def validate_frame(f: Frame) -> None:
    if f.v != PROTOCOL_VERSION:
        raise FrameError("bad_frame", f"unsupported protocol version {f.v!r}")
    if f.type not in FRAME_TYPES:
        raise FrameError("unknown_type", f"unknown frame type {f.type!r}")
    if isinstance(f.seq, bool) or not isinstance(f.seq, int) or f.seq < 0:
        raise FrameError("bad_frame", "seq must be a non-negative integer")
    if isinstance(f.ts, bool) or not isinstance(f.ts, int) or f.ts < 0:
        raise FrameError("bad_frame", "ts must be a non-negative integer")
    if f.agent is not None and (not isinstance(f.agent, str) or not f.agent):
        raise FrameError("bad_frame", "agent must be a non-empty string")
    _validate_payload(f.type, f.payload)


def encode_frame(f: Frame) -> bytes:
    validate_frame(f)
    out = {"v": f.v, "type": f.type, "seq": f.seq, "ts": f.ts}
    if f.agent is not None:
        out["agent"] = f.agent
    out["payload"] = _canonical(f.payload)
    try:
        text = json.dumps(out, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise FrameError("bad_frame", f"payload not serializable: {exc}") from exc
    return text.encode("utf-8")


def decode_frame(data) -> Frame:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FrameError("bad_frame", "frame is not valid UTF-8") from exc
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise FrameError("bad_frame", f"invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise FrameError("bad_frame", "frame must be a JSON object")

    allowed = {"v", "type", "seq", "ts", "agent", "payload"}
    unknown = set(raw) - allowed
    if unknown:
        raise FrameError("bad_frame", f"unknown top-level keys {sorted(unknown)}")
    missing = {"v", "type", "seq", "ts", "payload"} - set(raw)
    if missing:
        raise FrameError("bad_frame", f"missing keys {sorted(missing)}")

    f = Frame(
        type=raw["type"],
        seq=raw["seq"],
        ts=raw["ts"],
        agent=raw.get("agent"),
        payload=raw["payload"],
        v=raw["v"],
    )
    if not isinstance(f.type, str):
        raise FrameError("bad_frame", "type must be a string")
    validate_frame(f)
    return f


@dataclass(frozen=True)
class Subscription:
    session_id: str
    agents: frozenset[str]  # "*" subscribes to everything
    classes: Optional[frozenset[RelationshipClass]] = None  # None = all classes

    def matches(self, agent_id: Optional[str], cls: Optional[RelationshipClass]) -> bool:
        if "*" not in self.agents:
            if agent_id is None or agent_id not in self.agents:
                return False
        if self.classes is not None and cls is not None and cls not in self.classes:
            return False
        return True


class Session:
    """Per-connection protocol state: hello gate, seq tracking, subscription."""

    def __init__(self, session_id: str):
        self.id = session_id
        self.hello_done = False
        self.subscription: Optional[Subscription] = None
        self._last_seq_in = 0
        self._seq_out = 0

    @property
    def source_id(self) -> str:
        return f"session:{self.id}"

    def next_seq(self) -> int:
        self._seq_out += 1
        return self._seq_out

    def accept_seq(self, seq: int) -> bool:
        if seq <= self._last_seq_in:
            return False
        self._last_seq_in = seq
        return True

    def make_frame(self, ftype: str, ts: int, agent=None, payload=None) -> Frame:
        return Frame(type=ftype, seq=self.next_seq(), ts=ts, agent=agent, payload=payload or {})

    def make_error(self, ts: int, code: str, detail: str = "") -> Frame:
        payload = {"code": code}
        if detail:
            payload["detail"] = detail
        return self.make_frame("error", ts, payload=payload)


def handle_incoming(session: Session, data, hub) -> list[Frame]:
    """Decode, gate, and dispatch one inbound frame; returns reply frames.

    Sessions survive every protocol error: the offending frame is dropped
    and an error frame goes back to the sender. `hub` supplies the clock,
    the agent registry, and update application (see SyncHub).
    """
    now = hub.now()
    try:
        frame = decode_frame(data)
    except FrameError as exc:
        return [session.make_error(now, exc.code, exc.detail)]

    if not session.accept_seq(frame.seq):
        return [session.make_error(now, "stale_seq", f"seq {frame.seq} already seen")]

    return dispatch(session, frame, hub)


def dispatch(session: Session, frame: Frame, hub) -> list[Frame]:
    now = hub.now()

    if frame.type == "hello":
        session.hello_done = True
        hub.register_session(session)
        return [
            session.make_frame("ack", now, payload={"of_seq": frame.seq, "status": "ok"})
        ]

    if not session.hello_done:
        return [session.make_error(now, "no_hello", "say hello first")]

    if frame.type == "subscribe":
        agents = frame.payload["agents"]
        if not isinstance(agents, list) or not agents or not all(
            isinstance(a, str) and a for a in agents
        ):
            return [session.make_error(now, "bad_frame", "agents must be a non-empty list")]
        classes = None
        if "classes" in frame.payload:
            try:
                classes = frozenset(
                    RelationshipClass(c) for c in frame.payload["classes"]
                )
            except ValueError:
                return [session.make_error(now, "bad_frame", "unknown relationship class")]
        session.subscription = Subscription(session.id, frozenset(agents), classes)
        return [
            session.make_frame("ack", now, payload={"of_seq": frame.seq, "status": "ok"})
        ]

    if frame.type == "state_update":
        if frame.agent is None:
            return [session.make_error(now, "bad_frame", "state_update requires agent")]
        if not hub.agent_exists(frame.agent):
            return [session.make_error(now, "unknown_agent", frame.agent)]
        try:
            value = value_from_json(frame.payload["value"])
        except ModelError as exc:
            return [session.make_error(now, "bad_frame", str(exc))]
        var = frame.payload["var"]
        if not hub.var_exists(frame.agent, var):
            return [session.make_error(now, "unknown_var", f"{frame.agent}.{var}")]
        hub.queue_client_update(session.source_id, frame.agent, var, value)
        return [
            session.make_frame("ack", now, payload={"of_seq": frame.seq, "status": "applied"})
        ]

    if frame.type in ("ack", "error"):
        return []  # client-side acks and error reports need no reply

    return [session.make_error(now, "bad_frame", f"{frame.type} not accepted from clients")]
