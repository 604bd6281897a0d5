"""Hub-side device adapters: translate sync commands into device protocol.

Plug power commands become webhook triggers; bulb color commands become
bridge state writes. Transport failures raise DeliveryError so the sync
engine keeps the delivery pending and the divergence feeds the noise
score.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import httpx

from ..model import ColorHSB
from ..sync import Command


class DeviceKind(str, Enum):
    COLOR_BULB = "color_bulb"
    PLUG = "plug"


@dataclass(frozen=True)
class DeviceDescriptor:
    id: str
    kind: DeviceKind
    endpoint: str  # bridge: .../api/{user}; plug: service root
    callback: str = ""  # hub base URL the device pushes events to
    light: str = "1"  # bulb only: light id on its bridge
    key: str = "demo-key"  # plug only: webhook key


class DeliveryError(Exception):
    """Transport-level failure; retriable unless flagged otherwise."""

    def __init__(self, detail: str, retriable: bool = True):
        super().__init__(detail)
        self.retriable = retriable


class SchemaMismatchError(Exception):
    """Command variable/value does not fit the device kind's schema."""


def _hsb_json(value: ColorHSB) -> dict:
    return {"on": value.on, "hue": value.hue, "sat": value.sat, "bri": value.bri}


class HttpDeviceGateway:
    """Speaks real device protocol over any httpx client (live or in-process)."""

    def __init__(self, client: httpx.AsyncClient):
        self.client = client

    async def send_command(self, descr: DeviceDescriptor, command: Command) -> None:
        if descr.kind == DeviceKind.PLUG:
            if command.var != "power" or not isinstance(command.value, bool):
                raise SchemaMismatchError(
                    f"plug {descr.id} cannot apply {command.var}={command.value!r}"
                )
            event = "lamp_on" if command.value else "lamp_off"
            url = f"{descr.endpoint.rstrip('/')}/trigger/{event}/with/key/{descr.key}"
            try:
                r = await self.client.post(url)
            except httpx.HTTPError as exc:
                raise DeliveryError(f"plug unreachable: {exc}") from exc
            if r.status_code in (401, 404):
                raise DeliveryError(f"plug rejected trigger: {r.text}", retriable=False)
            if r.status_code != 200:
                raise DeliveryError(f"plug returned {r.status_code}")
            return

        if descr.kind == DeviceKind.COLOR_BULB:
            if command.var != "color" or not isinstance(command.value, ColorHSB):
                raise SchemaMismatchError(
                    f"bulb {descr.id} cannot apply {command.var}={command.value!r}"
                )
            url = f"{descr.endpoint.rstrip('/')}/lights/{descr.light}/state"
            try:
                r = await self.client.put(url, json=_hsb_json(command.value))
            except httpx.HTTPError as exc:
                raise DeliveryError(f"bridge unreachable: {exc}") from exc
            if r.status_code != 200:
                raise DeliveryError(f"bridge returned {r.status_code}")
            entries = r.json()
            errors = [e for e in entries if "error" in e]
            if errors:
                raise DeliveryError(f"bridge refused fields: {errors}", retriable=False)
            return

        raise SchemaMismatchError(f"unknown device kind {descr.kind!r}")

    async def read_state(self, descr: DeviceDescriptor) -> dict:
        """Read the device's physical vars, keyed by mapped variable name."""
        if descr.kind == DeviceKind.PLUG:
            try:
                r = await self.client.get(f"{descr.endpoint.rstrip('/')}/state")
            except httpx.HTTPError as exc:
                raise DeliveryError(f"plug unreachable: {exc}") from exc
            if r.status_code != 200:
                raise DeliveryError(f"plug returned {r.status_code}")
            return {"power": bool(r.json()["on"])}

        if descr.kind == DeviceKind.COLOR_BULB:
            url = f"{descr.endpoint.rstrip('/')}/lights/{descr.light}"
            try:
                r = await self.client.get(url)
            except httpx.HTTPError as exc:
                raise DeliveryError(f"bridge unreachable: {exc}") from exc
            if r.status_code != 200:
                raise DeliveryError(f"bridge returned {r.status_code}")
            body = r.json()
            if isinstance(body, list):  # error entries
                raise DeliveryError(f"bridge error: {body}", retriable=False)
            s = body["state"]
            return {
                "color": ColorHSB(on=s["on"], hue=s["hue"], sat=s["sat"], bri=s["bri"])
            }

        raise SchemaMismatchError(f"unknown device kind {descr.kind!r}")


class InMemoryGateway:
    """Direct-core adapter for fast engine tests; same behavior, no HTTP."""

    def __init__(self):
        self.bridges: dict[str, object] = {}  # device id -> (BridgeCore, light id)
        self.plugs: dict[str, object] = {}

    def attach_bulb(self, device_id: str, core, light: str) -> None:
        self.bridges[device_id] = (core, light)

    def attach_plug(self, device_id: str, core) -> None:
        self.plugs[device_id] = core

    async def send_command(self, descr: DeviceDescriptor, command: Command) -> None:
        if descr.kind == DeviceKind.PLUG:
            core = self.plugs[descr.id]
            if command.var != "power" or not isinstance(command.value, bool):
                raise SchemaMismatchError(f"plug {descr.id}: {command.var}")
            if not core.available():
                raise DeliveryError("plug outage")
            status, _ = core.trigger("lamp_on" if command.value else "lamp_off", core.key)
            if status != 200:
                raise DeliveryError(f"trigger status {status}", retriable=False)
            return
        if descr.kind == DeviceKind.COLOR_BULB:
            core, light = self.bridges[descr.id]
            if command.var != "color" or not isinstance(command.value, ColorHSB):
                raise SchemaMismatchError(f"bulb {descr.id}: {command.var}")
            if not core.available():
                raise DeliveryError("bridge outage")
            entries = core.put_state(light, _hsb_json(command.value))
            if any("error" in e for e in entries):
                raise DeliveryError(f"bridge refused: {entries}", retriable=False)
            return
        raise SchemaMismatchError(f"unknown device kind {descr.kind!r}")

    async def read_state(self, descr: DeviceDescriptor) -> dict:
        if descr.kind == DeviceKind.PLUG:
            core = self.plugs[descr.id]
            if not core.available():
                raise DeliveryError("plug outage")
            return {"power": core.state.on}
        core, light = self.bridges[descr.id]
        if not core.available():
            raise DeliveryError("bridge outage")
        s = core.lights[light]
        return {"color": ColorHSB(on=s["on"], hue=s["hue"], sat=s["sat"], bri=s["bri"])}
