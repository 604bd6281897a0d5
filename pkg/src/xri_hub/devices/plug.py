"""Webhook smart-plug emulator with a pressable physical button.

Inbound control mimics an IFTTT-style webhook: POST
/trigger/{event}/with/key/{key} with the events lamp_on / lamp_off.
Button presses toggle locally and push a device-originated event to the
hub callback; failed pushes are retried and then queued so every press
reaches the hub exactly once (the hub dedups by press sequence number).
"""

from __future__ import annotations

import asyncio
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

EVENTS = {"lamp_on": True, "lamp_off": False}


@dataclass
class PlugState:
    on: bool = False
    last_event: Optional[str] = None


class HubCallback(Protocol):
    async def post_event(self, payload: dict) -> bool:
        """Deliver one device event; True means the hub accepted it."""


class HttpHubCallback:
    def __init__(self, base_url: str, client=None):
        self.base_url = base_url.rstrip("/")
        self.client = client  # created lazily inside the emulator's event loop

    async def post_event(self, payload: dict) -> bool:
        if self.client is None:
            import httpx

            self.client = httpx.AsyncClient(timeout=2.0)
        try:
            r = await self.client.post(f"{self.base_url}/events", json=payload)
        except Exception:
            return False
        return r.status_code == 200


def _wall_ms() -> int:
    return int(time.time() * 1000)


class PlugCore:
    def __init__(
        self,
        device_id: str = "plug-1",
        key: str = "demo-key",
        callback: Optional[HubCallback] = None,
        clock: Optional[Callable[[], int]] = None,
        press_retries: int = 3,
        retry_delay_s: float = 0.05,
    ):
        self.device_id = device_id
        self.key = key
        self.callback = callback
        self.state = PlugState()
        self.press_seq = 0
        self.undelivered: deque[dict] = deque()
        self.press_retries = press_retries
        self.retry_delay_s = retry_delay_s
        self._clock = clock or _wall_ms
        self._outage_until: Optional[int] = None

    # -- fault injection ---------------------------------------------------

    def start_outage(self, duration_ms: int) -> int:
        self._outage_until = self._clock() + duration_ms
        return self._outage_until

    def available(self) -> bool:
        if self._outage_until is None:
            return True
        if self._clock() >= self._outage_until:
            self._outage_until = None
            return True
        return False

    # -- webhook + button behavior -------------------------------------------

    def trigger(self, event: str, key: str) -> tuple[int, dict]:
        if key != self.key:
            return 401, {"errors": [{"message": "invalid key"}]}
        if event not in EVENTS:
            return 404, {"errors": [{"message": f"unknown event: {event}"}]}
        self.state.on = EVENTS[event]
        self.state.last_event = event
        return 200, {"fired": event}

    def state_json(self) -> dict:
        return {"on": self.state.on, "last_event": self.state.last_event}

    async def press(self) -> PlugState:
        """Toggle like the physical button would, then notify the hub."""
        self.state.on = not self.state.on
        self.state.last_event = "button"
        self.press_seq += 1
        self.undelivered.append(
            {
                "device": self.device_id,
                "var": "power",
                "value": self.state.on,
                "press_seq": self.press_seq,
            }
        )
        for attempt in range(self.press_retries):
            if await self.flush():
                break
            if self.retry_delay_s > 0:
                await asyncio.sleep(self.retry_delay_s * (2**attempt))
        return self.state

    async def flush(self) -> bool:
        """Push queued events oldest-first; returns True once the queue is empty."""
        if self.callback is None:
            return not self.undelivered
        while self.undelivered:
            if not await self.callback.post_event(self.undelivered[0]):
                return False
            self.undelivered.popleft()
        return True


def create_plug_app(core: PlugCore, background_flush: bool = False) -> FastAPI:
    app = FastAPI(title="smart plug emulator", docs_url=None, redoc_url=None)
    app.state.core = core

    if background_flush:

        @app.on_event("startup")
        async def start_flusher():
            async def run():
                while True:
                    await asyncio.sleep(0.25)
                    await core.flush()

            app.state.flusher = asyncio.create_task(run())

        @app.on_event("shutdown")
        async def stop_flusher():
            app.state.flusher.cancel()

    @app.post("/trigger/{event}/with/key/{key}")
    def trigger(event: str, key: str):
        if not core.available():
            return JSONResponse({"error": "outage"}, status_code=503)
        status, body = core.trigger(event, key)
        return JSONResponse(body, status_code=status)

    @app.get("/state")
    def read_state():
        if not core.available():
            return JSONResponse({"error": "outage"}, status_code=503)
        return JSONResponse(core.state_json())

    # the "physical hand": pressing works even while the network path is down
    @app.post("/press")
    async def press():
        state = await core.press()
        return JSONResponse({"on": state.on, "last_event": state.last_event})

    @app.post("/_sim/outage")
    async def inject_outage(request: Request):
        body = await request.json()
        until = core.start_outage(int(float(body["duration_s"]) * 1000))
        return {"outage_until_ms": until}

    @app.get("/_sim/status")
    def status():
        return {"available": core.available(), "queued_events": len(core.undelivered)}

    return app
