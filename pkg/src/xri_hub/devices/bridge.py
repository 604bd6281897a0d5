"""Color-bulb bridge emulator: a faithful REST subset of the vendor API.

Lights live at /api/{user}/lights; state writes answer with one
success/error entry per requested field, in request order, exactly like
the real bridge does. Scripted outages make the service unavailable
without ever touching stored state.
"""

from __future__ import annotations

import time
from typing import Callable, Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

DEFAULT_LIGHT_STATE = {"on": False, "hue": 0, "sat": 0, "bri": 254}

_FIELD_RANGES = {"hue": (0, 65535), "sat": (0, 254), "bri": (1, 254)}


def _wall_ms() -> int:
    return int(time.time() * 1000)


class BridgeCore:
    """Bridge state machine; the HTTP app is a thin shell over this."""

    def __init__(
        self,
        n_lights: int = 4,
        username: str = "hubuser",
        clock: Optional[Callable[[], int]] = None,
    ):
        self.username = username
        self.lights = {
            str(i): dict(DEFAULT_LIGHT_STATE) for i in range(1, n_lights + 1)
        }
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

    # -- vendor API behavior -----------------------------------------------

    def authorized(self, user: str) -> bool:
        return user == self.username

    @staticmethod
    def unauthorized_body() -> list:
        return [{"error": {"type": 1, "address": "/", "description": "unauthorized user"}}]

    def light_json(self, light_id: str) -> dict:
        s = self.lights[light_id]
        return {
            "state": {
                "on": s["on"],
                "bri": s["bri"],
                "hue": s["hue"],
                "sat": s["sat"],
                "reachable": True,
            },
            "type": "Extended color light",
            "name": f"Hue color lamp {light_id}",
            "modelid": "LCT015",
        }

    def get_lights(self) -> dict:
        return {lid: self.light_json(lid) for lid in self.lights}

    def get_light(self, light_id: str):
        if light_id not in self.lights:
            return self._not_available(f"/lights/{light_id}")
        return self.light_json(light_id)

    def put_state(self, light_id: str, body) -> list:
        """Apply exactly the provided fields; bad fields fail individually."""
        if light_id not in self.lights:
            return self._not_available(f"/lights/{light_id}")
        if not isinstance(body, dict):
            return [
                {
                    "error": {
                        "type": 2,
                        "address": f"/lights/{light_id}/state",
                        "description": "body contains invalid json",
                    }
                }
            ]
        light = self.lights[light_id]
        entries = []
        for field, value in body.items():
            address = f"/lights/{light_id}/state/{field}"
            if field == "on":
                if not isinstance(value, bool):
                    entries.append(self._invalid_value(address, value, field))
                    continue
                light["on"] = value
            elif field in _FIELD_RANGES:
                lo, hi = _FIELD_RANGES[field]
                if isinstance(value, bool) or not isinstance(value, int) or not lo <= value <= hi:
                    entries.append(self._invalid_value(address, value, field))
                    continue
                light[field] = value
            else:
                entries.append(
                    {
                        "error": {
                            "type": 6,
                            "address": address,
                            "description": f"parameter, {field}, not available",
                        }
                    }
                )
                continue
            entries.append({"success": {address: value}})
        return entries

    @staticmethod
    def _not_available(address: str) -> list:
        return [
            {
                "error": {
                    "type": 3,
                    "address": address,
                    "description": f"resource, {address}, not available",
                }
            }
        ]

    @staticmethod
    def _invalid_value(address: str, value, field: str) -> dict:
        return {
            "error": {
                "type": 7,
                "address": address,
                "description": f"invalid value, {value}, for parameter, {field}",
            }
        }


def create_bridge_app(core: BridgeCore) -> FastAPI:
    app = FastAPI(title="bulb bridge emulator", docs_url=None, redoc_url=None)
    app.state.core = core

    def outage_response():
        return JSONResponse({"error": "outage"}, status_code=503)

    @app.get("/api/{user}/lights")
    def list_lights(user: str):
        if not core.available():
            return outage_response()
        if not core.authorized(user):
            return JSONResponse(core.unauthorized_body())
        return JSONResponse(core.get_lights())

    @app.get("/api/{user}/lights/{light_id}")
    def read_light(user: str, light_id: str):
        if not core.available():
            return outage_response()
        if not core.authorized(user):
            return JSONResponse(core.unauthorized_body())
        return JSONResponse(core.get_light(light_id))

    @app.put("/api/{user}/lights/{light_id}/state")
    async def write_state(user: str, light_id: str, request: Request):
        if not core.available():
            return outage_response()
        if not core.authorized(user):
            return JSONResponse(core.unauthorized_body())
        try:
            body = await request.json()
        except Exception:
            body = None
        return JSONResponse(core.put_state(light_id, body))

    # test/ops hooks, not part of the vendor surface
    @app.post("/_sim/outage")
    async def inject_outage(request: Request):
        body = await request.json()
        until = core.start_outage(int(float(body["duration_s"]) * 1000))
        return {"outage_until_ms": until}

    @app.get("/_sim/status")
    def status():
        return {"available": core.available(), "lights": len(core.lights)}

    return app
