import asyncio
from pathlib import Path

import httpx
import pytest

from xri_hub.colors import rgb_to_hsb
from xri_hub.devices.bridge import BridgeCore, create_bridge_app
from xri_hub.devices.gateway import (
    DeliveryError,
    DeviceDescriptor,
    DeviceKind,
    HttpDeviceGateway,
    SchemaMismatchError,
)
from xri_hub.devices.plug import PlugCore, create_plug_app
from xri_hub.model import ColorHSB, ColorRGB
from xri_hub.sync import Command, CommandTarget

GOLDEN = Path(__file__).parent / "golden" / "devices"


class FakeClock:
    def __init__(self):
        self.ms = 0

    def __call__(self):
        return self.ms


def bridge_client(core):
    transport = httpx.ASGITransport(app=create_bridge_app(core))
    return httpx.AsyncClient(transport=transport, base_url="http://bridge.sim")


def plug_client(core):
    transport = httpx.ASGITransport(app=create_plug_app(core))
    return httpx.AsyncClient(transport=transport, base_url="http://plug.sim")


def run(coro):
    return asyncio.run(coro)


class TestBridgeProtocol:
    def test_fresh_lights_golden(self):
        async def go():
            async with bridge_client(BridgeCore()) as client:
                r = await client.get("/api/hubuser/lights")
                assert r.status_code == 200
                assert r.content == (GOLDEN / "bridge_get_lights_fresh.json").read_bytes()

        run(go())

    def test_put_red_golden_and_read_back(self):
        async def go():
            async with bridge_client(BridgeCore()) as client:
                r = await client.put(
                    "/api/hubuser/lights/1/state",
                    content=b'{"on":true,"hue":0,"sat":254,"bri":254}',
                    headers={"content-type": "application/json"},
                )
                assert r.content == (GOLDEN / "bridge_put_red.json").read_bytes()
                r = await client.get("/api/hubuser/lights/1")
                assert r.content == (GOLDEN / "bridge_get_light_1_red.json").read_bytes()

        run(go())

    def test_out_of_range_field_golden_state_intact(self):
        async def go():
            core = BridgeCore()
            async with bridge_client(core) as client:
                r = await client.put("/api/hubuser/lights/1/state", json={"hue": 70000})
                assert r.content == (GOLDEN / "bridge_put_hue_out_of_range.json").read_bytes()
                assert core.lights["1"]["hue"] == 0

        run(go())

    def test_unknown_light_golden(self):
        async def go():
            async with bridge_client(BridgeCore()) as client:
                r = await client.get("/api/hubuser/lights/99")
                assert r.content == (GOLDEN / "bridge_get_unknown_light.json").read_bytes()

        run(go())

    def test_partial_failure_applies_other_fields(self):
        core = BridgeCore()
        entries = core.put_state("1", {"on": True, "hue": 99999, "bri": 100})
        assert [list(e)[0] for e in entries] == ["success", "error", "success"]
        assert core.lights["1"] == {"on": True, "hue": 0, "sat": 0, "bri": 100}

    def test_empty_put_is_noop(self):
        core = BridgeCore()
        before = {k: dict(v) for k, v in core.lights.items()}
        assert core.put_state("1", {}) == []
        assert core.lights == before

    def test_unknown_parameter_rejected(self):
        core = BridgeCore()
        entries = core.put_state("1", {"effect": "colorloop"})
        assert entries[0]["error"]["type"] == 6

    def test_unauthorized_user(self):
        async def go():
            async with bridge_client(BridgeCore()) as client:
                r = await client.get("/api/intruder/lights")
                assert r.json()[0]["error"]["type"] == 1

        run(go())

    def test_outage_blocks_requests_but_not_state(self):
        async def go():
            clock = FakeClock()
            core = BridgeCore(clock=clock)
            core.put_state("1", {"on": True})
            async with bridge_client(core) as client:
                core.start_outage(1000)
                r = await client.get("/api/hubuser/lights")
                assert r.status_code == 503
                r = await client.put("/api/hubuser/lights/1/state", json={"on": False})
                assert r.status_code == 503
                assert core.lights["1"]["on"] is True  # stored state untouched
                clock.ms = 1000
                r = await client.get("/api/hubuser/lights/1")
                assert r.status_code == 200

        run(go())


class RecordingCallback:
    """Hub stand-in: optionally fails the first N deliveries."""

    def __init__(self, fail_first=0):
        self.fail_first = fail_first
        self.received = []

    async def post_event(self, payload):
        if self.fail_first > 0:
            self.fail_first -= 1
            return False
        self.received.append(payload)
        return True


class TestPlugProtocol:
    def test_trigger_golden_bodies(self):
        async def go():
            core = PlugCore(callback=None, retry_delay_s=0)
            async with plug_client(core) as client:
                r = await client.get("/state")
                assert r.content == (GOLDEN / "plug_state_fresh.json").read_bytes()
                r = await client.post("/trigger/lamp_on/with/key/demo-key")
                assert r.status_code == 200
                assert r.content == (GOLDEN / "plug_trigger_ok.json").read_bytes()
                r = await client.post("/trigger/lamp_on/with/key/wrong")
                assert r.status_code == 401
                assert r.content == (GOLDEN / "plug_trigger_bad_key.json").read_bytes()
                r = await client.post("/trigger/dance/with/key/demo-key")
                assert r.status_code == 404
                assert r.content == (GOLDEN / "plug_trigger_unknown_event.json").read_bytes()

        run(go())

    def test_trigger_sets_state(self):
        core = PlugCore()
        assert core.trigger("lamp_on", "demo-key") == (200, {"fired": "lamp_on"})
        assert core.state.on is True and core.state.last_event == "lamp_on"
        core.trigger("lamp_off", "demo-key")
        assert core.state.on is False

    def test_bad_key_leaves_state(self):
        core = PlugCore()
        status, _ = core.trigger("lamp_on", "nope")
        assert status == 401 and core.state.on is False

    def test_press_toggles_and_notifies_once(self):
        async def go():
            cb = RecordingCallback()
            core = PlugCore(device_id="plug-1", callback=cb, retry_delay_s=0)
            state = await core.press()
            assert state.on is True
            assert cb.received == [
                {"device": "plug-1", "var": "power", "value": True, "press_seq": 1}
            ]

        run(go())

    def test_double_press_returns_to_original(self):
        async def go():
            cb = RecordingCallback()
            core = PlugCore(callback=cb, retry_delay_s=0)
            await core.press()
            await core.press()
            assert core.state.on is False
            assert [p["press_seq"] for p in cb.received] == [1, 2]

        run(go())

    def test_press_during_hub_outage_delivers_exactly_once_after_recovery(self):
        async def go():
            cb = RecordingCallback(fail_first=10)
            core = PlugCore(device_id="plug-1", callback=cb, press_retries=2, retry_delay_s=0)
            state = await core.press()
            assert state.on is True  # local toggle happens regardless
            assert cb.received == []
            assert len(core.undelivered) == 1
            cb.fail_first = 0  # hub back up; periodic flush drains the queue
            await core.flush()
            await core.flush()
            assert [p["press_seq"] for p in cb.received] == [1]
            assert not core.undelivered

        run(go())

    def test_queued_events_keep_order_across_outage(self):
        async def go():
            cb = RecordingCallback(fail_first=100)
            core = PlugCore(callback=cb, press_retries=1, retry_delay_s=0)
            await core.press()
            await core.press()
            await core.press()
            cb.fail_first = 0
            await core.flush()
            assert [(p["press_seq"], p["value"]) for p in cb.received] == [
                (1, True), (2, False), (3, True),
            ]

        run(go())

    def test_press_endpoint_works_during_device_outage(self):
        async def go():
            clock = FakeClock()
            cb = RecordingCallback()
            core = PlugCore(callback=cb, clock=clock, retry_delay_s=0)
            async with plug_client(core) as client:
                core.start_outage(1000)
                r = await client.get("/state")
                assert r.status_code == 503
                r = await client.post("/press")
                assert r.status_code == 200
                assert r.json()["on"] is True
                assert len(cb.received) == 1

        run(go())


class TestAdapter:
    def _world(self):
        clock = FakeClock()
        bridge = BridgeCore(clock=clock)
        plug = PlugCore(device_id="plug-1", callback=RecordingCallback(), clock=clock,
                        retry_delay_s=0)
        mounts = {
            "http://bridge.sim": httpx.ASGITransport(app=create_bridge_app(bridge)),
            "http://plug.sim": httpx.ASGITransport(app=create_plug_app(plug)),
        }
        client = httpx.AsyncClient(mounts=mounts)
        gateway = HttpDeviceGateway(client)
        bulb = DeviceDescriptor(
            id="bulb-1", kind=DeviceKind.COLOR_BULB,
            endpoint="http://bridge.sim/api/hubuser", light="1",
        )
        plug_descr = DeviceDescriptor(id="plug-1", kind=DeviceKind.PLUG,
                                      endpoint="http://plug.sim")
        return clock, bridge, plug, client, gateway, bulb, plug_descr

    def _cmd(self, device, var, value):
        return Command(
            target=CommandTarget.DEVICE, device_id=device, agent_id="a",
            var=var, value=value, link_id="l", cause_ts=0,
        )

    def test_power_command_becomes_trigger(self):
        clock, bridge, plug, client, gateway, bulb, plug_descr = self._world()

        async def go():
            async with client:
                await gateway.send_command(plug_descr, self._cmd("plug-1", "power", True))
                assert plug.state == type(plug.state)(on=True, last_event="lamp_on")
                state = await gateway.read_state(plug_descr)
                assert state == {"power": True}

        run(go())

    def test_color_command_becomes_bridge_put(self):
        clock, bridge, plug, client, gateway, bulb, plug_descr = self._world()
        hsb = rgb_to_hsb(ColorRGB(1.0, 0.0, 0.0))

        async def go():
            async with client:
                await gateway.send_command(bulb, self._cmd("bulb-1", "color", hsb))
                assert bridge.lights["1"] == {"on": True, "hue": 0, "sat": 254, "bri": 254}
                state = await gateway.read_state(bulb)
                assert state == {"color": ColorHSB(on=True, hue=0, sat=254, bri=254)}

        run(go())

    def test_color_command_to_plug_is_schema_fault(self):
        clock, bridge, plug, client, gateway, bulb, plug_descr = self._world()
        hsb = rgb_to_hsb(ColorRGB(1.0, 0.0, 0.0))

        async def go():
            async with client:
                with pytest.raises(SchemaMismatchError):
                    await gateway.send_command(plug_descr, self._cmd("plug-1", "color", hsb))

        run(go())

    def test_outage_surfaces_as_retriable_delivery_error(self):
        clock, bridge, plug, client, gateway, bulb, plug_descr = self._world()

        async def go():
            async with client:
                bridge.start_outage(500)
                with pytest.raises(DeliveryError) as exc:
                    await gateway.send_command(
                        bulb, self._cmd("bulb-1", "color", rgb_to_hsb(ColorRGB(0, 1, 0)))
                    )
                assert exc.value.retriable

        run(go())

    def test_unreachable_host_is_retriable(self):
        async def go():
            gateway = HttpDeviceGateway(httpx.AsyncClient(
                transport=httpx.MockTransport(lambda r: (_ for _ in ()).throw(
                    httpx.ConnectError("refused")))
            ))
            descr = DeviceDescriptor(id="plug-x", kind=DeviceKind.PLUG,
                                     endpoint="http://nowhere.sim")
            with pytest.raises(DeliveryError) as exc:
                await gateway.send_command(descr, self._cmd("plug-x", "power", True))
            assert exc.value.retriable

        run(go())
