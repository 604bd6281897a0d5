import json
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import httpx
import pytest
import yaml
from click.testing import CliRunner

from xri_hub.cli import main
from xri_hub.scenario import bundled_scenario_path


def _run(args):
    return CliRunner().invoke(main, args)


class TestDemoCommand:
    def test_bundled_lamp_demo_exits_zero(self, tmp_path):
        result = _run(["demo", "lamp", "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        assert "demo ok" in result.output
        assert (tmp_path / "events.csv").exists()
        assert (tmp_path / "coherence.csv").exists()

    def test_bundled_galaxy_demo_exits_zero(self, tmp_path):
        result = _run(["demo", "galaxy", "--out", str(tmp_path), "--quiet"])
        assert result.exit_code == 0, result.output

    def test_outage_demo_logs_noise(self, tmp_path):
        result = _run(["demo", "outage", "--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        coherence = (tmp_path / "coherence.csv").read_text().splitlines()
        row = dict(zip(coherence[0].split(","), coherence[1].split(",")))
        assert float(row["noise_score"]) == pytest.approx(0.2)

    def test_failing_assertion_exits_one(self, tmp_path):
        script = {
            "scenario": "lamp",
            "duration_s": 1.0,
            "events": [
                {"at": 0.5, "do": "assert_agent", "agent": "lamp", "var": "power",
                 "equals": True},  # never turned on
            ],
        }
        path = tmp_path / "bad_assert.yaml"
        path.write_text(yaml.safe_dump(script))
        result = _run(["demo", str(path), "--out", str(tmp_path / "out")])
        assert result.exit_code == 1
        assert "FAIL" in result.output

    def test_unparseable_script_exits_two(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("scenario: [unclosed\n  nope")
        result = _run(["demo", str(path)])
        assert result.exit_code == 2
        assert "line" in result.output  # parse diagnostic carries a line number

    def test_unknown_script_exits_two(self):
        result = _run(["demo", "no-such-demo"])
        assert result.exit_code == 2

    def test_bad_scenario_reference_exits_two(self, tmp_path):
        script = {"scenario": "missing_scene.yaml", "duration_s": 1.0, "events": []}
        path = tmp_path / "demo.yaml"
        path.write_text(yaml.safe_dump(script))
        result = _run(["demo", str(path)])
        assert result.exit_code == 2

    def test_invalid_scenario_yaml_reports_line(self, tmp_path):
        scene = tmp_path / "scene.yaml"
        scene.write_text("name: x\ntick_rate: [broken\n")
        script = {"scenario": str(scene), "duration_s": 1.0, "events": []}
        path = tmp_path / "demo.yaml"
        path.write_text(yaml.safe_dump(script))
        result = _run(["demo", str(path)])
        assert result.exit_code == 2
        assert "line" in result.output

    def test_determinism_byte_identical_logs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert _run(["demo", "lamp", "--out", str(a), "--quiet"]).exit_code == 0
        assert _run(["demo", "lamp", "--out", str(b), "--quiet"]).exit_code == 0
        assert (a / "events.csv").read_bytes() == (b / "events.csv").read_bytes()
        assert (a / "coherence.csv").read_bytes() == (b / "coherence.csv").read_bytes()


class TestMetricsCommand:
    def test_summary_of_outage_run(self, tmp_path):
        assert _run(["demo", "outage", "--out", str(tmp_path), "--quiet"]).exit_code == 0
        result = _run(["metrics", str(tmp_path)])
        assert result.exit_code == 0, result.output
        assert "noise_score 0.2000" in result.output
        assert "1 delivered" in result.output

    def test_zero_divergence_run(self, tmp_path):
        assert _run(["demo", "lamp", "--out", str(tmp_path), "--quiet"]).exit_code == 0
        result = _run(["metrics", str(tmp_path)])
        assert "noise_score 0.0000" in result.output

    def test_missing_log_exits_nonzero(self, tmp_path):
        result = _run(["metrics", str(tmp_path / "nope")])
        assert result.exit_code == 2

    def test_empty_log_reports_no_samples(self, tmp_path):
        from xri_hub.hub import EventRecorder

        (tmp_path / "events.csv").write_text(",".join(EventRecorder.COLUMNS) + "\n")
        result = _run(["metrics", str(tmp_path)])
        assert result.exit_code == 2
        assert "no samples" in result.output


def _free_ports(n):
    socks = [socket.socket() for _ in range(n)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


@pytest.mark.slow
class TestServeEndToEnd:
    def test_serve_lamp_full_loop(self, tmp_path):
        import websockets.sync.client as ws_client

        hub_port, tcp_port, plug_port = _free_ports(3)
        metrics_dir = tmp_path / "metrics"
        proc = subprocess.Popen(
            [
                sys.executable, "-m", "xri_hub.cli", "serve",
                "--scenario", "lamp",
                "--port", str(hub_port),
                "--tcp-port", str(tcp_port),
                "--plug-port", str(plug_port),
                "--metrics-out", str(metrics_dir),
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
        )
        try:
            base = f"http://127.0.0.1:{hub_port}"
            deadline = time.time() + 20
            while True:
                try:
                    if httpx.get(f"{base}/healthz", timeout=1).status_code == 200:
                        break
                except httpx.HTTPError:
                    if time.time() > deadline:
                        raise
                    time.sleep(0.2)

            agents = httpx.get(f"{base}/api/agents").json()
            assert [a["id"] for a in agents] == ["lamp"]

            with ws_client.connect(f"ws://127.0.0.1:{hub_port}/ws") as ws:
                ws.send('{"v":1,"type":"hello","seq":1,"ts":0,"payload":{}}')
                ack = json.loads(ws.recv(timeout=5))
                assert ack["type"] == "ack"
                ws.send(
                    '{"v":1,"type":"state_update","seq":2,"ts":0,"agent":"lamp",'
                    '"payload":{"value":true,"var":"power"}}'
                )
                ack = json.loads(ws.recv(timeout=5))
                assert ack["payload"]["status"] == "applied"

            # propagation to the real plug emulator over real HTTP
            plug = f"http://127.0.0.1:{plug_port}"
            deadline = time.time() + 5
            state = None
            while time.time() < deadline:
                state = httpx.get(f"{plug}/state").json()
                if state["on"]:
                    break
                time.sleep(0.05)
            assert state == {"on": True, "last_event": "lamp_on"}

            # the physical button drives the virtual lamp back off
            httpx.post(f"{plug}/press")
            deadline = time.time() + 5
            power = None
            while time.time() < deadline:
                power = httpx.get(f"{base}/api/state/lamp").json()["vars"]["power"]
                if power["value"] is False:
                    break
                time.sleep(0.05)
            assert power["value"] is False and power["origin"] == "physical"
        finally:
            proc.send_signal(signal.SIGINT)
            try:
                proc.wait(timeout=15)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        assert proc.returncode == 0
        assert (metrics_dir / "events.csv").exists()

    def test_port_clash_exits_two(self):
        port = _free_ports(1)[0]
        proc = subprocess.run(
            [
                sys.executable, "-m", "xri_hub.cli", "serve",
                "--scenario", "lamp",
                "--port", str(port),
                "--tcp-port", str(port),
            ],
            capture_output=True,
            timeout=30,
        )
        assert proc.returncode == 2
        assert b"distinct" in proc.stderr

    def test_invalid_scenario_exits_two(self, tmp_path):
        bad = tmp_path / "scene.yaml"
        bad.write_text("name: x\nscene: {kind: nosuch}\n")
        proc = subprocess.run(
            [sys.executable, "-m", "xri_hub.cli", "serve", "--scenario", str(bad)],
            capture_output=True,
            timeout=30,
        )
        assert proc.returncode == 2
