import asyncio
import json
import threading
import time
from dataclasses import replace

import pytest
import websockets

from drillguide.server import SimServer
from drillguide.sim import default_scenario


@pytest.fixture
def server():
    scenario = replace(default_scenario(seed=0), duration_s=600.0)
    srv = SimServer(scenario, port=0, speed=1.0)
    thread = threading.Thread(target=srv.run, daemon=True)
    thread.start()
    assert srv.started.wait(15)
    yield srv
    srv.stop()
    thread.join(timeout=5)


def _run(coro):
    return asyncio.run(coro)


async def _recv_until(ws, predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        msg = json.loads(await asyncio.wait_for(ws.recv(), timeout))
        if predicate(msg):
            return msg
    raise TimeoutError("no matching message")


def test_state_stream_rate_and_shape(server):
    async def go():
        async with websockets.connect(f"ws://127.0.0.1:{server.bound_port}") as ws:
            first = await _recv_until(ws, lambda m: m["type"] == "state")
            for key in ("t", "q", "q_v", "tip", "tip_measured", "base", "axis", "o_tip", "o_base", "energy", "status", "torque_sat"):
                assert key in first
            assert len(first["q"]) == 7
            assert len(first["torque_sat"]) == 7
            assert set(first["energy"]) == {"robot", "drill", "buffer", "spring_tip", "spring_base", "total"}
            t0 = time.monotonic()
            count = 0
            while time.monotonic() - t0 < 2.0:
                msg = json.loads(await ws.recv())
                if msg["type"] == "state":
                    count += 1
            assert count >= 36  # >= 18 frames/s
    _run(go())


def test_commands_ack_and_err(server):
    async def go():
        async with websockets.connect(f"ws://127.0.0.1:{server.bound_port}") as ws:
            await ws.send(json.dumps({"type": "apply_force", "point": "tip", "f": [3, 0, 0], "hold_ms": 200, "id": "a1"}))
            msg = await _recv_until(ws, lambda m: m["type"] in ("ack", "err"))
            assert msg == {"type": "ack", "id": "a1"}
            await ws.send(json.dumps({"type": "apply_force", "point": "elbow", "f": [3, 0, 0], "id": "a2"}))
            msg = await _recv_until(ws, lambda m: m["type"] in ("ack", "err"))
            assert msg["type"] == "err" and msg["id"] == "a2"
            await ws.send(json.dumps({"type": "set_param", "path": "tip_spring.k", "value": 1, "id": "a3"}))
            msg = await _recv_until(ws, lambda m: m["type"] in ("ack", "err"))
            assert msg["type"] == "err" and "not settable" in msg["reason"]
            await ws.send(json.dumps({"type": "set_param", "path": "outer.k_i", "value": 0.5, "id": "a4"}))
            msg = await _recv_until(ws, lambda m: m["type"] in ("ack", "err"))
            assert msg == {"type": "ack", "id": "a4"}
            await ws.send(json.dumps({"type": "nonsense", "id": "a5"}))
            msg = await _recv_until(ws, lambda m: m["type"] in ("ack", "err"))
            assert msg["type"] == "err"
            await ws.send("this is not json")
            msg = await _recv_until(ws, lambda m: m["type"] in ("ack", "err"))
            assert msg["type"] == "err" and msg["reason"] == "invalid JSON"
    _run(go())


def test_pause_resume(server):
    async def go():
        async with websockets.connect(f"ws://127.0.0.1:{server.bound_port}") as ws:
            await ws.send(json.dumps({"type": "pause", "id": "p"}))
            await _recv_until(ws, lambda m: m["type"] == "ack")
            await asyncio.sleep(0.3)
            s1 = await _recv_until(ws, lambda m: m["type"] == "state")
            await asyncio.sleep(0.5)
            # drain to the freshest frame
            s2 = await _recv_until(ws, lambda m: m["type"] == "state")
            s3 = await _recv_until(ws, lambda m: m["type"] == "state")
            assert s3["t"] - s1["t"] < 0.2  # sim time froze (ignoring buffered frames)
            await ws.send(json.dumps({"type": "resume", "id": "r"}))
            await _recv_until(ws, lambda m: m["type"] == "ack")
            t_at_resume = s3["t"]
            deadline = time.monotonic() + 5
            while time.monotonic() < deadline:
                msg = await _recv_until(ws, lambda m: m["type"] == "state")
                if msg["t"] > t_at_resume + 0.5:
                    break
            else:
                raise AssertionError("sim time did not advance after resume")
    _run(go())


def test_bone_move_terminates(server):
    async def go():
        async with websockets.connect(f"ws://127.0.0.1:{server.bound_port}") as ws:
            await _recv_until(ws, lambda m: m["type"] == "state")
            await ws.send(json.dumps({"type": "move_bone", "dp": [0.08, 0, 0], "daxis": [0, 0, 1], "dangle_rad": 0.0, "id": "m"}))
            await _recv_until(ws, lambda m: m["type"] == "ack")
            msg = await _recv_until(ws, lambda m: m["type"] == "state" and m["status"] == "terminated", timeout=5.0)
            assert msg["status"] == "terminated"
            # latched: still terminated a little later
            await asyncio.sleep(0.3)
            latest = await _recv_until(ws, lambda m: m["type"] == "state")
            assert latest["status"] == "terminated"
    _run(go())


def test_reset_restores_running(server):
    async def go():
        async with websockets.connect(f"ws://127.0.0.1:{server.bound_port}") as ws:
            await ws.send(json.dumps({"type": "move_bone", "dp": [0.1, 0, 0], "daxis": [0, 0, 1], "dangle_rad": 0.0, "id": "m"}))
            await _recv_until(ws, lambda m: m["type"] == "ack")
            await _recv_until(ws, lambda m: m["type"] == "state" and m["status"] == "terminated")
            await ws.send(json.dumps({"type": "reset", "id": "r"}))
            await _recv_until(ws, lambda m: m["type"] == "ack")
            msg = await _recv_until(
                ws, lambda m: m["type"] == "state" and m["status"] == "running" and m["t"] < 1.0
            )
            assert msg["status"] == "running"
    _run(go())
