"""Websocket state server: a live simulation the co-manipulation console drives.

One thread steps the simulation, paced to wall clock; the asyncio side
broadcasts the latest snapshot at 20 Hz and feeds validated commands into
a queue the sim thread drains between control steps.  A slow client only
ever loses snapshots (websockets skips clients with full write buffers);
it can never stall the control loop.
"""

from __future__ import annotations

import asyncio
import json
import queue
import threading
import time
from dataclasses import replace

import websockets.asyncio.server as ws_server

from .sim import Scenario, SimSession

BROADCAST_HZ = 20.0

# set_param targets: retuning anything else mid-run (inner-loop stiffness in
# particular) would confound the passivity audit, so it is simply not offered.
_PARAM_WHITELIST = {
    "outer.k_i",
    "vision.sigma_m",
    "vision.dropout_prob",
    "vision.latency_frames",
    "feed.max_n",
    "feed.start_s",
}


class SimServer:
    def __init__(self, scenario: Scenario, host: str = "127.0.0.1", port: int = 8765, speed: float = 1.0):
        self.scenario = scenario
        self.host = host
        self.port = port
        self.speed = speed
        self.session = SimSession(scenario, 0, max_log_rows=200)
        self.paused = False
        self.commands: queue.Queue = queue.Queue()
        self._snapshot = json.dumps(self.session.snapshot())
        self._snapshot_lock = threading.Lock()
        self._stop = threading.Event()
        self.started = threading.Event()
        self.bound_port: int | None = None

    # -- sim thread --------------------------------------------------------

    def _apply_command(self, cmd: dict) -> None:
        kind = cmd["type"]
        s = self.session
        if kind == "apply_force":
            s.apply_external_force(cmd["point"], cmd["f"], cmd.get("hold_ms", 100) / 1000.0)
        elif kind == "move_bone":
            s.move_bone(cmd.get("dp", [0, 0, 0]), cmd.get("daxis", [0, 0, 1]), cmd.get("dangle_rad", 0.0))
        elif kind == "pause":
            self.paused = True
        elif kind == "resume":
            self.paused = False
        elif kind == "reset":
            self.session = SimSession(self.scenario, 0, max_log_rows=200)
            self.paused = False
        elif kind == "set_param":
            self._set_param(cmd["path"], cmd["value"])

    def _set_param(self, path: str, value) -> None:
        s = self.session
        group, name = path.split(".", 1)
        if group == "outer":
            s.outer_params = replace(s.outer_params, **{name: float(value)})
        elif group == "vision":
            caster = int if name == "latency_frames" else float
            s.vision_noise = replace(s.vision_noise, **{name: caster(value)})
        elif group == "feed":
            s.feed = replace(s.feed, **{name: float(value)})

    def _sim_loop(self) -> None:
        chunk = self.session.scenario.frame_steps  # one vision frame of sim time
        chunk_wall = chunk * self.session.dt / self.speed
        next_deadline = time.monotonic()
        while not self._stop.is_set():
            while True:
                try:
                    self._apply_command(self.commands.get_nowait())
                except queue.Empty:
                    break
            if not self.paused and not self.session.diverged:
                for _ in range(chunk):
                    self.session.step()
            with self._snapshot_lock:
                self._snapshot = json.dumps(self.session.snapshot())
            next_deadline += chunk_wall
            delay = next_deadline - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            else:
                next_deadline = time.monotonic()  # running behind; don't spiral

    # -- asyncio side -------------------------------------------------------

    async def _handler(self, websocket) -> None:
        async for raw in websocket:
            try:
                cmd = json.loads(raw)
            except json.JSONDecodeError:
                await websocket.send(json.dumps({"type": "err", "id": None, "reason": "invalid JSON"}))
                continue
            cmd_id = cmd.get("id")
            err = self._validate(cmd)
            if err is not None:
                await websocket.send(json.dumps({"type": "err", "id": cmd_id, "reason": err}))
                continue
            self.commands.put(cmd)
            await websocket.send(json.dumps({"type": "ack", "id": cmd_id}))

    @staticmethod
    def _validate(cmd: dict) -> str | None:
        kind = cmd.get("type")
        if kind == "apply_force":
            if cmd.get("point") not in ("tip", "base"):
                return "point must be 'tip' or 'base'"
            f = cmd.get("f")
            if not (isinstance(f, list) and len(f) == 3):
                return "f must be a 3-vector (N)"
            return None
        if kind == "move_bone":
            dp = cmd.get("dp", [0, 0, 0])
            if not (isinstance(dp, list) and len(dp) == 3):
                return "dp must be a 3-vector (m)"
            return None
        if kind in ("pause", "resume", "reset"):
            return None
        if kind == "set_param":
            if cmd.get("path") not in _PARAM_WHITELIST:
                return f"parameter not settable: {cmd.get('path')}"
            if not isinstance(cmd.get("value"), (int, float)):
                return "value must be numeric"
            return None
        return f"unknown command type: {kind}"

    async def _broadcast_loop(self, server) -> None:
        period = 1.0 / BROADCAST_HZ
        loop = asyncio.get_running_loop()
        deadline = loop.time()
        while not self._stop.is_set():
            with self._snapshot_lock:
                snap = self._snapshot
            ws_server.broadcast(server.connections, snap)
            deadline += period
            await asyncio.sleep(max(0.0, deadline - loop.time()))

    async def _main(self) -> None:
        async with ws_server.serve(self._handler, self.host, self.port) as server:
            self.bound_port = next(iter(server.sockets)).getsockname()[1]
            print(f"listening on ws://{self.host}:{self.bound_port}", flush=True)
            sim_thread = threading.Thread(target=self._sim_loop, daemon=True)
            sim_thread.start()
            self.started.set()
            try:
                await self._broadcast_loop(server)
            finally:
                self._stop.set()
                sim_thread.join(timeout=2.0)

    def run(self) -> None:
        try:
            asyncio.run(self._main())
        except KeyboardInterrupt:
            pass

    def stop(self) -> None:
        self._stop.set()
