// Console wiring: websocket session, scene, charts, drag-to-force and the
// command buttons.  Configuration via URL query params: ?host=..&port=..&nperpx=..

import { Connection } from "./connection.js";
import { DEFAULT_DRAG, DragForce } from "./dragforce.js";
import { EnergyStack, StripChart } from "./charts.js";
import { Scene } from "./scene.js";
import { norm, StateMsg, sub, virtualTip } from "./protocol.js";

const params = new URLSearchParams(location.search);
const host = params.get("host") ?? location.hostname ?? "127.0.0.1";
const port = params.get("port") ?? "8765";
const nperpx = parseFloat(params.get("nperpx") ?? "") || DEFAULT_DRAG.newtonsPerPixel;

const sceneCanvas = document.getElementById("scene") as HTMLCanvasElement;
const offsetsCanvas = document.getElementById("offsets") as HTMLCanvasElement;
const errorsCanvas = document.getElementById("errors") as HTMLCanvasElement;
const energyCanvas = document.getElementById("energy") as HTMLCanvasElement;
const banner = document.getElementById("banner") as HTMLDivElement;
const statusLine = document.getElementById("statusline") as HTMLDivElement;

const scene = new Scene();
const offsets = new StripChart("spring offsets o_tip (mm)", "mm", [
  { label: "x", color: "#4e79a7" },
  { label: "y", color: "#f28e2b" },
  { label: "z", color: "#76b7b2" },
]);
const errors = new StripChart("tip errors (mm)", "mm", [
  { label: "|tip-virtual|", color: "#e15759" },
  { label: "|tip-measured|", color: "#3fb950" },
]);
const energy = new EnergyStack();

let latest: StateMsg | null = null;
let lastAckMs: number | null = null;

const conn = new Connection(`ws://${host}:${port}`, {
  onState: (s) => {
    latest = s;
    offsets.push(s.t, [s.o_tip[0] * 1e3, s.o_tip[1] * 1e3, s.o_tip[2] * 1e3]);
    errors.push(s.t, [
      norm(sub(s.tip, virtualTip(s))) * 1e3,
      norm(sub(s.tip, s.tip_measured)) * 1e3,
    ]);
    energy.push(s.t, [
      s.energy.robot,
      s.energy.drill,
      s.energy.buffer,
      s.energy.spring_tip,
      s.energy.spring_base,
    ]);
  },
  onStatus: (status, attempt) => {
    if (status === "open") {
      banner.className = "banner ok";
      banner.textContent = `connected to ws://${host}:${port}`;
    } else if (status === "connecting") {
      banner.className = "banner warn";
      banner.textContent = `connecting to ws://${host}:${port} (attempt ${attempt + 1})`;
    } else {
      banner.className = "banner err";
      banner.textContent = "connection lost; retrying with backoff";
    }
  },
  onAck: (_id, ms) => {
    lastAckMs = ms;
  },
  onErr: (_id, reason) => {
    statusLine.textContent = `command rejected: ${reason}`;
  },
});
conn.connect();

// Drag on the scene injects force at the drill tip.
const drag = new DragForce(
  (f, holdMs) => conn.send({ type: "apply_force", point: "tip", f, hold_ms: holdMs }),
  { ...DEFAULT_DRAG, newtonsPerPixel: nperpx },
);
sceneCanvas.addEventListener("pointerdown", (ev) => {
  sceneCanvas.setPointerCapture(ev.pointerId);
  drag.start(ev.offsetX, ev.offsetY);
});
sceneCanvas.addEventListener("pointermove", (ev) => {
  drag.move(ev.offsetX, ev.offsetY, scene.camera.right(), scene.camera.up());
});
sceneCanvas.addEventListener("pointerup", () => drag.end());
sceneCanvas.addEventListener("pointercancel", () => drag.end());

function button(id: string, cmd: () => void): void {
  (document.getElementById(id) as HTMLButtonElement).addEventListener("click", cmd);
}

button("pause", () => conn.send({ type: "pause" }));
button("resume", () => conn.send({ type: "resume" }));
button("reset", () => conn.send({ type: "reset" }));
for (const [id, dp] of Object.entries({
  "bone-xp": [0.01, 0, 0],
  "bone-xm": [-0.01, 0, 0],
  "bone-yp": [0, 0.01, 0],
  "bone-ym": [0, -0.01, 0],
})) {
  button(id, () =>
    conn.send({ type: "move_bone", dp: dp as [number, number, number], daxis: [0, 0, 1], dangle_rad: 0 }),
  );
}
button("bone-80", () =>
  conn.send({ type: "move_bone", dp: [0.08, 0, 0], daxis: [0, 0, 1], dangle_rad: 0 }),
);
(document.getElementById("ki") as HTMLInputElement).addEventListener("change", (ev) => {
  const v = parseFloat((ev.target as HTMLInputElement).value);
  if (isFinite(v)) conn.send({ type: "set_param", path: "outer.k_i", value: v });
});

function frame(): void {
  const sctx = sceneCanvas.getContext("2d")!;
  scene.draw(sctx, sceneCanvas.width, sceneCanvas.height, latest);
  offsets.draw(offsetsCanvas.getContext("2d")!, offsetsCanvas.width, offsetsCanvas.height);
  errors.draw(errorsCanvas.getContext("2d")!, errorsCanvas.width, errorsCanvas.height);
  energy.draw(energyCanvas.getContext("2d")!, energyCanvas.width, energyCanvas.height);
  if (latest) {
    const sat = latest.torque_sat.some(Boolean) ? "  TORQUE SAT" : "";
    const ack = lastAckMs === null ? "" : `  ack ${lastAckMs} ms`;
    statusLine.textContent = `t=${latest.t.toFixed(2)} s  status=${latest.status}${sat}${ack}`;
    statusLine.className = latest.status === "terminated" ? "status err" : "status";
  }
  requestAnimationFrame(frame);
}
requestAnimationFrame(frame);
