// Wire protocol of the live-simulation websocket server (JSON text frames).
// The console renders exactly what the stream says; nothing is extrapolated.

export type V3 = [number, number, number];

export interface EnergyBreakdown {
  robot: number;
  drill: number;
  buffer: number;
  spring_tip: number;
  spring_base: number;
  total: number;
}

export interface StateMsg {
  type: "state";
  t: number;
  q: number[];
  q_v: number;
  tip: V3;
  tip_measured: V3;
  base: V3;
  axis: { origin: V3; dir: V3 };
  o_tip: V3;
  o_base: V3;
  energy: EnergyBreakdown;
  status: "running" | "terminated";
  torque_sat: boolean[];
}

export interface AckMsg {
  type: "ack";
  id: string | null;
}

export interface ErrMsg {
  type: "err";
  id: string | null;
  reason: string;
}

export type ServerMsg = StateMsg | AckMsg | ErrMsg;

export type Command =
  | { type: "apply_force"; point: "tip" | "base"; f: V3; hold_ms: number; id?: string }
  | { type: "move_bone"; dp: V3; daxis: V3; dangle_rad: number; id?: string }
  | { type: "pause"; id?: string }
  | { type: "resume"; id?: string }
  | { type: "reset"; id?: string }
  | { type: "set_param"; path: string; value: number; id?: string };

function isV3(x: unknown): x is V3 {
  return Array.isArray(x) && x.length === 3 && x.every((v) => typeof v === "number");
}

export function parseServerMsg(raw: string): ServerMsg | null {
  let obj: any;
  try {
    obj = JSON.parse(raw);
  } catch {
    return null;
  }
  if (obj === null || typeof obj !== "object") return null;
  if (obj.type === "ack") return { type: "ack", id: obj.id ?? null };
  if (obj.type === "err") return { type: "err", id: obj.id ?? null, reason: String(obj.reason) };
  if (obj.type !== "state") return null;
  if (
    typeof obj.t !== "number" ||
    !Array.isArray(obj.q) ||
    obj.q.length !== 7 ||
    typeof obj.q_v !== "number" ||
    !isV3(obj.tip) ||
    !isV3(obj.tip_measured) ||
    !isV3(obj.base) ||
    !obj.axis ||
    !isV3(obj.axis.origin) ||
    !isV3(obj.axis.dir) ||
    !isV3(obj.o_tip) ||
    !isV3(obj.o_base) ||
    typeof obj.energy?.total !== "number" ||
    (obj.status !== "running" && obj.status !== "terminated") ||
    !Array.isArray(obj.torque_sat)
  ) {
    return null;
  }
  return obj as StateMsg;
}

// Display-side inner-loop spring constants (the bundled controller table);
// used only to show the constraint reaction, never to command anything.
export const TIP_SPRING = { k: 4000, sigma: 20 };
export const BASE_SPRING = { k: 100, sigma: 3 };

export function sub(a: V3, b: V3): V3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

export function add(a: V3, b: V3): V3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function scale(a: V3, s: number): V3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}

export function norm(a: V3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

export function virtualTip(state: StateMsg): V3 {
  return add(state.axis.origin, scale(state.axis.dir, state.q_v));
}

/** Saturating-spring reaction magnitudes implied by the current state (N). */
export function springReaction(state: StateMsg): { tip: number; base: number } {
  const deltaTip = norm(add(sub(state.tip, virtualTip(state)), state.o_tip));
  const tip = TIP_SPRING.sigma * Math.tanh((TIP_SPRING.k * deltaTip) / TIP_SPRING.sigma);
  // Virtual base sits one drill length past the virtual tip along the axis;
  // the real base is streamed directly.
  const drillLen = norm(sub(state.base, state.tip));
  const vbase = add(virtualTip(state), scale(state.axis.dir, drillLen));
  const deltaBase = norm(add(sub(state.base, vbase), state.o_base));
  const base = BASE_SPRING.sigma * Math.tanh((BASE_SPRING.k * deltaBase) / BASE_SPRING.sigma);
  return { tip, base };
}
