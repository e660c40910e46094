// Pointer-drag to external-force mapping: pixels of drag become newtons at
// the drill tip, streamed while held and zeroed on release.

import type { V3 } from "./protocol.js";

export interface DragConfig {
  newtonsPerPixel: number; // default 0.05 N/px
  maxForce: number; // cap, N
  rateHz: number; // command rate limit
  holdMs: number; // per-command hold so gaps decay instead of sticking
}

export const DEFAULT_DRAG: DragConfig = {
  newtonsPerPixel: 0.05,
  maxForce: 30,
  rateHz: 60,
  holdMs: 150,
};

/** Screen displacement to a world force in the camera plane (capped). */
export function pixelsToForce(
  dxPx: number,
  dyPx: number,
  right: V3,
  up: V3,
  cfg: DragConfig,
): V3 {
  let fx = dxPx * cfg.newtonsPerPixel;
  let fy = -dyPx * cfg.newtonsPerPixel; // screen y grows downward
  const mag = Math.hypot(fx, fy);
  if (mag > cfg.maxForce) {
    fx *= cfg.maxForce / mag;
    fy *= cfg.maxForce / mag;
  }
  return [
    right[0] * fx + up[0] * fy,
    right[1] * fx + up[1] * fy,
    right[2] * fx + up[2] * fy,
  ];
}

export class DragForce {
  private cfg: DragConfig;
  private send: (f: V3, holdMs: number) => void;
  private active = false;
  private startX = 0;
  private startY = 0;
  private lastSent = -Infinity;
  private now: () => number;

  constructor(
    send: (f: V3, holdMs: number) => void,
    cfg: DragConfig = DEFAULT_DRAG,
    now: () => number = () => performance.now(),
  ) {
    this.send = send;
    this.cfg = cfg;
    this.now = now;
  }

  get dragging(): boolean {
    return this.active;
  }

  start(x: number, y: number): void {
    this.active = true;
    this.startX = x;
    this.startY = y;
  }

  move(x: number, y: number, right: V3, up: V3): V3 | null {
    if (!this.active) return null;
    const t = this.now();
    if (t - this.lastSent < 1000 / this.cfg.rateHz) return null;
    this.lastSent = t;
    const f = pixelsToForce(x - this.startX, y - this.startY, right, up, this.cfg);
    this.send(f, this.cfg.holdMs);
    return f;
  }

  end(): void {
    if (!this.active) return;
    this.active = false;
    this.send([0, 0, 0], 1); // release: zero force immediately
  }
}
