// 3D scene painter: robot skeleton, real vs virtual drill, planned axis.
// Line-and-marker rendering only; the point is constraint comprehension.

import { Camera } from "./projection.js";
import { add, norm, scale, springReaction, StateMsg, sub, V3, virtualTip } from "./protocol.js";
import { skeletonPoints } from "./fk.js";

const DRAWN_DRILL_LEN = 0.22; // m of drill shown past the tip

export class Scene {
  camera = new Camera();

  draw(ctx: CanvasRenderingContext2D, w: number, h: number, state: StateMsg | null): void {
    ctx.clearRect(0, 0, w, h);
    ctx.fillStyle = "#0d1117";
    ctx.fillRect(0, 0, w, h);
    this.grid(ctx, w, h);
    if (!state) return;

    const proj = (p: V3) => this.camera.project(p, w, h);

    // Robot skeleton
    const pts = skeletonPoints(state.q).map(proj);
    ctx.strokeStyle = "#8b949e";
    ctx.lineWidth = 3;
    ctx.beginPath();
    let started = false;
    for (const sp of pts) {
      if (!sp) continue;
      if (!started) {
        ctx.moveTo(sp[0], sp[1]);
        started = true;
      } else ctx.lineTo(sp[0], sp[1]);
    }
    ctx.stroke();
    ctx.lineWidth = 1;
    for (const sp of pts) {
      if (!sp) continue;
      ctx.fillStyle = "#c9d1d9";
      ctx.beginPath();
      ctx.arc(sp[0], sp[1], 3, 0, 2 * Math.PI);
      ctx.fill();
    }

    // Planned axis through the virtual drill (entry side long, exit side short)
    const a0 = add(state.axis.origin, scale(state.axis.dir, -0.05));
    const a1 = add(state.axis.origin, scale(state.axis.dir, 0.12));
    this.line(ctx, proj(a0), proj(a1), "#d29922", 2, [6, 4]);

    // Virtual drill: tip marker plus a short shaft up the axis
    const vt = virtualTip(state);
    const vshaft = add(vt, scale(state.axis.dir, DRAWN_DRILL_LEN));
    this.line(ctx, proj(vt), proj(vshaft), "#e15759", 3);
    this.marker(ctx, proj(vt), "#e15759", 5);

    // Real drill: tip toward base direction
    const dir = sub(state.base, state.tip);
    const dlen = norm(dir);
    const shaft = add(state.tip, scale(dir, DRAWN_DRILL_LEN / Math.max(dlen, 1e-9)));
    this.line(ctx, proj(state.tip), proj(shaft), "#58a6ff", 3);
    this.marker(ctx, proj(state.tip), "#58a6ff", 5);

    // Vision-measured tip
    this.marker(ctx, proj(state.tip_measured), "#3fb950", 4, true);

    // Reaction force readout
    const f = springReaction(state);
    ctx.fillStyle = "#c9d1d9";
    ctx.font = "12px sans-serif";
    ctx.fillText(`constraint reaction  tip ${f.tip.toFixed(2)} N  base ${f.base.toFixed(2)} N`, 8, h - 28);
    ctx.fillText("blue: real drill   red: virtual drill   green: measured tip", 8, h - 12);
  }

  private grid(ctx: CanvasRenderingContext2D, w: number, h: number): void {
    ctx.strokeStyle = "#1b2129";
    for (let x = -1; x <= 1.001; x += 0.2) {
      const a = this.camera.project([x, -1, 0], w, h);
      const b = this.camera.project([x, 1, 0], w, h);
      this.line(ctx, a, b, "#1b2129", 1);
      const c = this.camera.project([-1, x, 0], w, h);
      const d = this.camera.project([1, x, 0], w, h);
      this.line(ctx, c, d, "#1b2129", 1);
    }
  }

  private line(
    ctx: CanvasRenderingContext2D,
    a: [number, number] | null,
    b: [number, number] | null,
    color: string,
    width: number,
    dash: number[] = [],
  ): void {
    if (!a || !b) return;
    ctx.strokeStyle = color;
    ctx.lineWidth = width;
    ctx.setLineDash(dash);
    ctx.beginPath();
    ctx.moveTo(a[0], a[1]);
    ctx.lineTo(b[0], b[1]);
    ctx.stroke();
    ctx.setLineDash([]);
    ctx.lineWidth = 1;
  }

  private marker(
    ctx: CanvasRenderingContext2D,
    p: [number, number] | null,
    color: string,
    r: number,
    hollow = false,
  ): void {
    if (!p) return;
    ctx.beginPath();
    ctx.arc(p[0], p[1], r, 0, 2 * Math.PI);
    if (hollow) {
      ctx.strokeStyle = color;
      ctx.stroke();
    } else {
      ctx.fillStyle = color;
      ctx.fill();
    }
  }
}
