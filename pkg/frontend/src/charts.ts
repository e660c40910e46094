// Canvas strip charts and the stacked energy plot, fed by ring buffers.

import { RingBuffer } from "./ringbuffer.js";

export interface Series {
  label: string;
  color: string;
}

export class StripChart {
  readonly buffer: RingBuffer;
  private series: Series[];
  private title: string;
  private unit: string;

  constructor(title: string, unit: string, series: Series[], depth = 1200) {
    this.title = title;
    this.unit = unit;
    this.series = series;
    this.buffer = new RingBuffer(series.length, depth);
  }

  push(t: number, row: number[]): void {
    this.buffer.push(t, row);
  }

  draw(ctx: CanvasRenderingContext2D, w: number, h: number): void {
    ctx.clearRect(0, 0, w, h);
    ctx.fillStyle = "#151a21";
    ctx.fillRect(0, 0, w, h);
    const rows = this.buffer.rows();
    ctx.fillStyle = "#9aa7b4";
    ctx.font = "11px sans-serif";
    ctx.fillText(this.title, 6, 13);
    if (rows.length < 2) return;
    const t0 = rows[0][0];
    const t1 = rows[rows.length - 1][0];
    let lo = Infinity;
    let hi = -Infinity;
    for (const r of rows) {
      for (let j = 1; j < r.length; j++) {
        if (r[j] < lo) lo = r[j];
        if (r[j] > hi) hi = r[j];
      }
    }
    if (!isFinite(lo) || hi - lo < 1e-12) {
      lo -= 1;
      hi += 1;
    }
    const pad = 0.08 * (hi - lo);
    lo -= pad;
    hi += pad;
    const sx = (t: number) => ((t - t0) / Math.max(t1 - t0, 1e-9)) * (w - 8) + 4;
    const sy = (v: number) => h - 6 - ((v - lo) / (hi - lo)) * (h - 26);
    ctx.strokeStyle = "#2a3037";
    ctx.beginPath();
    ctx.moveTo(4, sy(0));
    ctx.lineTo(w - 4, sy(0));
    ctx.stroke();
    this.series.forEach((s, j) => {
      ctx.strokeStyle = s.color;
      ctx.beginPath();
      rows.forEach((r, i) => {
        const x = sx(r[0]);
        const y = sy(r[j + 1]);
        if (i === 0) ctx.moveTo(x, y);
        else ctx.lineTo(x, y);
      });
      ctx.stroke();
    });
    const last = rows[rows.length - 1];
    const readout = this.series
      .map((s, j) => `${s.label} ${fmt(last[j + 1])}`)
      .join("  ");
    ctx.fillStyle = "#c7d1dc";
    ctx.fillText(`${readout} ${this.unit}`, 6, 26);
  }
}

export class EnergyStack {
  readonly buffer: RingBuffer; // robot, drill, buffer, spring_tip, spring_base
  private colors = ["#4e79a7", "#f28e2b", "#76b7b2", "#e15759", "#b5a05a"];
  private labels = ["robot", "drill", "buffer", "spr tip", "spr base"];

  constructor(depth = 1200) {
    this.buffer = new RingBuffer(5, depth);
  }

  push(t: number, parts: number[]): void {
    this.buffer.push(t, parts);
  }

  draw(ctx: CanvasRenderingContext2D, w: number, h: number): void {
    ctx.clearRect(0, 0, w, h);
    ctx.fillStyle = "#151a21";
    ctx.fillRect(0, 0, w, h);
    ctx.fillStyle = "#9aa7b4";
    ctx.font = "11px sans-serif";
    ctx.fillText("energy (stacked, J)", 6, 13);
    const rows = this.buffer.rows();
    if (rows.length < 2) return;
    const t0 = rows[0][0];
    const t1 = rows[rows.length - 1][0];
    let peak = 0;
    for (const r of rows) {
      let sum = 0;
      for (let j = 1; j < r.length; j++) sum += r[j];
      if (sum > peak) peak = sum;
    }
    peak = Math.max(peak, 1e-9);
    const sx = (t: number) => ((t - t0) / Math.max(t1 - t0, 1e-9)) * (w - 8) + 4;
    const sy = (v: number) => h - 6 - (v / (1.1 * peak)) * (h - 26);
    for (let j = 5; j >= 1; j--) {
      ctx.fillStyle = this.colors[j - 1];
      ctx.beginPath();
      ctx.moveTo(sx(rows[0][0]), sy(0));
      for (const r of rows) {
        let sum = 0;
        for (let k = 1; k <= j; k++) sum += r[k];
        ctx.lineTo(sx(r[0]), sy(sum));
      }
      ctx.lineTo(sx(rows[rows.length - 1][0]), sy(0));
      ctx.closePath();
      ctx.fill();
    }
    const last = rows[rows.length - 1];
    const total = last.slice(1).reduce((a, b) => a + b, 0);
    ctx.fillStyle = "#c7d1dc";
    ctx.fillText(`total ${fmt(total)} J`, 6, 26);
  }
}

function fmt(v: number): string {
  const a = Math.abs(v);
  if (a >= 100) return v.toFixed(0);
  if (a >= 1) return v.toFixed(2);
  if (a >= 1e-3) return v.toFixed(4);
  return v.toExponential(1);
}
