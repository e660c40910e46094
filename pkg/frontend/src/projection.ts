// Orbit camera with a simple perspective projection onto the scene canvas.

import type { V3 } from "./protocol.js";

export class Camera {
  target: V3 = [0.3, 0.0, 0.4];
  yaw = 0.9; // rad about world z
  pitch = 0.35; // rad above the horizon
  distance = 1.6; // m
  focal = 900; // px

  forward(): V3 {
    const cp = Math.cos(this.pitch);
    return [
      -Math.cos(this.yaw) * cp,
      -Math.sin(this.yaw) * cp,
      -Math.sin(this.pitch),
    ];
  }

  right(): V3 {
    return [-Math.sin(this.yaw), Math.cos(this.yaw), 0];
  }

  up(): V3 {
    const f = this.forward();
    const r = this.right();
    return [
      r[1] * f[2] - r[2] * f[1],
      r[2] * f[0] - r[0] * f[2],
      r[0] * f[1] - r[1] * f[0],
    ];
  }

  eye(): V3 {
    const f = this.forward();
    return [
      this.target[0] - f[0] * this.distance,
      this.target[1] - f[1] * this.distance,
      this.target[2] - f[2] * this.distance,
    ];
  }

  /** World point to canvas pixels; null when behind the camera. */
  project(p: V3, width: number, height: number): [number, number] | null {
    const e = this.eye();
    const d: V3 = [p[0] - e[0], p[1] - e[1], p[2] - e[2]];
    const f = this.forward();
    const r = this.right();
    const u = this.up();
    const z = d[0] * f[0] + d[1] * f[1] + d[2] * f[2];
    if (z < 0.05) return null;
    const x = d[0] * r[0] + d[1] * r[1] + d[2] * r[2];
    const y = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
    return [width / 2 + (this.focal * x) / z, height / 2 - (this.focal * y) / z];
  }
}
