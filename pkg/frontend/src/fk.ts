// Minimal forward kinematics of the bundled 7-joint arm, just enough to
// draw the skeleton from the streamed joint angles.  Chain constants match
// the server's bundled robot config.

import type { V3 } from "./protocol.js";

type M3 = number[]; // row-major 3x3

const DEG = Math.PI / 180;

// [xyz (m), rpy (deg)] per joint, all axes +z in the joint frame.
const CHAIN: Array<{ xyz: V3; rpy: V3 }> = [
  { xyz: [0, 0, 0.333], rpy: [0, 0, 0] },
  { xyz: [0, 0, 0], rpy: [-90, 0, 0] },
  { xyz: [0, -0.316, 0], rpy: [90, 0, 0] },
  { xyz: [0.0825, 0, 0], rpy: [90, 0, 0] },
  { xyz: [-0.0825, 0.384, 0], rpy: [-90, 0, 0] },
  { xyz: [0, 0, 0], rpy: [90, 0, 0] },
  { xyz: [0.088, 0, 0], rpy: [90, 0, 0] },
];
const EE_OFFSET: V3 = [0, 0, 0.107];

function matMul(a: M3, b: M3): M3 {
  const c = new Array(9).fill(0);
  for (let i = 0; i < 3; i++)
    for (let j = 0; j < 3; j++)
      for (let k = 0; k < 3; k++) c[3 * i + j] += a[3 * i + k] * b[3 * k + j];
  return c;
}

function matVec(a: M3, v: V3): V3 {
  return [
    a[0] * v[0] + a[1] * v[1] + a[2] * v[2],
    a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
    a[6] * v[0] + a[7] * v[1] + a[8] * v[2],
  ];
}

function rotX(a: number): M3 {
  const c = Math.cos(a), s = Math.sin(a);
  return [1, 0, 0, 0, c, -s, 0, s, c];
}

function rotY(a: number): M3 {
  const c = Math.cos(a), s = Math.sin(a);
  return [c, 0, s, 0, 1, 0, -s, 0, c];
}

function rotZ(a: number): M3 {
  const c = Math.cos(a), s = Math.sin(a);
  return [c, -s, 0, s, c, 0, 0, 0, 1];
}

function rpyMatrix(rpyDeg: V3): M3 {
  // Fixed-axis convention: Rz(yaw) Ry(pitch) Rx(roll).
  return matMul(rotZ(rpyDeg[2] * DEG), matMul(rotY(rpyDeg[1] * DEG), rotX(rpyDeg[0] * DEG)));
}

/** Base-frame positions: base origin, each joint origin, the flange. */
export function skeletonPoints(q: number[]): V3[] {
  let r: M3 = [1, 0, 0, 0, 1, 0, 0, 0, 1];
  let p: V3 = [0, 0, 0];
  const pts: V3[] = [[0, 0, 0]];
  for (let i = 0; i < CHAIN.length; i++) {
    const step = CHAIN[i];
    const moved = matVec(r, step.xyz);
    p = [p[0] + moved[0], p[1] + moved[1], p[2] + moved[2]];
    r = matMul(r, matMul(rpyMatrix(step.rpy), rotZ(q[i])));
    pts.push(p);
  }
  const flange = matVec(r, EE_OFFSET);
  pts.push([p[0] + flange[0], p[1] + flange[1], p[2] + flange[2]]);
  return pts;
}
