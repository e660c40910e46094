import { describe, expect, test } from "vitest";
import { DEFAULT_DRAG, DragForce, pixelsToForce } from "../src/dragforce.js";
import type { V3 } from "../src/protocol.js";

const RIGHT: V3 = [1, 0, 0];
const UP: V3 = [0, 0, 1];

describe("pixelsToForce", () => {
  test("100 px lateral drag maps to 5 N at the default gain", () => {
    const f = pixelsToForce(100, 0, RIGHT, UP, DEFAULT_DRAG);
    expect(f).toEqual([5, 0, 0]);
  });

  test("screen-down drag pushes along negative camera-up", () => {
    const f = pixelsToForce(0, 100, RIGHT, UP, DEFAULT_DRAG);
    expect(f[2]).toBeCloseTo(-5, 12);
  });

  test("caps at the configured maximum force", () => {
    const f = pixelsToForce(10000, 0, RIGHT, UP, DEFAULT_DRAG);
    expect(Math.hypot(...f)).toBeCloseTo(DEFAULT_DRAG.maxForce, 9);
  });

  test("projects into an arbitrary camera plane", () => {
    const right: V3 = [0, 1, 0];
    const up: V3 = [-1, 0, 0];
    const f = pixelsToForce(40, -20, right, up, DEFAULT_DRAG);
    expect(f[1]).toBeCloseTo(2, 12);
    expect(f[0]).toBeCloseTo(-1, 12);
  });
});

describe("DragForce", () => {
  test("streams while held at the rate limit and zeroes on release", () => {
    const sent: Array<{ f: V3; hold: number }> = [];
    let clock = 0;
    const drag = new DragForce(
      (f, hold) => sent.push({ f, hold }),
      { ...DEFAULT_DRAG, rateHz: 60 },
      () => clock,
    );
    drag.start(0, 0);
    drag.move(100, 0, RIGHT, UP); // sends
    clock += 5;
    drag.move(120, 0, RIGHT, UP); // inside the 16.7 ms window: suppressed
    clock += 20;
    drag.move(120, 0, RIGHT, UP); // sends
    drag.end(); // zero force
    expect(sent).toHaveLength(3);
    expect(sent[0].f).toEqual([5, 0, 0]);
    expect(sent[1].f[0]).toBeCloseTo(6, 12);
    expect(sent[2].f).toEqual([0, 0, 0]);
    expect(drag.dragging).toBe(false);
  });

  test("ignores moves when not dragging and double end", () => {
    const sent: V3[] = [];
    const drag = new DragForce((f) => sent.push(f), DEFAULT_DRAG, () => 0);
    expect(drag.move(50, 0, RIGHT, UP)).toBeNull();
    drag.end();
    expect(sent).toHaveLength(0);
  });
});
