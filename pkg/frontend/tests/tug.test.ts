import { describe, expect, it } from "vitest";
import { z } from "zod";

import { DragSession, defaultGain, dragForce, pickSurfacePoint } from "../src/tug.js";
import { clientMessageSchema } from "./protocol.test.js";

// camera looking down -z: screen-right is world +x, screen-up is world +y
const CAMERA = { right: [1, 0, 0] as [number, number, number], up: [0, 1, 0] as [number, number, number] };

const positions = new Float32Array([
  0, 0, 0,
  1, 0, 0,
  0, 1, 0,
]);

describe("pickSurfacePoint", () => {
  it("picks the vertex nearest the ray", () => {
    const ray = { origin: [1.02, 0.02, 5] as [number, number, number], direction: [0, 0, -1] as [number, number, number] };
    const pick = pickSurfacePoint(positions, ray, 0.2);
    expect(pick?.index).toBe(1);
  });

  it("misses when every vertex is beyond the threshold", () => {
    const ray = { origin: [10, 10, 5] as [number, number, number], direction: [0, 0, -1] as [number, number, number] };
    expect(pickSurfacePoint(positions, ray, 0.2)).toBeNull();
  });

  it("ignores vertices behind the ray origin", () => {
    const ray = { origin: [0, 0, -5] as [number, number, number], direction: [0, 0, -1] as [number, number, number] };
    expect(pickSurfacePoint(positions, ray, 0.2)).toBeNull();
  });
});

describe("dragForce", () => {
  it("drag right gives a positive screen-right world component", () => {
    const f = dragForce(120, 0, CAMERA, 0.5);
    expect(f[0]).toBeGreaterThan(0);
    expect(f[1]).toBeCloseTo(0);
  });

  it("drag up on screen pushes along world up", () => {
    const f = dragForce(0, -80, CAMERA, 0.5); // screen y grows downward
    expect(f[1]).toBeGreaterThan(0);
  });

  it("full-screen drag roughly balances the body weight at default gain", () => {
    const gain = defaultGain(50, 1000);
    const f = dragForce(1000, 0, CAMERA, gain);
    expect(f[0]).toBeCloseTo(9.8 * 50, 6);
  });
});

describe("DragSession", () => {
  it("click on empty space sends nothing", () => {
    const session = new DragSession(CAMERA, 1.0);
    const miss = { origin: [9, 9, 5] as [number, number, number], direction: [0, 0, -1] as [number, number, number] };
    expect(session.down(positions, miss, 0.1, 0, 0)).toEqual([]);
    expect(session.move(50, 0)).toEqual([]);
    expect(session.up()).toEqual([]);
  });

  it("drag emits schema-valid tugs and exactly one release", () => {
    const session = new DragSession(CAMERA, 1.0);
    const ray = { origin: [0, 0, 5] as [number, number, number], direction: [0, 0, -1] as [number, number, number] };
    session.down(positions, ray, 0.1, 100, 100);
    const out: object[] = [];
    out.push(...session.move(150, 100));
    out.push(...session.move(180, 90));
    out.push(...session.up());
    out.push(...session.up()); // double release must not duplicate
    const types = out.map((m) => (m as { type: string }).type);
    expect(types).toEqual(["tug", "tug", "release"]);
    out.forEach((msg, k) =>
      expect(() => clientMessageSchema.parse({ ...msg, seq: k + 1 })).not.toThrow(),
    );
    const firstTug = out[0] as { force: [number, number, number] };
    expect(firstTug.force[0]).toBeGreaterThan(0); // dragged right
  });

  it("no positions yet means no engagement", () => {
    const session = new DragSession(CAMERA, 1.0);
    const ray = { origin: [0, 0, 5] as [number, number, number], direction: [0, 0, -1] as [number, number, number] };
    expect(session.down(null, ray, 0.1, 0, 0)).toEqual([]);
    expect(session.active).toBe(false);
  });
});
