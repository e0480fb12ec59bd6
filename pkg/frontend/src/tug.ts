/**
 * Drag-to-tug math, DOM-free so it is unit-testable.
 *
 * Mouse-down picks the surface vertex nearest the cursor ray (within a pick
 * threshold); dragging converts the screen-space delta into a world force
 * through the camera basis and the force gain; mouse-up emits one release.
 */

import type { OutgoingMessage } from "./protocol.js";

export type Vec3 = [number, number, number];

export interface Ray {
  origin: Vec3;
  direction: Vec3; // unit length
}

export interface CameraBasis {
  right: Vec3; // world direction of +x on screen
  up: Vec3; // world direction of +y on screen
}

const sub = (a: Vec3, b: Vec3): Vec3 => [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
const dot = (a: Vec3, b: Vec3): number => a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
const norm = (a: Vec3): number => Math.sqrt(dot(a, a));

/**
 * Nearest surface vertex under the cursor ray, or null on a miss.
 * `threshold` is the maximum allowed ray-to-vertex distance.
 */
export function pickSurfacePoint(
  positions: Float32Array,
  ray: Ray,
  threshold: number,
): { index: number; point: Vec3 } | null {
  let best = -1;
  let bestAlong = Infinity;
  let bestDist = threshold;
  for (let i = 0; i < positions.length / 3; i++) {
    const p: Vec3 = [positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]];
    const rel = sub(p, ray.origin);
    const along = dot(rel, ray.direction);
    if (along <= 0) continue; // behind the camera
    const offRay: Vec3 = [
      rel[0] - along * ray.direction[0],
      rel[1] - along * ray.direction[1],
      rel[2] - along * ray.direction[2],
    ];
    const dist = norm(offRay);
    if (dist < bestDist || (dist === bestDist && along < bestAlong)) {
      best = i;
      bestDist = dist;
      bestAlong = along;
    }
  }
  if (best < 0) return null;
  return {
    index: best,
    point: [positions[3 * best], positions[3 * best + 1], positions[3 * best + 2]],
  };
}

/** Screen drag (pixels) to world force through the camera basis. */
export function dragForce(
  dxPixels: number,
  dyPixels: number,
  camera: CameraBasis,
  gainNewtonsPerPixel: number,
): Vec3 {
  // screen y grows downward; world "up" needs the sign flip
  return [
    gainNewtonsPerPixel * (dxPixels * camera.right[0] - dyPixels * camera.up[0]),
    gainNewtonsPerPixel * (dxPixels * camera.right[1] - dyPixels * camera.up[1]),
    gainNewtonsPerPixel * (dxPixels * camera.right[2] - dyPixels * camera.up[2]),
  ];
}

/**
 * Default force gain: a full-screen drag roughly balances the body weight.
 */
export function defaultGain(bodyMassKg: number, screenWidthPixels: number): number {
  return (9.8 * bodyMassKg) / Math.max(screenWidthPixels, 1);
}

export type DragEventKind = "down" | "move" | "up";

/**
 * Drag session state machine. Feed pointer events; collect the protocol
 * messages to send. Guarantees: no message on a pick miss, one tug per
 * move while engaged, exactly one release per engaged drag.
 */
export class DragSession {
  private engaged: { point: Vec3; startX: number; startY: number } | null = null;

  constructor(
    private readonly camera: CameraBasis,
    private readonly gain: number,
  ) {}

  down(
    positions: Float32Array | null,
    ray: Ray,
    threshold: number,
    x: number,
    y: number,
  ): OutgoingMessage[] {
    if (!positions) return [];
    const pick = pickSurfacePoint(positions, ray, threshold);
    if (!pick) return [];
    this.engaged = { point: pick.point, startX: x, startY: y };
    return [];
  }

  move(x: number, y: number): OutgoingMessage[] {
    if (!this.engaged) return [];
    const force = dragForce(
      x - this.engaged.startX,
      y - this.engaged.startY,
      this.camera,
      this.gain,
    );
    return [{ type: "tug", point: this.engaged.point, force }];
  }

  up(): OutgoingMessage[] {
    if (!this.engaged) return [];
    this.engaged = null;
    return [{ type: "release" }];
  }

  get active(): boolean {
    return this.engaged !== null;
  }
}
