import { describe, expect, it } from "vitest";
import { z } from "zod";

import {
  decodePositions,
  decodeServerMessage,
  encodeMessage,
  PROTOCOL_VERSION,
} from "../src/protocol.js";

const vec3 = z.tuple([z.number(), z.number(), z.number()]);

// the message schemas accepted by the simulation service
export const clientMessageSchema = z.discriminatedUnion("type", [
  z.object({ type: z.literal("hello"), version: z.number().int(), seq: z.number().optional() }),
  z.object({ type: z.literal("load_mesh"), id: z.string(), seq: z.number().int() }),
  z.object({ type: z.literal("tug"), point: vec3, force: vec3, seq: z.number().int() }),
  z.object({ type: z.literal("release"), seq: z.number().int() }),
  z.object({ type: z.literal("swap_mesh"), id: z.string(), seq: z.number().int() }),
  z.object({ type: z.literal("pause"), seq: z.number().int() }),
  z.object({ type: z.literal("resume"), seq: z.number().int() }),
  z.object({ type: z.literal("set_rate"), hz: z.number().positive(), seq: z.number().int() }),
]);

describe("protocol", () => {
  it("encodes client messages that satisfy the service schema", () => {
    const messages = [
      { type: "hello", version: PROTOCOL_VERSION },
      { type: "tug", point: [0, 0.5, 0], force: [1, 0, 0], seq: 2 },
      { type: "release", seq: 3 },
      { type: "swap_mesh", id: "armadillo", seq: 4 },
      { type: "pause", seq: 5 },
      { type: "resume", seq: 6 },
      { type: "set_rate", hz: 30, seq: 7 },
    ] as const;
    for (const msg of messages) {
      const wire = JSON.parse(encodeMessage(msg as never));
      expect(() => clientMessageSchema.parse(wire)).not.toThrow();
    }
  });

  it("decodes every server message type", () => {
    const samples = [
      { type: "hello", version: 1, latent_dim: 5, mesh_ids: ["a"], rate_hz: 30 },
      { type: "mesh_topology", mesh_id: "a", vertex_count: 3, faces: [[0, 1, 2]] },
      { type: "surface_frame", frame: 7, sim_time: 0.21, count: 3, mesh_id: "a" },
      { type: "event_ack", seq: 1, event: "tug" },
      { type: "error", text: "nope" },
    ];
    for (const sample of samples) {
      expect(decodeServerMessage(JSON.stringify(sample)).type).toBe(sample.type);
    }
  });

  it("rejects unknown and malformed messages", () => {
    expect(() => decodeServerMessage(JSON.stringify({ type: "mystery" }))).toThrow();
    expect(() => decodeServerMessage(JSON.stringify({ no: "type" }))).toThrow();
  });

  it("decodes position blocks and validates their length", () => {
    const buffer = new Float32Array([1, 2, 3, 4, 5, 6]).buffer;
    const positions = decodePositions(buffer, 2);
    expect(Array.from(positions)).toEqual([1, 2, 3, 4, 5, 6]);
    expect(() => decodePositions(buffer, 3)).toThrow(/expected 9/);
  });
});
