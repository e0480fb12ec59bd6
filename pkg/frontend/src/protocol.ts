/**
 * Wire protocol spoken with the simulation service.
 *
 * Over WebSocket, control messages travel as JSON text frames; each
 * `surface_frame` header is followed by one binary frame holding 3*count
 * little-endian f32 vertex positions.
 */

export const PROTOCOL_VERSION = 1;

// client -> server
export type ClientMessage =
  | { type: "hello"; version: number; seq?: number }
  | { type: "load_mesh"; id: string; seq: number }
  | { type: "tug"; point: [number, number, number]; force: [number, number, number]; seq: number }
  | { type: "release"; seq: number }
  | { type: "swap_mesh"; id: string; seq: number }
  | { type: "pause"; seq: number }
  | { type: "resume"; seq: number }
  | { type: "set_rate"; hz: number; seq: number };

type DistributiveOmit<T, K extends PropertyKey> = T extends unknown ? Omit<T, K> : never;

/** A client message before the connection stamps its sequence number. */
export type OutgoingMessage = DistributiveOmit<ClientMessage, "seq">;

// server -> client
export interface HelloReply {
  type: "hello";
  version: number;
  latent_dim: number;
  mesh_ids: string[];
  rate_hz: number;
}

export interface MeshTopology {
  type: "mesh_topology";
  mesh_id: string;
  vertex_count: number;
  faces: number[][];
}

export interface SurfaceFrameHeader {
  type: "surface_frame";
  frame: number;
  sim_time: number;
  count: number;
  mesh_id: string;
}

export interface EventAck {
  type: "event_ack";
  seq?: number;
  event: string;
  warning?: string;
  mesh_id?: string;
}

export interface ErrorMessage {
  type: "error";
  text: string;
  seq?: number;
}

export type ServerMessage =
  | HelloReply
  | MeshTopology
  | SurfaceFrameHeader
  | EventAck
  | ErrorMessage;

export function encodeMessage(msg: ClientMessage): string {
  return JSON.stringify(msg);
}

export function decodeServerMessage(text: string): ServerMessage {
  const raw = JSON.parse(text) as { type?: unknown };
  if (typeof raw.type !== "string") {
    throw new Error("server message lacks a type");
  }
  switch (raw.type) {
    case "hello":
    case "mesh_topology":
    case "surface_frame":
    case "event_ack":
    case "error":
      return raw as ServerMessage;
    default:
      throw new Error(`unknown server message type ${raw.type}`);
  }
}

/** Binary position block accompanying a surface_frame header. */
export function decodePositions(buffer: ArrayBuffer, count: number): Float32Array {
  const positions = new Float32Array(buffer);
  if (positions.length !== 3 * count) {
    throw new Error(
      `position block holds ${positions.length} floats, expected ${3 * count}`,
    );
  }
  return positions;
}
