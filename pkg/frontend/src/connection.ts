/**
 * Service connection: hello handshake, header/binary frame pairing,
 * sequencing of outgoing messages, and reconnect with backoff.
 *
 * The socket is injected behind a small interface so the pairing and
 * handshake logic is testable without a browser or a live server.
 */

import {
  ClientMessage,
  decodePositions,
  decodeServerMessage,
  encodeMessage,
  OutgoingMessage,
  PROTOCOL_VERSION,
  ServerMessage,
  SurfaceFrameHeader,
} from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onmessage: ((data: string | ArrayBuffer) => void) | null;
  onclose: (() => void) | null;
  onopen: (() => void) | null;
}

export interface ConnectionEvents {
  onHello?(msg: Extract<ServerMessage, { type: "hello" }>): void;
  onTopology?(msg: Extract<ServerMessage, { type: "mesh_topology" }>): void;
  onFrame?(header: SurfaceFrameHeader, positions: Float32Array): void;
  onAck?(msg: Extract<ServerMessage, { type: "event_ack" }>): void;
  onError?(text: string): void;
  onStatus?(status: "connecting" | "connected" | "reconnecting" | "failed"): void;
}

export function makeWebSocketFactory(url: string): () => SocketLike {
  return () => {
    const ws = new WebSocket(url);
    ws.binaryType = "arraybuffer";
    const wrapper: SocketLike = {
      send: (data) => ws.send(data),
      close: () => ws.close(),
      onmessage: null,
      onclose: null,
      onopen: null,
    };
    ws.onmessage = (ev) => wrapper.onmessage?.(ev.data as string | ArrayBuffer);
    ws.onclose = () => wrapper.onclose?.();
    ws.onopen = () => wrapper.onopen?.();
    return wrapper;
  };
}

export class Connection {
  private socket: SocketLike | null = null;
  private seq = 0;
  private pendingHeader: SurfaceFrameHeader | null = null;
  private retries = 0;
  private closedByUser = false;
  handshakeDone = false;

  constructor(
    private readonly factory: () => SocketLike,
    private readonly events: ConnectionEvents,
    private readonly maxRetries = 8,
    private readonly schedule: (fn: () => void, ms: number) => void = (fn, ms) =>
      setTimeout(fn, ms),
  ) {}

  open(): void {
    this.events.onStatus?.(this.retries === 0 ? "connecting" : "reconnecting");
    const socket = this.factory();
    this.socket = socket;
    this.handshakeDone = false;
    this.pendingHeader = null;
    socket.onopen = () => {
      socket.send(encodeMessage({ type: "hello", version: PROTOCOL_VERSION }));
    };
    socket.onmessage = (data) => this.handleData(data);
    socket.onclose = () => {
      this.socket = null;
      if (this.closedByUser) return;
      if (this.retries >= this.maxRetries) {
        this.events.onStatus?.("failed");
        return;
      }
      const backoff = Math.min(250 * 2 ** this.retries, 8000);
      this.retries += 1;
      this.events.onStatus?.("reconnecting");
      this.schedule(() => this.open(), backoff);
    };
  }

  close(): void {
    this.closedByUser = true;
    this.socket?.close();
  }

  /** Send a control message, stamping the sequence number; returns it. */
  send(msg: OutgoingMessage): number {
    if (!this.socket) throw new Error("not connected");
    this.seq += 1;
    this.socket.send(encodeMessage({ ...msg, seq: this.seq } as ClientMessage));
    return this.seq;
  }

  private handleData(data: string | ArrayBuffer): void {
    if (typeof data !== "string") {
      // binary block: belongs to the most recent surface_frame header
      if (this.pendingHeader) {
        const header = this.pendingHeader;
        this.pendingHeader = null;
        try {
          this.events.onFrame?.(header, decodePositions(data, header.count));
        } catch (err) {
          this.events.onError?.(String(err));
        }
      }
      return;
    }
    let msg: ServerMessage;
    try {
      msg = decodeServerMessage(data);
    } catch (err) {
      this.events.onError?.(String(err));
      return;
    }
    switch (msg.type) {
      case "hello":
        if (msg.version !== PROTOCOL_VERSION) {
          this.events.onError?.(
            `protocol version mismatch: server ${msg.version}, viewer ${PROTOCOL_VERSION}`,
          );
          this.close();
          return;
        }
        this.handshakeDone = true;
        this.retries = 0;
        this.events.onStatus?.("connected");
        this.events.onHello?.(msg);
        break;
      case "mesh_topology":
        this.events.onTopology?.(msg);
        break;
      case "surface_frame":
        this.pendingHeader = msg;
        break;
      case "event_ack":
        this.events.onAck?.(msg);
        break;
      case "error":
        this.events.onError?.(msg.text);
        break;
    }
  }
}
