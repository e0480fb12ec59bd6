/**
 * Viewer-side session state: topology binding, frame ordering, and the
 * stale-frame guard.
 *
 * Frames are rendered in received order; a frame is dropped (never
 * mis-rendered) unless its mesh id and vertex count match the current
 * topology, and its frame number exceeds the last rendered one.
 */

import type { MeshTopology, SurfaceFrameHeader } from "./protocol.js";

export type ConnectionStatus = "connecting" | "connected" | "reconnecting" | "failed";

export interface FrameData {
  header: SurfaceFrameHeader;
  positions: Float32Array;
}

export class ViewerState {
  status: ConnectionStatus = "connecting";
  topology: MeshTopology | null = null;
  latestFrame: FrameData | null = null;
  lastFrameNumber = -Infinity;
  droppedFrames = 0;
  topologyGeneration = 0;

  applyTopology(topology: MeshTopology): void {
    this.topology = topology;
    this.topologyGeneration += 1;
    // the next frames belong to the new surface; the held buffer is stale
    this.latestFrame = null;
  }

  /**
   * Accept or drop an incoming frame. Returns the frame to render, or null
   * if it was dropped (stale topology or out-of-order).
   */
  applyFrame(header: SurfaceFrameHeader, positions: Float32Array): FrameData | null {
    if (
      this.topology === null ||
      header.mesh_id !== this.topology.mesh_id ||
      header.count !== this.topology.vertex_count ||
      positions.length !== 3 * header.count ||
      header.frame <= this.lastFrameNumber
    ) {
      this.droppedFrames += 1;
      return null;
    }
    this.lastFrameNumber = header.frame;
    this.latestFrame = { header, positions };
    return this.latestFrame;
  }
}
