import { describe, expect, it } from "vitest";

import type { MeshTopology, SurfaceFrameHeader } from "../src/protocol.js";
import { ViewerState } from "../src/state.js";

const topoA: MeshTopology = {
  type: "mesh_topology",
  mesh_id: "a",
  vertex_count: 2,
  faces: [[0, 1, 0]],
};
const topoB: MeshTopology = {
  type: "mesh_topology",
  mesh_id: "b",
  vertex_count: 3,
  faces: [[0, 1, 2]],
};

function frame(n: number, meshId: string, count: number): SurfaceFrameHeader {
  return { type: "surface_frame", frame: n, sim_time: n * 0.01, count, mesh_id: meshId };
}

describe("ViewerState", () => {
  it("renders frames in received order", () => {
    const state = new ViewerState();
    state.applyTopology(topoA);
    expect(state.applyFrame(frame(1, "a", 2), new Float32Array(6))).not.toBeNull();
    expect(state.applyFrame(frame(2, "a", 2), new Float32Array(6))).not.toBeNull();
    expect(state.lastFrameNumber).toBe(2);
  });

  it("drops out-of-order frames", () => {
    const state = new ViewerState();
    state.applyTopology(topoA);
    state.applyFrame(frame(5, "a", 2), new Float32Array(6));
    expect(state.applyFrame(frame(4, "a", 2), new Float32Array(6))).toBeNull();
    expect(state.droppedFrames).toBe(1);
  });

  it("drops frames for a stale topology, never mis-renders them", () => {
    const state = new ViewerState();
    state.applyTopology(topoA);
    state.applyFrame(frame(1, "a", 2), new Float32Array(6));
    state.applyTopology(topoB);
    // a late frame from the old mesh arrives after the swap
    expect(state.applyFrame(frame(2, "a", 2), new Float32Array(6))).toBeNull();
    expect(state.latestFrame).toBeNull();
    // the new mesh's frames flow
    expect(state.applyFrame(frame(3, "b", 3), new Float32Array(9))).not.toBeNull();
    expect(state.latestFrame?.header.mesh_id).toBe("b");
  });

  it("drops frames whose buffer disagrees with the header", () => {
    const state = new ViewerState();
    state.applyTopology(topoA);
    expect(state.applyFrame(frame(1, "a", 2), new Float32Array(5))).toBeNull();
  });

  it("drops everything before a topology arrives", () => {
    const state = new ViewerState();
    expect(state.applyFrame(frame(1, "a", 2), new Float32Array(6))).toBeNull();
  });
});
