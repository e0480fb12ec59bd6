import { describe, expect, it } from "vitest";

import { parseCatalog } from "../src/catalog.js";

describe("parseCatalog", () => {
  it("parses ids with optional display names", () => {
    const entries = parseCatalog(
      JSON.stringify({
        meshes: [{ id: "armadillo", name: "Armadillo" }, { id: "bunny" }],
      }),
    );
    expect(entries).toEqual([
      { id: "armadillo", name: "Armadillo" },
      { id: "bunny", name: "bunny" },
    ]);
  });

  it("rejects catalogs without a meshes array", () => {
    expect(() => parseCatalog(JSON.stringify({ assets: [] }))).toThrow(/meshes/);
    expect(() => parseCatalog(JSON.stringify({ meshes: [{ name: "x" }] }))).toThrow(/id/);
  });
});
