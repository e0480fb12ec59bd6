/** Static asset catalog: mesh ids and display names for the swap UI. */

export interface CatalogEntry {
  id: string;
  name: string;
}

export function parseCatalog(json: string): CatalogEntry[] {
  const raw = JSON.parse(json) as { meshes?: unknown };
  if (!Array.isArray(raw.meshes)) {
    throw new Error("catalog must carry a 'meshes' array");
  }
  return raw.meshes.map((entry) => {
    const e = entry as { id?: unknown; name?: unknown };
    if (typeof e.id !== "string") throw new Error("catalog entry lacks an id");
    return { id: e.id, name: typeof e.name === "string" ? e.name : e.id };
  });
}

export async function loadCatalog(url: string): Promise<CatalogEntry[]> {
  const response = await fetch(url);
  if (!response.ok) throw new Error(`catalog fetch failed: ${response.status}`);
  return parseCatalog(await response.text());
}
