"""Tetrahedral mesh representation, file IO, surface extraction, vertex selection.

A :class:`TetMesh` is the reference-domain discretization used both by the
full-space trainer simulations and as the (swappable) cubature carrier of the
reduced solver. Meshes are immutable after construction and safe to share
across threads.

Supported file formats:

* TetGen-style ``.node``/``.ele`` text pairs (import only),
* the ``LCRM`` versioned binary container (import/export),
* OBJ surface export for viewers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import FormatError, ValidationError

LCRM_MAGIC = b"LCRM"
LCRM_VERSION = 1

_AXES = {"x": 0, "y": 1, "z": 2}

# Local faces of a positively oriented tet (v0,v1,v2,v3), wound so the
# triangle normal points out of the tet.
_TET_FACES = ((0, 2, 1), (0, 1, 3), (1, 2, 3), (2, 0, 3))


@dataclass(frozen=True)
class TetMesh:
    """Reference-domain tetrahedral mesh.

    Attributes:
        vertices: (n, 3) float64 reference positions X, in meters.
        tets: (m, 4) int64 vertex indices, positively oriented.
        density: uniform mass density rho in kg/m^3.
        dirichlet_tags: per-vertex optional prescribed-velocity label.
    """

    vertices: NDArray[np.float64]
    tets: NDArray[np.int64]
    density: float = 1000.0
    dirichlet_tags: tuple[str | None, ...] = field(default=())

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        tets = np.ascontiguousarray(np.asarray(self.tets, dtype=np.int64))
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValidationError(f"vertices must be (n, 3), got {verts.shape}")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise ValidationError(f"tets must be (m, 4), got {tets.shape}")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "tets", tets)
        if not np.all(np.isfinite(verts)):
            raise ValidationError("vertices contain non-finite coordinates")
        if tets.size and (tets.min() < 0 or tets.max() >= len(verts)):
            raise ValidationError("tet indices out of range")
        if self.density <= 0:
            raise ValidationError("density must be positive")
        tags = self.dirichlet_tags
        if not tags:
            tags = (None,) * len(verts)
        else:
            tags = tuple(tags)
            if len(tags) != len(verts):
                raise ValidationError(
                    f"dirichlet_tags length {len(tags)} != vertex count {len(verts)}"
                )
        object.__setattr__(self, "dirichlet_tags", tags)
        vols = tet_volumes(self)
        bad = np.nonzero(vols <= 0)[0]
        if bad.size:
            raise ValidationError(
                f"tet {bad[0]} has non-positive signed volume {vols[bad[0]]:g}"
            )

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def volume(self) -> float:
        """Total reference volume, m^3."""
        return float(tet_volumes(self).sum())

    def bounding_box(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def with_tags(self, indices, tag: str) -> "TetMesh":
        """Return a copy with ``tag`` assigned to the given vertex indices."""
        tags = list(self.dirichlet_tags)
        for i in indices:
            tags[int(i)] = tag
        return TetMesh(self.vertices, self.tets, self.density, tuple(tags))

    def surface_faces(self) -> NDArray[np.int64]:
        """Boundary triangles (outward-oriented); cached after first call."""
        cached = getattr(self, "_surface", None)
        if cached is None:
            cached = extract_surface(self)
            object.__setattr__(self, "_surface", cached)
        return cached


@dataclass(frozen=True)
class VertexSelector:
    """Declarative vertex predicate.

    kind is one of:
        "halfspace": vertices with coordinate[axis] op value, op in {ge, le, gt, lt};
        "tag": vertices carrying the given dirichlet tag;
        "indices": an explicit index list.
    """

    kind: str
    axis: str | None = None
    op: str | None = None
    value: float | None = None
    tag: str | None = None
    indices: tuple[int, ...] = ()

    @staticmethod
    def halfspace(axis: str, op: str, value: float) -> "VertexSelector":
        if axis not in _AXES:
            raise ValidationError(f"unknown axis {axis!r}")
        if op not in ("ge", "le", "gt", "lt"):
            raise ValidationError(f"unknown halfspace op {op!r}")
        return VertexSelector(kind="halfspace", axis=axis, op=op, value=float(value))

    @staticmethod
    def by_tag(tag: str) -> "VertexSelector":
        return VertexSelector(kind="tag", tag=tag)

    @staticmethod
    def by_indices(indices) -> "VertexSelector":
        return VertexSelector(kind="indices", indices=tuple(int(i) for i in indices))


def select_vertices(mesh: TetMesh, sel: VertexSelector) -> NDArray[np.int64]:
    """Deterministic sorted index array of vertices matched by the selector."""
    if sel.kind == "halfspace":
        coords = mesh.vertices[:, _AXES[sel.axis]]
        if sel.op == "ge":
            mask = coords >= sel.value
        elif sel.op == "le":
            mask = coords <= sel.value
        elif sel.op == "gt":
            mask = coords > sel.value
        else:
            mask = coords < sel.value
        return np.nonzero(mask)[0].astype(np.int64)
    if sel.kind == "tag":
        return np.array(
            [i for i, t in enumerate(mesh.dirichlet_tags) if t == sel.tag],
            dtype=np.int64,
        )
    if sel.kind == "indices":
        out = np.unique(np.asarray(sel.indices, dtype=np.int64))
        if out.size and (out.min() < 0 or out.max() >= mesh.n_vertices):
            raise ValidationError("explicit index selector out of range")
        return out
    raise ValidationError(f"unknown selector kind {sel.kind!r}")


def tet_volume(mesh: TetMesh, t: int) -> float:
    """Signed volume of tet ``t``: det([X1-X0, X2-X0, X3-X0]) / 6."""
    v = mesh.vertices[mesh.tets[t]]
    return float(np.linalg.det(np.stack([v[1] - v[0], v[2] - v[0], v[3] - v[0]], axis=1)) / 6.0)


def tet_volumes(mesh: TetMesh) -> NDArray[np.float64]:
    """Signed volumes of every tet (vectorized)."""
    v = mesh.vertices[mesh.tets]
    e = v[:, 1:] - v[:, :1]
    # det of the 3x3 edge matrix with edges as columns
    return np.einsum(
        "ti,ti->t",
        e[:, 0],
        np.cross(e[:, 1], e[:, 2]),
    ) / 6.0


def extract_surface(mesh: TetMesh) -> NDArray[np.int64]:
    """Boundary triangles: faces bounding exactly one tet, outward-oriented."""
    faces = {}
    tets = mesh.tets
    for local in _TET_FACES:
        tris = tets[:, local]
        for tri in tris:
            key = tuple(sorted(tri.tolist()))
            if key in faces:
                faces[key] = None
            else:
                faces[key] = tuple(tri.tolist())
    boundary = [f for f in faces.values() if f is not None]
    return np.array(boundary, dtype=np.int64).reshape(-1, 3)


def vertex_adjacency(mesh: TetMesh) -> list[set[int]]:
    """Per-vertex set of vertices sharing at least one tet."""
    adj: list[set[int]] = [set() for _ in range(mesh.n_vertices)]
    for tet in mesh.tets:
        for a in tet:
            s = adj[a]
            for b in tet:
                if b != a:
                    s.add(int(b))
    return adj


def incident_tets(mesh: TetMesh) -> list[list[int]]:
    """Per-vertex list of incident tet indices, ascending."""
    inc: list[list[int]] = [[] for _ in range(mesh.n_vertices)]
    for t, tet in enumerate(mesh.tets):
        for a in tet:
            inc[a].append(t)
    return inc


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------


def load_mesh(path, fmt: str = "auto", density: float = 1000.0) -> TetMesh:
    """Load a mesh from disk.

    Args:
        path: path to a ``.node`` file (its ``.ele`` sibling is required),
            or to an ``LCRM`` container.
        fmt: "node_ele", "container", or "auto" (by extension).
        density: density assigned when the format does not carry one.

    Raises:
        FormatError: parse failure, with the offending line or offset.
        ValidationError: a parsed tet is inverted or indices are out of range.
    """
    path = Path(path)
    if fmt == "auto":
        fmt = "node_ele" if path.suffix in (".node", ".ele") else "container"
    if fmt == "node_ele":
        return _load_node_ele(path, density)
    if fmt == "container":
        return _load_container(path)
    raise FormatError(f"unknown mesh format {fmt!r}")


def _parse_numbers(path: Path):
    """Yield (line_number, tokens) for non-comment lines."""
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if body:
                yield lineno, body.split()


def _load_node_ele(path: Path, density: float) -> TetMesh:
    node_path = path.with_suffix(".node")
    ele_path = path.with_suffix(".ele")
    for p in (node_path, ele_path):
        if not p.exists():
            raise FormatError(f"missing file {p}")

    rows = _parse_numbers(node_path)
    try:
        lineno, header = next(rows)
        n_points = int(header[0])
        dim = int(header[1]) if len(header) > 1 else 3
    except (StopIteration, ValueError, IndexError):
        raise FormatError(f"{node_path}: malformed header") from None
    if dim != 3:
        raise FormatError(f"{node_path}:{lineno}: only 3-D nodes supported, got dim={dim}")

    ids = np.empty(n_points, dtype=np.int64)
    coords = np.empty((n_points, 3), dtype=np.float64)
    for k in range(n_points):
        try:
            lineno, tok = next(rows)
            ids[k] = int(tok[0])
            coords[k] = [float(tok[1]), float(tok[2]), float(tok[3])]
        except StopIteration:
            raise FormatError(f"{node_path}: expected {n_points} nodes, got {k}") from None
        except (ValueError, IndexError):
            raise FormatError(f"{node_path}:{lineno}: malformed node line") from None
    base = int(ids.min()) if n_points else 0
    if base not in (0, 1) or not np.array_equal(ids, np.arange(base, base + n_points)):
        raise FormatError(f"{node_path}: node ids must be consecutive and 0- or 1-based")

    rows = _parse_numbers(ele_path)
    try:
        lineno, header = next(rows)
        n_tets = int(header[0])
        nodes_per = int(header[1]) if len(header) > 1 else 4
    except (StopIteration, ValueError, IndexError):
        raise FormatError(f"{ele_path}: malformed header") from None
    if nodes_per != 4:
        raise FormatError(f"{ele_path}:{lineno}: only linear tets supported, got {nodes_per} nodes")

    tets = np.empty((n_tets, 4), dtype=np.int64)
    for k in range(n_tets):
        try:
            lineno, tok = next(rows)
            tets[k] = [int(tok[1]), int(tok[2]), int(tok[3]), int(tok[4])]
        except StopIteration:
            raise FormatError(f"{ele_path}: expected {n_tets} tets, got {k}") from None
        except (ValueError, IndexError):
            raise FormatError(f"{ele_path}:{lineno}: malformed tet line") from None
    tets -= base
    return TetMesh(coords, tets, density=density)


def save_mesh(mesh: TetMesh, path) -> None:
    """Write the ``LCRM`` binary container (little-endian, versioned)."""
    path = Path(path)
    meta = {"dirichlet_tags": list(mesh.dirichlet_tags)}
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(LCRM_MAGIC)
        f.write(struct.pack("<I", LCRM_VERSION))
        f.write(struct.pack("<QQ", mesh.n_vertices, mesh.n_tets))
        f.write(struct.pack("<d", mesh.density))
        f.write(mesh.vertices.astype("<f8").tobytes())
        f.write(mesh.tets.astype("<u4").tobytes())
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)


def _load_container(path: Path) -> TetMesh:
    data = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"{path}: truncated at offset {off} reading {what}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != LCRM_MAGIC:
        raise FormatError(f"{path}: bad magic, not an LCRM container")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != LCRM_VERSION:
        raise FormatError(f"{path}: unsupported LCRM version {version}")
    n_verts, n_tets = struct.unpack("<QQ", take(16, "counts"))
    (density,) = struct.unpack("<d", take(8, "density"))
    verts = np.frombuffer(take(24 * n_verts, "vertices"), dtype="<f8").reshape(n_verts, 3)
    tets = np.frombuffer(take(16 * n_tets, "tets"), dtype="<u4").reshape(n_tets, 4)
    (blob_len,) = struct.unpack("<Q", take(8, "metadata length"))
    meta = json.loads(take(blob_len, "metadata").decode("utf-8"))
    tags = tuple(meta.get("dirichlet_tags") or [None] * n_verts)
    return TetMesh(verts.copy(), tets.astype(np.int64), density=density, dirichlet_tags=tags)


def save_surface_obj(mesh: TetMesh, path, displacements: NDArray[np.float64] | None = None) -> None:
    """Export the boundary surface as OBJ, optionally displaced."""
    verts = mesh.vertices if displacements is None else mesh.vertices + displacements
    faces = mesh.surface_faces()
    with open(path, "w") as f:
        for v in verts:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for tri in faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


# ---------------------------------------------------------------------------
# Procedural fixtures
# ---------------------------------------------------------------------------


def five_tet_cube(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), density: float = 1000.0) -> TetMesh:
    """A single axis-aligned box split into the classic 5 tets."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array(
        [[lo[0], lo[1], lo[2]], [hi[0], lo[1], lo[2]], [lo[0], hi[1], lo[2]], [hi[0], hi[1], lo[2]],
         [lo[0], lo[1], hi[2]], [hi[0], lo[1], hi[2]], [lo[0], hi[1], hi[2]], [hi[0], hi[1], hi[2]]]
    )
    tets = np.array(
        [[1, 0, 3, 5], [2, 3, 0, 6], [4, 5, 6, 0], [7, 6, 5, 3], [0, 3, 6, 5]],
        dtype=np.int64,
    )
    return TetMesh(corners, _orient_positive(corners, tets), density=density)


def box_mesh(
    lo=(0.0, 0.0, 0.0),
    hi=(1.0, 1.0, 1.0),
    resolution=(2, 2, 2),
    density: float = 1000.0,
) -> TetMesh:
    """Axis-aligned box on a regular grid, each cell split into 6 tets.

    The per-cell split follows the lattice (Freudenthal) pattern, which is
    conforming across neighboring cells without parity tricks.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    nx, ny, nz = (int(r) for r in resolution)
    xs = np.linspace(lo[0], hi[0], nx + 1)
    ys = np.linspace(lo[1], hi[1], ny + 1)
    zs = np.linspace(lo[2], hi[2], nz + 1)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    # six tets around the main diagonal of each cell, one per axis permutation
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                base = np.array([i, j, k])
                for perm in perms:
                    steps = [base.copy()]
                    for axis in perm:
                        nxt = steps[-1].copy()
                        nxt[axis] += 1
                        steps.append(nxt)
                    tets.append([vid(*s) for s in steps])
    tets = np.array(tets, dtype=np.int64)
    return TetMesh(verts, _orient_positive(verts, tets), density=density)


def _orient_positive(verts: NDArray[np.float64], tets: NDArray[np.int64]) -> NDArray[np.int64]:
    """Swap two vertices of any negatively oriented tet."""
    v = verts[tets]
    e = v[:, 1:] - v[:, :1]
    vol = np.einsum("ti,ti->t", e[:, 0], np.cross(e[:, 1], e[:, 2]))
    flipped = tets.copy()
    neg = vol < 0
    flipped[neg, 2], flipped[neg, 3] = tets[neg, 3], tets[neg, 2]
    return flipped


def excise_tets(mesh: TetMesh, drop_mask) -> TetMesh:
    """Remove the masked tets and compact orphaned vertices.

    Retained vertices keep their exact coordinate bit patterns, which is what
    makes basis caches reusable across excision events.
    """
    drop_mask = np.asarray(drop_mask, dtype=bool)
    if drop_mask.shape != (mesh.n_tets,):
        raise ValidationError("drop mask length must equal tet count")
    keep_tets = mesh.tets[~drop_mask]
    if keep_tets.size == 0:
        raise ValidationError("excision would remove the entire mesh")
    used = np.unique(keep_tets)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    tags = tuple(mesh.dirichlet_tags[i] for i in used)
    return TetMesh(mesh.vertices[used], remap[keep_tets], density=mesh.density, dirichlet_tags=tags)
