"""Training-set construction and the ``LCRS`` snapshot container.

A snapshot set is an unordered collection of per-frame displacement samples:
each frame holds exactly ``n`` (reference position, displacement) pairs drawn
uniformly without replacement from a simulated state. Frames from different
meshes may coexist in one set; nothing couples frames beyond the shared
cardinality.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import FormatError, ValidationError

LCRS_MAGIC = b"LCRS"
LCRS_VERSION = 1


def frame_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Deterministic per-frame generator derived from (seed, frame index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


@dataclass(frozen=True)
class Frame:
    """One observation of the displacement field at time t."""

    t: float
    positions: NDArray[np.float64]
    displacements: NDArray[np.float64]
    mesh_id: str = ""

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        u = np.ascontiguousarray(np.asarray(self.displacements, dtype=np.float64))
        if X.shape != u.shape or X.ndim != 2 or X.shape[1] != 3:
            raise ValidationError(f"frame arrays must both be (n, 3), got {X.shape} / {u.shape}")
        object.__setattr__(self, "positions", X)
        object.__setattr__(self, "displacements", u)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class SnapshotSet:
    """Uniform-cardinality collection of frames plus provenance metadata.

    metadata keys in use: "mesh_ids", "load_id", "seed", "bbox" (optional
    [[min], [max]] reference bounding box checked against every frame).
    """

    frames: list[Frame]
    cardinality: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, f in enumerate(self.frames):
            if len(f) != self.cardinality:
                raise ValidationError(
                    f"frame {k} has {len(f)} points, expected cardinality {self.cardinality}"
                )
        bbox = self.metadata.get("bbox")
        if bbox is not None:
            lo = np.asarray(bbox[0], dtype=np.float64) - 1e-9
            hi = np.asarray(bbox[1], dtype=np.float64) + 1e-9
            for k, f in enumerate(self.frames):
                if len(f) and (np.any(f.positions < lo) or np.any(f.positions > hi)):
                    raise ValidationError(f"frame {k} has points outside the declared bbox")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class SubsampleSpec:
    """Encoder-side subsampling operator: keep ``count`` of a frame's points."""

    count: int
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValidationError("subsample count must be >= 1")


def sample_frame(mesh, state, n: int, seed: int, index: int = 0, mesh_id: str = "") -> Frame:
    """Sample ``n`` distinct vertices uniformly without replacement.

    ``state`` needs ``.u`` (per-vertex displacements) and ``.t``; the draw is
    deterministic in (seed, index).
    """
    total = mesh.n_vertices
    if n > total:
        raise ValidationError(f"cannot sample {n} of {total} vertices without replacement")
    rng = frame_rng(seed, index)
    chosen = rng.choice(total, size=n, replace=False)
    return Frame(
        t=float(state.t),
        positions=mesh.vertices[chosen],
        displacements=np.asarray(state.u, dtype=np.float64)[chosen],
        mesh_id=mesh_id,
    )


def subsample(frame: Frame, spec: SubsampleSpec) -> Frame:
    """Deterministic ``spec.count``-point subset of a frame, in frame order.

    Selecting every point returns the frame unchanged.
    """
    if spec.count > len(frame):
        raise ValidationError(f"subsample count {spec.count} exceeds frame size {len(frame)}")
    rng = frame_rng(spec.seed)
    chosen = np.sort(rng.choice(len(frame), size=spec.count, replace=False))
    return Frame(
        t=frame.t,
        positions=frame.positions[chosen],
        displacements=frame.displacements[chosen],
        mesh_id=frame.mesh_id,
    )


def save_set(sset: SnapshotSet, path) -> None:
    """Write the versioned ``LCRS`` container (little-endian f64)."""
    meta = dict(sset.metadata)
    meta["cardinality"] = sset.cardinality
    meta["frame_mesh_ids"] = [f.mesh_id for f in sset.frames]
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(LCRS_MAGIC)
        f.write(struct.pack("<I", LCRS_VERSION))
        f.write(struct.pack("<Q", len(sset.frames)))
        for fr in sset.frames:
            f.write(struct.pack("<dQ", fr.t, len(fr)))
            f.write(fr.positions.astype("<f8").tobytes())
            f.write(fr.displacements.astype("<f8").tobytes())
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)


def load_set(path) -> SnapshotSet:
    """Read an ``LCRS`` container; truncation fails closed (no partial set)."""
    data = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"{path}: truncated at offset {off} reading {what}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != LCRS_MAGIC:
        raise FormatError(f"{path}: bad magic, not an LCRS container")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != LCRS_VERSION:
        raise FormatError(f"{path}: unsupported LCRS version {version}")
    (n_frames,) = struct.unpack("<Q", take(8, "frame count"))
    raw = []
    for k in range(n_frames):
        t, n = struct.unpack("<dQ", take(16, f"frame {k} header"))
        X = np.frombuffer(take(24 * n, f"frame {k} positions"), dtype="<f8").reshape(n, 3)
        u = np.frombuffer(take(24 * n, f"frame {k} displacements"), dtype="<f8").reshape(n, 3)
        raw.append((t, X.copy(), u.copy()))
    (blob_len,) = struct.unpack("<Q", take(8, "metadata length"))
    meta = json.loads(take(blob_len, "metadata").decode("utf-8"))
    mesh_ids = meta.pop("frame_mesh_ids", [""] * n_frames)
    cardinality = meta.pop("cardinality", len(raw[0][1]) if raw else 0)
    frames = [
        Frame(t=t, positions=X, displacements=u, mesh_id=mid)
        for (t, X, u), mid in zip(raw, mesh_ids)
    ]
    return SnapshotSet(frames=frames, cardinality=cardinality, metadata=meta)
