"""The two learnable functions and their exact hand-rolled gradients.

* :class:`NeuralBasis` -- a coordinate MLP mapping a reference point X to the
  3 x r matrix of continuous basis displacements (5 weight layers of width 60,
  ELU on the hidden activations, linear biased output).
* :class:`Encoder` -- a permutation-invariant set encoder: a shared per-point
  MLP on (X, u) pairs, an exact max-pool over points, and a small head
  producing the latent code q.

Everything runs in float64. Reverse-mode gradients are implemented directly
(no autodiff framework); they are exact up to floating-point rounding and are
validated against finite differences in the test suite.

Checkpoints use the ``LCRW`` container: a JSON layout header followed by flat
little-endian f64 parameter blocks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import FormatError, ValidationError

LCRW_MAGIC = b"LCRW"
LCRW_VERSION = 1

BASIS_WIDTH = 60
BASIS_HIDDEN_LAYERS = 4  # 4 ELU activations -> 5 weight layers
ENCODER_POINT_DIMS = (6, 64, 128, 256)
ENCODER_HEAD_WIDTH = 128


def elu(x):
    """ELU activation: x for x > 0, exp(x) - 1 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


def elu_derivative(x):
    """d elu / dx; continuous at 0 (both one-sided limits equal 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Flat parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Names, shapes and offsets of the segments of a flat parameter vector."""

    segments: tuple[tuple[str, tuple[int, ...], int], ...]
    total: int

    @staticmethod
    def for_mlp(dims, prefix: str = "") -> "ParamLayout":
        segments = []
        offset = 0
        for layer, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            segments.append((f"{prefix}w{layer}", (d_out, d_in), offset))
            offset += d_out * d_in
            segments.append((f"{prefix}b{layer}", (d_out,), offset))
            offset += d_out
        return ParamLayout(segments=tuple(segments), total=offset)

    @staticmethod
    def concat(layouts: list["ParamLayout"]) -> "ParamLayout":
        segments = []
        offset = 0
        for lay in layouts:
            for name, shape, off in lay.segments:
                segments.append((name, shape, off + offset))
            offset += lay.total
        return ParamLayout(segments=tuple(segments), total=offset)


@dataclass
class ParamVector:
    """A flat float64 array plus its layout; views round-trip by construction."""

    layout: ParamLayout
    values: NDArray[np.float64]

    def __post_init__(self):
        self.values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if self.values.shape != (self.layout.total,):
            raise ValidationError(
                f"parameter vector length {self.values.shape} != layout total {self.layout.total}"
            )

    def view(self, name: str) -> NDArray[np.float64]:
        for seg_name, shape, offset in self.layout.segments:
            if seg_name == name:
                size = int(np.prod(shape))
                return self.values[offset : offset + size].reshape(shape)
        raise KeyError(name)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(dims, seed: int, prefix: str = "") -> ParamVector:
    """Xavier-uniform weights, zero biases; deterministic per seed."""
    layout = ParamLayout.for_mlp(dims, prefix)
    values = np.zeros(layout.total)
    pv = ParamVector(layout=layout, values=values)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), len(dims)]))
    for layer, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        b = xavier_bound(d_in, d_out)
        pv.view(f"{prefix}w{layer}")[:] = rng.uniform(-b, b, size=(d_out, d_in))
    return pv


# ---------------------------------------------------------------------------
# Shared MLP forward/backward on flat parameter slices
# ---------------------------------------------------------------------------


def _mlp_forward(
    dims, params: NDArray[np.float64], x: NDArray[np.float64], final_linear=True,
    batch_invariant=False,
):
    """Returns (output, cache); x is (n, dims[0]).

    With ``batch_invariant`` the affine maps run through einsum's fixed-order
    reduction, which makes each row's result independent of the batch it was
    computed in (BLAS matmul does not guarantee that). Slower; used where
    bitwise reproducibility across batch groupings is part of the contract.
    """
    cache = []
    h = x
    offset = 0
    n_layers = len(dims) - 1
    for layer, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = params[offset : offset + d_out * d_in].reshape(d_out, d_in)
        offset += d_out * d_in
        b = params[offset : offset + d_out]
        offset += d_out
        if batch_invariant:
            pre = np.einsum("ni,oi->no", h, w) + b
        else:
            pre = h @ w.T + b
        last = layer == n_layers - 1
        out = pre if (last and final_linear) else elu(pre)
        cache.append((h, pre))
        h = out
    return h, cache


def _mlp_backward(dims, params, cache, upstream, final_linear=True):
    """Returns (flat param gradient, input gradient)."""
    n_layers = len(dims) - 1
    sizes = [(d_out * d_in, d_out) for d_in, d_out in zip(dims[:-1], dims[1:])]
    offsets = np.cumsum([0] + [w + b for w, b in sizes])
    grad = np.zeros(offsets[-1])
    d = upstream
    for layer in range(n_layers - 1, -1, -1):
        h, pre = cache[layer]
        if not (layer == n_layers - 1 and final_linear):
            d = d * elu_derivative(pre)
        d_in, d_out = dims[layer], dims[layer + 1]
        w = params[offsets[layer] : offsets[layer] + d_out * d_in].reshape(d_out, d_in)
        grad[offsets[layer] : offsets[layer] + d_out * d_in] = (d.T @ h).ravel()
        grad[offsets[layer] + d_out * d_in : offsets[layer + 1]] = d.sum(axis=0)
        d = d @ w
    return grad, d


# ---------------------------------------------------------------------------
# Neural displacement basis W(X)
# ---------------------------------------------------------------------------


@dataclass
class NeuralBasis:
    """Continuous basis field: W(X) is a 3 x r matrix for every X in Omega."""

    r: int
    params: ParamVector

    @property
    def dims(self) -> tuple[int, ...]:
        return (3,) + (BASIS_WIDTH,) * BASIS_HIDDEN_LAYERS + (3 * self.r,)

    @staticmethod
    def create(r: int, seed: int = 0) -> "NeuralBasis":
        if r < 1:
            raise ValidationError("latent dimension must be >= 1")
        dims = (3,) + (BASIS_WIDTH,) * BASIS_HIDDEN_LAYERS + (3 * r,)
        return NeuralBasis(r=r, params=init_params(dims, seed))

    def evaluate(self, X: NDArray[np.float64]) -> NDArray[np.float64]:
        """W at one or many points: (3,) -> (3, r); (n, 3) -> (n, 3, r)."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        pts = X.reshape(1, 3) if single else X
        out, _ = _mlp_forward(self.dims, self.params.values, pts)
        W = out.reshape(-1, 3, self.r)
        return W[0] if single else W

    def evaluate_invariant(self, X: NDArray[np.float64]) -> NDArray[np.float64]:
        """Like :meth:`evaluate`, but bitwise independent of batch grouping.

        Evaluating a point alone or inside any batch yields the identical bit
        pattern, which is what the cubature cache-coherence contract needs.
        """
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        pts = np.ascontiguousarray(X.reshape(-1, 3))
        out, _ = _mlp_forward(self.dims, self.params.values, pts, batch_invariant=True)
        W = out.reshape(-1, 3, self.r)
        return W[0] if single else W

    def evaluate_with_cache(self, X: NDArray[np.float64]):
        out, cache = _mlp_forward(self.dims, self.params.values, np.atleast_2d(X))
        return out.reshape(-1, 3, self.r), cache

    def backward(self, cache, upstream: NDArray[np.float64]) -> NDArray[np.float64]:
        """Flat parameter gradient for upstream cotangents (n, 3, r)."""
        up = np.asarray(upstream, dtype=np.float64).reshape(-1, 3 * self.r)
        grad, _ = _mlp_backward(self.dims, self.params.values, cache, up)
        return grad

    def lipschitz_bound(self) -> float:
        """Product of spectral norms; valid since ELU is 1-Lipschitz."""
        bound = 1.0
        for layer in range(len(self.dims) - 1):
            bound *= np.linalg.norm(self.params.view(f"w{layer}"), 2)
        return float(bound)


def basis_eval(basis: NeuralBasis, X) -> NDArray[np.float64]:
    """W(X) as a 3 x r matrix (deterministic, pure)."""
    return basis.evaluate(np.asarray(X, dtype=np.float64))


def basis_backward(basis: NeuralBasis, X, upstream) -> NDArray[np.float64]:
    """Exact reverse-mode parameter gradient of sum(upstream * W(X))."""
    _, cache = basis.evaluate_with_cache(np.asarray(X, dtype=np.float64).reshape(1, 3))
    return basis.backward(cache, np.asarray(upstream, dtype=np.float64).reshape(1, 3, basis.r))


# ---------------------------------------------------------------------------
# Permutation-invariant encoder P
# ---------------------------------------------------------------------------


@dataclass
class Encoder:
    """PointNet-style set encoder without the input feature-transform stage."""

    r: int
    params: ParamVector

    @property
    def point_dims(self) -> tuple[int, ...]:
        return ENCODER_POINT_DIMS

    @property
    def head_dims(self) -> tuple[int, ...]:
        return (ENCODER_POINT_DIMS[-1], ENCODER_HEAD_WIDTH, self.r)

    @property
    def _split(self) -> int:
        return ParamLayout.for_mlp(self.point_dims).total

    @staticmethod
    def create(r: int, seed: int = 0) -> "Encoder":
        if r < 1:
            raise ValidationError("latent dimension must be >= 1")
        point = init_params(ENCODER_POINT_DIMS, seed, prefix="point.")
        head = init_params((ENCODER_POINT_DIMS[-1], ENCODER_HEAD_WIDTH, r), seed + 1, prefix="head.")
        layout = ParamLayout.concat([point.layout, head.layout])
        return Encoder(r=r, params=ParamVector(layout, np.concatenate([point.values, head.values])))

    def encode_with_cache(self, points: NDArray[np.float64]):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 6 or len(pts) == 0:
            raise ValidationError(f"encoder input must be a non-empty (n, 6) array, got {pts.shape}")
        split = self._split
        feats, point_cache = _mlp_forward(
            self.point_dims, self.params.values[:split], pts, final_linear=False
        )
        winners = np.argmax(feats, axis=0)
        pooled = feats[winners, np.arange(feats.shape[1])]
        q, head_cache = _mlp_forward(self.head_dims, self.params.values[split:], pooled[None, :])
        return q[0], (point_cache, head_cache, winners, feats.shape[0])

    def backward(self, cache, upstream_q: NDArray[np.float64]) -> NDArray[np.float64]:
        """Flat parameter gradient of dot(upstream_q, q)."""
        point_cache, head_cache, winners, n_points = cache
        split = self._split
        head_grad, d_pooled = _mlp_backward(
            self.head_dims,
            self.params.values[split:],
            head_cache,
            np.asarray(upstream_q, dtype=np.float64).reshape(1, self.r),
        )
        # max-pool routes each channel's gradient to its winning point
        d_feats = np.zeros((n_points, self.point_dims[-1]))
        d_feats[winners, np.arange(self.point_dims[-1])] = d_pooled[0]
        point_grad, _ = _mlp_backward(
            self.point_dims, self.params.values[:split], point_cache, d_feats, final_linear=False
        )
        return np.concatenate([point_grad, head_grad])


def encode(enc: Encoder, positions, displacements=None) -> NDArray[np.float64]:
    """Latent code q for an unordered frame.

    Accepts either a single (n, 6) array or separate (n, 3) position and
    displacement arrays. Exactly permutation-invariant by max-pool
    construction.
    """
    if displacements is None:
        pts = np.asarray(positions, dtype=np.float64)
    else:
        pts = np.concatenate(
            [np.asarray(positions, dtype=np.float64), np.asarray(displacements, dtype=np.float64)],
            axis=1,
        )
    q, _ = enc.encode_with_cache(pts)
    return q


# ---------------------------------------------------------------------------
# LCRW checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path,
    basis: NeuralBasis,
    encoder: Encoder | None = None,
    train_meta: dict | None = None,
    extra_blocks: dict[str, NDArray[np.float64]] | None = None,
) -> None:
    """Write basis (and optionally encoder/optimizer) parameters to LCRW."""
    blocks: list[tuple[str, NDArray[np.float64]]] = [("basis", basis.params.values)]
    if encoder is not None:
        blocks.append(("encoder", encoder.params.values))
    for name, arr in (extra_blocks or {}).items():
        blocks.append((name, np.asarray(arr, dtype=np.float64).ravel()))
    header = {
        "r": basis.r,
        "basis_dims": list(basis.dims),
        "encoder": encoder is not None,
        "train_meta": train_meta or {},
        "blocks": [{"name": name, "count": len(arr)} for name, arr in blocks],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(LCRW_MAGIC)
        f.write(struct.pack("<I", LCRW_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in blocks:
            f.write(arr.astype("<f8").tobytes())


@dataclass
class Checkpoint:
    basis: NeuralBasis
    encoder: Encoder | None
    train_meta: dict
    extra_blocks: dict[str, NDArray[np.float64]]


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"{path}: truncated at offset {off} reading {what}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != LCRW_MAGIC:
        raise FormatError(f"{path}: bad magic, not an LCRW checkpoint")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != LCRW_VERSION:
        raise FormatError(f"{path}: unsupported LCRW version {version}")
    (blob_len,) = struct.unpack("<Q", take(8, "header length"))
    header = json.loads(take(blob_len, "header").decode("utf-8"))
    r = int(header["r"])

    arrays = {}
    for block in header["blocks"]:
        count = int(block["count"])
        arrays[block["name"]] = np.frombuffer(
            take(8 * count, f"block {block['name']}"), dtype="<f8"
        ).copy()

    dims = (3,) + (BASIS_WIDTH,) * BASIS_HIDDEN_LAYERS + (3 * r,)
    if list(dims) != list(header["basis_dims"]):
        raise FormatError(f"{path}: unexpected basis architecture {header['basis_dims']}")
    basis = NeuralBasis(r=r, params=ParamVector(ParamLayout.for_mlp(dims), arrays.pop("basis")))
    encoder = None
    if header.get("encoder"):
        template = Encoder.create(r, seed=0)
        encoder = Encoder(r=r, params=ParamVector(template.params.layout, arrays.pop("encoder")))
    return Checkpoint(
        basis=basis,
        encoder=encoder,
        train_meta=header.get("train_meta", {}),
        extra_blocks=arrays,
    )
