"""Joint optimization of the displacement basis and the set encoder.

The objective is the reconstruction loss

    L = sum_j sum_i | W(X_i^j) q_j - u_i^j |_2,   q_j = P(S(frame_j)),

summed over frames j and all points i of each frame: the encoder sees only
the deterministic subsample S of a frame while every point contributes a
reconstruction residual. The per-point norm is unsquared by default; a
squared variant sits behind ``TrainConfig.squared_loss``.

Optimization is Adam with a fixed two-drop schedule: the base learning rate
is divided by 5 after epoch 1250 and by a further factor 10 from epoch 2500.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np
from numpy.typing import NDArray

from .dataset import Frame, SnapshotSet, SubsampleSpec, subsample
from .errors import DivergenceError, ValidationError
from .networks import Encoder, NeuralBasis, save_checkpoint

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3750
    base_lr: float = 1e-3
    # successive divisors: /5 from epoch 1250, a further /10 from epoch 2500
    lr_drops: tuple[tuple[int, float], ...] = ((1250, 5.0), (2500, 10.0))
    batch_frames: int = 16
    encoder_samples: int = 2500
    latent_dim: int = 20
    seed: int = 0
    checkpoint_every: int = 0  # 0: no intermediate checkpoints
    squared_loss: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_frames < 1 or self.base_lr <= 0:
            raise ValidationError("epochs and batch_frames must be >= 1, base_lr > 0")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Exact schedule value at a (0-based) epoch; drop factors compound."""
    lr = cfg.base_lr
    for threshold, factor in cfg.lr_drops:
        if epoch >= threshold:
            lr /= factor
    return lr


@dataclass
class AdamState:
    """First/second moment estimates for one flat parameter vector."""

    m: NDArray[np.float64]
    v: NDArray[np.float64]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(m=np.zeros(n), v=np.zeros(n))


def adam_step(
    params: NDArray[np.float64], grads: NDArray[np.float64], state: AdamState, lr: float
) -> None:
    """Standard bias-corrected Adam update, in place and deterministic."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValidationError("parameter/gradient/moment lengths disagree")
    if not np.all(np.isfinite(grads)):
        bad = int(np.nonzero(~np.isfinite(grads))[0][0])
        raise DivergenceError(f"non-finite gradient at parameter {bad} (step {state.step})")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def _frame_terms(
    frames: list[Frame],
    basis: NeuralBasis,
    enc: Encoder,
    spec: SubsampleSpec,
    squared: bool,
    with_grads: bool,
):
    """Loss and (optionally) parameter gradients for a batch of frames."""
    total = 0.0
    basis_grad = np.zeros_like(basis.params.values) if with_grads else None
    enc_grad = np.zeros_like(enc.params.values) if with_grads else None

    points = np.concatenate([f.positions for f in frames], axis=0)
    W_all, basis_cache = basis.evaluate_with_cache(points)
    upstream_W = np.zeros_like(W_all) if with_grads else None

    offset = 0
    for f in frames:
        n = len(f)
        sub = subsample(f, spec)
        q, enc_cache = enc.encode_with_cache(
            np.concatenate([sub.positions, sub.displacements], axis=1)
        )
        W = W_all[offset : offset + n]
        res = W @ q - f.displacements
        norms = np.linalg.norm(res, axis=1)
        if squared:
            total += float(np.dot(norms, norms))
            dres = 2.0 * res
        else:
            total += float(norms.sum())
            safe = np.where(norms > 0, norms, 1.0)
            dres = res / safe[:, None]
        if with_grads:
            upstream_W[offset : offset + n] = dres[:, :, None] * q[None, None, :]
            dq = np.einsum("nij,ni->j", W, dres)
            enc_grad += enc.backward(enc_cache, dq)
        offset += n

    if with_grads:
        basis_grad += basis.backward(basis_cache, upstream_W)
    return total, basis_grad, enc_grad


def loss(
    frames: list[Frame],
    basis: NeuralBasis,
    enc: Encoder,
    spec: SubsampleSpec,
    squared: bool = False,
) -> float:
    """Reconstruction loss of a frame batch (no gradients)."""
    value, _, _ = _frame_terms(frames, basis, enc, spec, squared, with_grads=False)
    return value


def fit(
    dataset: SnapshotSet,
    cfg: TrainConfig,
    checkpoint_path=None,
    metrics_path=None,
    resume=None,
    log_every: int = 0,
):
    """Train basis and encoder on a snapshot set.

    Returns (basis, encoder, metrics) where metrics is a list of per-epoch
    records {"epoch", "lr", "loss", "seconds"}. ``resume`` accepts a
    Checkpoint with optimizer blocks; the epoch counter and schedule continue
    where it left off. Checkpoints (``checkpoint_path``) and newline-delimited
    JSON metrics (``metrics_path``) are written incrementally when requested.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot fit on an empty dataset")
    if cfg.encoder_samples > dataset.cardinality:
        raise ValidationError(
            f"encoder_samples {cfg.encoder_samples} exceeds frame cardinality {dataset.cardinality}"
        )

    start_epoch = 0
    if resume is not None:
        basis, enc = resume.basis, resume.encoder
        if enc is None:
            raise ValidationError("resume checkpoint lacks encoder parameters")
        if basis.r != cfg.latent_dim:
            raise ValidationError("resume checkpoint latent dimension disagrees with config")
        start_epoch = int(resume.train_meta.get("next_epoch", 0))
        basis_adam = AdamState.zeros(len(basis.params.values))
        enc_adam = AdamState.zeros(len(enc.params.values))
        blocks = resume.extra_blocks
        if "adam.basis.m" in blocks:
            basis_adam.m = blocks["adam.basis.m"].copy()
            basis_adam.v = blocks["adam.basis.v"].copy()
            basis_adam.step = int(resume.train_meta.get("adam_step", 0))
            enc_adam.m = blocks["adam.encoder.m"].copy()
            enc_adam.v = blocks["adam.encoder.v"].copy()
            enc_adam.step = basis_adam.step
    else:
        basis = NeuralBasis.create(cfg.latent_dim, seed=cfg.seed)
        enc = Encoder.create(cfg.latent_dim, seed=cfg.seed + 1)
        basis_adam = AdamState.zeros(len(basis.params.values))
        enc_adam = AdamState.zeros(len(enc.params.values))

    spec = SubsampleSpec(count=cfg.encoder_samples, seed=cfg.seed)
    metrics: list[dict] = []
    metrics_file = open(metrics_path, "a") if metrics_path else None

    def write_ck(epoch_next: int):
        if checkpoint_path is None:
            return
        save_checkpoint(
            checkpoint_path,
            basis,
            enc,
            train_meta={
                "next_epoch": epoch_next,
                "adam_step": basis_adam.step,
                "config": asdict(cfg),
            },
            extra_blocks={
                "adam.basis.m": basis_adam.m,
                "adam.basis.v": basis_adam.v,
                "adam.encoder.m": enc_adam.m,
                "adam.encoder.v": enc_adam.v,
            },
        )

    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            lr = learning_rate(cfg, epoch)
            order = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, epoch])
            ).permutation(len(dataset))
            epoch_loss = 0.0
            for lo in range(0, len(order), cfg.batch_frames):
                batch = [dataset.frames[i] for i in order[lo : lo + cfg.batch_frames]]
                value, bg, eg = _frame_terms(
                    batch, basis, enc, spec, cfg.squared_loss, with_grads=True
                )
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                epoch_loss += value
                adam_step(basis.params.values, bg, basis_adam, lr)
                adam_step(enc.params.values, eg, enc_adam, lr)
            record = {
                "epoch": epoch,
                "lr": lr,
                "loss": epoch_loss / len(dataset),
                "seconds": time.perf_counter() - t0,
            }
            metrics.append(record)
            if metrics_file:
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
            if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
                print(f"epoch {epoch}: lr={lr:g} loss={record['loss']:.6g}")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                write_ck(epoch + 1)
        write_ck(cfg.epochs)
    finally:
        if metrics_file:
            metrics_file.close()
    return basis, enc, metrics
