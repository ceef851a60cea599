"""Multi-task objective (overlap Dice loss + class-balanced weighted
cross-entropy + weight decay) and a minimal 2.5D per-voxel linear classifier
trained with it.

The classifier is a single convolution bank: ``stack_depth`` neighbouring
short-axis slices form the input channels of a k x k in-plane kernel shared
across slices, producing 12 logits per voxel (5 tissue classes + 7 landmark
classes, softmaxed per task). Gradients are hand-derived so they stay
checkable against finite differences.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volgrid import (
    LANDMARK_CLASS_COUNT,
    LANDMARK_NAMES,
    LabelGrid,
    LandmarkSet,
    ProbGrid,
    SEG_CLASS_COUNT,
    VolumeGrid,
    world_to_voxel,
)

LOG_CLAMP = 1e-12


@dataclass
class LossWeights:
    alpha: float = 0.8
    beta: float = 5e-5
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


# ---------------------------------------------------------------------------
# softmax

def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Numerically stabilised per-voxel softmax over the channel axis (0)."""
    if logits.shape[0] < 2:
        raise ValueError("softmax needs at least 2 channels")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_prob_grid(logits: ProbGrid) -> ProbGrid:
    p = softmax_channels(logits.probs.astype(np.float64))
    return ProbGrid(p.astype(np.float32), logits.spacing, logits.origin)


def softmax_backward(p: np.ndarray, dloss_dp: np.ndarray) -> np.ndarray:
    """Route a probability-space gradient through the softmax Jacobian."""
    inner = np.sum(p * dloss_dp, axis=0, keepdims=True)
    return p * (dloss_dp - inner)


# ---------------------------------------------------------------------------
# losses

def _indicator_sums(p: np.ndarray, labels: np.ndarray):
    """Per-class numerator/denominator pieces of the overlap loss."""
    C = p.shape[0]
    num = np.empty(C)
    cnt = np.empty(C)
    for k in range(C):
        mask = labels == k
        cnt[k] = mask.sum()
        num[k] = 2.0 * p[k][mask].sum()
    sq = (p.astype(np.float64) ** 2).sum(axis=(1, 2, 3))
    return num, cnt, sq


def dice_loss(p: ProbGrid, r: LabelGrid, epsilon: float = 1e-8) -> float:
    """Differentiable multi-class Dice loss, summed over all classes
    (background included): minus one per perfectly predicted class."""
    if p.dims != r.dims:
        raise ValueError(f"shape mismatch: probs {p.dims} vs labels {r.dims}")
    if p.channels != r.class_count:
        raise ValueError(
            f"channel mismatch: {p.channels} probs vs {r.class_count} classes"
        )
    num, cnt, sq = _indicator_sums(p.probs.astype(np.float64), r.labels)
    return float(-(num / (cnt + sq + epsilon)).sum())


def dice_loss_grad(p: ProbGrid, r: LabelGrid, epsilon: float = 1e-8) -> np.ndarray:
    """Analytic d(dice_loss)/d p_jk via the quotient rule; shape like p.probs."""
    if p.dims != r.dims or p.channels != r.class_count:
        raise ValueError("shape mismatch between probs and labels")
    probs = p.probs.astype(np.float64)
    num, cnt, sq = _indicator_sums(probs, r.labels)
    den = cnt + sq + epsilon
    grad = np.empty_like(probs)
    for k in range(p.channels):
        mask = (r.labels == k).astype(np.float64)
        grad[k] = -(2.0 * mask * den[k] - num[k] * 2.0 * probs[k]) / (den[k] ** 2)
    return grad


def class_weights(l: LabelGrid) -> np.ndarray:
    """Class-balancing weights w_k = 1 - |Y_k| / |Y| over all classes."""
    total = l.labels.size
    counts = np.bincount(l.labels.reshape(-1), minlength=l.class_count).astype(
        np.float64
    )
    return 1.0 - counts / total


def weighted_ce_loss(p: ProbGrid, l: LabelGrid) -> float:
    """Class-balanced weighted categorical cross-entropy; log clamped at 1e-12."""
    if p.dims != l.dims:
        raise ValueError(f"shape mismatch: probs {p.dims} vs labels {l.dims}")
    if p.channels != l.class_count:
        raise ValueError(
            f"channel mismatch: {p.channels} probs vs {l.class_count} classes"
        )
    w = class_weights(l)
    probs = p.probs.astype(np.float64)
    loss = 0.0
    for k in range(p.channels):
        mask = l.labels == k
        if mask.any():
            loss -= w[k] * np.log(np.maximum(probs[k][mask], LOG_CLAMP)).sum()
    return float(loss)


def weighted_ce_grad(p: ProbGrid, l: LabelGrid) -> np.ndarray:
    """Analytic d(weighted_ce_loss)/d p_jk: -w_k / p_jk on class-k voxels,
    zero in the clamped region (the clamped log is constant there)."""
    if p.dims != l.dims or p.channels != l.class_count:
        raise ValueError("shape mismatch between probs and labels")
    w = class_weights(l)
    probs = p.probs.astype(np.float64)
    grad = np.zeros_like(probs)
    for k in range(p.channels):
        mask = l.labels == k
        pk = probs[k][mask]
        g = np.where(pk > LOG_CLAMP, -w[k] / np.maximum(pk, LOG_CLAMP), 0.0)
        grad[k][mask] = g
    return grad


# ---------------------------------------------------------------------------
# toy 2.5D classifier

@dataclass
class ToyModel:
    """Single linear convolution bank over a 2.5D slice stack.

    kernel: (out_channels, stack_depth, k, k) with out_channels fixed to
    seg_classes + lmk_classes = 12; bias: (out_channels,).
    """

    kernel: np.ndarray
    bias: np.ndarray
    seg_classes: int = SEG_CLASS_COUNT
    lmk_classes: int = LANDMARK_CLASS_COUNT

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        out = self.seg_classes + self.lmk_classes
        if self.kernel.ndim != 4 or self.kernel.shape[0] != out:
            raise ValueError(
                f"kernel must be ({out}, stack_depth, k, k), got {self.kernel.shape}"
            )
        if self.kernel.shape[2] != self.kernel.shape[3]:
            raise ValueError("in-plane kernel must be square")
        if self.bias.shape != (out,):
            raise ValueError(f"bias must have shape ({out},), got {self.bias.shape}")
        if not (np.all(np.isfinite(self.kernel)) and np.all(np.isfinite(self.bias))):
            raise ValueError("model parameters must be finite")

    @property
    def stack_depth(self) -> int:
        return self.kernel.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]

    def frobenius_sq(self) -> float:
        return float((self.kernel**2).sum() + (self.bias**2).sum())

    @staticmethod
    def init_random(
        seed: int, stack_depth: int = 3, kernel_size: int = 5, init_scale: float = 0.01
    ) -> "ToyModel":
        rng = np.random.default_rng(seed)
        out = SEG_CLASS_COUNT + LANDMARK_CLASS_COUNT
        kernel = rng.normal(0.0, init_scale, size=(out, stack_depth, kernel_size, kernel_size))
        bias = np.zeros(out)
        return ToyModel(kernel, bias)


def slice_stack(vox: np.ndarray, depth: int) -> np.ndarray:
    """(depth, nx, ny, nz) stack: channel s of slice z is slice z + s - depth//2,
    clamped at the stack ends."""
    nz = vox.shape[2]
    half = depth // 2
    idx = np.clip(np.arange(depth)[:, None] + np.arange(nz)[None, :] - half, 0, nz - 1)
    return vox[:, :, idx].transpose(2, 0, 1, 3)


def unfold_patches(vox: np.ndarray, stack_depth: int, kernel_size: int) -> np.ndarray:
    """(n_voxels, stack_depth*k*k) input patch per voxel, float32.

    Column order matches kernel.reshape(out, -1): (slice offset, du, dv)
    C-order. In-plane taps are zero-padded; the through-plane stack clamps.
    One unfold per volume is the whole convolution workload - forward and
    kernel gradient reduce to single matmuls against this matrix.
    """
    stack = slice_stack(vox.astype(np.float32), stack_depth)
    s, nx, ny, nz = stack.shape
    r = kernel_size // 2
    padded = np.zeros((s, nx + 2 * r, ny + 2 * r, nz), dtype=np.float32)
    padded[:, r : r + nx, r : r + ny, :] = stack
    cols = np.empty((s, kernel_size, kernel_size, nx, ny, nz), dtype=np.float32)
    for du in range(kernel_size):
        for dv in range(kernel_size):
            cols[:, du, dv] = padded[:, du : du + nx, dv : dv + ny, :]
    return cols.reshape(s * kernel_size * kernel_size, -1).T.copy()


def _logits_from_patches(model: ToyModel, patches: np.ndarray, dims) -> np.ndarray:
    wf = model.kernel.reshape(model.kernel.shape[0], -1).astype(np.float32)
    flat = patches @ wf.T + model.bias.astype(np.float32)
    return flat.T.reshape(model.kernel.shape[0], *dims).astype(np.float64)


def forward_logits(model: ToyModel, v: VolumeGrid) -> np.ndarray:
    """(12, nx, ny, nz) per-voxel logits (zero-padded in-plane correlation)."""
    patches = unfold_patches(v.voxels, model.stack_depth, model.kernel_size)
    return _logits_from_patches(model, patches, v.dims)


def _kernel_grad_from_patches(model: ToyModel, patches: np.ndarray, dlogits: np.ndarray):
    out = model.kernel.shape[0]
    g_flat = dlogits.reshape(out, -1).astype(np.float32) @ patches
    gk = g_flat.reshape(model.kernel.shape).astype(np.float64)
    gb = dlogits.sum(axis=(1, 2, 3))
    return gk, gb


def predict(model: ToyModel, v: VolumeGrid) -> tuple[ProbGrid, ProbGrid]:
    """Forward pass + per-task softmax: (segmentation probs, landmark probs)."""
    logits = forward_logits(model, v)
    ns = model.seg_classes
    seg = softmax_channels(logits[:ns])
    lmk = softmax_channels(logits[ns:])
    return (
        ProbGrid(seg.astype(np.float32), v.spacing, v.origin),
        ProbGrid(lmk.astype(np.float32), v.spacing, v.origin),
    )


def total_loss(model: ToyModel, batch, w: LossWeights) -> float:
    """L_D + alpha * L_L + beta * ||W||_F^2 summed over the batch."""
    loss = w.beta * model.frobenius_sq()
    for vol, seg_labels, lmk_labels in batch:
        seg_p, lmk_p = predict(model, vol)
        loss += dice_loss(seg_p, seg_labels, w.epsilon)
        loss += w.alpha * weighted_ce_loss(lmk_p, lmk_labels)
    return float(loss)


def _sample_grads(model: ToyModel, vol, patches, seg_labels, lmk_labels, w: LossWeights):
    """Parameter gradients of (dice + alpha*CE) for one sample, plus the losses."""
    logits = _logits_from_patches(model, patches, vol.dims)
    ns = model.seg_classes
    seg_p = softmax_channels(logits[:ns])
    lmk_p = softmax_channels(logits[ns:])
    seg_grid = ProbGrid(seg_p.astype(np.float32), vol.spacing, vol.origin)
    lmk_grid = ProbGrid(lmk_p.astype(np.float32), vol.spacing, vol.origin)
    ld = dice_loss(seg_grid, seg_labels, w.epsilon)
    ll = weighted_ce_loss(lmk_grid, lmk_labels)
    dlogits = np.zeros_like(logits)
    dlogits[:ns] = softmax_backward(seg_p, dice_loss_grad(seg_grid, seg_labels, w.epsilon))
    if w.alpha != 0.0:
        dlogits[ns:] = w.alpha * softmax_backward(
            lmk_p, weighted_ce_grad(lmk_grid, lmk_labels)
        )
    gk, gb = _kernel_grad_from_patches(model, patches, dlogits)
    return gk, gb, ld, ll


@dataclass
class EpochStats:
    epoch: int
    dice: float
    landmark: float
    regulariser: float
    total: float


@dataclass
class TrainResult:
    model: ToyModel
    trace: list[EpochStats] = field(default_factory=list)


def write_loss_trace(trace: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_D", "L_L", "regulariser", "total"])
        for row in trace:
            writer.writerow([row.epoch, row.dice, row.landmark, row.regulariser, row.total])


def train_toy(
    samples,
    w: LossWeights,
    epochs: int,
    lr: float,
    seed: int,
    optimizer: str = "adam",
    stack_depth: int = 3,
    kernel_size: int = 5,
    trace_path=None,
) -> TrainResult:
    """Train the toy classifier with per-sample stochastic updates.

    samples: list of (VolumeGrid, LabelGrid, LabelGrid) where the second
    label grid holds the 7 landmark classes. One epoch is one fixed-order
    pass over the samples; identical seeds give bit-identical weights.
    Aborts with diagnostics if the loss goes non-finite.
    """
    if not samples:
        raise ValueError("need at least one training sample")
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    for vol, seg_labels, lmk_labels in samples:
        if not (vol.same_geometry(seg_labels) and vol.same_geometry(lmk_labels)):
            raise ValueError("training sample geometry mismatch")
    model = ToyModel.init_random(seed, stack_depth, kernel_size)
    patch_cache = [
        unfold_patches(vol.voxels, stack_depth, kernel_size) for vol, _, _ in samples
    ]
    mk = np.zeros_like(model.kernel)
    vk = np.zeros_like(model.kernel)
    mb = np.zeros_like(model.bias)
    vb = np.zeros_like(model.bias)
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    trace: list[EpochStats] = []
    for epoch in range(epochs):
        sum_ld = sum_ll = 0.0
        for (vol, seg_labels, lmk_labels), patches in zip(samples, patch_cache):
            gk, gb, ld, ll = _sample_grads(model, vol, patches, seg_labels, lmk_labels, w)
            sum_ld += ld
            sum_ll += ll
            gk = gk + 2.0 * w.beta * model.kernel
            gb = gb + 2.0 * w.beta * model.bias
            step += 1
            if optimizer == "adam":
                mk = b1 * mk + (1 - b1) * gk
                vk = b2 * vk + (1 - b2) * gk**2
                mb = b1 * mb + (1 - b1) * gb
                vb = b2 * vb + (1 - b2) * gb**2
                c1 = 1 - b1**step
                c2 = 1 - b2**step
                kernel = model.kernel - lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
                bias = model.bias - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
            else:
                kernel = model.kernel - lr * gk
                bias = model.bias - lr * gb
            model = ToyModel(kernel, bias, model.seg_classes, model.lmk_classes)
        reg = w.beta * model.frobenius_sq()
        total = sum_ld + w.alpha * sum_ll + reg
        if not np.isfinite(total):
            raise FloatingPointError(
                f"training diverged at epoch {epoch}: "
                f"L_D={sum_ld} L_L={sum_ll} reg={reg}"
            )
        trace.append(EpochStats(epoch, sum_ld, sum_ll, reg, total))
    if trace_path is not None:
        write_loss_trace(trace, trace_path)
    return TrainResult(model, trace)


# ---------------------------------------------------------------------------
# landmark rasterisation

def rasterize_landmarks(lm: LandmarkSet, geom) -> LabelGrid:
    """Single-voxel landmark label grid (class k = 1-based landmark index).

    Raises if two landmarks round to the same voxel or one falls outside the
    grid: the invariant is exactly one voxel per landmark class.
    """
    nx, ny, nz = geom.dims
    labels = np.zeros(geom.dims, dtype=np.uint8)
    taken: dict[tuple[int, int, int], str] = {}
    for k, name in enumerate(LANDMARK_NAMES, start=1):
        vox = world_to_voxel(geom, np.array(lm.points[name]))
        ijk = tuple(int(i) for i in np.rint(vox))
        if not (0 <= ijk[0] < nx and 0 <= ijk[1] < ny and 0 <= ijk[2] < nz):
            raise ValueError(f"landmark {name!r} at voxel {ijk} is outside {geom.dims}")
        if ijk in taken:
            raise ValueError(f"landmarks {taken[ijk]!r} and {name!r} collide at voxel {ijk}")
        taken[ijk] = name
        labels[ijk] = k
    return LabelGrid(labels, geom.spacing, geom.origin, class_count=LANDMARK_CLASS_COUNT)


# ---------------------------------------------------------------------------
# model container I/O (MGRID-style header + f32 payload)

def save_model(model: ToyModel, path) -> None:
    header = {
        "magic": "MGRID",
        "version": 1,
        "kind": "toymodel",
        "kernel_shape": list(model.kernel.shape),
        "seg_classes": model.seg_classes,
        "lmk_classes": model.lmk_classes,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(model.kernel.astype("<f4").tobytes())
        fh.write(model.bias.astype("<f4").tobytes())


def load_model(path) -> ToyModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("magic") != "MGRID" or header.get("kind") != "toymodel":
            raise ValueError(f"not a toy model file: {path}")
        shape = tuple(header["kernel_shape"])
        count = int(np.prod(shape))
        kernel = np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(shape)
        bias = np.frombuffer(fh.read(shape[0] * 4), dtype="<f4")
    return ToyModel(
        kernel.astype(np.float64),
        bias.astype(np.float64),
        int(header["seg_classes"]),
        int(header["lmk_classes"]),
    )
