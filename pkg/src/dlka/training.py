"""Loss, optimizer, metrics, synthetic data, and the training loop.

The loss is 0.6 * soft Dice + 0.4 * cross-entropy by default: cross-entropy
averages over voxels; soft Dice sums probabilities and one-hot labels over
batch and space, then averages the per-class score over all classes
(background included), with epsilon 1e-5 guarding empty classes.

Everything is deterministic given its seeds: dataset contents, the 80/20
split, per-epoch shuffles (a fresh generator keyed by [seed, epoch], so a
resumed run replays the same order), and parameter initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .autograd import backward
from .network import NetConfig, build_net
from .tensor import Tensor, ValidationError


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""


# -- loss ----------------------------------------------------------------------


def _log_softmax_channels(logits: Tensor) -> Tensor:
    # max-shift is constant w.r.t. the gradient: d/dx[x - m - lse(x - m)]
    # equals I - softmax either way, so detaching the shift is exact
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    return z - z.exp().sum(axes=(1,), keepdims=True).log()


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValidationError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    g = np.zeros((labels.shape[0], num_classes, *labels.shape[1:]))
    np.put_along_axis(g, labels[:, None].astype(np.int64), 1.0, axis=1)
    return g


def dice_ce_loss(logits: Tensor, labels: np.ndarray, w_dice: float = 0.6,
                 w_ce: float = 0.4, eps: float = 1e-5) -> Tensor:
    """Weighted sum of soft Dice loss and mean cross-entropy."""
    if logits.ndim < 3:
        raise ValidationError(f"logits must be (N, C, spatial...), got {logits.shape}")
    num_classes = logits.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ValidationError(
            f"labels shape {labels.shape} incompatible with logits {logits.shape}"
        )
    g = Tensor(one_hot(labels, num_classes).astype(logits.dtype))
    ls = _log_softmax_channels(logits)
    voxels = logits.size // num_classes
    ce = (g * ls).sum() * (-1.0 / voxels)

    p = ls.exp()
    red = (0, *range(2, logits.ndim))  # batch + spatial, keep class axis
    inter = (p * g).sum(axes=red)
    denom = p.sum(axes=red) + g.sum(axes=red)
    dice = (inter * 2.0 + eps) / (denom + eps)
    dice_loss = 1.0 - dice.mean()
    return dice_loss * w_dice + ce * w_ce


# -- optimizer -------------------------------------------------------------------


@dataclass
class OptimState:
    """Classical-momentum SGD with weight decay added to the gradient."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(named_params: list[tuple[str, Tensor]], state: OptimState) -> None:
    """v = mu*v + (g + wd*p); p -= lr*v. Parameters without grads still decay."""
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = state.buffers.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + (g + state.weight_decay * p.data)
        state.buffers[name] = v
        p.data = p.data - state.lr * v


# -- metrics ---------------------------------------------------------------------


def dice_metric(pred_labels: np.ndarray, true_labels: np.ndarray, c: int) -> float:
    """Hard Dice overlap of class c; two empty masks agree perfectly (1.0)."""
    p = pred_labels == c
    g = true_labels == c
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def _boundary_points(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with at least one face neighbor outside it."""
    inner = np.ones_like(mask)
    for a in range(mask.ndim):
        lo = [slice(None)] * mask.ndim
        hi = [slice(None)] * mask.ndim
        lo[a] = slice(None, -1)
        hi[a] = slice(1, None)
        shifted = np.zeros_like(mask)
        shifted[tuple(lo)] = mask[tuple(hi)]
        inner &= shifted
        shifted = np.zeros_like(mask)
        shifted[tuple(hi)] = mask[tuple(lo)]
        inner &= shifted
    return np.argwhere(mask & ~inner)


def hd95_metric(pred_mask: np.ndarray, true_mask: np.ndarray,
                spacing=None) -> float | None:
    """95th percentile of the symmetric surface-distance multiset.

    Distances are brute-force all pairs between the two boundaries, scaled by
    voxel spacing. Either mask empty -> None (undefined), never 0.
    """
    pred_mask = np.asarray(pred_mask, dtype=bool)
    true_mask = np.asarray(true_mask, dtype=bool)
    if pred_mask.shape != true_mask.shape:
        raise ValidationError(
            f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}"
        )
    if not pred_mask.any() or not true_mask.any():
        return None
    spacing = np.ones(pred_mask.ndim) if spacing is None else np.asarray(spacing, float)
    if spacing.shape != (pred_mask.ndim,) or (spacing <= 0).any():
        raise ValidationError(f"spacing must be {pred_mask.ndim} positive extents")
    pb = _boundary_points(pred_mask) * spacing
    tb = _boundary_points(true_mask) * spacing
    d = cdist(pb, tb)
    surface = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(surface, 95))


# -- synthetic data ---------------------------------------------------------------


@dataclass
class Sample:
    """One image/label pair; seed records how it was generated."""

    image: np.ndarray  # (1, *dims) float
    label: np.ndarray  # (*dims) int
    seed: int


def synth_generate(rank: int, n: int, dims, num_classes: int, seed: int,
                   noise_sigma: float = 0.1) -> list[Sample]:
    """Deterministic dataset of ellipsoid/box blobs, one per foreground class.

    Intensity is a class-dependent mean plus Gaussian noise; the label map
    matches the shapes exactly. Same arguments, bit-identical output.
    """
    dims = tuple(int(x) for x in dims)
    if rank not in (2, 3) or len(dims) != rank:
        raise ValidationError(f"rank {rank} needs {rank} dims, got {dims}")
    if num_classes < 2:
        raise ValidationError("need at least one foreground class")
    coords = np.stack(np.meshgrid(*[np.arange(e, dtype=float) for e in dims],
                                  indexing="ij"), axis=-1)
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        label = np.zeros(dims, dtype=np.int64)
        image = rng.normal(0.0, noise_sigma, size=dims)
        for c in range(1, num_classes):
            center = np.array([rng.uniform(0.25 * e, 0.75 * e) for e in dims])
            radii = np.array([rng.uniform(0.15, 0.35) * e for e in dims])
            box = rng.random() < 0.5
            if box:
                inside = np.all(np.abs(coords - center) <= radii, axis=-1)
            else:
                inside = (((coords - center) / radii) ** 2).sum(axis=-1) <= 1.0
            label[inside] = c
            image = np.where(inside, c / (num_classes - 1.0)
                             + rng.normal(0.0, noise_sigma, size=dims), image)
        samples.append(Sample(image=image[None], label=label, seed=seed))
    return samples


def split_train_val(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seed-stable 80/20 shuffle split; validation gets at least one sample."""
    if n < 1:
        raise ValidationError("dataset is empty")
    perm = np.random.default_rng([seed, 17]).permutation(n)
    n_val = max(1, n // 5) if n > 1 else 0
    return perm[: n - n_val], perm[n - n_val:]


# -- training loop -----------------------------------------------------------------


@dataclass
class TrainSettings:
    """Knobs of one training run (defaults chosen per rank when None)."""

    epochs: int = 10
    batch_size: int | None = None
    lr: float | None = None
    momentum: float = 0.9
    weight_decay: float | None = None
    dice_weight: float = 0.6
    ce_weight: float = 0.4
    early_stop_dice: float | None = None
    seed: int = 0

    def resolved(self, rank: int) -> "TrainSettings":
        batch = self.batch_size if self.batch_size is not None else (4 if rank == 2 else 2)
        lr = self.lr if self.lr is not None else (0.05 if rank == 2 else 0.01)
        wd = self.weight_decay if self.weight_decay is not None else (
            1e-4 if rank == 2 else 3e-5)
        return TrainSettings(self.epochs, batch, lr, self.momentum, wd,
                             self.dice_weight, self.ce_weight,
                             self.early_stop_dice, self.seed)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    dice_mean: float
    dice_per_class: list[float]
    hd95_mean: float


def _batch(samples: list[Sample], idx) -> tuple[Tensor, np.ndarray]:
    images = np.stack([samples[i].image for i in idx])
    labels = np.stack([samples[i].label for i in idx])
    return Tensor(images), labels


def evaluate(net, samples: list[Sample], idx, num_classes: int,
             with_hd95: bool = True) -> tuple[float, list[float], float]:
    """Foreground Dice (mean and per class) and mean HD95 on the given split."""
    dice_sums = np.zeros(num_classes - 1)
    hd_vals = []
    for i in idx:
        x, y = _batch(samples, [i])
        pred = np.argmax(net(x).data, axis=1)[0]
        for c in range(1, num_classes):
            dice_sums[c - 1] += dice_metric(pred, samples[i].label, c)
            if with_hd95:
                hd = hd95_metric(pred == c, samples[i].label == c)
                if hd is not None:
                    hd_vals.append(hd)
    per_class = list(dice_sums / max(1, len(idx)))
    mean_hd = float(np.mean(hd_vals)) if hd_vals else math.nan
    return float(np.mean(per_class)), per_class, mean_hd


def train_loop(cfg: NetConfig, samples: list[Sample], settings: TrainSettings,
               net=None, optim: OptimState | None = None, start_epoch: int = 0,
               with_hd95: bool = False, progress=None):
    """Train for settings.epochs more epochs; returns (net, optim, logs).

    Pass net/optim/start_epoch from a loaded checkpoint to resume: epoch
    shuffles are keyed by absolute epoch number, so a split run's trajectory
    is bit-identical to an uninterrupted one.
    """
    if not samples:
        raise ValidationError("dataset is empty")
    settings = settings.resolved(cfg.rank)
    train_idx, val_idx = split_train_val(len(samples), settings.seed)
    if net is None:
        net = build_net(cfg, settings.seed)
    if optim is None:
        optim = OptimState(lr=settings.lr, momentum=settings.momentum,
                           weight_decay=settings.weight_decay)
    named = list(net.named_parameters())
    logs: list[EpochLog] = []
    for epoch in range(start_epoch, start_epoch + settings.epochs):
        order = np.random.default_rng([settings.seed, epoch]).permutation(
            len(train_idx))
        shuffled = train_idx[order]
        losses = []
        for b0 in range(0, len(shuffled), settings.batch_size):
            idx = shuffled[b0: b0 + settings.batch_size]
            x, y = _batch(samples, idx)
            for _, p in named:
                p.zero_grad()
            loss = dice_ce_loss(net(x), y, settings.dice_weight, settings.ce_weight)
            val = loss.item()
            if not math.isfinite(val):
                raise DivergenceError(
                    f"non-finite loss {val} at epoch {epoch}, batch {b0}"
                )
            backward(loss)
            sgd_step(named, optim)
            losses.append(val)
        dice_mean, per_class, hd_mean = evaluate(
            net, samples, val_idx, cfg.num_classes, with_hd95=with_hd95)
        log = EpochLog(epoch, float(np.mean(losses)), dice_mean, per_class, hd_mean)
        logs.append(log)
        if progress is not None:
            progress(log)
        if settings.early_stop_dice is not None and dice_mean > settings.early_stop_dice:
            break
    return net, optim, logs
