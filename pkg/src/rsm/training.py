"""Loss, optimizer, learning-rate schedule, metrics, and the training and
evaluation loops.

The loss is binary cross-entropy plus a Dice overlap term with unit
weights and smoothing 1.0. Optimization is AdamW (decoupled decay) with
lr 1e-3 and weight decay 1e-3; the learning rate drops by 10x whenever the
validation F1 fails to improve for 10 consecutive epochs. The checkpoint
with the best validation F1 is kept.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import MASK_FG, augment, plan_tiles, stitch
from .errors import ShapeError
from .models import TASK_CHANGE_DETECTION, build_model
from .tensor import Tensor


# ---------------------------------------------------------------------------
# loss


DICE_SMOOTH = 1.0


def bce_dice_loss(logits, target):
    """Mean binary cross-entropy on logits plus the Dice overlap deficit.

    target must contain only 0s and 1s. BCE uses the stable form
    y*softplus(-x) + (1-y)*softplus(x); the Dice term sums probabilities
    over the whole tensor.
    """
    if logits.shape != target.shape:
        raise ShapeError(f"loss: logits {logits.shape} vs target {target.shape}")
    tdata = target.data
    if not np.isin(tdata, (0.0, 1.0)).all():
        raise ValueError("loss: target values must be exactly 0 or 1")
    bce = T.mean_reduce(
        T.add(
            T.mul(target, T.softplus(T.mul(logits, -1.0))),
            T.mul(T.add(Tensor(np.ones_like(tdata)), T.mul(target, -1.0)),
                  T.softplus(logits)),
        )
    )
    p = T.sigmoid(logits)
    inter = T.sum_reduce(T.mul(p, target))
    denom = T.add(T.sum_reduce(p), T.sum_reduce(target))
    dice = T.add(
        Tensor(np.asarray(1.0, dtype=logits.dtype)),
        T.mul(T.div(T.add(T.mul(inter, 2.0), DICE_SMOOTH), T.add(denom, DICE_SMOOTH)), -1.0),
    )
    return T.add(bce, dice)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """AdamW with decoupled weight decay applied before the moment update."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-3):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ValueError(f"adamw: {len(missing)} parameters have no gradient")
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / bias1
            vhat = self.v[i] / bias2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class PlateauScheduler:
    """Cut the lr by 10x after 10 epochs without strict F1 improvement.

    The first observation initializes the best score and counts as a
    non-improving epoch; the patience counter resets on every improvement
    and on every reduction.
    """

    def __init__(self, optimizer, patience=10, factor=0.1, min_improvement=1e-6):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.min_improvement = min_improvement
        self.best = None
        self.stale = 0

    def step(self, f1):
        if self.best is not None and f1 > self.best + self.min_improvement:
            self.best = f1
            self.stale = 0
            return
        if self.best is None or f1 > self.best:
            self.best = f1
        self.stale += 1
        if self.stale >= self.patience:
            self.optimizer.lr *= self.factor
            self.stale = 0


# ---------------------------------------------------------------------------
# metrics


@dataclasses.dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def add(self, pred_fg, true_fg):
        """Accumulate from boolean prediction/truth grids of equal shape."""
        if pred_fg.shape != true_fg.shape:
            raise ShapeError(f"confusion: {pred_fg.shape} vs {true_fg.shape}")
        self.tp += int(np.count_nonzero(pred_fg & true_fg))
        self.fp += int(np.count_nonzero(pred_fg & ~true_fg))
        self.fn += int(np.count_nonzero(~pred_fg & true_fg))
        self.tn += int(np.count_nonzero(~pred_fg & ~true_fg))

    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def metrics(counts):
    """(precision, recall, F1, IoU) with every 0/0 defined as 0."""

    def ratio(num, den):
        return num / den if den else 0.0

    p = ratio(counts.tp, counts.tp + counts.fp)
    r = ratio(counts.tp, counts.tp + counts.fn)
    f1 = ratio(2.0 * p * r, p + r)
    iou = ratio(counts.tp, counts.tp + counts.fp + counts.fn)
    return p, r, f1, iou


# ---------------------------------------------------------------------------
# data conversion


def _to_input(img, dtype=np.float32):
    """uint8 [H, W, 3] -> [3, H, W] scaled to [0, 1]."""
    return np.ascontiguousarray(img.transpose(2, 0, 1).astype(dtype) / 255.0)


def _to_target(mask, dtype=np.float32):
    return (mask == MASK_FG).astype(dtype)


def _forward_sample_batch(model, task, images, images_t2):
    x1 = Tensor(np.stack(images))
    if task == TASK_CHANGE_DETECTION:
        return model(x1, Tensor(np.stack(images_t2)))
    return model(x1)


# ---------------------------------------------------------------------------
# inference helpers


def _pad_to_multiple(arr, multiple):
    """Zero-pad the two trailing spatial axes of [C, H, W] up to a multiple."""
    h, w = arr.shape[-2], arr.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return arr, h, w
    pads = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, pads), h, w


def predict_logits(model, image, image_t2=None):
    """Full-image logits [H, W] for one uint8 sample; extents that are not
    multiples of the model divisor are zero-padded and cropped back."""
    cfg = model.cfg
    x = _to_input(image)
    xp, h, w = _pad_to_multiple(x, cfg.divisor)
    if cfg.task == TASK_CHANGE_DETECTION:
        x2p, _, _ = _pad_to_multiple(_to_input(image_t2), cfg.divisor)
        out = model(Tensor(xp[None]), Tensor(x2p[None]))
    else:
        out = model(Tensor(xp[None]))
    return out.data[0, 0, :h, :w].astype(np.float64)


def predict_logits_batch(model, images, images_t2=None, batch_size=16):
    """Logits for a list of equal-extent uint8 images, batched per forward."""
    cfg = model.cfg
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        padded = [_pad_to_multiple(_to_input(im), cfg.divisor) for im in chunk]
        x = Tensor(np.stack([p[0] for p in padded]))
        if cfg.task == TASK_CHANGE_DETECTION:
            chunk2 = images_t2[start:start + batch_size]
            x2 = Tensor(np.stack([_pad_to_multiple(_to_input(im), cfg.divisor)[0]
                                  for im in chunk2]))
            logits = model(x, x2)
        else:
            logits = model(x)
        for i, (_, h, w) in enumerate(padded):
            out.append(logits.data[i, 0, :h, :w].astype(np.float64))
    return out


def predict_logits_tiled(model, image, patch, overlap, image_t2=None):
    """Tile, infer per tile, and average-stitch logits for a large raster."""
    h, w = image.shape[0], image.shape[1]
    spec = plan_tiles(h, w, patch, overlap)
    tiles = []
    for (r, c) in spec.offsets:
        win = image[r:r + patch, c:c + patch]
        win2 = image_t2[r:r + patch, c:c + patch] if image_t2 is not None else None
        tiles.append(((r, c), predict_logits(model, win, win2)))
    return stitch(tiles, h, w)


# ---------------------------------------------------------------------------
# train / evaluate


@dataclasses.dataclass
class TrainResult:
    checkpoint_path: str
    csv_path: str
    best_f1: float
    epochs_run: int


CSV_HEADER = "epoch,train_loss,val_P,val_R,val_F1,val_IoU,lr"


def _accumulate(counts, logits, mask, threshold):
    prob = 1.0 / (1.0 + np.exp(-logits))
    counts.add(prob >= threshold, mask == MASK_FG)


def evaluate_samples(model, samples, threshold=0.5, patch=None, overlap=0):
    """Confusion counts over samples; tiled inference when patch is given,
    equal-extent untiled samples batched per forward (counts commute)."""
    counts = ConfusionCounts()
    by_extent = {}
    for s in samples:
        if patch is not None and (s.image.shape[0] > patch or s.image.shape[1] > patch):
            logits = predict_logits_tiled(model, s.image, patch, overlap, s.image_t2)
            _accumulate(counts, logits, s.mask, threshold)
        else:
            by_extent.setdefault(s.image.shape[:2], []).append(s)
    for group in by_extent.values():
        logits_list = predict_logits_batch(
            model, [s.image for s in group],
            [s.image_t2 for s in group] if group[0].image_t2 is not None else None,
        )
        for s, logits in zip(group, logits_list):
            _accumulate(counts, logits, s.mask, threshold)
    return counts


def size_ratio_sweep(model, samples, sizes, ratios, threshold=0.5):
    """Rows (size, ratio, F1) for the image-size / downsampling study.

    Each raster is box-downsampled by the ratio, cut into non-overlapping
    size x size crops (remainders dropped, as when patching a survey into
    fixed windows), and the confusion counts of every crop in a cell are
    pooled before computing F1. Combinations where the crop exceeds the
    downsampled extent are skipped.
    """
    from .data import downsample_raster

    rows = []
    for ratio in ratios:
        scaled = []
        for s in samples:
            img = downsample_raster(s.image, ratio)
            mask = downsample_raster(s.mask, ratio, is_mask=True)
            img2 = None if s.image_t2 is None else downsample_raster(s.image_t2, ratio)
            scaled.append((img, mask, img2))
        for size in sizes:
            crops, crops2, truths = [], [], []
            for img, mask, img2 in scaled:
                h, w = mask.shape
                if size > h or size > w:
                    continue
                for r in range(0, h - size + 1, size):
                    for c in range(0, w - size + 1, size):
                        crops.append(img[r:r + size, c:c + size])
                        truths.append(mask[r:r + size, c:c + size])
                        if img2 is not None:
                            crops2.append(img2[r:r + size, c:c + size])
            if not crops:
                continue
            counts = ConfusionCounts()
            logits_list = predict_logits_batch(model, crops, crops2 or None)
            for logits, truth in zip(logits_list, truths):
                _accumulate(counts, logits, truth, threshold)
            rows.append((size, ratio, metrics(counts)[2]))
    return rows


def train(cfg, train_samples, val_samples, seed, out_dir, epochs=30, batch_size=4,
          lr=1e-3, weight_decay=1e-3, log=None):
    """Train; keep the checkpoint with the best validation F1; write the
    per-epoch CSV. Deterministic for fixed inputs and seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, seed=seed)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    sched = PlateauScheduler(opt)
    order_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    aug_root = np.random.SeedSequence(entropy=seed, spawn_key=(2,))

    ckpt_path = out_dir / "best.ckpt"
    csv_path = out_dir / "metrics.csv"
    rows = [CSV_HEADER]
    best_f1 = -1.0
    task = cfg.task

    n = len(train_samples)
    for epoch in range(1, epochs + 1):
        order = order_rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            images, images2, targets = [], [], []
            for j in idx:
                aug_seed = np.random.SeedSequence(
                    entropy=aug_root.entropy, spawn_key=(2, epoch, int(j))
                ).generate_state(1)[0]
                s = augment(train_samples[j], aug_seed, task)
                images.append(_to_input(s.image))
                targets.append(_to_target(s.mask)[None])
                if task == TASK_CHANGE_DETECTION:
                    images2.append(_to_input(s.image_t2))
            logits = _forward_sample_batch(model, task, images, images2)
            loss = bce_dice_loss(logits, Tensor(np.stack(targets)))
            losses.append(loss.item())
            opt.zero_grad()
            T.backward(loss)
            opt.step()

        counts = evaluate_samples(model, val_samples)
        p, r, f1, iou = metrics(counts)
        rows.append(
            f"{epoch},{np.mean(losses):.6f},{p:.6f},{r:.6f},{f1:.6f},{iou:.6f},{opt.lr:.8f}"
        )
        if log:
            log(f"epoch {epoch:3d}  loss {np.mean(losses):.4f}  val F1 {f1:.4f}  lr {opt.lr:.2e}")
        if f1 > best_f1:
            best_f1 = f1
            save_checkpoint(model, ckpt_path)
        sched.step(f1)

    csv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return TrainResult(str(ckpt_path), str(csv_path), best_f1, epochs)
