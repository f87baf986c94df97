"""SGD-with-momentum training, tiled inference and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autolabel import LabeledDataset, SegMask
from ..errors import DivergenceDetected, EmptyInput, FormatError, ValidationError
from .layers import Context, softmax_cross_entropy
from .net import NetConfig, NetParams, ResUNetPlus, loss_and_grads

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RUNP"
CKPT_VERSION = 1


def to_input(images, in_channels: int, dtype) -> np.ndarray:
    """uint8 (B, H, W, 3) tiles -> float (B, C, H, W) in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = arr.astype(np.float64) / 255.0
    if in_channels == 1:
        x = (x @ np.array([0.299, 0.587, 0.114]))[..., None]
    elif in_channels != 3:
        raise ValidationError("in_channels must be 1 (gray) or 3 (RGB)")
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)).astype(dtype)


def inverse_frequency_weights(masks, classes: int = 2) -> tuple:
    counts = np.bincount(np.concatenate([np.asarray(m).ravel() for m in masks]).astype(int),
                         minlength=classes).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    return tuple(float(w) for w in counts.sum() / (classes * counts))


def mean_iou(pred: np.ndarray, truth: np.ndarray, classes: int = 2) -> float:
    """Class-averaged IoU pooled over every pixel of the (stacked) masks."""
    ious = []
    for c in range(classes):
        p, t = pred == c, truth == c
        union = np.logical_or(p, t).sum()
        ious.append(1.0 if union == 0 else np.logical_and(p, t).sum() / union)
    return float(np.mean(ious))


@dataclass
class TrainResult:
    net: NetParams
    history: list = field(default_factory=list)
    class_weights: tuple = ()

    @property
    def losses(self) -> list:
        return [h["train_loss"] for h in self.history]


def sgd_step(net: NetParams, grads: dict, velocity: dict, lr: float, momentum: float):
    for name, g in grads.items():
        v = velocity.get(name)
        v = -lr * g if v is None else momentum * v - lr * g
        velocity[name] = v
        net.params[name] += v.astype(net.params[name].dtype, copy=False)


def evaluate_split(model, net, cfg, images, masks, class_weights):
    x = to_input(images, cfg.in_channels, cfg.dtype)
    losses, preds = [], []
    for i in range(0, len(x), cfg.batch_size):
        logits, _ = model.forward(net.params, x[i:i + cfg.batch_size], Context(False, net.buffers))
        loss, _ = softmax_cross_entropy(logits, masks[i:i + cfg.batch_size], class_weights)
        losses.append(loss * len(logits))
        preds.append(logits.argmax(axis=1))
    return float(np.sum(losses) / len(x)), mean_iou(np.concatenate(preds), masks)


def train(net: NetParams, cfg: NetConfig, dataset: LabeledDataset, steps: int | None = None,
          callback=None) -> TrainResult:
    """Train on the dataset's train split; one history row per epoch.

    ``steps`` caps the number of optimizer updates (useful for overfit checks);
    otherwise ``cfg.max_epochs`` full passes are made.
    """
    images, masks = dataset.arrays("train")
    if images is None:
        raise EmptyInput("dataset has no training pairs")
    val_images, val_masks = dataset.arrays("validation")
    model = ResUNetPlus(cfg)
    net = net.copy()
    x_all = to_input(images, cfg.in_channels, cfg.dtype)
    y_all = masks.astype(np.intp)
    weights = cfg.class_weights or inverse_frequency_weights(masks, cfg.classes)
    velocity: dict = {}
    history = []
    total_steps = 0
    epoch = 0
    while (steps is None and epoch < cfg.max_epochs) or (steps is not None and total_steps < steps):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(x_all))
        epoch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            if steps is not None and total_steps >= steps:
                break
            idx = order[i:i + cfg.batch_size]
            loss, grads, _ = loss_and_grads(model, net, x_all[idx], y_all[idx], weights)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch} step {total_steps}",
                                         history)
            sgd_step(net, grads, velocity, cfg.learning_rate, cfg.momentum)
            epoch_losses.append(loss)
            total_steps += 1
            if callback is not None:
                callback(total_steps, loss)
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(epoch_losses)),
               "val_loss": float("nan"), "val_iou": float("nan")}
        if val_images is not None:
            row["val_loss"], row["val_iou"] = evaluate_split(
                model, net, cfg, val_images, val_masks.astype(np.intp), weights)
        log.info("epoch %d train %.4f val %.4f iou %.4f", row["epoch"], row["train_loss"],
                 row["val_loss"], row["val_iou"])
        history.append(row)
        epoch += 1
    return TrainResult(net, history, tuple(weights))


def predict_logits(net: NetParams, cfg: NetConfig, tiles, model=None) -> np.ndarray:
    model = model or ResUNetPlus(cfg)
    x = to_input(tiles, cfg.in_channels, cfg.dtype)
    out = []
    for i in range(0, len(x), max(cfg.batch_size, 8)):
        logits, _ = model.forward(net.params, x[i:i + max(cfg.batch_size, 8)],
                                  Context(False, net.buffers))
        out.append(logits)
    return np.concatenate(out, axis=0)


def _tile_starts(size: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def segment(net: NetParams, cfg: NetConfig, image: np.ndarray, overlap: float = 0.5) -> SegMask:
    """Argmax mask for an STMap image of any size >= tile.

    Larger maps are covered by overlapping tiles whose logits are averaged.
    """
    image = np.asarray(getattr(image, "pixels", image))
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    H, W = image.shape[:2]
    t = cfg.input_tile
    if H < t or W < t:
        raise ValidationError(f"image {H}x{W} smaller than tile {t}")
    stride = max(1, int(round(t * (1 - overlap))))
    origins = [(r, c) for r in _tile_starts(H, t, stride) for c in _tile_starts(W, t, stride)]
    tiles = np.stack([image[r:r + t, c:c + t] for r, c in origins])
    logits = predict_logits(net, cfg, tiles)
    acc = np.zeros((cfg.classes, H, W))
    hits = np.zeros((H, W))
    for (r, c), lg in zip(origins, logits):
        acc[:, r:r + t, c:c + t] += lg
        hits[r:r + t, c:c + t] += 1
    acc /= hits
    return SegMask(acc.argmax(axis=0).astype(np.uint8), "predicted")


# checkpoint ---------------------------------------------------------------

def save_checkpoint(net: NetParams, cfg: NetConfig, path) -> None:
    cfg_bytes = json.dumps(cfg.to_json(), sort_keys=True).encode()
    entries = [("p", k, v) for k, v in sorted(net.params.items())] + \
              [("b", k, v) for k, v in sorted(net.buffers.items())]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(entries)))
        for kind, name, arr in entries:
            nb = f"{kind}:{name}".encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    try:
        magic, version, clen = struct.unpack_from("<4sII", data, 0)
        if magic != CKPT_MAGIC or version != CKPT_VERSION:
            raise FormatError(f"{path}: not a Res-UNet+ checkpoint")
        off = 12
        cfg = NetConfig.from_json(json.loads(data[off:off + clen]))
        off += clen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params, buffers = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            kind, name = data[off:off + nlen].decode().split(":", 1)
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            if kind == "p":
                params[name] = arr.astype(cfg.dtype)
            else:
                buffers[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    return NetParams(params, buffers), cfg


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_iou"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]),
                             repr(row["val_iou"])])
