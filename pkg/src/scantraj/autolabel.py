"""Binary training masks from the DMD foreground, and dataset assembly."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BadProportions, DegenerateHistogram, EmptyInput, ValidationError

MASK_SOURCES = ("dmd_auto", "manual", "predicted", "synthetic_truth")
SPLITS = ("train", "test", "validation")
DEFAULT_SPLIT = (0.6, 0.2, 0.2)
DEFAULT_MIN_AREA = 50


@dataclass(frozen=True)
class SegMask:
    labels: np.ndarray
    source: str = "manual"

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValidationError("mask must be two-dimensional")
        if lab.dtype == bool:
            lab = lab.astype(np.uint8)
        if lab.size and not np.isin(lab, (0, 1)).all():
            raise ValidationError("mask values must be 0 or 1")
        if self.source not in MASK_SOURCES:
            raise ValidationError(f"unknown mask source {self.source!r}")
        lab = lab.astype(np.uint8)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self):
        return self.labels.shape


def otsu_threshold(values: np.ndarray, nbins: int = 256) -> float:
    """Otsu cut snapped to the largest value inside the winning histogram bin.

    skimage reports the bin centre, which can sit below lower-class values that
    share that bin; snapping keeps ``values > tau`` equal to the histogram split.
    """
    from skimage.filters import threshold_otsu

    values = np.asarray(values, dtype=np.float64).ravel()
    tau = float(threshold_otsu(values, nbins=nbins))
    edges = np.histogram_bin_edges(values, bins=nbins)
    k = min(int(np.searchsorted(edges, tau, side="right")) - 1, nbins - 1)
    lower = values[values < edges[k + 1]] if k + 1 < nbins else values
    return float(lower.max()) if lower.size else tau


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    comp, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if count == 0 or min_area <= 1:
        return mask.astype(np.uint8)
    areas = np.bincount(comp.ravel())
    keep = areas >= min_area
    keep[0] = False
    return keep[comp].astype(np.uint8)


def close3x3(mask: np.ndarray) -> np.ndarray:
    # edge padding so the erosion half does not eat pixels on the map border
    padded = np.pad(mask.astype(bool), 1, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones((3, 3), dtype=bool))
    return closed[1:-1, 1:-1]


def foreground_to_mask(fg: np.ndarray, threshold_rule="otsu",
                       min_area: int = DEFAULT_MIN_AREA) -> SegMask:
    """Threshold |fg| (Otsu by default or a fixed float), close 3x3, drop small blobs."""
    mag = np.abs(np.asarray(fg, dtype=np.float64))
    if not np.all(np.isfinite(mag)):
        raise ValidationError("foreground contains non-finite values")
    if mag.size == 0 or mag.min() == mag.max():
        warnings.warn("foreground histogram is flat; returning an empty mask",
                      DegenerateHistogram, stacklevel=2)
        return SegMask(np.zeros(mag.shape, dtype=np.uint8), "dmd_auto")
    if threshold_rule == "otsu":
        tau = otsu_threshold(mag)
    else:
        tau = float(threshold_rule)
    mask = close3x3(mag > tau)
    return SegMask(remove_small_components(mask, min_area), "dmd_auto")


# dataset ------------------------------------------------------------------

def split_counts(total: int, proportions) -> list[int]:
    props = np.asarray(proportions, dtype=np.float64)
    if props.shape != (3,) or np.any(props < 0) or not np.isclose(props.sum(), 1.0):
        raise BadProportions(f"split proportions must be three non-negative values summing to 1, "
                             f"got {list(proportions)}")
    raw = props * total
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


@dataclass
class LabeledDataset:
    images: list
    masks: list
    split: list
    seed: int = 0
    tile: int = 64
    augment: dict = field(default_factory=dict)
    origins: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def indices(self, name: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == name]

    def arrays(self, name: str):
        idx = self.indices(name)
        if not idx:
            return None, None
        return (np.stack([self.images[i] for i in idx]),
                np.stack([self.masks[i] for i in idx]))


def assemble_dataset(stmaps, masks, tile: int = 64, augment=None,
                     split=DEFAULT_SPLIT, seed: int = 0, stride: int | None = None) -> LabeledDataset:
    """Tile every map, shuffle, split train/test/validation and augment the training part."""
    from .stmap import AugmentSpec, augment_pairs, crop_tiles

    if not stmaps:
        raise EmptyInput("no STMaps given")
    if len(stmaps) != len(masks):
        raise ValidationError("stmaps and masks must be aligned")
    spec = augment if isinstance(augment, AugmentSpec) else AugmentSpec.from_json(augment)

    pairs, origins = [], []
    for k, (stmap, mask) in enumerate(zip(stmaps, masks)):
        tiles = crop_tiles(stmap, mask, tile, stride)
        pairs.extend(tiles)
        step = stride or tile
        origins.extend((k, r, c) for r in range(0, stmap.n - tile + 1, step)
                       for c in range(0, stmap.m - tile + 1, step))
    if not pairs:
        raise EmptyInput("no tiles could be cut")
    counts = split_counts(len(pairs), split)

    order = np.random.default_rng(seed).permutation(len(pairs))
    labels = np.empty(len(pairs), dtype=object)
    labels[order[:counts[0]]] = "train"
    labels[order[counts[0]:counts[0] + counts[1]]] = "test"
    labels[order[counts[0] + counts[1]:]] = "validation"

    images = [p[0] for p in pairs]
    tile_masks = [p[1] for p in pairs]
    split_names = labels.tolist()
    origin_list = [list(o) for o in origins]
    if not spec.is_identity:
        train_idx = sorted(order[:counts[0]].tolist())
        extra = augment_pairs([pairs[i] for i in train_idx], spec, seed, salt=1)
        for j, (img, msk) in enumerate(extra):
            images.append(img)
            tile_masks.append(msk)
            split_names.append("train")
            origin_list.append(origins[train_idx[j // spec.copies]] + ("aug",))
    return LabeledDataset(images, tile_masks, split_names, seed, tile, spec.to_json(),
                          origin_list)


def save_dataset(ds: LabeledDataset, directory) -> list[Path]:
    from .stmap import save_png

    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    written = []
    names = {s: [] for s in SPLITS}
    for i, (img, msk, s) in enumerate(zip(ds.images, ds.masks, ds.split)):
        name = f"{i:05d}.png"
        save_png(img, root / "images" / name)
        save_png((msk * 255).astype(np.uint8), root / "masks" / name)
        names[s].append(name)
        written += [root / "images" / name, root / "masks" / name]
    manifest = {"seed": ds.seed, "tile": ds.tile, "split": names,
                "augmentation": ds.augment, "origins": [list(map(str, o)) for o in ds.origins]}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    written.append(root / "manifest.json")
    return written


def load_dataset(directory) -> LabeledDataset:
    from .stmap import load_png

    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    entries = sorted((name, s) for s in SPLITS for name in manifest["split"].get(s, []))
    images, masks, split = [], [], []
    for name, s in entries:
        img = load_png(root / "images" / name)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        images.append(img[..., :3])
        masks.append((load_png(root / "masks" / name) > 127).astype(np.uint8))
        split.append(s)
    return LabeledDataset(images, masks, split, int(manifest["seed"]), int(manifest["tile"]),
                          manifest.get("augmentation", {}), manifest.get("origins", []))
