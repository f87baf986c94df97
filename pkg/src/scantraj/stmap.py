"""Scanline sampling, STMap assembly and tile augmentation."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import (EmptySource, FormatError, InconsistentFrameSize,
                     OutOfBounds, TileTooLarge, ValidationError)

STMAP_MAGIC = b"STMP"
STMAP_VERSION = 1
_HEADER = struct.Struct("<4sIIIId")

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
FRAME_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


@dataclass(frozen=True)
class ScanlinePath:
    points: np.ndarray
    lane_id: str = "lane"
    direction_flag: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValidationError("scanline points must be a list of (row, col) pairs")
        if len(pts) < 2:
            raise ValidationError("scanline needs at least two points")
        steps = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(steps == 0):
            raise ValidationError("scanline points must be pairwise distinct along the path")
        if len({tuple(p) for p in pts.tolist()}) != len(pts):
            raise ValidationError("scanline revisits a pixel")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return len(self.points)

    @classmethod
    def line(cls, start, end, lane_id="lane", direction_flag=True) -> "ScanlinePath":
        """Rasterise a straight segment into one point per major-axis step."""
        (r0, c0), (r1, c1) = start, end
        count = int(max(abs(r1 - r0), abs(c1 - c0))) + 1
        rows = np.rint(np.linspace(r0, r1, count)).astype(np.int64)
        cols = np.rint(np.linspace(c0, c1, count)).astype(np.int64)
        return cls(np.stack([rows, cols], axis=1), lane_id, direction_flag)

    def to_json(self) -> dict:
        return {"lane_id": self.lane_id, "direction_flag": bool(self.direction_flag),
                "points": self.points.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "ScanlinePath":
        try:
            return cls(np.asarray(data["points"]), str(data.get("lane_id", "lane")),
                       bool(data.get("direction_flag", True)))
        except KeyError as exc:
            raise FormatError(f"scanline JSON missing field {exc}") from None


def load_scanline(path) -> ScanlinePath:
    with open(path) as fh:
        return ScanlinePath.from_json(json.load(fh))


@dataclass(frozen=True)
class STMap:
    """n x m x 3 uint8 map: rows are scanline positions, columns are frames."""

    pixels: np.ndarray
    frame_rate: float = 10.0
    lane_id: str = "lane"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"STMap pixels must be n x m x 3, got {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ValidationError("STMap values must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        if self.frame_rate <= 0:
            raise ValidationError("frame_rate must be positive")

    @property
    def n(self) -> int:
        return self.pixels.shape[0]

    @property
    def m(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class GrayMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError("GrayMap must be two-dimensional")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValidationError("GrayMap values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


def sample_scanline(frame: np.ndarray, path: ScanlinePath) -> np.ndarray:
    """Nearest-pixel samples of ``frame`` at every path point, shape (n, 3)."""
    frame = np.asarray(frame)
    rows, cols = path.points[:, 0], path.points[:, 1]
    h, w = frame.shape[:2]
    bad = (rows < 0) | (rows >= h) | (cols < 0) | (cols >= w)
    if bad.any():
        r, c = path.points[np.argmax(bad)]
        raise OutOfBounds(f"scanline point ({r}, {c}) outside {h}x{w} frame")
    samples = frame[rows, cols]
    if samples.ndim == 1:
        samples = np.repeat(samples[:, None], 3, axis=1)
    return samples[:, :3]


def build_stmap(frames: Iterable[np.ndarray], path: ScanlinePath,
                frame_rate: float = 10.0) -> STMap:
    columns = []
    size = None
    for i, frame in enumerate(frames):
        frame = np.asarray(frame)
        if size is None:
            size = frame.shape[:2]
        elif frame.shape[:2] != size:
            raise InconsistentFrameSize(f"frame {i} is {frame.shape[:2]}, expected {size}")
        columns.append(sample_scanline(frame, path))
    if len(columns) < 2:
        raise EmptySource(f"need at least 2 frames, got {len(columns)}")
    return STMap(np.stack(columns, axis=1), frame_rate, path.lane_id)


def list_frames(directory) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir()
                   if p.suffix.lower() in FRAME_SUFFIXES)
    if not files:
        raise EmptySource(f"no PNG/PPM frames in {directory}")
    return files


def read_frames(directory):
    """Yield RGB frames from a directory in lexicographic filename order."""
    from PIL import Image

    for p in list_frames(directory):
        with Image.open(p) as im:
            yield np.asarray(im.convert("RGB"))


def to_gray(stmap: STMap) -> GrayMap:
    rgb = stmap.pixels.astype(np.float64)
    return GrayMap(np.clip(rgb @ LUMA_WEIGHTS / 255.0, 0.0, 1.0))


def save_stmap(stmap: STMap, path) -> None:
    header = _HEADER.pack(STMAP_MAGIC, STMAP_VERSION, stmap.n, stmap.m, 3,
                          float(stmap.frame_rate))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(stmap.pixels.tobytes(order="C"))


def load_stmap(path, lane_id: str = "lane") -> STMap:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated STMap header")
    magic, version, n, m, channels, rate = _HEADER.unpack_from(data)
    if magic != STMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != STMAP_VERSION or channels != 3:
        raise FormatError(f"{path}: unsupported version {version} / channels {channels}")
    body = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if body.size != n * m * channels:
        raise FormatError(f"{path}: expected {n * m * channels} pixel bytes, got {body.size}")
    return STMap(body.reshape(n, m, channels).copy(), rate, lane_id)


def save_png(array: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(array)).save(path, optimize=False)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im)


# augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    """Random affine ranges; ``None`` disables a transform.

    rescale is a (low, high) zoom factor, shear_deg a (low, high) angle and
    translate the maximum shift as a fraction of the tile side.
    """

    rescale: tuple[float, float] | None = None
    shear_deg: tuple[float, float] | None = None
    translate: float | None = None
    copies: int = 1

    @classmethod
    def default(cls) -> "AugmentSpec":
        return cls(rescale=(0.8, 1.2), shear_deg=(-10.0, 10.0), translate=0.1)

    @property
    def is_identity(self) -> bool:
        return self.rescale is None and self.shear_deg is None and self.translate is None

    def to_json(self) -> dict:
        return {"rescale": list(self.rescale) if self.rescale else None,
                "shear_deg": list(self.shear_deg) if self.shear_deg else None,
                "translate": self.translate, "copies": self.copies}

    @classmethod
    def from_json(cls, data: dict | None) -> "AugmentSpec":
        if not data:
            return cls()
        unknown = set(data) - {"rescale", "shear_deg", "translate", "copies", "rotate"}
        if unknown:
            raise ValidationError(f"unknown augmentation keys {sorted(unknown)}")
        if data.get("rotate"):
            raise ValidationError("rotation is not a supported augmentation")
        tup = lambda v: tuple(float(x) for x in v) if v is not None else None  # noqa: E731
        translate = data.get("translate")
        return cls(tup(data.get("rescale")), tup(data.get("shear_deg")),
                   None if translate is None else float(translate), int(data.get("copies", 1)))


def tile_origins(n: int, m: int, tile: int, stride: int | None = None) -> list[tuple[int, int]]:
    stride = stride or tile
    return [(r, c) for r in range(0, n - tile + 1, stride)
            for c in range(0, m - tile + 1, stride)]


def _draw_affine(spec: AugmentSpec, rng: np.random.Generator, tile: int):
    scale, shear, shift = 1.0, 0.0, np.zeros(2)
    if spec.rescale is not None:
        scale = rng.uniform(*spec.rescale)
    if spec.shear_deg is not None:
        shear = np.tan(np.deg2rad(rng.uniform(*spec.shear_deg)))
    if spec.translate is not None:
        shift = rng.uniform(-spec.translate, spec.translate, size=2) * tile
    # forward map in (row, col): row' = s*row, col' = s*(col + shear*row)
    forward = np.array([[scale, 0.0], [scale * shear, scale]])
    return forward, shift


def _apply_affine(image, mask, forward, shift):
    tile = mask.shape[0]
    if np.array_equal(forward, np.eye(2)) and not np.any(shift):
        return image.copy(), mask.copy()
    inverse = np.linalg.inv(forward)
    center = np.array([(tile - 1) / 2.0, (mask.shape[1] - 1) / 2.0])
    # input = inverse @ (out - center - shift) + center
    offset = center - inverse @ (center + shift)
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        res = ndimage.affine_transform(image[..., ch].astype(np.float64), inverse,
                                       offset=offset, order=1, mode="nearest")
        out[..., ch] = np.clip(np.rint(res), 0, 255).astype(image.dtype)
    warped = ndimage.affine_transform(mask.astype(np.uint8), inverse, offset=offset,
                                      order=0, mode="nearest")
    return out, (warped > 0).astype(np.uint8)


def crop_tiles(stmap: STMap, mask, tile: int, stride: int | None = None):
    labels = np.asarray(getattr(mask, "labels", mask))
    if labels.shape != stmap.pixels.shape[:2]:
        raise ValidationError(f"mask shape {labels.shape} != STMap {stmap.pixels.shape[:2]}")
    if tile > min(stmap.n, stmap.m):
        raise TileTooLarge(f"tile {tile} exceeds STMap {stmap.n}x{stmap.m}")
    return [(stmap.pixels[r:r + tile, c:c + tile].copy(),
             labels[r:r + tile, c:c + tile].astype(np.uint8))
            for r, c in tile_origins(stmap.n, stmap.m, tile, stride)]


def augment_pairs(pairs: Sequence[tuple[np.ndarray, np.ndarray]], spec: AugmentSpec,
                  seed: int, salt: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Apply ``spec.copies`` random affines to every pair, seeded per pair."""
    out = []
    for i, (image, mask) in enumerate(pairs):
        for copy in range(spec.copies):
            rng = np.random.default_rng([seed, salt, i, copy])
            forward, shift = _draw_affine(spec, rng, mask.shape[0])
            out.append(_apply_affine(image, mask, forward, shift))
    return out


def crop_and_augment(stmap: STMap, mask, tile: int = 512, transforms: AugmentSpec | None = None,
                     seed: int = 0, stride: int | None = None):
    """Non-overlapping tiles of (image, mask), each passed through ``transforms``."""
    spec = transforms or AugmentSpec()
    pairs = crop_tiles(stmap, mask, tile, stride)
    if spec.is_identity:
        return pairs
    return augment_pairs(pairs, spec, seed)
