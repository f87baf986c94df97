"""Strand extraction, lower-boundary tracing and pixel-to-feet calibration."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FormatError, OutOfCalibrationRange, ValidationError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
DEFAULT_MIN_AREA = 50
MERGE_RUN_FRACTION = 0.2


@dataclass(frozen=True)
class Strand:
    id: int
    rows: np.ndarray
    cols: np.ndarray
    merged: bool = False

    @property
    def area(self) -> int:
        return int(self.rows.size)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return (int(self.rows.min()), int(self.rows.max()),
                int(self.cols.min()), int(self.cols.max()))

    @property
    def pixels(self) -> set[tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.cols.tolist()))


@dataclass(frozen=True)
class PixelTrajectory:
    strand_id: int
    frames: np.ndarray
    rows: np.ndarray
    gaps: list = field(default_factory=list)

    @property
    def samples(self) -> list[tuple[int, int]]:
        return list(zip(self.frames.tolist(), self.rows.tolist()))


@dataclass(frozen=True)
class WorldTrajectory:
    strand_id: int
    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        p = np.asarray(self.positions, dtype=np.float64)
        if t.shape != p.shape or t.ndim != 1:
            raise ValidationError("times and positions must be equal-length vectors")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)

    @property
    def samples(self):
        return list(zip(self.times.tolist(), self.positions.tolist()))


@dataclass(frozen=True)
class CalibrationTable:
    """Piecewise-linear map from scanline pixel index to roadway distance (ft)."""

    pixels: np.ndarray
    distances: np.ndarray
    frame_rate: float = 10.0
    direction_flag: bool = True

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        d = np.asarray(self.distances, dtype=np.float64)
        if px.shape != d.shape or px.ndim != 1 or px.size < 2:
            raise ValidationError("calibration needs at least two (pixel, feet) anchors")
        if np.any(np.diff(px) <= 0):
            raise ValidationError("calibration pixel indices must be strictly increasing")
        step = np.diff(d)
        if not (np.all(step > 0) or np.all(step < 0)):
            raise ValidationError("calibration distances must be strictly monotone")
        if (step[0] > 0) != bool(self.direction_flag):
            raise ValidationError("distance ordering disagrees with direction_flag")
        if self.frame_rate <= 0:
            raise ValidationError("frame_rate must be positive")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "distances", d)

    @classmethod
    def linear(cls, n_pixels: int, feet_per_pixel: float, frame_rate: float = 10.0,
               direction_flag: bool = True) -> "CalibrationTable":
        span = (n_pixels - 1) * feet_per_pixel
        d = [0.0, span] if direction_flag else [span, 0.0]
        return cls(np.array([0.0, n_pixels - 1.0]), np.array(d), frame_rate, direction_flag)

    @property
    def feet_range(self) -> tuple[float, float]:
        return float(self.distances.min()), float(self.distances.max())

    @property
    def max_cell_ft(self) -> float:
        """Largest distance spanned by one pixel step."""
        return float(np.max(np.abs(np.diff(self.distances)) / np.diff(self.pixels)))

    def to_feet(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        lo, hi = self.pixels[0], self.pixels[-1]
        if np.any((rows < lo) | (rows > hi)):
            raise OutOfCalibrationRange(f"pixel rows outside anchor range [{lo:g}, {hi:g}]")
        return np.interp(rows, self.pixels, self.distances)

    def to_pixels(self, feet) -> np.ndarray:
        """Inverse map; values outside the anchor range are linearly extrapolated."""
        feet = np.asarray(feet, dtype=np.float64)
        d, px = self.distances, self.pixels
        if not self.direction_flag:
            d, px = d[::-1], px[::-1]
        out = np.interp(feet, d, px)
        lo = feet < d[0]
        hi = feet > d[-1]
        out = np.where(lo, px[0] + (feet - d[0]) * (px[1] - px[0]) / (d[1] - d[0]), out)
        out = np.where(hi, px[-1] + (feet - d[-1]) * (px[-1] - px[-2]) / (d[-1] - d[-2]), out)
        return out

    def to_json(self) -> dict:
        return {"frame_rate": self.frame_rate, "direction_flag": bool(self.direction_flag),
                "anchors": [[float(p), float(d)] for p, d in zip(self.pixels, self.distances)]}

    @classmethod
    def from_json(cls, data: dict) -> "CalibrationTable":
        try:
            anchors = np.asarray(data["anchors"], dtype=np.float64)
            return cls(anchors[:, 0], anchors[:, 1], float(data.get("frame_rate", 10.0)),
                       bool(data.get("direction_flag", True)))
        except (KeyError, IndexError) as exc:
            raise FormatError(f"bad calibration JSON: {exc}") from None


def load_calibration(path) -> CalibrationTable:
    with open(path) as fh:
        return CalibrationTable.from_json(json.load(fh))


def _column_runs(rows: np.ndarray, cols: np.ndarray) -> dict[int, int]:
    """Number of contiguous row runs in every occupied column."""
    order = np.lexsort((rows, cols))
    r, c = rows[order], cols[order]
    new_run = np.ones(r.size, dtype=bool)
    new_run[1:] = (c[1:] != c[:-1]) | (r[1:] != r[:-1] + 1)
    uniq, counts = np.unique(c[new_run], return_counts=True)
    return dict(zip(uniq.tolist(), counts.tolist()))


def extract_strands(mask, min_area: int = DEFAULT_MIN_AREA) -> list[Strand]:
    """8-connected label-1 components with at least ``min_area`` pixels, in scan order."""
    labels = np.asarray(getattr(mask, "labels", mask)).astype(bool)
    comp, count = ndimage.label(labels, structure=EIGHT_CONNECTED)
    if count == 0:
        return []
    strands = []
    objects = ndimage.find_objects(comp)
    for lab, sl in enumerate(objects, start=1):
        local = comp[sl] == lab
        area = int(local.sum())
        if area < min_area:
            continue
        r, c = np.nonzero(local)
        r = r + sl[0].start
        c = c + sl[1].start
        runs = _column_runs(r, c)
        multi = sum(1 for v in runs.values() if v > 1)
        merged = multi > MERGE_RUN_FRACTION * len(runs)
        strands.append(Strand(len(strands), r, c, merged))
    return strands


def _gap_runs(missing: np.ndarray) -> list[tuple[int, int]]:
    if missing.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(missing) > 1)
    starts = np.concatenate([[missing[0]], missing[breaks + 1]])
    ends = np.concatenate([missing[breaks], [missing[-1]]])
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def lower_boundary(strand: Strand, direction_flag: bool = True) -> PixelTrajectory:
    """Vehicle-front row per occupied column: the extremal row in the travel direction."""
    if strand.area == 0:
        raise ValidationError("empty strand")
    frames = np.unique(strand.cols)
    pos = np.searchsorted(frames, strand.cols)
    if direction_flag:
        rows = np.full(frames.size, -1, dtype=np.int64)
        np.maximum.at(rows, pos, strand.rows)
    else:
        rows = np.full(frames.size, np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(rows, pos, strand.rows)
    span = np.arange(frames[0], frames[-1] + 1)
    missing = np.setdiff1d(span, frames)
    return PixelTrajectory(strand.id, frames.astype(np.int64), rows, _gap_runs(missing))


def to_world(pix: PixelTrajectory, cal: CalibrationTable) -> WorldTrajectory:
    positions = cal.to_feet(pix.rows)
    return WorldTrajectory(pix.strand_id, pix.frames / cal.frame_rate, positions)


def mask_to_trajectories(mask, cal: CalibrationTable, min_area: int = DEFAULT_MIN_AREA):
    """Strands, pixel and world trajectories for every strand of ``mask``."""
    strands = extract_strands(mask, min_area)
    pix = [lower_boundary(s, cal.direction_flag) for s in strands]
    return strands, pix, [to_world(p, cal) for p in pix]


TRAJ_HEADER = ["strand_id", "frame", "time_s", "y_pix", "position_ft"]


def write_trajectories_csv(pix_trajs, world_trajs, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJ_HEADER)
        for p, w in zip(pix_trajs, world_trajs):
            for f, y, t, x in zip(p.frames.tolist(), p.rows.tolist(), w.times.tolist(),
                                  w.positions.tolist()):
                writer.writerow([p.strand_id, f, repr(t), y, repr(x)])


def read_trajectories_csv(path) -> list[WorldTrajectory]:
    grouped: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[:5] != TRAJ_HEADER:
            raise FormatError(f"{path}: expected header {','.join(TRAJ_HEADER)}")
        for row in reader:
            grouped.setdefault(int(row["strand_id"]), []).append(
                (float(row["time_s"]), float(row["position_ft"])))
    out = []
    for sid in sorted(grouped):
        t, x = zip(*grouped[sid])
        out.append(WorldTrajectory(sid, np.array(t), np.array(x)))
    return out
