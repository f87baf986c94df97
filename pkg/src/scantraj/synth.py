"""Synthetic STMaps with exact ground truth.

Vehicles follow closed-form kinematics along the scanline; each frame the rows
whose calibrated distance falls inside [front - length, front] are painted with
the vehicle colour. Shadows darken background rows locked to a vehicle, and
clamped Gaussian noise is added last.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autolabel import SegMask
from .errors import SpecOutOfRange, ValidationError
from .stmap import STMap, to_gray
from .traj import CalibrationTable, WorldTrajectory


@dataclass(frozen=True)
class SpeedProfile:
    """constant: ``base``; piecewise: ``segments`` of (duration s, speed ft/s), the last
    speed holding afterwards; stopgo: base + amplitude * sin(2 pi tau / period)."""

    kind: str = "constant"
    base: float = 30.0
    amplitude: float = 0.0
    period: float = 30.0
    segments: tuple = ()

    def validate(self):
        if self.kind not in ("constant", "piecewise", "stopgo"):
            raise SpecOutOfRange(f"unknown speed profile {self.kind!r}")
        if self.kind == "constant" and self.base < 0:
            raise SpecOutOfRange("speed must be non-negative")
        if self.kind == "piecewise":
            if not self.segments:
                raise SpecOutOfRange("piecewise profile needs segments")
            if any(d <= 0 or v < 0 for d, v in self.segments):
                raise SpecOutOfRange("segments need positive durations and non-negative speeds")
        if self.kind == "stopgo":
            if self.period <= 0 or self.amplitude < 0:
                raise SpecOutOfRange("stop-and-go needs period > 0 and amplitude >= 0")
            if self.amplitude > self.base:
                raise SpecOutOfRange("amplitude above base speed would reverse the vehicle")

    def speed(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind == "constant":
            return np.full_like(tau, self.base)
        if self.kind == "stopgo":
            return self.base + self.amplitude * np.sin(2 * np.pi * tau / self.period)
        ends = np.cumsum([d for d, _ in self.segments])
        speeds = np.array([v for _, v in self.segments])
        return speeds[np.minimum(np.searchsorted(ends, tau, side="right"), len(speeds) - 1)]

    def distance(self, tau):
        """Distance travelled tau seconds after entry (tau >= 0)."""
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind == "constant":
            return self.base * tau
        if self.kind == "stopgo":
            w = 2 * np.pi / self.period
            return self.base * tau + self.amplitude / w * (1.0 - np.cos(w * tau))
        out = np.zeros_like(tau)
        start = 0.0
        for i, (dur, v) in enumerate(self.segments):
            last = i == len(self.segments) - 1
            stop = np.inf if last else start + dur
            out += v * np.clip(np.minimum(tau, stop) - start, 0.0, None)
            start += dur
        return out


@dataclass(frozen=True)
class VehicleSpec:
    entry_time: float
    speed: SpeedProfile = SpeedProfile()
    length_ft: float = 15.0
    color: tuple = (230, 200, 40)


@dataclass(frozen=True)
class ShadowSpec:
    """Darkening band locked to a vehicle, ``offset_ft`` from its front along the road."""

    vehicle: int
    offset_ft: float = -40.0
    length_ft: float | None = None
    delta: float = -0.3


@dataclass(frozen=True)
class BackgroundSpec:
    kind: str = "constant"
    level: float = 0.35
    end_level: float = 0.25
    marker_level: float = 0.85
    marker_period_px: int = 24
    marker_length_px: int = 4
    texture_sigma: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    n: int
    m: int
    frame_rate: float = 10.0
    vehicles: tuple = ()
    background: BackgroundSpec = BackgroundSpec()
    shadows: tuple = ()
    noise_sigma: float = 0.0
    seed: int = 0
    lane_id: str = "synthetic"

    def validate(self, cal: CalibrationTable):
        if self.n < 2 or self.m < 2:
            raise SpecOutOfRange("scene needs n >= 2 and m >= 2")
        if self.noise_sigma < 0:
            raise SpecOutOfRange("noise_sigma must be >= 0")
        if self.background.kind not in ("constant", "gradient", "striped"):
            raise SpecOutOfRange(f"unknown background {self.background.kind!r}")
        if cal.pixels[0] > 0 or cal.pixels[-1] < self.n - 1:
            raise SpecOutOfRange("calibration must cover every scanline pixel")
        duration = self.m / self.frame_rate
        for i, v in enumerate(self.vehicles):
            if not 0.0 <= v.entry_time <= duration:
                raise SpecOutOfRange(f"vehicle {i} entry time outside [0, {duration:g}] s")
            if v.length_ft <= 0:
                raise SpecOutOfRange(f"vehicle {i} length must be positive")
            if v.length_ft < cal.max_cell_ft:
                raise SpecOutOfRange(f"vehicle {i} shorter than one calibration cell")
            if len(v.color) != 3 or not all(0 <= c <= 255 for c in v.color):
                raise SpecOutOfRange(f"vehicle {i} colour must be an RGB triple")
            v.speed.validate()
        for s in self.shadows:
            if not 0 <= s.vehicle < len(self.vehicles):
                raise SpecOutOfRange(f"shadow refers to missing vehicle {s.vehicle}")


@dataclass
class GroundTruth:
    truth_mask: SegMask
    truth_trajectories: list
    background_plate: np.ndarray
    front_rows: list = field(default_factory=list)
    vehicle_masks: list = field(default_factory=list)

    @property
    def vehicle_count(self) -> int:
        return len(self.truth_trajectories)


def _background_image(spec: SceneSpec) -> np.ndarray:
    bg = spec.background
    n = spec.n
    if bg.kind == "constant":
        level = np.full(n, bg.level)
    elif bg.kind == "gradient":
        level = np.linspace(bg.level, bg.end_level, n)
    else:
        level = np.full(n, bg.level)
        period = max(int(bg.marker_period_px), 1)
        level[(np.arange(n) % period) < bg.marker_length_px] = bg.marker_level
    if bg.texture_sigma > 0:
        rng = np.random.default_rng([spec.seed, 1])
        level = level + rng.normal(0.0, bg.texture_sigma, n)
    column = np.clip(np.rint(np.clip(level, 0, 1) * 255), 0, 255) / 255.0
    return np.repeat(np.repeat(column[:, None, None], spec.m, axis=1), 3, axis=2)


def vehicle_fronts(spec: SceneSpec, cal: CalibrationTable) -> list[np.ndarray]:
    """Front distance (ft) of each vehicle at every frame; NaN before entry."""
    t = np.arange(spec.m) / spec.frame_rate
    start = cal.feet_range[0]
    out = []
    for v in spec.vehicles:
        tau = t - v.entry_time
        front = np.full(spec.m, np.nan)
        live = tau >= 0
        front[live] = start + v.speed.distance(tau[live])
        out.append(front)
    return out


def generate(spec: SceneSpec, cal: CalibrationTable):
    """Render ``spec`` to an STMap and its ground truth."""
    spec.validate(cal)
    n, m = spec.n, spec.m
    pixel_ft = cal.to_feet(np.arange(n))[:, None]
    lo_ft, hi_ft = cal.feet_range

    background = _background_image(spec)
    plate = to_gray(STMap(np.rint(background * 255).astype(np.uint8), spec.frame_rate)).values

    fronts = vehicle_fronts(spec, cal)
    occupancy = []
    for v, front in zip(spec.vehicles, fronts):
        rear = front - v.length_ft
        with np.errstate(invalid="ignore"):
            occupancy.append((pixel_ft >= rear[None, :]) & (pixel_ft <= front[None, :]))
    truth = np.zeros((n, m), dtype=bool)
    for occ in occupancy:
        truth |= occ

    image = background.copy()
    for s in spec.shadows:
        front = fronts[s.vehicle] + s.offset_ft
        length = s.length_ft if s.length_ft is not None else spec.vehicles[s.vehicle].length_ft
        with np.errstate(invalid="ignore"):
            band = (pixel_ft >= (front - length)[None, :]) & (pixel_ft <= front[None, :])
        band &= ~truth
        image[band] += s.delta
    for v, occ in zip(spec.vehicles, occupancy):
        image[occ] = np.asarray(v.color, dtype=np.float64) / 255.0
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, 2])
        image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)

    trajectories, front_rows, vehicle_masks = [], [], []
    frames = np.arange(m)
    for i, (front, occ) in enumerate(zip(fronts, occupancy)):
        with np.errstate(invalid="ignore"):
            inside = (front >= lo_ft) & (front <= hi_ft)
        if not inside.any():
            continue
        trajectories.append(WorldTrajectory(i, frames[inside] / spec.frame_rate, front[inside]))
        front_rows.append(cal.to_pixels(front[inside]))
        vehicle_masks.append(occ)

    stmap = STMap(pixels, spec.frame_rate, spec.lane_id)
    gt = GroundTruth(SegMask(truth.astype(np.uint8), "synthetic_truth"), trajectories, plate,
                     front_rows, vehicle_masks)
    return stmap, gt


def truth_pixel_rows(gt: GroundTruth, cal: CalibrationTable) -> list[np.ndarray]:
    """Integer front row of each truth sample (extremal occupied row)."""
    out = []
    for traj, occ in zip(gt.truth_trajectories, gt.vehicle_masks):
        cols = np.rint(traj.times * cal.frame_rate).astype(int)
        sub = occ[:, cols]
        if cal.direction_flag:
            rows = sub.shape[0] - 1 - np.argmax(sub[::-1], axis=0)
        else:
            rows = np.argmax(sub, axis=0)
        out.append(rows)
    return out


# JSON ---------------------------------------------------------------------

def _speed_from_json(d: dict | float) -> SpeedProfile:
    if isinstance(d, (int, float)):
        return SpeedProfile("constant", float(d))
    kind = d.get("kind", "constant")
    return SpeedProfile(kind, float(d.get("base", d.get("value", 30.0))),
                        float(d.get("amplitude", 0.0)), float(d.get("period", 30.0)),
                        tuple((float(a), float(b)) for a, b in d.get("segments", ())))


def _speed_to_json(s: SpeedProfile) -> dict:
    out = {"kind": s.kind, "base": s.base}
    if s.kind == "stopgo":
        out.update(amplitude=s.amplitude, period=s.period)
    if s.kind == "piecewise":
        out["segments"] = [list(seg) for seg in s.segments]
    return out


def scene_from_json(data: dict) -> SceneSpec:
    try:
        vehicles = tuple(
            VehicleSpec(float(v["entry_time"]), _speed_from_json(v.get("speed", 30.0)),
                        float(v.get("length_ft", 15.0)),
                        tuple(int(c) for c in v.get("color", (230, 200, 40))))
            for v in data.get("vehicles", ()))
        shadows = tuple(
            ShadowSpec(int(s["vehicle"]), float(s.get("offset_ft", -40.0)),
                       None if s.get("length_ft") is None else float(s["length_ft"]),
                       float(s.get("delta", -0.3)))
            for s in data.get("shadows", ()))
        bg = BackgroundSpec(**data.get("background", {}))
        return SceneSpec(int(data["n"]), int(data["m"]), float(data.get("frame_rate", 10.0)),
                         vehicles, bg, shadows, float(data.get("noise_sigma", 0.0)),
                         int(data.get("seed", 0)), str(data.get("lane_id", "synthetic")))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad scene spec: {exc}") from None


def scene_to_json(spec: SceneSpec) -> dict:
    bg = spec.background
    return {
        "n": spec.n, "m": spec.m, "frame_rate": spec.frame_rate, "seed": spec.seed,
        "lane_id": spec.lane_id, "noise_sigma": spec.noise_sigma,
        "background": {k: getattr(bg, k) for k in BackgroundSpec.__dataclass_fields__},
        "vehicles": [{"entry_time": v.entry_time, "speed": _speed_to_json(v.speed),
                      "length_ft": v.length_ft, "color": list(v.color)} for v in spec.vehicles],
        "shadows": [{"vehicle": s.vehicle, "offset_ft": s.offset_ft, "length_ft": s.length_ft,
                     "delta": s.delta} for s in spec.shadows],
    }


def load_scene(path):
    """Scene spec JSON, optionally carrying its own ``calibration`` block."""
    with open(path) as fh:
        data = json.load(fh)
    cal = CalibrationTable.from_json(data["calibration"]) if "calibration" in data else None
    return scene_from_json(data), cal


def platoon(count: int, n: int = 128, m: int = 640, frame_rate: float = 10.0,
            headway_s: float = 5.0, speed_ft_s: float = 30.0, seed: int = 0) -> SceneSpec:
    """Evenly spaced constant-speed vehicles; handy for quick experiments."""
    rng = np.random.default_rng(seed)
    vehicles = tuple(
        VehicleSpec(1.0 + i * headway_s, SpeedProfile("constant", speed_ft_s),
                    float(rng.uniform(14, 20)),
                    tuple(int(c) for c in rng.integers(150, 256, 3)))
        for i in range(count) if 1.0 + i * headway_s <= m / frame_rate)
    return SceneSpec(n, m, frame_rate, vehicles, seed=seed)

