"""Exact dynamic mode decomposition of a grayscale STMap.

The snapshot columns are scanline states; the fitted linear operator maps each
column to the next. Modes with eigenvalue near 1 (zero continuous frequency)
reproduce the static road surface, the rest carry the moving strands.
"""

from __future__ import annotations

import csv
import logging
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (FormatError, IllConditioned, NoBackgroundMode, RankDeficient,
                     TooFewFrames, ValidationError, ZeroMatrix)
from .stmap import GrayMap

log = logging.getLogger(__name__)

SVD_FLOOR = 1e-12
DEFAULT_ENERGY = 0.999
DEFAULT_STATIONARITY_TOL = 1e-2
DEFAULT_COND_BOUND = 1e12

DMD_MAGIC = b"DMDM"
DMD_VERSION = 1
_HEADER = struct.Struct("<4sIIIIdd")


@dataclass(frozen=True)
class SnapshotPair:
    prior: np.ndarray
    posterior: np.ndarray

    def __post_init__(self):
        if self.prior.shape != self.posterior.shape:
            raise ValidationError("prior and posterior snapshots must share a shape")


@dataclass(frozen=True)
class RankRule:
    """Either a fixed rank or a cumulative singular-value energy fraction."""

    energy: float | None = DEFAULT_ENERGY
    rank: int | None = None

    @classmethod
    def fixed(cls, rank: int) -> "RankRule":
        return cls(energy=None, rank=int(rank))

    @classmethod
    def full(cls) -> "RankRule":
        return cls(energy=1.0)

    @classmethod
    def parse(cls, text) -> "RankRule":
        """'full', 'energy:0.999' or an integer rank."""
        if isinstance(text, RankRule):
            return text
        text = str(text).strip()
        if text == "full":
            return cls.full()
        if text.startswith("energy:"):
            return cls(energy=float(text.split(":", 1)[1]))
        return cls.fixed(int(text))

    def __str__(self):
        return str(self.rank) if self.rank is not None else f"energy:{self.energy}"

    def select(self, sigma: np.ndarray) -> int:
        cap = len(sigma)
        usable = int(np.sum(sigma > SVD_FLOOR * sigma[0]))
        if self.rank is not None:
            if self.rank < 1:
                raise ValidationError("rank must be >= 1")
            r = min(self.rank, cap)
            if r > usable:
                raise RankDeficient(
                    f"rank {r} requested but only {usable} singular values exceed "
                    f"{SVD_FLOOR:g} * sigma_max")
            return r
        if not 0.0 < self.energy <= 1.0:
            raise ValidationError("energy fraction must lie in (0, 1]")
        cumulative = np.cumsum(sigma ** 2) / np.sum(sigma ** 2)
        r = int(np.searchsorted(cumulative, self.energy - 1e-15) + 1)
        return max(1, min(r, usable))


@dataclass(frozen=True)
class DmdModes:
    modes: np.ndarray
    eigenvalues: np.ndarray
    amplitudes: np.ndarray | None
    rank: int
    frame_count: int
    fit_residual: float

    @property
    def n(self) -> int:
        return self.modes.shape[0]


@dataclass(frozen=True)
class BackgroundForeground:
    background: np.ndarray
    foreground: np.ndarray
    background_mode_indices: frozenset


def make_snapshots(gray) -> SnapshotPair:
    values = np.asarray(getattr(gray, "values", gray), dtype=np.float64)
    if values.ndim != 2 or values.shape[1] < 2:
        raise TooFewFrames(f"need at least 2 frames, got {values.shape}")
    return SnapshotPair(values[:, :-1].copy(), values[:, 1:].copy())


def compute_dmd(snap: SnapshotPair, rank_rule: RankRule | None = None) -> DmdModes:
    rank_rule = rank_rule or RankRule()
    X, Y = snap.prior, snap.posterior
    if not np.any(X):
        raise ZeroMatrix("prior snapshot matrix is identically zero")
    U, sigma, Vh = np.linalg.svd(X, full_matrices=False)
    r = rank_rule.select(sigma)
    U, sigma, V = U[:, :r], sigma[:r], Vh[:r].conj().T

    YVinv = (Y @ V) / sigma
    reduced = U.conj().T @ YVinv
    eigenvalues, W = np.linalg.eig(reduced)
    phi = (YVinv @ W).astype(np.complex128)
    norms = np.linalg.norm(phi, axis=0)
    # a zero-norm column only arises for lambda = 0; keep it finite
    norms[norms == 0] = 1.0
    phi = phi / norms

    projected = U @ (reduced @ (U.conj().T @ X))
    denom = np.linalg.norm(Y) or 1.0
    residual = float(np.linalg.norm(Y - projected) / denom)
    return DmdModes(phi, eigenvalues.astype(np.complex128), None, r, X.shape[1] + 1, residual)


def compute_amplitudes(modes: DmdModes, first_column: np.ndarray,
                       cond_bound: float = DEFAULT_COND_BOUND) -> DmdModes:
    first_column = np.asarray(first_column, dtype=np.float64)
    if first_column.shape != (modes.n,):
        raise ValidationError(f"first column must have length {modes.n}")
    sv = np.linalg.svd(modes.modes, compute_uv=False)
    cond = np.inf if sv[-1] == 0 else sv[0] / sv[-1]
    if cond > cond_bound:
        warnings.warn(f"mode matrix condition number {cond:.3g} exceeds {cond_bound:.3g}",
                      IllConditioned, stacklevel=2)
    b, *_ = np.linalg.lstsq(modes.modes, first_column.astype(np.complex128), rcond=None)
    return replace(modes, amplitudes=b)


def fit_dmd(gray, rank_rule: RankRule | None = None) -> DmdModes:
    """Snapshots, operator fit and amplitudes from the first column in one call."""
    values = np.asarray(getattr(gray, "values", gray), dtype=np.float64)
    modes = compute_dmd(make_snapshots(values), rank_rule)
    return compute_amplitudes(modes, values[:, 0])


def _time_dynamics(eigenvalues, amplitudes, frames):
    t = np.asarray(frames, dtype=np.float64)
    return amplitudes[:, None] * eigenvalues[:, None] ** t[None, :]


def reconstruct_complex(modes: DmdModes, frames=None, indices=None) -> np.ndarray:
    if modes.amplitudes is None:
        raise ValidationError("amplitudes have not been computed")
    frames = np.arange(modes.frame_count) if frames is None else np.asarray(frames)
    idx = np.arange(modes.rank) if indices is None else np.asarray(sorted(indices), dtype=int)
    if idx.size == 0:
        return np.zeros((modes.n, len(frames)), dtype=np.complex128)
    dyn = _time_dynamics(modes.eigenvalues[idx], modes.amplitudes[idx], frames)
    return modes.modes[:, idx] @ dyn


def reconstruct(modes: DmdModes, frames=None, indices=None) -> np.ndarray:
    """Real part of sum_j b_j phi_j lambda_j**t for 0-based frame indices ``frames``."""
    full = reconstruct_complex(modes, frames, indices)
    if full.size:
        log.debug("reconstruction imaginary residual %.3e", np.abs(full.imag).max())
    return full.real.copy()


def imaginary_residual(modes: DmdModes, frames=None) -> float:
    full = reconstruct_complex(modes, frames)
    return float(np.abs(full.imag).max()) if full.size else 0.0


def stationary_indices(eigenvalues: np.ndarray, tol: float = DEFAULT_STATIONARITY_TOL):
    with np.errstate(divide="ignore"):
        drift = np.abs(np.log(eigenvalues.astype(np.complex128)))
    return frozenset(int(j) for j in np.flatnonzero(drift <= tol))


def split_background(modes: DmdModes, stationarity_tol: float = DEFAULT_STATIONARITY_TOL,
                     frames=None) -> BackgroundForeground:
    bg_idx = stationary_indices(modes.eigenvalues, stationarity_tol)
    if not bg_idx:
        warnings.warn(f"no mode satisfies |log lambda| <= {stationarity_tol:g}",
                      NoBackgroundMode, stacklevel=2)
    fg_idx = [j for j in range(modes.rank) if j not in bg_idx]
    frames = np.arange(modes.frame_count) if frames is None else np.asarray(frames)
    background = reconstruct(modes, frames, bg_idx)
    foreground = reconstruct(modes, frames, fg_idx)
    return BackgroundForeground(background, foreground, bg_idx)


def residual_foreground(gray, split: BackgroundForeground) -> np.ndarray:
    """Input minus the stationary reconstruction; the sparse part used for labeling."""
    values = np.asarray(getattr(gray, "values", gray), dtype=np.float64)
    return values - split.background


# diagnostics --------------------------------------------------------------

@dataclass(frozen=True)
class ModeRecord:
    index: int
    eigenvalue: complex
    magnitude: float
    omega: complex
    amplitude: float


def mode_diagnostics(modes: DmdModes, frame_rate: float = 1.0) -> list[ModeRecord]:
    """Per-mode |lambda|, continuous frequency log(lambda)/dt and |b|, largest |b| first."""
    if modes.amplitudes is None:
        raise ValidationError("amplitudes have not been computed")
    with np.errstate(divide="ignore"):
        omega = np.log(modes.eigenvalues.astype(np.complex128)) * frame_rate
    records = [ModeRecord(j, complex(modes.eigenvalues[j]), float(abs(modes.eigenvalues[j])),
                          complex(omega[j]), float(abs(modes.amplitudes[j])))
               for j in range(modes.rank)]
    return sorted(records, key=lambda rec: (-rec.amplitude, rec.index))


def write_diagnostics_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "re_lambda", "im_lambda", "abs_lambda",
                         "omega_re", "omega_im", "abs_b"])
        for rec in records:
            writer.writerow([rec.index, repr(rec.eigenvalue.real), repr(rec.eigenvalue.imag),
                             repr(rec.magnitude), repr(rec.omega.real), repr(rec.omega.imag),
                             repr(rec.amplitude)])


def plot_spectrum(modes: DmdModes, path, stationarity_tol: float = DEFAULT_STATIONARITY_TOL):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lam = modes.eigenvalues
    bg = sorted(stationary_indices(lam, stationarity_tol))
    fig, ax = plt.subplots(figsize=(5, 5))
    theta = np.linspace(0, 2 * np.pi, 400)
    ax.plot(np.cos(theta), np.sin(theta), color="0.6", lw=1, label="unit circle")
    size = 10 + 60 * (np.abs(modes.amplitudes) / max(np.abs(modes.amplitudes).max(), 1e-300)
                      if modes.amplitudes is not None else 0)
    ax.scatter(lam.real, lam.imag, s=size, color="tab:blue", label="modes")
    if bg:
        ax.scatter(lam.real[bg], lam.imag[bg], s=80, facecolors="none",
                   edgecolors="tab:red", label="stationary")
    ax.set_aspect("equal")
    ax.set_xlabel("Re λ")
    ax.set_ylabel("Im λ")
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# serialization ------------------------------------------------------------

def save_modes(modes: DmdModes, path) -> None:
    if modes.amplitudes is None:
        raise ValidationError("amplitudes have not been computed")
    header = _HEADER.pack(DMD_MAGIC, DMD_VERSION, modes.rank, modes.n, modes.frame_count,
                          modes.fit_residual, 0.0)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (modes.modes, modes.eigenvalues, modes.amplitudes):
            fh.write(np.ascontiguousarray(arr, dtype="<c16").tobytes())


def load_modes(path) -> DmdModes:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated DMD header")
    magic, version, k, n, m, residual, _ = _HEADER.unpack_from(data)
    if magic != DMD_MAGIC or version != DMD_VERSION:
        raise FormatError(f"{path}: not a DMD mode file")
    body = np.frombuffer(data, dtype="<c16", offset=_HEADER.size)
    if body.size != n * k + 2 * k:
        raise FormatError(f"{path}: size mismatch")
    phi = body[:n * k].reshape(n, k).astype(np.complex128)
    lam = body[n * k:n * k + k].astype(np.complex128)
    b = body[n * k + k:].astype(np.complex128)
    return DmdModes(phi, lam, b, k, m, residual)
