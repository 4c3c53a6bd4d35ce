"""Receive beamforming, CA-CFAR and detection consolidation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import fft as sp_fft

from .channel import SampleCapture


@dataclass
class BeamformedCapture:
    samples: np.ndarray  # [n_os * n_rx beams x n_samples]
    oversampling: int
    beam_angles: np.ndarray


def beam_spatial_freqs(n_beams: int) -> np.ndarray:
    """Normalized spatial frequency of each FFT beam bin, wrapped to [-0.5, 0.5)."""
    return np.fft.fftfreq(n_beams)


def beam_angles(n_beams: int, spacing: float = 0.5) -> np.ndarray:
    """Azimuth (rad) of each beam bin; bins outside visible space map to NaN."""
    u = beam_spatial_freqs(n_beams) / spacing
    with np.errstate(invalid="ignore"):
        return np.where(np.abs(u) <= 1.0, np.arcsin(np.clip(u, -1.0, 1.0)), np.nan)


def beamform(capture: SampleCapture, n_os: int = 1, spacing: float = 0.5) -> BeamformedCapture:
    """FFT across the antenna dimension, zero-padded to ``n_os * n_rx`` beams.

    Bin ``b`` responds to a steering vector exp(j2pi m d sin(theta)) with
    b / n_beams = d sin(theta).
    """
    if capture.n_rx < 1 or n_os < 1:
        raise ValueError("need at least one antenna and n_os >= 1")
    n_beams = n_os * capture.n_rx
    beams = sp_fft.fft(capture.samples, n=n_beams, axis=0)
    return BeamformedCapture(beams, n_os, beam_angles(n_beams, spacing))


def max_power_bin(bf: BeamformedCapture | np.ndarray) -> tuple[int, int]:
    """(sample index, beam index) of the strongest cell.

    Ties go to the lowest sample index, then the lowest beam index.
    """
    x = bf.samples if isinstance(bf, BeamformedCapture) else bf
    if x.size == 0:
        raise ValueError("empty capture")
    power = np.abs(x) ** 2
    # argmax over the transposed (sample-major) array gives the stated tie-break
    flat = int(np.argmax(power.T))
    n, b = np.unravel_index(flat, power.T.shape)
    return int(n), int(b)


def strongest_beam(capture: SampleCapture, n_os: int, chunk: int = 1 << 16) -> tuple[int, int, np.ndarray]:
    """Memory-bounded equivalent of ``beamform`` + ``max_power_bin``.

    Returns (sample index, beam index, beamformed series of that beam).
    """
    n_beams = n_os * capture.n_rx
    best = (-1.0, 0, 0)
    for c0 in range(0, capture.n_samples, chunk):
        block = sp_fft.fft(capture.samples[:, c0 : c0 + chunk], n=n_beams, axis=0)
        power = np.abs(block) ** 2
        flat = int(np.argmax(power.T))
        n, b = np.unravel_index(flat, power.T.shape)
        if power[b, n] > best[0]:
            best = (float(power[b, n]), c0 + int(n), int(b))
    _, n_max, b_max = best
    weights = np.exp(-2j * np.pi * np.arange(capture.n_rx) * b_max / n_beams)
    series = weights.astype(capture.samples.dtype) @ capture.samples
    return n_max, b_max, series


@dataclass(frozen=True)
class CfarConfig:
    n_train: int = 16
    n_guard: int = 8
    pfa: float = 1e-6
    consolidation_gap: int = 4

    def __post_init__(self) -> None:
        if not 0.0 < self.pfa < 1.0:
            raise ValueError("pfa must lie in (0, 1)")
        if self.n_train < 4:
            raise ValueError("n_train must be at least 4")
        if self.n_guard < 0 or self.consolidation_gap < 0:
            raise ValueError("guard cells and gap must be non-negative")


def ca_cfar_factor(n_cells, pfa: float):
    """Threshold multiplier alpha = N (pfa^(-1/N) - 1) for square-law CA-CFAR."""
    n = np.asarray(n_cells, dtype=float)
    return n * (pfa ** (-1.0 / n) - 1.0)


def cfar_threshold(power: np.ndarray, cfg: CfarConfig) -> np.ndarray:
    """Per-cell CA-CFAR threshold.

    Near the ends the training window is clipped to the cells that exist and
    alpha is recomputed for the reduced count.
    """
    n = power.size
    csum = np.concatenate(([0.0], np.cumsum(power, dtype=float)))
    idx = np.arange(n)
    g, t = cfg.n_guard, cfg.n_train
    l_lo = np.clip(idx - g - t, 0, n)
    l_hi = np.clip(idx - g, 0, n)
    r_lo = np.clip(idx + g + 1, 0, n)
    r_hi = np.clip(idx + g + t + 1, 0, n)
    total = (csum[l_hi] - csum[l_lo]) + (csum[r_hi] - csum[r_lo])
    count = (l_hi - l_lo) + (r_hi - r_lo)
    return ca_cfar_factor(count, cfg.pfa) * total / count


def cfar_detect(series: np.ndarray, cfg: CfarConfig) -> np.ndarray:
    """Indices of cells whose power exceeds the CA-CFAR threshold."""
    series = np.asarray(series)
    if series.size <= 2 * (cfg.n_train + cfg.n_guard) + 1:
        raise ValueError("series too short for the CFAR window")
    power = (series.real.astype(float) ** 2) + (series.imag.astype(float) ** 2)
    return np.nonzero(power > cfar_threshold(power, cfg))[0]


@dataclass(frozen=True)
class Detection:
    time: float
    freq: float
    beam: int = 0


def _as_array(values, dtype) -> np.ndarray:
    if not isinstance(values, (np.ndarray, list, tuple)):
        values = list(values)
    return np.asarray(values, dtype=dtype).reshape(-1)


class DetectionSet:
    """Time-frequency detections held as parallel arrays."""

    def __init__(self, times: Iterable[float] = (), freqs: Iterable[float] = (), beams: Iterable[int] | None = None):
        self.times = _as_array(times, float)
        self.freqs = _as_array(freqs, float)
        self.beams = np.zeros(self.times.size, dtype=int) if beams is None else _as_array(beams, int)
        if not (self.times.shape == self.freqs.shape == self.beams.shape):
            raise ValueError("times, freqs and beams must have equal length")

    @classmethod
    def from_detections(cls, dets: Iterable[Detection]) -> "DetectionSet":
        dets = list(dets)
        return cls([d.time for d in dets], [d.freq for d in dets], [d.beam for d in dets])

    def __len__(self) -> int:
        return self.times.size

    def __iter__(self):
        for t, f, b in zip(self.times, self.freqs, self.beams):
            yield Detection(float(t), float(f), int(b))

    def __repr__(self) -> str:
        return f"DetectionSet(n={len(self)})"

    def union(self, *others: "DetectionSet") -> "DetectionSet":
        sets = (self,) + others
        return DetectionSet(
            np.concatenate([s.times for s in sets]),
            np.concatenate([s.freqs for s in sets]),
            np.concatenate([s.beams for s in sets]),
        )

    def with_times(self, times: np.ndarray) -> "DetectionSet":
        return DetectionSet(np.asarray(times, dtype=float), self.freqs.copy(), self.beams.copy())

    def sorted(self) -> "DetectionSet":
        order = np.lexsort((self.freqs, self.times))
        return DetectionSet(self.times[order], self.freqs[order], self.beams[order])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["time_s", "freq_hz", "beam"])
        for t, f, b in zip(self.times, self.freqs, self.beams):
            writer.writerow([repr(float(t)), repr(float(f)), int(b)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DetectionSet":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            [float(r["time_s"]) for r in rows],
            [float(r["freq_hz"]) for r in rows],
            [int(r["beam"]) for r in rows],
        )


def consolidate(
    indices: Sequence[int],
    gap: int,
    sample_period: float,
    f_tone: float,
    beam: int = 0,
    time_offset: float = 0.0,
) -> DetectionSet:
    """Collapse runs of neighbouring sample indices into one detection each.

    Successive indices no more than ``gap`` apart share a group; each group
    becomes one detection at the floor midpoint of its first and last index.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return DetectionSet()
    breaks = np.nonzero(np.diff(idx) > gap)[0]
    firsts = np.concatenate(([idx[0]], idx[breaks + 1]))
    lasts = np.concatenate((idx[breaks], [idx[-1]]))
    centers = (firsts + lasts) // 2
    times = time_offset + centers * sample_period
    return DetectionSet(times, np.full(centers.size, float(f_tone)), np.full(centers.size, beam))


def detect_capture(
    capture: SampleCapture, f_tone: float, cfg: CfarConfig, n_os: int = 4
) -> DetectionSet:
    """Full detection chain for one tone-mixed capture, in absolute times."""
    _, b_max, series = strongest_beam(capture, n_os)
    hits = cfar_detect(series, cfg)
    return consolidate(hits, cfg.consolidation_gap, capture.sample_period, f_tone, b_max, capture.start_time)
