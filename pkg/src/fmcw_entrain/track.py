"""Tracking stage: data-cube processing and per-chirp refinement.

Beat-frequency convention: mixing forms rx * conj(local), so a received chirp
that lags the local chirp by ``tau`` lands at FFT frequency ``-slope * tau``.
The beat frequency is therefore taken as the negated FFT frequency, which
makes positive delays map to positive beats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import fft as sp_fft

from .waveform import SPEED_OF_LIGHT, TWO_PI


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


@dataclass
class DataCube:
    """Per-chirp sample windows stacked as [n_rx x n_samples x n_chirps]."""

    samples: np.ndarray
    chirp_times: np.ndarray
    sample_period: float

    def __post_init__(self) -> None:
        if self.samples.ndim != 3:
            raise ValueError("a data cube is [n_rx x n_samples x n_chirps]")
        self.chirp_times = np.asarray(self.chirp_times, dtype=float)
        if self.chirp_times.size != self.samples.shape[2]:
            raise ValueError("need one time per chirp")

    @property
    def n_rx(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def n_chirps(self) -> int:
        return self.samples.shape[2]

    @property
    def chirp_interval(self) -> float:
        """Mean chirp spacing, used as the uniform Doppler sample period."""
        if self.n_chirps < 2:
            return math.nan
        return float(np.mean(np.diff(self.chirp_times)))


def build_cube(windows: Sequence[np.ndarray], chirp_times: Sequence[float], sample_period: float) -> DataCube:
    """Stack per-chirp [n_rx x n_samples] windows into a data cube."""
    if len(windows) == 0:
        raise ValueError("no chirp windows")
    arrays = [np.atleast_2d(np.asarray(w)) for w in windows]
    shape = arrays[0].shape
    for k, a in enumerate(arrays):
        if a.shape != shape:
            raise ValueError(f"chirp {k} window has shape {a.shape}, expected {shape}")
    return DataCube(np.stack(arrays, axis=2), np.asarray(chirp_times, dtype=float), sample_period)


@dataclass
class ProcessedCube:
    """Beam x range x Doppler spectrum of a data cube.

    Attributes:
        spectrum: complex [n_beams x n_range x n_doppler] FFT output.
        beam_per_bin: normalized spatial frequency per beam bin.
        fft_freq_per_bin: range-FFT frequency step, Hz.
        doppler_per_bin: Doppler step, Hz.
    """

    spectrum: np.ndarray
    beam_per_bin: float
    fft_freq_per_bin: float
    doppler_per_bin: float
    sample_period: float
    chirp_interval: float

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.spectrum.shape

    def power(self) -> np.ndarray:
        return np.abs(self.spectrum) ** 2

    def peak(self) -> tuple[int, int, int]:
        """(beam, range, Doppler) bin of maximum power; ties by lowest index."""
        return tuple(int(i) for i in np.unravel_index(int(np.argmax(self.power())), self.shape))

    def magnitude_dump(self, beam: int) -> bytes:
        """Little-endian float32 |spectrum| of one beam, [n_range x n_doppler], row-major."""
        return np.ascontiguousarray(np.abs(self.spectrum[beam]), dtype="<f4").tobytes()


def process_cube(
    cube: DataCube,
    n_os: int = 4,
    n_range: int | None = None,
    n_doppler: int | None = None,
) -> ProcessedCube:
    """Beam, range and Doppler FFTs over the three cube axes (no windowing)."""
    n_beams = n_os * cube.n_rx
    n_range = n_range or next_pow2(cube.n_samples)
    n_doppler = n_doppler or cube.n_chirps
    if n_range < cube.n_samples or n_doppler < cube.n_chirps:
        raise ValueError("FFT sizes must not be smaller than the cube")
    spec = sp_fft.fft(cube.samples, n=n_beams, axis=0)
    spec = sp_fft.fft(spec, n=n_range, axis=1)
    spec = sp_fft.fft(spec, n=n_doppler, axis=2)
    t_c = cube.chirp_interval if cube.n_chirps > 1 else 1.0
    return ProcessedCube(
        spec,
        1.0 / n_beams,
        1.0 / (n_range * cube.sample_period),
        1.0 / (n_doppler * t_c),
        cube.sample_period,
        t_c,
    )


def _signed_bin(index: int, size: int) -> int:
    """FFT bin index mapped to [-size/2, size/2)."""
    return index - size if index >= (size + 1) // 2 or (size % 2 == 0 and index == size // 2) else index


def beat_to_delay(beat: float, slope: float) -> float:
    if slope == 0.0:
        raise ZeroDivisionError("slope must be non-zero")
    return beat / slope


def bins_to_physical(
    peak: tuple[int, int, int],
    processed: ProcessedCube,
    slope: float,
    element_spacing: float = 0.5,
) -> tuple[float, float, float]:
    """Convert a (beam, range, Doppler) bin into (angle rad, delay s, Doppler Hz).

    Bins above Nyquist wrap to negative values; the exact Nyquist bin is
    negative.
    """
    b, n, d = peak
    n_beams, n_range, n_doppler = processed.shape
    u = _signed_bin(b, n_beams) * processed.beam_per_bin / element_spacing
    angle = math.asin(max(-1.0, min(1.0, u)))
    beat = -_signed_bin(n, n_range) * processed.fft_freq_per_bin
    delay = beat_to_delay(beat, slope)
    doppler = _signed_bin(d, n_doppler) * processed.doppler_per_bin
    return angle, delay + 0.0, doppler + 0.0


@dataclass(frozen=True)
class TrackerState:
    """First-order loop placing the peak at a desired delay and Doppler."""

    desired_delay: float
    desired_doppler: float = 0.0
    gain_delay: float = 0.5
    gain_doppler: float = 0.5
    delay_correction: float = 0.0
    freq_correction: float = 0.0

    def __post_init__(self) -> None:
        for g in (self.gain_delay, self.gain_doppler):
            if not 0.0 < g <= 1.0:
                raise ValueError("tracker gains must lie in (0, 1]")


def tracker_update(
    state: TrackerState, measured_delay: float | None, measured_doppler: float | None
) -> TrackerState:
    """Move the corrections toward the desired point; ``None`` skips an axis."""
    delay = state.delay_correction
    freq = state.freq_correction
    if measured_delay is not None:
        delay += state.gain_delay * (measured_delay - state.desired_delay)
    if measured_doppler is not None:
        freq += state.gain_doppler * (measured_doppler - state.desired_doppler)
    return replace(state, delay_correction=delay, freq_correction=freq)


def beam_series(cube: DataCube, beam: int, n_beams: int) -> np.ndarray:
    """Row ``beam`` of the beamformed cube: [n_samples x n_chirps]."""
    w = np.exp(-2j * np.pi * np.arange(cube.n_rx) * beam / n_beams)
    return np.tensordot(w, cube.samples, axes=(0, 0))


@dataclass
class RangeAlignment:
    delays: np.ndarray  # per-chirp delay estimates, s
    corrections: np.ndarray  # delays minus their mean, s
    peak_values: np.ndarray  # complex range-FFT value at each chirp's peak
    peak_bins: np.ndarray


def per_chirp_range_align(
    z: np.ndarray, slopes, sample_period: float, n_fft: int | None = None
) -> RangeAlignment:
    """Per-chirp delay from the range-FFT peak of the beamformed samples.

    Args:
        z: [n_samples x n_chirps] beamformed samples at the peak beam.
        slopes: per-chirp (or common) slope estimates, Hz/s.
        sample_period: T_s, s.
        n_fft: range FFT size; zero-padding finer than the plain range FFT
            sharpens the delay estimates.

    Returns:
        Delays, mean-removed corrections and the complex peak values p_k.
    """
    n_samples, n_chirps = z.shape
    n_fft = n_fft or next_pow2(n_samples)
    spec = sp_fft.fft(z, n=n_fft, axis=0)
    bins = np.argmax(np.abs(spec) ** 2, axis=0)
    p = spec[bins, np.arange(n_chirps)]
    fft_freq = np.array([_signed_bin(int(b), n_fft) for b in bins]) / (n_fft * sample_period)
    delays = -fft_freq / np.broadcast_to(np.asarray(slopes, dtype=float), (n_chirps,))
    return RangeAlignment(delays, delays - delays.mean(), p, bins)


def slope_objective(z: np.ndarray, slope_grid, sample_period: float, n_fft: int | None = None) -> np.ndarray:
    """Peak range-FFT power of z * exp(j pi beta (T_s n)^2), n = 1..N, per trial beta."""
    z = np.asarray(z).reshape(-1)
    grid = np.atleast_1d(np.asarray(slope_grid, dtype=float))
    n_fft = n_fft or next_pow2(z.size)
    tn = sample_period * np.arange(1, z.size + 1)
    mixed = z[None, :] * np.exp(1j * np.pi * grid[:, None] * tn[None, :] ** 2)
    return np.max(np.abs(sp_fft.fft(mixed, n=n_fft, axis=1)) ** 2, axis=1)


def refine_chirp_slope(z: np.ndarray, slope_grid, sample_period: float, n_fft: int | None = None) -> float:
    """Residual slope maximizing the peak range power; ties go to the smallest |beta|.

    The local chirp's slope should then be adjusted by the negative of the
    returned value.
    """
    grid = np.atleast_1d(np.asarray(slope_grid, dtype=float))
    obj = slope_objective(z, grid, sample_period, n_fft)
    best = np.flatnonzero(obj == obj.max())
    return float(grid[best[np.argmin(np.abs(grid[best]))]])


@dataclass(frozen=True)
class SlopeSearch:
    """Two-stage slope grid: coarse +/- span*slope, then a finer pass."""

    span: float = 0.05
    n_points: int = 101
    fine_factor: int = 10

    def coarse_step(self, slope: float) -> float:
        return 2.0 * self.span * abs(slope) / (self.n_points - 1)

    def fine_step(self, slope: float) -> float:
        return self.coarse_step(slope) / self.fine_factor

    def search(self, z: np.ndarray, slope: float, sample_period: float, n_fft: int | None = None) -> float:
        c = self.coarse_step(slope)
        half = (self.n_points - 1) // 2
        coarse = refine_chirp_slope(z, np.arange(-half, half + 1) * c, sample_period, n_fft)
        f = self.fine_step(slope)
        fine_grid = coarse + np.arange(-self.fine_factor, self.fine_factor + 1) * f
        return refine_chirp_slope(z, fine_grid, sample_period, n_fft)


@dataclass
class PhaseCodeEstimate:
    residual_doppler: float
    residual_phase: float
    decoded: np.ndarray
    mod_order: int
    reliable: bool = True


def vv_phase_estimate(p: np.ndarray, mod_order: int, chirp_interval: float, pad: int = 16) -> PhaseCodeEstimate:
    """Viterbi and Viterbi code wipe-off and per-chirp phase decoding.

    Each p_k is raised to the power ``mod_order`` to strip the PSK code; the
    FFT peak of that sequence gives the residual rotation. The de-rotated
    phases are quantized to the constellation and reported relative to the
    first chirp.

    Args:
        p: complex peak values, one per chirp.
        mod_order: PSK order, a power of two.
        chirp_interval: mean chirp spacing T_c, s.
        pad: zero-padding factor of the FFT.

    Returns:
        Residual Doppler and phase plus the decoded code phases (rad).
    """
    if mod_order < 2 or mod_order & (mod_order - 1):
        raise ValueError("mod_order must be a power of two >= 2")
    p = np.asarray(p, dtype=complex).reshape(-1)
    k = np.arange(p.size)
    pv = p**mod_order
    n_fft = pad * next_pow2(p.size)
    spec = sp_fft.fft(pv, n=n_fft)
    i = int(np.argmax(np.abs(spec)))
    f_peak = _signed_bin(i, n_fft) / (n_fft * chirp_interval)
    f_v = f_peak / mod_order
    phi_v = float(np.angle(np.sum(pv * np.exp(-1j * TWO_PI * f_peak * chirp_interval * k)))) / mod_order
    p_corr = p * np.exp(-1j * (TWO_PI * f_v * chirp_interval * k + phi_v))
    step = TWO_PI / mod_order
    symbols = np.mod(np.round(np.angle(p_corr) / step).astype(int), mod_order)
    decoded = np.mod(symbols - symbols[0], mod_order) * step
    reliable = abs(f_v) < 0.9 / (2.0 * mod_order * chirp_interval)
    return PhaseCodeEstimate(f_v, phi_v, decoded, mod_order, bool(reliable))


def power_width(profile: np.ndarray, peak: int | None = None, fraction: float = 0.5) -> int:
    """Bins in the interval grown from the peak until it holds > ``fraction`` of the power.

    The interval grows one bin at a time toward the stronger neighbour,
    wrapping circularly; ties extend to the lower index.
    """
    pw = np.asarray(profile, dtype=float)
    n = pw.size
    total = pw.sum()
    if n == 0 or total <= 0.0:
        raise ValueError("profile must have positive total power")
    if peak is None:
        peak = int(np.argmax(pw))
    lo = hi = peak
    acc = pw[peak]
    width = 1
    while acc <= fraction * total and width < n:
        left, right = pw[(lo - 1) % n], pw[(hi + 1) % n]
        if left >= right:
            lo -= 1
            acc += left
        else:
            hi += 1
            acc += right
        width += 1
    return width


@dataclass(frozen=True)
class FrameMetrics:
    frame_index: int
    range_width_m: float
    doppler_width_hz: float
    slope_rmse_hz_per_s: float


def slope_rmse(estimated, truth) -> float:
    e = np.asarray(estimated, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean(e * e)))


def frame_metrics(
    frame_index: int,
    processed: ProcessedCube,
    slope: float,
    estimated_slopes,
    true_slopes,
    two_way: bool = True,
) -> FrameMetrics:
    """50%-power range and Doppler widths through the peak, plus slope RMSE.

    Range widths use c * delay / 2 when ``two_way`` (radar convention) and
    c * delay otherwise.
    """
    b, n, d = processed.peak()
    power = processed.power()
    range_bins = power_width(power[b, :, d], n)
    doppler_bins = power_width(power[b, n, :], d)
    delay_per_bin = processed.fft_freq_per_bin / abs(slope)
    metres_per_bin = SPEED_OF_LIGHT * delay_per_bin * (0.5 if two_way else 1.0)
    return FrameMetrics(
        frame_index,
        range_bins * metres_per_bin,
        doppler_bins * processed.doppler_per_bin,
        slope_rmse(estimated_slopes, true_slopes),
    )
