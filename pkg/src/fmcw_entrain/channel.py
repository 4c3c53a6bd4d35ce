"""Propagation, dechirp mixing, IF filtering and sampling.

The mixed product of a received chirp and the spoofer's local signal is
itself a linear chirp, so captures are synthesized directly at the IF sample
rate from the closed-form mixed coefficients. Content whose instantaneous
frequency would alias (beyond half the sample rate) is tapered away before
the anti-aliasing FIR, which is applied zero-phase so sample timestamps carry
no group delay.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np
from scipy import constants, signal

from .waveform import (
    TWO_PI,
    ArrayConfig,
    ChirpParams,
    ConfigurationError,
    FrameConfig,
    steering_vector,
    wavelength,
)

BOLTZMANN = constants.k
DEFAULT_NOISE_FIGURE_DB = 15.0
# the analytic product is faded out between these fractions of Nyquist
_TAPER_START = 0.75
# fraction of a sample within which a segment edge counts as on the grid
_EDGE_TOL = 1e-6


def thermal_noise_psd(noise_figure_db: float = DEFAULT_NOISE_FIGURE_DB, temperature: float = 290.0) -> float:
    """Noise PSD kT*F in W/Hz."""
    return BOLTZMANN * temperature * 10.0 ** (noise_figure_db / 10.0)


@dataclass(frozen=True)
class PropagationPath:
    delay: float
    doppler: float = 0.0
    amplitude: float = 1.0
    aoa: float = 0.0
    aod: float = 0.0

    def __post_init__(self) -> None:
        if self.delay < 0.0:
            raise ConfigurationError("path delay must be non-negative")
        if self.amplitude < 0.0:
            raise ConfigurationError("path amplitude must be non-negative")


@dataclass(frozen=True)
class LinkBudget:
    tx_power: float
    path_loss: float
    rcs: float = 1.0
    tx_gain: float = 1.0
    rx_gain: float = 1.0

    def __post_init__(self) -> None:
        for name in ("tx_power", "path_loss", "rcs", "tx_gain", "rx_gain"):
            if not getattr(self, name) > 0.0:
                raise ConfigurationError(f"{name} must be positive")


def received_amplitude(budget: LinkBudget) -> float:
    """Amplitude sqrt(P_TX G_RX G_TX sigma / L) of a path."""
    p_rx = budget.tx_power * budget.rx_gain * budget.tx_gain * budget.rcs / budget.path_loss
    return math.sqrt(p_rx)


def free_space_loss(distance: float, carrier_hz: float) -> float:
    """One-way free-space loss (4 pi d / lambda)^2 as a linear factor >= 1 for far fields."""
    return (4.0 * math.pi * distance / wavelength(carrier_hz)) ** 2


@dataclass(frozen=True)
class SamplingConfig:
    """Complex IF sampling chain.

    The lowpass is a Hamming-windowed sinc with cutoff ``if_bandwidth / 2``.
    """

    sample_period: float
    if_bandwidth: float
    filter_taps: int = 129
    noise_psd: float = field(default_factory=thermal_noise_psd)

    def __post_init__(self) -> None:
        if not self.sample_period > 0.0 or not self.if_bandwidth > 0.0:
            raise ConfigurationError("sample period and IF bandwidth must be positive")
        if 1.0 / self.sample_period < self.if_bandwidth * (1.0 - 1e-12):
            raise ConfigurationError("sample rate too low for the IF bandwidth")
        if self.filter_taps < 1 or self.filter_taps % 2 == 0:
            raise ConfigurationError("filter_taps must be a positive odd number")
        if self.noise_psd < 0.0:
            raise ConfigurationError("noise_psd must be non-negative")

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.sample_period

    @property
    def cutoff(self) -> float:
        return self.if_bandwidth / 2.0

    @property
    def noise_power(self) -> float:
        return self.noise_psd / self.sample_period

    @cached_property
    def taps(self) -> np.ndarray:
        return signal.firwin(
            self.filter_taps, self.cutoff, window="hamming", fs=self.sample_rate
        )

    def mainlobe_samples(self) -> int:
        """Width of the impulse-response main lobe in samples."""
        return max(1, int(math.ceil(self.sample_rate / self.cutoff)))


@dataclass(frozen=True)
class ToneMixer:
    """Constant-frequency local signal used while identifying."""

    freq: float = 0.0


@dataclass(frozen=True)
class FrameMixer:
    """Local signal replaying an estimated frame.

    Attributes:
        frame: chirp schedule relative to each frame start.
        frame_starts: absolute start of every replayed frame, s.
        freq_offset: continuous LO offset applied to every chirp, Hz.
    """

    frame: FrameConfig
    frame_starts: tuple[float, ...]
    freq_offset: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "frame_starts", tuple(float(s) for s in self.frame_starts))


MixerDescriptor = Union[ToneMixer, FrameMixer]


@dataclass(frozen=True)
class TargetFrame:
    """One transmitted target frame and the paths it takes to the spoofer."""

    start: float
    paths: tuple[PropagationPath, ...]


@dataclass
class SampleCapture:
    samples: np.ndarray
    start_time: float
    sample_period: float
    mixer: MixerDescriptor | None = None

    def __post_init__(self) -> None:
        if self.samples.ndim != 2:
            raise ConfigurationError("capture samples must be a [n_rx x n_samples] matrix")

    @property
    def n_rx(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.n_samples) * self.sample_period

    # binary layout: <u4 n_rx, <u8 n_samples, <f8 T_s, <f8 start_time, then
    # row-major little-endian float32 (re, im) pairs
    _HEADER = struct.Struct("<IQdd")

    def to_bytes(self) -> bytes:
        header = self._HEADER.pack(self.n_rx, self.n_samples, self.sample_period, self.start_time)
        body = np.ascontiguousarray(self.samples, dtype="<c8").view("<f4").tobytes()
        return header + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SampleCapture":
        n_rx, n_samples, ts, t0 = cls._HEADER.unpack_from(blob)
        body = np.frombuffer(blob, dtype="<f4", offset=cls._HEADER.size)
        if body.size != 2 * n_rx * n_samples:
            raise ValueError("capture dump size does not match its header")
        samples = body.view("<c8").reshape(n_rx, n_samples).astype(np.complex64)
        return cls(samples, t0, ts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["sample", "time_s"]
        for a in range(self.n_rx):
            header += [f"rx{a}_re", f"rx{a}_im"]
        writer.writerow(header)
        for n, t in enumerate(self.times()):
            row = [n, repr(float(t))]
            for a in range(self.n_rx):
                v = self.samples[a, n]
                row += [repr(float(v.real)), repr(float(v.imag))]
            writer.writerow(row)
        return buf.getvalue()


def _mix_coefficients(
    tx: ChirpParams, mix: ChirpParams, delay: float, doppler: float
) -> tuple[float, float, float]:
    """(start_freq, slope, phase) of c_tx(u - delay) * conj(c_mix(u)) * exp(j2pi f_D u)."""
    slope = tx.slope - mix.slope
    start_freq = tx.start_freq - mix.start_freq - tx.slope * delay + doppler
    phase = (
        -TWO_PI * tx.start_freq * delay
        + math.pi * tx.slope * delay * delay
        + tx.phase
        - mix.phase
    )
    return start_freq, slope, phase


def mixed_chirp_oracle(tx_chirp: ChirpParams, mix_chirp: ChirpParams, path: PropagationPath) -> ChirpParams:
    """Closed-form chirp produced by dechirping a delayed, Doppler-shifted chirp.

    Coefficients are referenced to the start of the mixing chirp (local time
    0). The product only exists on the overlap returned by ``mixed_overlap``;
    the returned ``duration`` is left unbounded.
    """
    f0, slope, phase = _mix_coefficients(tx_chirp, mix_chirp, path.delay, path.doppler)
    return ChirpParams(f0, slope, math.inf, phase, 0.0)


def mixed_overlap(tx_chirp: ChirpParams, mix_chirp: ChirpParams, delay: float) -> tuple[float, float]:
    """Local-time interval [lo, hi) where both chirps are active (may be empty)."""
    return max(0.0, delay), min(mix_chirp.duration, delay + tx_chirp.duration)


@dataclass
class _Segment:
    origin: float  # absolute time of local u = 0
    lo: float
    hi: float
    f0: float
    slope: float
    phase: float
    gain: complex
    rx: np.ndarray


def _frac_cycles(freq: float, t: float) -> float:
    """2*pi*freq*t reduced modulo 2*pi."""
    return TWO_PI * math.fmod(freq * t, 1.0)


def _gate(seg: _Segment, gate_hz: float) -> bool:
    """Clip the support to where |instantaneous frequency| < gate_hz."""
    if seg.slope == 0.0:
        return abs(seg.f0) < gate_hz and seg.hi > seg.lo
    a = (-gate_hz - seg.f0) / seg.slope
    b = (gate_hz - seg.f0) / seg.slope
    lo, hi = (a, b) if a < b else (b, a)
    seg.lo = max(seg.lo, lo)
    seg.hi = min(seg.hi, hi)
    return seg.hi > seg.lo


class _MixerSchedule:
    """Absolute chirp intervals of a FrameMixer, sorted for interval lookup."""

    def __init__(self, mixer: FrameMixer) -> None:
        starts, ends, params = [], [], []
        f_off = mixer.freq_offset
        for fs in sorted(mixer.frame_starts):
            for chirp, _ in mixer.frame.chirps:
                t0 = fs + chirp.start_time
                starts.append(t0)
                ends.append(t0 + chirp.duration)
                if f_off:
                    chirp = ChirpParams(
                        chirp.start_freq + f_off,
                        chirp.slope,
                        chirp.duration,
                        chirp.phase + _frac_cycles(f_off, t0),
                        chirp.start_time,
                    )
                params.append(chirp)
        self.starts = np.asarray(starts)
        self.ends = np.asarray(ends)
        self.params = params

    def overlapping(self, t_lo: float, t_hi: float) -> range:
        i0 = int(np.searchsorted(self.ends, t_lo, side="right"))
        i1 = int(np.searchsorted(self.starts, t_hi, side="left"))
        return range(i0, max(i0, i1))


def _collect_segments(
    frame: FrameConfig,
    target_frames: Sequence[TargetFrame],
    mixer: MixerDescriptor,
    rx_array: ArrayConfig,
    tx_array: ArrayConfig | None,
    t_lo: float,
    t_hi: float,
    gate_hz: float,
) -> list[_Segment]:
    if tx_array is None:
        tx_array = ArrayConfig(frame.n_tx)
    if tx_array.n_elements != frame.n_tx:
        raise ConfigurationError(
            f"TX array has {tx_array.n_elements} elements but the frame uses {frame.n_tx}"
        )
    schedule = _MixerSchedule(mixer) if isinstance(mixer, FrameMixer) else None
    segments: list[_Segment] = []
    for tf in target_frames:
        for path in tf.paths:
            if path.amplitude == 0.0:
                continue
            a_rx = steering_vector(rx_array, path.aoa)
            a_tx = steering_vector(tx_array, path.aod)
            for chirp, weights in frame.chirps:
                arrival = tf.start + chirp.start_time + path.delay
                if arrival > t_hi or arrival + chirp.duration < t_lo:
                    continue
                gain = path.amplitude * a_tx[weights.antenna_index] * np.exp(1j * weights.code_phase)
                if schedule is None:
                    # tone referenced to the chirp arrival; carry its absolute phase
                    tone = ChirpParams(mixer.freq, 0.0, math.inf, _frac_cycles(mixer.freq, arrival))
                    f0, slope, phase = _mix_coefficients(chirp, tone, 0.0, path.doppler)
                    seg = _Segment(
                        arrival, 0.0, chirp.duration, f0, slope,
                        phase + _frac_cycles(path.doppler, arrival), gain, a_rx,
                    )
                    if _gate(seg, gate_hz):
                        segments.append(seg)
                    continue
                for i in schedule.overlapping(arrival, arrival + chirp.duration):
                    mix = schedule.params[i]
                    origin = float(schedule.starts[i])
                    tau = (tf.start - origin) + chirp.start_time + path.delay
                    lo, hi = mixed_overlap(chirp, mix, tau)
                    if hi <= lo:
                        continue
                    f0, slope, phase = _mix_coefficients(chirp, mix, tau, path.doppler)
                    seg = _Segment(
                        origin, lo, hi, f0, slope,
                        phase + _frac_cycles(path.doppler, origin), gain, a_rx,
                    )
                    if _gate(seg, gate_hz):
                        segments.append(seg)
    return segments


def _render(
    segments: Sequence[_Segment],
    grid_start: float,
    n_samples: int,
    sampling: SamplingConfig,
    n_rx: int,
    out: np.ndarray | None = None,
) -> np.ndarray:
    ts = sampling.sample_period
    taps = sampling.taps
    half = len(taps) // 2
    gate = 0.5 * sampling.sample_rate
    if out is None:
        out = np.zeros((n_rx, n_samples), dtype=complex)
    for seg in segments:
        d0 = seg.origin - grid_start
        # edges that sit on the sample grid must round the same way for any grid origin
        n_a = math.ceil((d0 + seg.lo) / ts - _EDGE_TOL)
        n_b = math.ceil((d0 + seg.hi) / ts - _EDGE_TOL)
        if n_b <= n_a or n_b + half <= 0 or n_a - half >= n_samples:
            continue
        u = np.arange(n_a, n_b) * ts - d0
        f_inst = np.abs(seg.f0 + seg.slope * u)
        x = np.exp(1j * (TWO_PI * (seg.f0 * u + 0.5 * seg.slope * u * u) + seg.phase))
        taper = f_inst > _TAPER_START * gate
        if taper.any():
            w = np.ones_like(f_inst)
            frac = (f_inst[taper] - _TAPER_START * gate) / ((1.0 - _TAPER_START) * gate)
            w[taper] = 0.5 * (1.0 + np.cos(math.pi * np.clip(frac, 0.0, 1.0)))
            x *= w
        y = np.convolve(x, taps) * seg.gain
        first = n_a - half
        lo = max(first, 0)
        hi = min(first + y.size, n_samples)
        out[:, lo:hi] += seg.rx[:, None] * y[None, lo - first : hi - first]
    return out


def _add_noise(block: np.ndarray, sampling: SamplingConfig, rng: np.random.Generator) -> None:
    sigma = math.sqrt(sampling.noise_power / 2.0)
    if sigma == 0.0:
        return
    real_dtype = np.float32 if block.dtype == np.complex64 else np.float64
    noise = rng.standard_normal(block.shape + (2,), dtype=real_dtype)
    noise *= sigma
    block += noise.view(block.dtype)[..., 0]


def simulate_capture(
    frame: FrameConfig,
    target_frames: Sequence[TargetFrame],
    mixer: MixerDescriptor,
    sampling: SamplingConfig,
    start_time: float,
    duration: float,
    rx_array: ArrayConfig,
    tx_array: ArrayConfig | None = None,
    rng: np.random.Generator | None = None,
    add_noise: bool = True,
    dtype=np.complex128,
) -> SampleCapture:
    """Continuous capture of the dechirped, filtered, sampled target signal.

    ``target_frames`` carry absolute frame starts and per-frame paths in the
    spoofer's time base; clock errors are expected to be folded into them.
    """
    if not duration > 0.0:
        raise ValueError("capture duration must be positive")
    ts = sampling.sample_period
    n = int(round(duration / ts))
    half = sampling.filter_taps // 2
    segments = _collect_segments(
        frame, target_frames, mixer, rx_array, tx_array,
        start_time - half * ts, start_time + (n + half) * ts, 0.5 * sampling.sample_rate,
    )
    samples = np.zeros((rx_array.n_elements, n), dtype=dtype)
    _render(segments, start_time, n, sampling, rx_array.n_elements, out=samples)
    if add_noise:
        _add_noise(samples, sampling, rng if rng is not None else np.random.default_rng())
    return SampleCapture(samples, start_time, ts, mixer)


def simulate_windows(
    frame: FrameConfig,
    target_frames: Sequence[TargetFrame],
    mixer: MixerDescriptor,
    sampling: SamplingConfig,
    window_starts: Sequence[float],
    n_samples: int,
    rx_array: ArrayConfig,
    tx_array: ArrayConfig | None = None,
    rng: np.random.Generator | None = None,
    add_noise: bool = True,
    dtype=np.complex128,
) -> np.ndarray:
    """Sample ``n_samples`` after each window start; returns [n_rx x n_samples x K]."""
    ts = sampling.sample_period
    half = sampling.filter_taps // 2
    starts = np.asarray(window_starts, dtype=float)
    n_rx = rx_array.n_elements
    cube = np.zeros((n_rx, n_samples, starts.size), dtype=dtype)
    if starts.size == 0:
        return cube
    segments = _collect_segments(
        frame, target_frames, mixer, rx_array, tx_array,
        float(starts.min()) - half * ts, float(starts.max()) + (n_samples + half) * ts,
        0.5 * sampling.sample_rate,
    )
    seg_lo = np.array([s.origin + s.lo for s in segments])
    seg_hi = np.array([s.origin + s.hi for s in segments])
    block = np.zeros((n_rx, n_samples), dtype=complex)
    for k, w0 in enumerate(starts):
        lo_t = w0 - half * ts
        hi_t = w0 + (n_samples + half) * ts
        mine = np.nonzero((seg_hi > lo_t) & (seg_lo < hi_t))[0] if segments else []
        block[:] = 0.0
        _render([segments[i] for i in mine], w0, n_samples, sampling, n_rx, out=block)
        cube[:, :, k] = block
    if add_noise:
        _add_noise(cube, sampling, rng if rng is not None else np.random.default_rng())
    return cube
