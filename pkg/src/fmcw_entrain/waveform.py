"""FMCW waveform structure and complex-baseband chirp evaluation.

All frequencies are offsets from a common carrier (``DEFAULT_CARRIER_HZ``
unless a scenario overrides it), so signals are never synthesized at RF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_CARRIER_HZ = 76.25e9
TWO_PI = 2.0 * math.pi


class ConfigurationError(ValueError):
    """Raised when a waveform, array or simulation configuration is inconsistent."""


def wrap_phase(phase: float) -> float:
    """Map a phase onto [0, 2*pi)."""
    wrapped = math.fmod(phase, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    # fmod of a tiny negative number can round up to exactly 2*pi
    return 0.0 if wrapped >= TWO_PI else wrapped


def wavelength(carrier_hz: float = DEFAULT_CARRIER_HZ) -> float:
    return SPEED_OF_LIGHT / carrier_hz


@dataclass(frozen=True)
class ChirpParams:
    """One linear chirp.

    Attributes:
        start_freq: frequency at the start of the chirp, Hz (carrier offset).
        slope: sweep rate, Hz/s.
        duration: chirp length, s. ``math.inf`` describes a continuous tone.
        phase: phase offset, rad, normalized to [0, 2*pi).
        start_time: delay of the chirp after the frame start, s.
    """

    start_freq: float
    slope: float
    duration: float
    phase: float = 0.0
    start_time: float = 0.0

    def __post_init__(self) -> None:
        if not self.duration > 0.0:
            raise ConfigurationError(f"chirp duration must be positive, got {self.duration!r}")
        object.__setattr__(self, "phase", wrap_phase(float(self.phase)))

    @property
    def stop_freq(self) -> float:
        return self.start_freq + self.slope * self.duration

    def within_band(self, band: tuple[float, float]) -> bool:
        """True if the whole sweep lies inside ``band`` (low, high) in Hz."""
        lo, hi = sorted((self.start_freq, self.stop_freq))
        return band[0] <= lo and hi <= band[1]


@dataclass(frozen=True)
class TxWeights:
    """One-hot transmit weighting with a PSK code phase."""

    antenna_index: int = 0
    code_phase: float = 0.0

    def __post_init__(self) -> None:
        if self.antenna_index < 0:
            raise ConfigurationError("antenna_index must be non-negative")
        object.__setattr__(self, "code_phase", wrap_phase(float(self.code_phase)))

    def vector(self, n_tx: int) -> np.ndarray:
        if self.antenna_index >= n_tx:
            raise ConfigurationError(
                f"antenna_index {self.antenna_index} out of range for {n_tx} TX antennas"
            )
        w = np.zeros(n_tx, dtype=complex)
        w[self.antenna_index] = np.exp(1j * self.code_phase)
        return w


def check_code_phase(weights: TxWeights, mod_order: int, atol: float = 1e-9) -> bool:
    """True if the code phase is a point of the ``mod_order``-PSK constellation."""
    m = weights.code_phase * mod_order / TWO_PI
    return abs(m - round(m)) < atol


@dataclass(frozen=True)
class FrameConfig:
    """A radar's repeating frame: ordered chirps with their TX weights."""

    chirps: tuple[tuple[ChirpParams, TxWeights], ...]
    frame_interval: float
    frame_offset: float = 0.0
    n_tx: int = 1
    n_rx: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "chirps", tuple((c, w) for c, w in self.chirps))
        if not self.chirps:
            raise ConfigurationError("a frame needs at least one chirp")
        if not self.frame_interval > 0.0:
            raise ConfigurationError("frame_interval must be positive")
        if self.n_tx < 1 or self.n_rx < 1:
            raise ConfigurationError("n_tx and n_rx must be at least 1")
        prev_end = -math.inf
        prev_start = -math.inf
        for k, (chirp, weights) in enumerate(self.chirps):
            if chirp.start_time <= prev_start:
                raise ConfigurationError(f"chirp {k}: start times must be strictly increasing")
            if chirp.start_time < prev_end:
                raise ConfigurationError(f"chirp {k} overlaps the previous chirp")
            end = chirp.start_time + chirp.duration
            if chirp.start_time < 0.0 or end > self.frame_interval:
                raise ConfigurationError(f"chirp {k} does not fit inside the frame interval")
            if weights.antenna_index >= self.n_tx:
                raise ConfigurationError(f"chirp {k} uses TX {weights.antenna_index} of {self.n_tx}")
            prev_start, prev_end = chirp.start_time, end

    def __len__(self) -> int:
        return len(self.chirps)

    @property
    def chirp_params(self) -> list[ChirpParams]:
        return [c for c, _ in self.chirps]

    def within_band(self, band: tuple[float, float]) -> bool:
        return all(c.within_band(band) for c, _ in self.chirps)


def _isotropic(angle: float) -> float:
    return 1.0


@dataclass(frozen=True)
class ArrayConfig:
    """Uniform linear array; spacing in carrier wavelengths."""

    n_elements: int
    element_spacing: float = 0.5
    gain_pattern: Callable[[float], float] = field(default=_isotropic, compare=False)

    def __post_init__(self) -> None:
        if self.n_elements < 1:
            raise ConfigurationError("an array needs at least one element")
        if not self.element_spacing > 0.0:
            raise ConfigurationError("element spacing must be positive")

    def gain(self, angle: float) -> float:
        return float(self.gain_pattern(angle))


def chirp_waveform(chirp: ChirpParams, t):
    """Evaluate a chirp at local time ``t`` (scalar or array).

    Returns ``exp(j2pi(f t + beta t^2 / 2) + j phi)`` on ``[0, duration)`` and
    exactly zero elsewhere.
    """
    t_arr = np.asarray(t, dtype=float)
    inside = (t_arr >= 0.0) & (t_arr < chirp.duration)
    # zero the argument outside the support so no phase is computed for inf/huge t
    tt = np.where(inside, t_arr, 0.0)
    phase = TWO_PI * (chirp.start_freq * tt + 0.5 * chirp.slope * tt * tt) + chirp.phase
    out = np.where(inside, np.exp(1j * phase), 0.0 + 0.0j)
    if out.ndim == 0:
        return complex(out)
    return out


def transmit_signal(frame: FrameConfig, t):
    """Frame-local transmitted vector over TX antennas.

    For scalar ``t`` the result has shape (n_tx,); for an array of times it
    has shape (n_tx, len(t)). Chirps never overlap, so at most one antenna is
    driven at any instant.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.zeros((frame.n_tx, t_arr.size), dtype=complex)
    for chirp, weights in frame.chirps:
        local = t_arr - chirp.start_time
        active = (local >= 0.0) & (local < chirp.duration)
        if not active.any():
            continue
        out[weights.antenna_index, active] += (
            np.exp(1j * weights.code_phase) * chirp_waveform(chirp, local[active])
        )
    if np.ndim(t) == 0:
        return out[:, 0]
    return out


def steering_vector(array: ArrayConfig, angle: float) -> np.ndarray:
    """Azimuth steering vector, element m = exp(j 2pi m d sin(angle))."""
    if not abs(angle) < math.pi / 2:
        raise ValueError(f"azimuth angle {angle!r} outside (-pi/2, pi/2)")
    m = np.arange(array.n_elements)
    return np.exp(1j * TWO_PI * m * array.element_spacing * math.sin(angle))


def uniform_frame(
    n_chirps: int,
    chirp_interval: float,
    duration: float,
    start_freq: float,
    slope: float,
    frame_interval: float,
    n_tx: int = 1,
    n_rx: int = 1,
    code_phases: Sequence[float] | None = None,
    first_chirp_time: float = 0.0,
    frame_offset: float = 0.0,
) -> FrameConfig:
    """Time-multiplexed MIMO frame: chirp k is sent on TX ``k % n_tx``."""
    if code_phases is None:
        code_phases = [0.0] * n_chirps
    if len(code_phases) != n_chirps:
        raise ConfigurationError("need one code phase per chirp")
    chirps = tuple(
        (
            ChirpParams(start_freq, slope, duration, 0.0, first_chirp_time + k * chirp_interval),
            TxWeights(k % n_tx, code_phases[k]),
        )
        for k in range(n_chirps)
    )
    return FrameConfig(chirps, frame_interval, frame_offset, n_tx, n_rx)
