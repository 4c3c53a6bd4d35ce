"""Passive identification of an unknown FMCW frame from tone-mixed detections.

Frame timing comes from Gaussian kernel correlation between detection sets
(coarse interval, centring offset, refined interval). Chirps are then found
by clustering detection times inside one frame, and each chirp's line in
time-frequency is fitted with a gated, recursively refitted least squares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.signal import find_peaks

from .detect import DetectionSet
from .waveform import ChirpParams, ConfigurationError, FrameConfig, TxWeights

# Gaussian terms beyond this many kernel widths are dropped (exp(-64) ~ 1e-28)
_KERNEL_REACH = 8.0
_PAIR_CHUNK = 4_000_000
_COND_LIMIT = 1e12


class IdentificationError(RuntimeError):
    """The identification stage could not produce an estimate."""

    def __init__(self, message: str, stage: str = "identify") -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class KernelConfig:
    """Kernel widths (s) for frame timing and chirp matching.

    Attributes:
        sigma: coarse kernel width; above the longest chirp interval and below
            the shortest frame interval.
        sigma_ref: refined kernel width; below the shortest chirp duration.
        sigma_chirp: matching threshold for detections of one chirp.
        lag_grid: optional (min, max, step) for the coarse lag search.
    """

    sigma: float
    sigma_ref: float
    sigma_chirp: float
    lag_grid: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        if min(self.sigma, self.sigma_ref, self.sigma_chirp) <= 0.0:
            raise ConfigurationError("kernel widths must be positive")
        if not self.sigma_ref < self.sigma:
            raise ConfigurationError("sigma_ref must be smaller than sigma")

    @classmethod
    def from_bounds(
        cls, max_chirp_interval: float, min_chirp_duration: float, min_inter_chirp: float
    ) -> "KernelConfig":
        return cls(2.0 * max_chirp_interval, min_chirp_duration / 4.0, min_inter_chirp / 4.0)


def kernel(t1, t2, sigma: float):
    """Gaussian kernel likelihood exp(-|t1 - t2|^2 / sigma^2)."""
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    d = np.subtract(t1, t2)
    return np.exp(-(d * d) / (sigma * sigma))


def _gaussian_sums(sorted_vals: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    """sum_v exp(-(c - v)^2 / sigma^2) for every centre c, using only nearby v."""
    reach = _KERNEL_REACH * sigma
    lo = np.searchsorted(sorted_vals, centers - reach, side="left")
    hi = np.searchsorted(sorted_vals, centers + reach, side="right")
    out = np.zeros(centers.size)
    counts = hi - lo
    start = 0
    while start < centers.size:
        # grow the chunk until it holds roughly _PAIR_CHUNK terms
        csum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(csum, _PAIR_CHUNK, side="right")))
        n = counts[start:stop]
        owner = np.repeat(np.arange(start, stop), n)
        offs = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        d = centers[owner] - sorted_vals[lo[owner] + offs]
        out[start:stop] = np.bincount(owner - start, weights=np.exp(-(d * d) / sigma**2), minlength=stop - start)
        start = stop
    return out


def sum_kernel_likelihood(D1: DetectionSet, D2: DetectionSet, sigma: float, lag):
    """d(l) = sum over pairs of k(t1, t2 - l, sigma); ``lag`` may be an array."""
    if len(D1) == 0 or len(D2) == 0:
        raise ValueError("detection sets must be non-empty")
    diffs = np.sort((D2.times[None, :] - D1.times[:, None]).ravel())
    lags = np.atleast_1d(np.asarray(lag, dtype=float))
    vals = _gaussian_sums(diffs, lags, sigma)
    return float(vals[0]) if np.ndim(lag) == 0 else vals


def estimate_frame_interval(
    D1: DetectionSet,
    D2: DetectionSet,
    cfg: KernelConfig,
    min_frame_interval: float | None = None,
) -> float:
    """Frame interval from the spacing of peaks in the sum kernel likelihood.

    Local maxima above half the global maximum are kept; the median spacing
    of consecutive ones is returned. Peaks closer than half of
    ``min_frame_interval`` are treated as one.
    """
    if len(D1) < 1 or len(D2) < 1 or len(D1) + len(D2) < 3:
        raise IdentificationError("not enough detections to see frame repetition", "frame_interval")
    step = cfg.sigma / 10.0
    if cfg.lag_grid is not None:
        lo, hi, step = cfg.lag_grid
    else:
        lo = D2.times.min() - D1.times.max() - 3.0 * cfg.sigma
        hi = D2.times.max() - D1.times.min() + 3.0 * cfg.sigma
    lags = np.arange(lo, hi + 0.5 * step, step)
    curve = sum_kernel_likelihood(D1, D2, cfg.sigma, lags)
    distance = None
    if min_frame_interval is not None:
        distance = max(1, int(0.5 * min_frame_interval / step))
    peaks, _ = find_peaks(curve, height=0.5 * curve.max(), distance=distance)
    if peaks.size < 2:
        raise IdentificationError(
            f"found {peaks.size} qualifying kernel peak(s); need at least 2", "frame_interval"
        )
    return float(np.median(np.diff(lags[peaks])))


def _offset_objective(times: np.ndarray, offsets: np.ndarray, interval: float) -> np.ndarray:
    out = np.empty(offsets.size)
    chunk = max(1, _PAIR_CHUNK // max(times.size, 1))
    for s in range(0, offsets.size, chunk):
        o = offsets[s : s + chunk]
        r = np.mod(times[None, :] - o[:, None], interval) - 0.5 * interval
        out[s : s + chunk] = np.sum(r * r, axis=1)
    return out


def estimate_frame_offset(D: DetectionSet, frame_interval: float, step: float) -> float:
    """Offset in [0, T) that best centres detections within their frames.

    Grid search with spacing ``step``; ties resolve to the smallest offset.
    """
    if len(D) == 0:
        raise IdentificationError("no detections to place in a frame", "frame_offset")
    offsets = np.arange(0.0, frame_interval, step)
    obj = _offset_objective(D.times, offsets, frame_interval)
    return float(offsets[int(np.argmin(obj))])


def fold_times(times: np.ndarray, frame_offset: float, frame_interval: float) -> np.ndarray:
    """g(t) = (t - offset) mod interval."""
    return np.mod(np.asarray(times) - frame_offset, frame_interval)


def _refined_likelihood(times: np.ndarray, frame_offset: float, frame_interval: float, lag: float, sigma_ref: float) -> float:
    g = np.sort(fold_times(times, frame_offset, frame_interval - lag))
    return float(_gaussian_sums(g, g, sigma_ref).sum())


@dataclass(frozen=True)
class FrameTiming:
    frame_interval: float
    frame_offset: float
    lag: float
    folded: DetectionSet


def refine_frame_interval(
    D: DetectionSet,
    frame_offset: float,
    frame_interval: float,
    cfg: KernelConfig,
    polish: bool = True,
) -> tuple[float, DetectionSet]:
    """Error of the coarse interval and the detections folded into one frame.

    The refined likelihood is evaluated on a grid of step sigma_ref/10 over
    +/- sigma; with ``polish`` the grid maximum is then polished by a bounded
    scalar search within one grid step. The corrected interval is
    ``frame_interval - lag``.
    """
    if len(D) == 0:
        raise IdentificationError("no detections to refine", "refine")
    step = cfg.sigma_ref / 10.0
    n_half = int(math.ceil(cfg.sigma / step))
    lags = np.arange(-n_half, n_half + 1) * step
    vals = np.array([_refined_likelihood(D.times, frame_offset, frame_interval, l, cfg.sigma_ref) for l in lags])
    best = float(lags[int(np.argmax(vals))])
    if polish:
        res = optimize.minimize_scalar(
            lambda l: -_refined_likelihood(D.times, frame_offset, frame_interval, l, cfg.sigma_ref),
            bounds=(best - step, best + step),
            method="bounded",
            options={"xatol": 1e-13},
        )
        if -res.fun >= vals.max():
            best = float(res.x)
    folded = D.with_times(fold_times(D.times, frame_offset, frame_interval - best))
    return best, folded


def refined_likelihood_curve(D: DetectionSet, frame_offset: float, frame_interval: float, lags, sigma_ref: float) -> np.ndarray:
    return np.array([_refined_likelihood(D.times, frame_offset, frame_interval, l, sigma_ref) for l in np.atleast_1d(lags)])


@dataclass(frozen=True)
class ChirpCluster:
    time: float
    times: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.times.size)


def match_chirps(D_frame: DetectionSet, sigma_chirp: float, min_size: int = 1) -> list[ChirpCluster]:
    """Single-linkage grouping of folded detection times.

    Two detections match when (t1 - t2)^2 < sigma_chirp^2; each group's time
    is the mean of its members. Groups smaller than ``min_size`` are dropped.
    """
    if len(D_frame) == 0:
        return []
    t = np.sort(D_frame.times)
    breaks = np.nonzero(np.diff(t) ** 2 >= sigma_chirp**2)[0] + 1
    clusters = [ChirpCluster(float(g.mean()), g) for g in np.split(t, breaks)]
    return [c for c in clusters if c.size >= min_size]


def plan_frequency_search(band: tuple[float, float], m_search: int) -> np.ndarray:
    """Linearly spaced search tones covering ``band``; one tone gives the midpoint."""
    if m_search < 1:
        raise ValueError("m_search must be at least 1")
    lo, hi = band
    if m_search == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, m_search)


@dataclass
class ChirpEstimate:
    slope: float
    reg_offset: float
    matched_times: np.ndarray
    matched_freqs: np.ndarray
    covariance: np.ndarray
    start_time: float = math.nan
    start_freq: float = math.nan
    duration: float = math.nan
    # (beta, f) after every accepted detection
    trace: list[tuple[float, float]] = field(default_factory=list, repr=False, compare=False)

    @property
    def resolved(self) -> bool:
        return self.matched_times.size >= 2 and self.slope != 0.0


def _line_fit(t: np.ndarray, f: np.ndarray, t_ref: float, sigma_freq2: float) -> tuple[float, float, np.ndarray]:
    """Least squares f = beta t + f0 and its covariance sigma^2 (X^H X)^-1.

    Normal equations are formed in times shifted to ``t_ref`` and scaled to
    unit span (same estimator, far better conditioned), then mapped back to
    absolute time.
    """
    rel = t - t_ref
    scale = float(np.max(np.abs(rel))) or 1.0
    x = np.column_stack([rel / scale, np.ones_like(t)])
    inv = np.linalg.pinv(x.T @ x, rcond=1.0 / _COND_LIMIT)
    beta_u, f_ref = inv @ (x.T @ f)
    to_abs = np.array([[1.0 / scale, 0.0], [-t_ref / scale, 1.0]])
    cov = sigma_freq2 * to_abs @ inv @ to_abs.T
    beta = beta_u / scale
    return float(beta), float(f_ref - beta * t_ref), cov


def estimate_chirp_params(start_time: float, D_search: DetectionSet, sigma_freq2: float) -> ChirpEstimate:
    """Iterative chirp parameter estimation.

    Detections are visited in order of distance from ``start_time`` (ties by
    earlier time). The nearest seeds the chirp; while the covariance is still
    uninformative (one match) the next detection is accepted outright. After
    that a detection is accepted when |f - (beta t + f0)| < 2 sigma_hat with
    sigma_hat^2 = x K x^H + sigma_freq^2, x = [t, 1], and the line and K are
    refitted. The first rejection ends the search.
    """
    if len(D_search) == 0:
        raise IdentificationError("no search detections", "chirp_fit")
    if not sigma_freq2 > 0.0:
        raise ValueError("sigma_freq2 must be positive")
    t_all, f_all = D_search.times, D_search.freqs
    order = np.lexsort((t_all, np.abs(t_all - start_time)))
    t_ref = float(t_all[order[0]])
    mt = [t_ref]
    mf = [float(f_all[order[0]])]
    beta = 0.0
    f0 = 0.0
    cov: np.ndarray | None = None  # None stands for diag(inf, inf)
    trace: list[tuple[float, float]] = []
    for i in order[1:]:
        t, f = float(t_all[i]), float(f_all[i])
        if cov is not None:
            pred = beta * t + f0
            x = np.array([t, 1.0])
            var = float(x @ cov @ x) + sigma_freq2
            if not abs(f - pred) / math.sqrt(var) < 2.0:
                break
        mt.append(t)
        mf.append(f)
        beta, f0, cov = _line_fit(np.array(mt), np.array(mf), t_ref, sigma_freq2)
        trace.append((beta, f0))
    if cov is None:
        cov = np.full((2, 2), np.inf)
    return ChirpEstimate(beta, f0, np.array(mt), np.array(mf), cov, trace=trace)


def derive_chirp_anchors(est: ChirpEstimate, tone_spacing: float = 0.0) -> tuple[float, float, float]:
    """(start frequency, start time, duration) of a fitted chirp.

    The start frequency is the tone of the earliest matched detection; the
    start time is where the fitted line reaches it. The duration spans the
    matched frequencies plus one tone spacing.
    """
    if est.matched_times.size < 2:
        raise IdentificationError("need at least two matched detections", "anchors")
    if est.slope == 0.0:
        raise IdentificationError("zero slope; chirp unresolved", "anchors")
    n_start = int(np.argmin(est.matched_times))
    start_freq = float(est.matched_freqs[n_start])
    start_time = (start_freq - est.reg_offset) / est.slope
    span = float(est.matched_freqs.max() - est.matched_freqs.min()) + tone_spacing
    duration = span / abs(est.slope)
    return start_freq, start_time, duration


@dataclass
class SignalEstimate:
    """The spoofer's picture of the target frame."""

    frame_interval: float
    frame_offset: float
    chirps: list[ChirpEstimate]
    phase_codes: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.chirps = sorted(self.chirps, key=lambda c: c.start_time)
        if not self.phase_codes:
            self.phase_codes = [0.0] * len(self.chirps)
        if len(self.phase_codes) != len(self.chirps):
            raise ValueError("need one phase code per chirp")

    def to_frame_config(self, guard: float = 0.0) -> FrameConfig:
        """Mixer frame replaying the estimate on a single TX chain.

        Durations are trimmed so chirps never overlap or cross the frame end.
        """
        chirps = []
        n = len(self.chirps)
        for k, est in enumerate(self.chirps):
            limit = self.chirps[k + 1].start_time - guard if k + 1 < n else self.frame_interval
            duration = min(est.duration, limit - est.start_time)
            chirps.append(
                (ChirpParams(est.start_freq, est.slope, duration, self.phase_codes[k], est.start_time), TxWeights(0, 0.0))
            )
        return FrameConfig(tuple(chirps), self.frame_interval, self.frame_offset, 1, 1)


def identify_chirps(
    clusters: Sequence[ChirpCluster],
    D_search: DetectionSet,
    sigma_freq: float,
    tone_spacing: float,
) -> list[ChirpEstimate]:
    """Run the chirp fit for every cluster and attach start/duration anchors.

    Unresolved chirps (fewer than two matches or zero slope) are dropped.
    """
    out = []
    for cl in clusters:
        est = estimate_chirp_params(cl.time, D_search, sigma_freq**2)
        if not est.resolved:
            continue
        est.start_freq, est.start_time, est.duration = derive_chirp_anchors(est, tone_spacing)
        out.append(est)
    return out
