"""Scenario files, end-to-end orchestration and artifact writers.

A scenario is a TOML file whose keys carry their unit in the name
(``chirp_duration_us``, ``frame_interval_ms``...). Every value is converted to
SI on load. Identification and tracking are run against a simulated target
whose frame starts, delays and Doppler are expressed in the spoofer's clock.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

from .channel import (
    FrameMixer,
    PropagationPath,
    SamplingConfig,
    TargetFrame,
    ToneMixer,
    free_space_loss,
    simulate_capture,
    simulate_windows,
    thermal_noise_psd,
)
from .clock import ClockModel
from .detect import CfarConfig, DetectionSet, detect_capture
from .identify import (
    ChirpCluster,
    ChirpEstimate,
    IdentificationError,
    KernelConfig,
    SignalEstimate,
    estimate_frame_interval,
    estimate_frame_offset,
    fold_times,
    identify_chirps,
    match_chirps,
    plan_frequency_search,
    refine_frame_interval,
)
from .track import (
    DataCube,
    FrameMetrics,
    ProcessedCube,
    SlopeSearch,
    TrackerState,
    beam_series,
    bins_to_physical,
    frame_metrics,
    next_pow2,
    per_chirp_range_align,
    process_cube,
    slope_objective,
    tracker_update,
    vv_phase_estimate,
)
from .waveform import (
    SPEED_OF_LIGHT,
    TWO_PI,
    ArrayConfig,
    ChirpParams,
    ConfigurationError,
    FrameConfig,
    TxWeights,
    uniform_frame,
    wavelength,
)

_REQUIRED = object()


class ScenarioError(ConfigurationError):
    """Scenario file could not be parsed or failed schema validation."""


def _key(name: str, scale: float = 1.0, default: Any = _REQUIRED):
    """Dataclass field bound to a scenario key; values are multiplied by ``scale``."""
    meta = {"key": name, "scale": scale}
    if default is _REQUIRED:
        return field(metadata=meta)
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass(frozen=True, kw_only=True)
class RunSpec:
    name: str = _key("name", default="scenario")
    rng_seed: int = _key("rng_seed", default=0)
    carrier_hz: float = _key("carrier_ghz", 1e9, 76.25e9)


@dataclass(frozen=True, kw_only=True)
class TargetSpec:
    n_tx: int = _key("n_tx")
    n_rx: int = _key("n_rx")
    n_chirps: int = _key("n_chirps")
    chirp_interval: float = _key("chirp_interval_us", 1e-6)
    chirp_duration: float = _key("chirp_duration_us", 1e-6)
    start_freq: float = _key("chirp_start_freq_mhz", 1e6)
    bandwidth: float = _key("chirp_bandwidth_mhz", 1e6)
    frame_interval: float = _key("frame_interval_ms", 1e-3)
    first_frame_start: float = _key("first_frame_start_ms", 1e-3, 3e-3)
    first_chirp_time: float = _key("first_chirp_us", 1e-6, 0.0)
    tx_spacing: float = _key("tx_spacing_wavelengths", default=2.0)
    rx_spacing: float = _key("rx_spacing_wavelengths", default=0.5)
    code: str = _key("phase_code", default="random")
    mod_order: int = _key("mod_order", default=2)
    position: list = _key("position_m")
    velocity: list = _key("velocity_mps", default=[0.0, 0.0])
    boresight: float = _key("boresight_deg", math.pi / 180.0, 0.0)

    @property
    def slope(self) -> float:
        return self.bandwidth / self.chirp_duration


@dataclass(frozen=True, kw_only=True)
class SpooferSpec:
    n_rx: int = _key("n_rx")
    rx_spacing: float = _key("rx_spacing_wavelengths", default=0.5)
    sample_rate: float = _key("sample_rate_mhz", 1e6)
    if_bandwidth: float = _key("if_bandwidth_mhz", 1e6)
    filter_taps: int = _key("filter_taps", default=129)
    noise_figure_db: float = _key("noise_figure_db", default=15.0)
    position: list = _key("position_m", default=[0.0, 0.0])
    velocity: list = _key("velocity_mps", default=[0.0, 0.0])
    boresight: float = _key("boresight_deg", math.pi / 180.0, 0.0)


@dataclass(frozen=True, kw_only=True)
class LinkSpec:
    tx_power_dbm: float = _key("tx_power_dbm")
    tx_gain_dbi: float = _key("tx_gain_dbi", default=0.0)
    rx_gain_dbi: float = _key("rx_gain_dbi", default=0.0)

    def amplitude(self, distance: float, carrier_hz: float) -> float:
        p_w = 1e-3 * 10.0 ** (self.tx_power_dbm / 10.0)
        gains = 10.0 ** ((self.tx_gain_dbi + self.rx_gain_dbi) / 10.0)
        return math.sqrt(p_w * gains / free_space_loss(distance, carrier_hz))


@dataclass(frozen=True, kw_only=True)
class ClockSpec:
    target_h0: float = _key("target_h0", default=2e-19)
    target_h_minus2: float = _key("target_h_minus2", default=2e-20)
    target_bias: float = _key("target_bias_ns", 1e-9, 0.0)
    target_drift: float = _key("target_drift_ppb", 1e-9, 0.0)
    spoofer_h0: float = _key("spoofer_h0", default=2e-19)
    spoofer_h_minus2: float = _key("spoofer_h_minus2", default=2e-20)
    spoofer_bias: float = _key("spoofer_bias_ns", 1e-9, 0.0)
    spoofer_drift: float = _key("spoofer_drift_ppb", 1e-9, 0.0)


@dataclass(frozen=True, kw_only=True)
class ReflectorSpec:
    position: list = _key("position_m")
    rcs: float = _key("rcs_m2", default=1.0)


@dataclass(frozen=True, kw_only=True)
class IdentifySpec:
    tone_freq: float = _key("tone_freq_mhz", 1e6, 0.0)
    min_frame_interval: float = _key("min_frame_interval_ms", 1e-3)
    max_frame_interval: float = _key("max_frame_interval_ms", 1e-3)
    capture_factor: float = _key("capture_factor", default=2.5)
    max_chirp_interval: float = _key("max_chirp_interval_us", 1e-6)
    min_chirp_duration: float = _key("min_chirp_duration_us", 1e-6)
    min_inter_chirp: float = _key("min_inter_chirp_us", 1e-6)
    m_search: int = _key("m_search", default=32)
    search_band: list = _key("search_band_mhz", 1e6)
    sigma_freq: float = _key("sigma_freq_mhz", 1e6, 2e6)
    n_os: int = _key("beam_oversampling", default=4)
    min_cluster_size: int = _key("min_cluster_size", default=2)
    cfar_train: int = _key("cfar_train_cells", default=16)
    cfar_guard: int = _key("cfar_guard_cells", default=8)
    cfar_pfa: float = _key("cfar_pfa", default=1e-6)
    consolidation_gap: int = _key("consolidation_gap_samples", default=4)

    @property
    def capture_duration(self) -> float:
        return self.capture_factor * self.max_frame_interval

    def kernel_config(self) -> KernelConfig:
        return KernelConfig.from_bounds(self.max_chirp_interval, self.min_chirp_duration, self.min_inter_chirp)

    def cfar_config(self) -> CfarConfig:
        return CfarConfig(self.cfar_train, self.cfar_guard, self.cfar_pfa, self.consolidation_gap)


@dataclass(frozen=True, kw_only=True)
class TrackSpec:
    n_frames: int = _key("n_frames", default=24)
    desired_range: float = _key("desired_range_m", default=30.0)
    desired_doppler: float = _key("desired_doppler_hz", default=0.0)
    gain_delay: float = _key("gain_delay", default=0.5)
    gain_doppler: float = _key("gain_doppler", default=0.5)
    refine_from_frame: int = _key("refine_from_frame", default=2)
    phase_frame: int = _key("phase_frame", default=12)
    n_os: int = _key("beam_oversampling", default=4)
    window_skip: float = _key("window_skip_us", 1e-6, 1e-6)
    window_margin: float = _key("window_margin_us", 1e-6, 0.5e-6)
    slope_span: float = _key("slope_span", default=0.05)
    slope_points: int = _key("slope_points", default=101)
    slope_fine_factor: int = _key("slope_fine_factor", default=10)
    slope_fft_factor: int = _key("slope_fft_factor", default=4)
    align_fft_factor: int = _key("align_fft_factor", default=16)
    slope_deadband: float = _key("slope_deadband", default=0.02)
    range_two_way: bool = _key("range_two_way", default=True)

    @property
    def desired_delay(self) -> float:
        """Mixer-relative delay that puts the peak at ``desired_range``."""
        return self.desired_range / SPEED_OF_LIGHT * (2.0 if self.range_two_way else 1.0)

    def slope_search(self) -> SlopeSearch:
        return SlopeSearch(self.slope_span, self.slope_points, self.slope_fine_factor)


@dataclass(frozen=True)
class Scenario:
    run: RunSpec
    target: TargetSpec
    spoofer: SpooferSpec
    link: LinkSpec
    clocks: ClockSpec
    identify: IdentifySpec
    track: TrackSpec
    reflectors: tuple[ReflectorSpec, ...] = ()

    def with_seed(self, seed: int) -> "Scenario":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, rng_seed=int(seed)))

    @property
    def sampling(self) -> SamplingConfig:
        return SamplingConfig(
            1.0 / self.spoofer.sample_rate,
            self.spoofer.if_bandwidth,
            self.spoofer.filter_taps,
            thermal_noise_psd(self.spoofer.noise_figure_db),
        )

    @property
    def rx_array(self) -> ArrayConfig:
        return ArrayConfig(self.spoofer.n_rx, self.spoofer.rx_spacing)

    @property
    def tx_array(self) -> ArrayConfig:
        return ArrayConfig(self.target.n_tx, self.target.tx_spacing)


_SECTIONS: dict[str, type] = {
    "scenario": RunSpec,
    "target": TargetSpec,
    "spoofer": SpooferSpec,
    "link": LinkSpec,
    "clocks": ClockSpec,
    "identify": IdentifySpec,
    "track": TrackSpec,
}


def _locate(text: str, section: str, key: str | None = None) -> int | None:
    """1-based line of ``[section]`` (or of ``key`` inside it), if present."""
    header = re.compile(r"^\s*\[\[?\s*" + re.escape(section) + r"\s*\]\]?\s*(#.*)?$")
    any_header = re.compile(r"^\s*\[")
    key_re = re.compile(r"^\s*" + re.escape(key) + r"\s*=") if key else None
    inside = False
    for i, line in enumerate(text.splitlines(), start=1):
        if header.match(line):
            if key_re is None:
                return i
            inside = True
        elif any_header.match(line):
            inside = False
        elif inside and key_re is not None and key_re.match(line):
            return i
    return None


def _fail(text: str, source: str, message: str, section: str, key: str | None = None) -> ScenarioError:
    line = _locate(text, section, key) or _locate(text, section)
    where = f"{source}:{line}" if line else source
    return ScenarioError(f"{where}: {message}")


def _convert(value: Any, ftype: Any, scale: float, where: str) -> Any:
    kind = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    if kind == "bool":
        if not isinstance(value, bool):
            raise TypeError(f"{where} must be true or false")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{where} must be an integer")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise TypeError(f"{where} must be a string")
        return value
    if kind == "list":
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise TypeError(f"{where} must be a list of numbers")
        return [float(v) * scale for v in value]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"{where} must be a number")
    return float(value) * scale


def _build_section(cls: type, table: dict, text: str, source: str, section: str):
    fields = {f.metadata["key"]: f for f in dataclasses.fields(cls)}
    for key in table:
        if key not in fields:
            raise _fail(text, source, f"unknown key '{key}' in [{section}]", section, key)
    kwargs = {}
    for key, f in fields.items():
        if key not in table:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise _fail(text, source, f"missing required key '{key}' in [{section}]", section)
            continue
        try:
            kwargs[f.name] = _convert(table[key], f.type, f.metadata["scale"], f"{section}.{key}")
        except TypeError as exc:
            raise _fail(text, source, str(exc), section, key) from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise _fail(text, source, str(exc), section) from None


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    """Parse and validate scenario TOML text."""
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    for name in data:
        if name not in _SECTIONS and name != "reflector":
            raise _fail(text, source, f"unknown section [{name}]", name)
    sections = {}
    for name, cls in _SECTIONS.items():
        table = data.get(name, {})
        if not isinstance(table, dict):
            raise _fail(text, source, f"[{name}] must be a table", name)
        sections[name] = _build_section(cls, table, text, source, name)
    reflectors = tuple(
        _build_section(ReflectorSpec, t, text, source, "reflector") for t in data.get("reflector", [])
    )
    sc = Scenario(
        sections["scenario"], sections["target"], sections["spoofer"], sections["link"],
        sections["clocks"], sections["identify"], sections["track"], reflectors,
    )
    _validate(sc, text, source)
    return sc


def _validate(sc: Scenario, text: str, source: str) -> None:
    for section, vec in (("target", sc.target.position), ("spoofer", sc.spoofer.position),
                         ("target", sc.target.velocity), ("spoofer", sc.spoofer.velocity)):
        if len(vec) != 2:
            raise _fail(text, source, "positions and velocities are [x, y] pairs", section)
    if np.allclose(sc.target.position, sc.spoofer.position):
        raise _fail(text, source, "target and spoofer positions must differ", "target", "position_m")
    if len(sc.identify.search_band) != 2:
        raise _fail(text, source, "search_band_mhz must be [low, high]", "identify", "search_band_mhz")
    if not sc.identify.min_frame_interval < sc.identify.max_frame_interval:
        raise _fail(text, source, "min_frame_interval_ms must be below max_frame_interval_ms", "identify")
    if not 1 <= sc.track.refine_from_frame:
        raise _fail(text, source, "refine_from_frame must be at least 1", "track", "refine_from_frame")
    try:
        sc.identify.kernel_config()
        sc.identify.cfar_config()
        sc.sampling
        target_frame(sc, np.zeros(sc.target.n_chirps))
    except (ValueError, ConfigurationError) as exc:
        raise ScenarioError(f"{source}: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(encoding="utf-8"), str(path))


def bundled_scenario_path(name: str = "reference") -> Path:
    return Path(str(resources.files("fmcw_entrain") / "data" / f"{name}.toml"))


def load_bundled(name: str = "reference") -> Scenario:
    return load_scenario(bundled_scenario_path(name))


# -- truth -------------------------------------------------------------------


@dataclass(frozen=True)
class RngStreams:
    noise: np.random.Generator
    target_clock: np.random.SeedSequence
    spoofer_clock: np.random.SeedSequence
    code: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        noise, tclk, sclk, code = np.random.SeedSequence(seed).spawn(4)
        return cls(np.random.default_rng(noise), tclk, sclk, np.random.default_rng(code))


def draw_code_phases(sc: Scenario, rng: np.random.Generator) -> np.ndarray:
    if sc.target.code == "none":
        return np.zeros(sc.target.n_chirps)
    if sc.target.code != "random":
        raise ScenarioError(f"unknown phase_code '{sc.target.code}'")
    m = sc.target.mod_order
    return rng.integers(0, m, sc.target.n_chirps) * (TWO_PI / m)


def target_frame(sc: Scenario, code_phases) -> FrameConfig:
    t = sc.target
    return uniform_frame(
        t.n_chirps, t.chirp_interval, t.chirp_duration, t.start_freq, t.slope, t.frame_interval,
        t.n_tx, t.n_rx, list(code_phases), t.first_chirp_time,
    )


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % TWO_PI - math.pi


class TargetTimeline:
    """Target frames in spoofer time, generated on demand.

    Frame j starts at ``first_frame_start + j * frame_interval`` on the
    target clock. Both clocks are advanced one frame interval at a time; the
    start is mapped to spoofer time through the two clock biases and the
    relative drift becomes an extra frequency offset. Geometry is frozen
    within a frame.
    """

    def __init__(self, sc: Scenario, rng: RngStreams) -> None:
        self.sc = sc
        c = sc.clocks
        self._tclk = ClockModel(c.target_h0, c.target_h_minus2, c.target_bias, c.target_drift, rng.target_clock)
        self._sclk = ClockModel(c.spoofer_h0, c.spoofer_h_minus2, c.spoofer_bias, c.spoofer_drift, rng.spoofer_clock)
        self.starts: list[float] = []
        self.paths: list[PropagationPath] = []

    def _geometry(self, t: float) -> PropagationPath:
        sc = self.sc
        pt = np.asarray(sc.target.position) + t * np.asarray(sc.target.velocity)
        ps = np.asarray(sc.spoofer.position) + t * np.asarray(sc.spoofer.velocity)
        r = pt - ps
        dist = float(np.hypot(*r))
        closing = -float(r @ (np.asarray(sc.target.velocity) - np.asarray(sc.spoofer.velocity))) / dist
        aoa = _wrap_angle(math.atan2(r[1], r[0]) - sc.spoofer.boresight)
        aod = _wrap_angle(math.atan2(-r[1], -r[0]) - sc.target.boresight)
        clock_doppler = (self._tclk.drift - self._sclk.drift) * sc.run.carrier_hz
        return PropagationPath(
            dist / SPEED_OF_LIGHT,
            closing / wavelength(sc.run.carrier_hz) + clock_doppler,
            sc.link.amplitude(dist, sc.run.carrier_hz),
            aoa,
            aod,
        )

    def _extend(self) -> None:
        t = self.sc.target
        j = len(self.starts)
        if j > 0:
            self._tclk.advance(t.frame_interval)
            self._sclk.advance(t.frame_interval)
        nominal = t.first_frame_start + j * t.frame_interval
        self.starts.append(nominal - self._tclk.bias + self._sclk.bias)
        self.paths.append(self._geometry(nominal))

    def frame(self, j: int) -> TargetFrame:
        while len(self.starts) <= j:
            self._extend()
        return TargetFrame(self.starts[j], (self.paths[j],))

    def frames_between(self, t_lo: float, t_hi: float) -> list[TargetFrame]:
        """Frames whose transmissions can reach the spoofer within [t_lo, t_hi]."""
        interval = self.sc.target.frame_interval
        out = []
        j = 0
        while True:
            tf = self.frame(j)
            if tf.start > t_hi:
                break
            if tf.start + interval + tf.paths[0].delay >= t_lo:
                out.append(tf)
            j += 1
        return out

    def arrival_interval(self, j0: int, j1: int) -> float:
        """Mean spacing of first-chirp arrivals over frames j0..j1."""
        arr = [self.frame(j).start + self.paths[j].delay for j in range(j0, j1 + 1)]
        return float(np.mean(np.diff(arr)))


@dataclass
class Simulation:
    """Truth plus the stochastic state of one run."""

    sc: Scenario
    frame: FrameConfig
    timeline: TargetTimeline
    rng: RngStreams

    @classmethod
    def create(cls, sc: Scenario) -> "Simulation":
        rng = RngStreams.from_seed(sc.run.rng_seed)
        frame = target_frame(sc, draw_code_phases(sc, rng.code))
        return cls(sc, frame, TargetTimeline(sc, rng), rng)

    def capture(self, start: float, duration: float, mixer):
        frames = self.timeline.frames_between(start - 1e-3, start + duration)
        return simulate_capture(
            self.frame, frames, mixer, self.sc.sampling, start, duration,
            self.sc.rx_array, self.sc.tx_array, self.rng.noise, dtype=np.complex64,
        )

    def windows(self, mixer: FrameMixer, window_starts: np.ndarray, n_samples: int) -> np.ndarray:
        lo, hi = float(window_starts.min()), float(window_starts.max()) + n_samples * self.sc.sampling.sample_period
        frames = self.timeline.frames_between(lo - 1e-3, hi)
        return simulate_windows(
            self.frame, frames, mixer, self.sc.sampling, window_starts, n_samples,
            self.sc.rx_array, self.sc.tx_array, self.rng.noise,
        )


# -- identification ------------------------------------------------------------


@dataclass
class IdentificationResult:
    estimate: SignalEstimate
    coarse_interval: float
    lag: float
    detections_1: DetectionSet
    detections_2: DetectionSet
    folded: DetectionSet
    clusters: list[ChirpCluster]
    search: DetectionSet
    end_time: float
    timings: dict[str, float] = field(default_factory=dict)


def run_identification(sim: Simulation, capture_sink=None) -> IdentificationResult:
    """Two tone captures, frame timing, chirp clustering, frequency search, chirp fits.

    ``capture_sink(label, capture)`` is called with each of the two long
    tone captures before they are discarded.
    """
    sc = sim.sc
    ident = sc.identify
    kcfg = ident.kernel_config()
    cfar = ident.cfar_config()
    timings: dict[str, float] = {}
    t0 = time.perf_counter()

    tcap = ident.capture_duration
    caps = []
    for i in range(2):
        cap = sim.capture(i * tcap, tcap, ToneMixer(ident.tone_freq))
        caps.append(detect_capture(cap, ident.tone_freq, cfar, ident.n_os))
        if capture_sink is not None:
            capture_sink(f"capture_{i + 1}", cap)
        del cap
    d1, d2 = caps
    timings["captures"] = time.perf_counter() - t0

    coarse = estimate_frame_interval(d1, d2, kcfg, ident.min_frame_interval)
    pooled = d1.union(d2)
    offset = estimate_frame_offset(pooled, coarse, kcfg.sigma_ref / 4.0)
    lag, folded = refine_frame_interval(pooled, offset, coarse, kcfg)
    interval = coarse - lag
    clusters = match_chirps(folded, kcfg.sigma_chirp, ident.min_cluster_size)
    if not clusters:
        raise IdentificationError("no chirps survived clustering", "match_chirps")
    timings["frame_timing"] = time.perf_counter() - t0

    tones = plan_frequency_search(tuple(ident.search_band), ident.m_search)
    spacing = float(tones[1] - tones[0]) if tones.size > 1 else 0.0
    first = clusters[0].time - kcfg.sigma
    last = clusters[-1].time + kcfg.sigma
    t_now = 2.0 * tcap
    n = int(math.ceil((t_now - offset - first) / interval))
    found = []
    for tone in tones:
        start = offset + n * interval + first
        cap = sim.capture(start, last - first, ToneMixer(float(tone)))
        det = detect_capture(cap, float(tone), cfar, ident.n_os)
        found.append(det.with_times(fold_times(det.times, offset, interval)))
        n += 1
    search = DetectionSet().union(*found)
    end_time = offset + n * interval
    timings["frequency_search"] = time.perf_counter() - t0

    chirps = identify_chirps(clusters, search, ident.sigma_freq, spacing)
    if not chirps:
        raise IdentificationError("no chirp could be resolved", "chirp_fit")
    estimate = SignalEstimate(interval, offset, chirps)
    timings["chirp_fit"] = time.perf_counter() - t0
    return IdentificationResult(estimate, coarse, lag, d1, d2, folded, clusters, search, end_time, timings)


# -- tracking ---------------------------------------------------------------


@dataclass
class MixerPlan:
    """Per-chirp local-signal parameters maintained during tracking."""

    start_times: np.ndarray
    start_freqs: np.ndarray
    slopes: np.ndarray
    durations: np.ndarray
    phases: np.ndarray
    frame_interval: float
    frame_offset: float

    @classmethod
    def from_estimate(cls, est: SignalEstimate) -> "MixerPlan":
        cfg = est.to_frame_config()
        ch = cfg.chirp_params
        return cls(
            np.array([c.start_time for c in ch]),
            np.array([c.start_freq for c in ch]),
            np.array([c.slope for c in ch]),
            np.array([c.duration for c in ch]),
            np.array([c.phase for c in ch]),
            est.frame_interval,
            est.frame_offset,
        )

    @property
    def n_chirps(self) -> int:
        return self.start_times.size

    def frame_config(self) -> FrameConfig:
        # keep chirps inside the frame after timing corrections
        shift = min(0.0, float(self.start_times.min()))
        chirps = tuple(
            (ChirpParams(f, b, d, p, s - shift), TxWeights(0, 0.0))
            for s, f, b, d, p in zip(self.start_times, self.start_freqs, self.slopes, self.durations, self.phases)
        )
        return FrameConfig(chirps, self.frame_interval, self.frame_offset, 1, 1)


@dataclass
class TrackingResult:
    metrics: list[FrameMetrics]
    plan: MixerPlan
    tracker: TrackerState
    phase_codes: np.ndarray | None
    first_cube: ProcessedCube | None
    last_cube: ProcessedCube | None
    peaks: list[tuple[float, float, float]]
    slope_accepts: list[int]
    timings: dict[str, float] = field(default_factory=dict)


def _match_truth_slopes(plan: MixerPlan, truth: FrameConfig) -> np.ndarray:
    true_slopes = np.array([c.slope for c in truth.chirp_params])
    if plan.n_chirps == true_slopes.size:
        return true_slopes
    true_times = np.array([c.start_time for c in truth.chirp_params])
    rel = plan.start_times - plan.start_times[0] + true_times[0]
    idx = np.abs(rel[:, None] - true_times[None, :]).argmin(axis=1)
    return true_slopes[idx]


def run_tracking(
    sim: Simulation,
    estimate: SignalEstimate,
    start_after: float,
    n_frames: int | None = None,
    on_frame=None,
) -> TrackingResult:
    """Frame loop: mix with the current estimate, process, track and refine.

    Corrections measured in frame n take effect in frame n + 1. Per-chirp
    timing and slope corrections are applied from ``refine_from_frame``;
    phase codes decoded from the frame before ``phase_frame`` are applied
    at ``phase_frame``, after which Doppler tracking is enabled.
    """
    sc = sim.sc
    tr = sc.track
    ts = sc.sampling.sample_period
    n_frames = tr.n_frames if n_frames is None else n_frames
    plan = MixerPlan.from_estimate(estimate)
    tracker = TrackerState(tr.desired_delay, tr.desired_doppler, tr.gain_delay, tr.gain_doppler)
    n_samples = int(math.floor((plan.durations.min() - tr.window_skip - tr.window_margin) / ts))
    if n_samples < 16:
        raise IdentificationError("estimated chirps are too short to track", "track")
    n_beams = tr.n_os * sc.spoofer.n_rx
    slope_grid = tr.slope_search()
    true_slopes = _match_truth_slopes(plan, sim.frame)
    tn = ts * np.arange(1, n_samples + 1)
    centre = 0.5 * (tn[0] + tn[-1])
    # local time of the window centre, measured from the chirp start
    pivot = tr.window_skip + centre - ts
    frozen = np.zeros(plan.n_chirps, dtype=bool)

    metrics: list[FrameMetrics] = []
    peaks = []
    accepts = []
    codes = None
    first_cube = last_cube = None
    frame_idx = int(math.ceil((start_after - plan.frame_offset) / plan.frame_interval))
    t0 = time.perf_counter()
    for n in range(1, n_frames + 1):
        cfg = plan.frame_config()
        shift = cfg.chirps[0][0].start_time - plan.start_times[0]
        frame_start = plan.frame_offset + frame_idx * plan.frame_interval + tracker.delay_correction - shift
        mixer = FrameMixer(cfg, (frame_start,), tracker.freq_correction)
        window_starts = frame_start + np.array([c.start_time for c in cfg.chirp_params]) + tr.window_skip
        samples = sim.windows(mixer, window_starts, n_samples)
        cube = DataCube(samples, window_starts, ts)
        processed = process_cube(cube, tr.n_os)
        peak = processed.peak()
        mean_slope = float(np.mean(plan.slopes))
        angle, delay, doppler = bins_to_physical(peak, processed, mean_slope, sc.spoofer.rx_spacing)
        peaks.append((angle, delay, doppler))
        metrics.append(frame_metrics(n, processed, mean_slope, plan.slopes, true_slopes, tr.range_two_way))
        if n == 1:
            first_cube = processed
        last_cube = processed

        phases_on = codes is not None
        tracker = tracker_update(tracker, delay, doppler if phases_on else None)

        z = beam_series(cube, peak[0], n_beams)
        if n + 1 >= tr.refine_from_frame:
            n_fft = tr.slope_fft_factor * next_pow2(n_samples)
            d_betas = np.zeros(plan.n_chirps)
            for k in range(plan.n_chirps):
                if frozen[k]:
                    continue
                fine = slope_grid.fine_step(plan.slopes[k])
                d_beta = slope_grid.search(z[:, k], plan.slopes[k], ts, n_fft)
                base, best = slope_objective(z[:, k], [0.0, d_beta], ts, n_fft)
                if abs(d_beta) < 0.5 * fine or best <= base * (1.0 + tr.slope_deadband):
                    frozen[k] = True
                    continue
                d_betas[k] = d_beta
                # measure the beat with the residual chirp removed about the window centre
                z[:, k] *= np.exp(1j * np.pi * d_beta * (tn - centre) ** 2)
            accepts.append(int(np.count_nonzero(d_betas)))
            align = per_chirp_range_align(z, plan.slopes, ts, tr.align_fft_factor * next_pow2(n_samples))
            # the slope change is anchored at the chirp start, so the beat at the
            # window centre moves by d_beta * pivot
            delays = align.delays - d_betas * pivot / plan.slopes
            plan.slopes -= d_betas
            plan.start_times += delays - delays.mean()
        else:
            align = per_chirp_range_align(z, plan.slopes, ts, tr.align_fft_factor * next_pow2(n_samples))

        if n + 1 == tr.phase_frame:
            t_c = float(np.mean(np.diff(plan.start_times))) if plan.n_chirps > 1 else 1.0
            est = vv_phase_estimate(align.peak_values, sc.target.mod_order, t_c)
            codes = est.decoded
            plan.phases = np.mod(plan.phases + codes, TWO_PI)
        frame_idx += 1
        if on_frame is not None:
            on_frame(n, metrics[-1])
    timings = {"tracking": time.perf_counter() - t0}
    return TrackingResult(metrics, plan, tracker, codes, first_cube, last_cube, peaks, accepts, timings)


# -- reporting ----------------------------------------------------------------


@dataclass
class RunReport:
    identification: IdentificationResult
    tracking: TrackingResult
    truth_interval: float
    verdicts: dict[str, bool]
    details: dict[str, float]

    def summary_lines(self) -> list[str]:
        return [f"{'PASS' if ok else 'FAIL'} {name}" for name, ok in self.verdicts.items()]


def doppler_no_improvement(widths: np.ndarray, bin_hz: float) -> bool:
    """Widths stay spread (more than two bins) before phase correction."""
    return bool(widths.size > 0 and np.all(widths > 2.0 * bin_hz))


def evaluate(sim: Simulation, ident: IdentificationResult, track: TrackingResult) -> RunReport:
    """Scenario-level acceptance verdicts computed from the run's records."""
    sc = sim.sc
    kcfg = sc.identify.kernel_config()
    j_end = int(2.0 * sc.identify.capture_duration / sc.target.frame_interval) + 1
    truth_interval = sim.timeline.arrival_interval(0, j_end)
    interval_err = abs(ident.estimate.frame_interval - truth_interval)
    spreads = [float(np.ptp(c.times)) for c in ident.clusters]
    widths_r = np.array([m.range_width_m for m in track.metrics])
    widths_d = np.array([m.doppler_width_hz for m in track.metrics])
    rmse = np.array([m.slope_rmse_hz_per_s for m in track.metrics])
    bin_hz = track.last_cube.doppler_per_bin
    fine_step = sc.track.slope_search().fine_step(sc.target.slope)
    pf = sc.track.phase_frame
    refine_from = sc.track.refine_from_frame
    rmse_active = rmse[refine_from - 1 :]
    verdicts = {
        "frame_timing": interval_err <= kcfg.sigma_ref and max(spreads) <= kcfg.sigma_ref,
        "range_width": bool(widths_r[-1] <= 1.0),
        "doppler_width": doppler_no_improvement(widths_d[: pf - 1], bin_hz) and bool(widths_d[-1] <= 2.0 * bin_hz),
        "slope_rmse": bool(np.all(np.diff(rmse_active) <= 0.0) and rmse[-1] <= fine_step),
    }
    details = {
        "frame_interval_error_s": interval_err,
        "max_cluster_spread_s": max(spreads),
        "n_chirps_identified": float(len(ident.estimate.chirps)),
        "final_range_width_m": float(widths_r[-1]),
        "final_doppler_width_hz": float(widths_d[-1]),
        "doppler_bin_hz": bin_hz,
        "final_slope_rmse_hz_per_s": float(rmse[-1]),
        "slope_fine_step_hz_per_s": fine_step,
    }
    return RunReport(ident, track, truth_interval, verdicts, details)


def tracking_start(sc: Scenario, est: SignalEstimate) -> float:
    """Earliest tracking time when tracking resumes from a stored estimate."""
    return 2.0 * sc.identify.capture_duration + (sc.identify.m_search + 1) * est.frame_interval


def run_all(
    sc: Scenario, n_frames: int | None = None, on_frame=None, capture_sink=None
) -> tuple[Simulation, RunReport]:
    sim = Simulation.create(sc)
    ident = run_identification(sim, capture_sink)
    track = run_tracking(sim, ident.estimate, ident.end_time, n_frames, on_frame)
    if track.phase_codes is not None:
        ident.estimate.phase_codes = [float(p) for p in track.plan.phases]
    return sim, evaluate(sim, ident, track)


# -- artifacts ------------------------------------------------------------------


def metrics_csv(metrics: list[FrameMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_index", "range_width_m", "doppler_width_hz", "slope_rmse_hz_per_s"])
    for m in metrics:
        w.writerow([m.frame_index, repr(m.range_width_m), repr(m.doppler_width_hz), repr(m.slope_rmse_hz_per_s)])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[FrameMetrics]:
    return [
        FrameMetrics(int(r["frame_index"]), float(r["range_width_m"]), float(r["doppler_width_hz"]),
                     float(r["slope_rmse_hz_per_s"]))
        for r in csv.DictReader(io.StringIO(text))
    ]


def estimate_to_toml(est: SignalEstimate) -> str:
    """Serialize an estimate (SI units) so it can be replayed as a mixer."""
    doc = {
        "frame": {"frame_interval_s": est.frame_interval, "frame_offset_s": est.frame_offset},
        "chirp": [
            {
                "start_time_s": c.start_time,
                "start_freq_hz": c.start_freq,
                "slope_hz_per_s": c.slope,
                "duration_s": c.duration,
                "reg_offset_hz": c.reg_offset,
                "phase_rad": float(p),
                "matched_times_s": [float(t) for t in c.matched_times],
                "matched_freqs_hz": [float(f) for f in c.matched_freqs],
                "covariance": [[float(v) for v in row] for row in c.covariance],
            }
            for c, p in zip(est.chirps, est.phase_codes)
        ],
    }
    return tomli_w.dumps(doc)


def estimate_from_toml(text: str) -> SignalEstimate:
    try:
        doc = tomli.loads(text)
        frame = doc["frame"]
        chirps, phases = [], []
        for c in doc["chirp"]:
            chirps.append(
                ChirpEstimate(
                    float(c["slope_hz_per_s"]),
                    float(c["reg_offset_hz"]),
                    np.array(c["matched_times_s"], dtype=float),
                    np.array(c["matched_freqs_hz"], dtype=float),
                    np.array(c["covariance"], dtype=float),
                    float(c["start_time_s"]),
                    float(c["start_freq_hz"]),
                    float(c["duration_s"]),
                )
            )
            phases.append(float(c["phase_rad"]))
        return SignalEstimate(float(frame["frame_interval_s"]), float(frame["frame_offset_s"]), chirps, phases)
    except (tomli.TOMLDecodeError, KeyError, TypeError) as exc:
        raise ScenarioError(f"invalid estimate file: {exc}") from None


def write_artifacts(
    out_dir: str | Path,
    report: RunReport | None = None,
    ident: IdentificationResult | None = None,
    track: TrackingResult | None = None,
    metrics_path: str | Path | None = None,
    dump_cubes: bool = False,
) -> dict[str, Path]:
    """Write metrics.csv, detections.csv, estimate.cfg, report.json and optional cube dumps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    if report is not None:
        ident = ident or report.identification
        track = track or report.tracking
    if ident is not None:
        p = out / "detections.csv"
        p.write_text(ident.folded.union(ident.search).to_csv(), encoding="utf-8")
        written["detections"] = p
        p = out / "estimate.cfg"
        p.write_text(estimate_to_toml(ident.estimate), encoding="utf-8")
        written["estimate"] = p
    if track is not None:
        p = Path(metrics_path) if metrics_path else out / "metrics.csv"
        p.write_text(metrics_csv(track.metrics), encoding="utf-8")
        written["metrics"] = p
        if dump_cubes:
            for n, cube in ((1, track.first_cube), (len(track.metrics), track.last_cube)):
                if cube is not None:
                    p = out / f"cube_frame_{n}.bin"
                    p.write_bytes(cube.magnitude_dump(cube.peak()[0]))
                    written[f"cube_{n}"] = p
    if report is not None:
        p = out / "report.json"
        p.write_text(
            json.dumps({"verdicts": report.verdicts, "details": report.details}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        written["report"] = p
    return written
