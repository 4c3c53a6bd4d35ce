import math
import re

import numpy as np
import pytest

from fmcw_entrain.identify import ChirpEstimate, SignalEstimate
from fmcw_entrain.scenario import (
    MixerPlan,
    RngStreams,
    ScenarioError,
    Simulation,
    TargetTimeline,
    draw_code_phases,
    estimate_from_toml,
    estimate_to_toml,
    load_bundled,
    metrics_csv,
    parse_scenario,
    read_metrics_csv,
    run_all,
    run_identification,
    run_tracking,
    tracking_start,
    write_artifacts,
)
from fmcw_entrain.track import FrameMetrics
from fmcw_entrain.waveform import SPEED_OF_LIGHT, check_code_phase, wavelength


def test_bundled_scenario_contents(reference_scenario):
    sc = reference_scenario
    assert (sc.target.n_tx, sc.target.n_rx, sc.spoofer.n_rx) == (3, 4, 8)
    assert sc.spoofer.if_bandwidth == pytest.approx(10e6)
    assert sc.target.bandwidth == pytest.approx(500e6)
    assert sc.target.chirp_duration == pytest.approx(32e-6)
    assert sc.target.slope == pytest.approx(15.625e12)
    assert math.dist(sc.target.position, sc.spoofer.position) == pytest.approx(50.0)
    assert math.hypot(*sc.target.velocity) == pytest.approx(14.14, abs=1e-9)
    assert sc.run.carrier_hz == pytest.approx(76.25e9)
    assert sc.identify.capture_duration == pytest.approx(2.5 * 50e-3)
    assert sc.track.n_frames == 24 and sc.track.phase_frame == 12


def _replace(text, key, line):
    out, n = re.subn(rf"^{key} = .*$", line, text, count=1, flags=re.M)
    assert n == 1
    return out


def test_missing_frame_interval(small_scenario_text):
    text = _replace(small_scenario_text, "frame_interval_ms", "")
    with pytest.raises(ScenarioError, match="frame_interval_ms"):
        parse_scenario(text, "s.toml")


def test_duplicate_key(small_scenario_text):
    text = _replace(small_scenario_text, "n_chirps", "n_chirps = 32\nn_chirps = 32")
    with pytest.raises(ScenarioError, match=r"s\.toml"):
        parse_scenario(text, "s.toml")


def test_unknown_key_reports_line(small_scenario_text):
    text = _replace(small_scenario_text, "n_chirps", "n_chirps = 32\nchirp_colour = 3")
    line = text.splitlines().index("chirp_colour = 3") + 1
    with pytest.raises(ScenarioError, match=rf"s\.toml:{line}: unknown key 'chirp_colour'"):
        parse_scenario(text, "s.toml")


def test_unknown_section(small_scenario_text):
    with pytest.raises(ScenarioError, match=r"unknown section \[extras\]"):
        parse_scenario(small_scenario_text + "\n[extras]\na = 1\n", "s.toml")


def test_type_error_reports_key(small_scenario_text):
    text = _replace(small_scenario_text, "n_chirps", 'n_chirps = "many"')
    with pytest.raises(ScenarioError, match="target.n_chirps must be an integer"):
        parse_scenario(text, "s.toml")


def test_semantic_validation(small_scenario_text):
    text = _replace(small_scenario_text, "position_m", "position_m = [0.0, 0.0]")
    with pytest.raises(ScenarioError, match="positions must differ"):
        parse_scenario(text)
    text = _replace(small_scenario_text, "chirp_interval_us", "chirp_interval_us = 20.0")
    with pytest.raises(ScenarioError, match="overlaps"):
        parse_scenario(text)


def test_units_converted_to_si(small_scenario_text):
    sc = parse_scenario(small_scenario_text)
    assert sc.target.frame_interval == pytest.approx(10e-3)
    assert sc.target.chirp_interval == pytest.approx(41e-6)
    assert sc.identify.search_band == pytest.approx([-250e6, 250e6])
    assert sc.track.window_skip == pytest.approx(1e-6)
    assert sc.track.desired_delay == pytest.approx(2 * 30.0 / SPEED_OF_LIGHT)


def test_rng_streams_are_independent():
    a, b = RngStreams.from_seed(7), RngStreams.from_seed(7)
    assert a.noise.standard_normal() == b.noise.standard_normal()
    # drawing from one consumer does not disturb another
    a.noise.standard_normal(1000)
    assert a.code.integers(0, 1 << 30) == b.code.integers(0, 1 << 30)


def test_code_phases_on_constellation(reference_scenario):
    codes = draw_code_phases(reference_scenario, np.random.default_rng(0))
    assert codes.size == 384
    assert set(np.round(codes / math.pi).astype(int)) <= {0, 1}
    sim = Simulation.create(reference_scenario)
    assert all(check_code_phase(w, 2) for _, w in sim.frame.chirps)


def test_timeline_geometry(reference_scenario):
    tl = TargetTimeline(reference_scenario, RngStreams.from_seed(1))
    path = tl.frame(0).paths[0]
    t0 = reference_scenario.target.first_frame_start
    dist = 50.0 - 14.14 * t0
    assert path.delay == pytest.approx(dist / SPEED_OF_LIGHT, rel=1e-9)
    assert path.doppler == pytest.approx(14.14 / wavelength(), abs=1.0)
    assert path.aoa == pytest.approx(math.radians(10.0), abs=1e-3)
    assert path.aod == pytest.approx(0.0, abs=1e-3)
    # the target approaches, so arrivals come slightly faster than the frame interval
    interval = tl.arrival_interval(0, 10)
    assert interval < reference_scenario.target.frame_interval
    assert interval == pytest.approx(40e-3 - 14.14 * 40e-3 / SPEED_OF_LIGHT, abs=2e-10)


def _estimate():
    chirps = [
        ChirpEstimate(
            15.6e12 + k * 1e9, -1.1e11 + k, np.array([1e-3, 1.00001e-3]), np.array([-2e8, 1e7]),
            np.array([[1.0, -0.5], [-0.5, 2.0]]) * 1e6, 1e-3 + k * 41e-6, -250e6, 3.3e-5,
        )
        for k in range(3)
    ]
    return SignalEstimate(40e-3 - 1.7e-9, 1.234567e-3, chirps, [0.0, math.pi, 0.0])


def test_estimate_round_trip_is_byte_identical():
    text = estimate_to_toml(_estimate())
    back = estimate_from_toml(text)
    assert estimate_to_toml(back) == text
    assert back.frame_interval == 40e-3 - 1.7e-9
    assert back.phase_codes == [0.0, math.pi, 0.0]
    assert np.array_equal(back.chirps[1].covariance, _estimate().chirps[1].covariance)


def test_estimate_bad_file():
    with pytest.raises(ScenarioError):
        estimate_from_toml("[frame]\nframe_interval_s = 1.0\n")


def test_metrics_csv_round_trip():
    rows = [FrameMetrics(1, 0.1 + 0.2, 63.5, 1e9 / 3), FrameMetrics(2, 0.5, 127.0, 0.0)]
    text = metrics_csv(rows)
    assert text.splitlines()[0] == "frame_index,range_width_m,doppler_width_hz,slope_rmse_hz_per_s"
    assert read_metrics_csv(text) == rows
    assert metrics_csv(read_metrics_csv(text)) == text


def test_mixer_plan_keeps_chirps_inside_frame():
    plan = MixerPlan.from_estimate(_estimate())
    plan.start_times -= 2e-3  # a correction that pushes the first chirp before the frame start
    cfg = plan.frame_config()
    assert cfg.chirps[0][0].start_time == 0.0
    assert np.allclose(np.diff([c.start_time for c in cfg.chirp_params]), 41e-6)


def test_small_scenario_end_to_end(small_scenario_text, tmp_path):
    sc = parse_scenario(small_scenario_text)
    sim, report = run_all(sc)
    est = report.identification.estimate
    assert len(est.chirps) == 32
    assert abs(est.frame_interval - report.truth_interval) <= sc.identify.kernel_config().sigma_ref
    slopes = np.array([c.slope for c in est.chirps])
    assert np.all(np.abs(slopes / sc.target.slope - 1) < 0.02)
    assert report.verdicts["frame_timing"] and report.verdicts["range_width"]
    written = write_artifacts(tmp_path, report, dump_cubes=True)
    assert {"detections", "estimate", "metrics", "report", "cube_1", "cube_4"} <= set(written)
    assert read_metrics_csv(written["metrics"].read_text()) == report.tracking.metrics


def test_tracking_resumes_from_stored_estimate(small_scenario_text):
    sc = parse_scenario(small_scenario_text)
    ident = run_identification(Simulation.create(sc))
    est = estimate_from_toml(estimate_to_toml(ident.estimate))
    track = run_tracking(Simulation.create(sc), est, tracking_start(sc, est), 3)
    assert len(track.metrics) == 3
    assert track.metrics[-1].range_width_m <= 1.0


def test_small_scenario_deterministic(small_scenario_text):
    sc = parse_scenario(small_scenario_text)
    a = metrics_csv(run_all(sc)[1].tracking.metrics)
    b = metrics_csv(run_all(sc)[1].tracking.metrics)
    assert a == b
    c = metrics_csv(run_all(sc.with_seed(8))[1].tracking.metrics)
    assert c != a


def test_load_bundled_unknown_name():
    with pytest.raises(FileNotFoundError):
        load_bundled("no_such_scenario")
