import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmcw_entrain.channel import PropagationPath, SampleCapture, SamplingConfig, TargetFrame, ToneMixer, simulate_capture
from fmcw_entrain.detect import (
    CfarConfig,
    Detection,
    DetectionSet,
    beamform,
    ca_cfar_factor,
    cfar_detect,
    consolidate,
    detect_capture,
    max_power_bin,
    strongest_beam,
)
from fmcw_entrain.waveform import ArrayConfig, ChirpParams, FrameConfig, TxWeights, steering_vector


def _capture(x) -> SampleCapture:
    return SampleCapture(np.atleast_2d(np.asarray(x, dtype=complex)), 0.0, 50e-9)


def test_beamform_single_antenna_identity():
    x = np.array([[1 + 2j, 3 - 1j, 0.5j]])
    bf = beamform(_capture(x), 1)
    assert np.array_equal(bf.samples, x)


def test_beamform_broadside_peaks_at_zero():
    bf = beamform(_capture(np.ones((4, 3))), 2)
    assert max_power_bin(bf) == (0, 0)


def test_beamform_quarter_spatial_frequency():
    # d sin(theta) = 0.125 with 32 beams lands on bin 4
    a = steering_vector(ArrayConfig(8, 0.5), math.asin(0.25))
    bf = beamform(_capture(a[:, None]), 4)
    assert bf.samples.shape == (32, 1)
    assert max_power_bin(bf) == (0, 4)
    assert bf.beam_angles[4] == pytest.approx(math.asin(0.25))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31))
def test_beamform_parseval(n_rx, n_os, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_rx, 16)) + 1j * rng.standard_normal((n_rx, 16))
    bf = beamform(_capture(x), n_os)
    lhs = np.sum(np.abs(bf.samples) ** 2, axis=0)
    rhs = n_os * n_rx * np.sum(np.abs(x) ** 2, axis=0)
    assert np.allclose(lhs, rhs, rtol=1e-6)


def test_max_power_bin_ties():
    assert max_power_bin(np.zeros((3, 4))) == (0, 0)
    x = np.zeros((3, 5))
    x[2, 3] = 1.0
    assert max_power_bin(x) == (3, 2)
    x = np.zeros((3, 5))
    x[2, 1] = x[0, 4] = 1.0
    assert max_power_bin(x) == (1, 2)
    x = np.zeros((3, 5))
    x[2, 1] = x[1, 1] = 1.0
    assert max_power_bin(x) == (1, 1)


def test_strongest_beam_matches_full_beamform():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 300)) + 1j * rng.standard_normal((4, 300))
    x[:, 123] += 20 * steering_vector(ArrayConfig(4), 0.3)
    cap = _capture(x)
    n, b, series = strongest_beam(cap, 4, chunk=64)
    bf = beamform(cap, 4)
    assert (n, b) == max_power_bin(bf)
    assert np.allclose(series, bf.samples[b])


def test_cfar_factor():
    assert ca_cfar_factor(32, 1e-3) == pytest.approx(32 * (1e-3 ** (-1 / 32) - 1))


def test_cfar_single_impulse():
    rng = np.random.default_rng(0)
    noise = (rng.standard_normal(2000) + 1j * rng.standard_normal(2000)) / math.sqrt(2)
    noise[777] = math.sqrt(1000.0)  # 30 dB above unit noise power
    cfg = CfarConfig(16, 8, 1e-6)
    hits = cfar_detect(noise, cfg)
    ds = consolidate(hits, 4, 1.0, 0.0)
    assert len(ds) == 1 and ds.times[0] == 777


def test_cfar_all_zero():
    assert cfar_detect(np.zeros(200), CfarConfig()).size == 0


def test_cfar_too_short():
    with pytest.raises(ValueError):
        cfar_detect(np.ones(49), CfarConfig(16, 8))


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**31))
def test_cfar_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(400) + 1j * rng.standard_normal(400)
    x[200] *= 10
    cfg = CfarConfig(8, 2, 1e-2)
    assert np.array_equal(cfar_detect(x, cfg), cfar_detect(c * x, cfg))


def test_cfar_config_validation():
    for bad in (dict(pfa=0.0), dict(pfa=1.0), dict(n_train=3), dict(n_guard=-1)):
        with pytest.raises(ValueError):
            CfarConfig(**bad)


def test_consolidate_examples():
    assert consolidate([10, 11, 12], 2, 1.0, 5.0).times.tolist() == [11.0]
    assert consolidate([10, 50], 2, 1.0, 5.0).times.tolist() == [10.0, 50.0]
    assert consolidate([10, 11, 13, 14], 2, 1.0, 5.0).times.tolist() == [12.0]
    assert consolidate([10, 13], 2, 1.0, 5.0).times.tolist() == [10.0, 13.0]
    d = consolidate([4], 2, 0.5, 7e6, beam=3, time_offset=1.0)
    assert list(d) == [Detection(3.0, 7e6, 3)]
    assert len(consolidate([], 2, 1.0, 0.0)) == 0


@given(st.lists(st.integers(0, 500), min_size=1, max_size=60, unique=True), st.integers(0, 6))
def test_consolidate_properties(idx, gap):
    idx = sorted(idx)
    ds = consolidate(idx, gap, 1.0, 0.0)
    assert len(ds) <= len(idx)
    arr = np.array(idx)
    groups = np.split(arr, np.nonzero(np.diff(arr) > gap)[0] + 1)
    for g, t in zip(groups, ds.times):
        assert g.min() <= t <= g.max()


def test_end_to_end_single_crossing():
    # noiseless tone crossing: one detection, at the time predicted by the mixed-chirp line
    beta = 500e6 / 32e-6
    sampling = SamplingConfig(50e-9, 10e6, 129, 1e-20)
    frame = FrameConfig(((ChirpParams(-250e6, beta, 32e-6), TxWeights()),), 1e-3)
    delay = 0.5e-6
    cap = simulate_capture(
        frame, [TargetFrame(0.0, (PropagationPath(delay, 0.0, 1.0),))], ToneMixer(0.0), sampling,
        0.0, 60e-6, ArrayConfig(8), rng=np.random.default_rng(1),
    )
    ds = detect_capture(cap, 0.0, CfarConfig(16, 8, 1e-6, sampling.mainlobe_samples()), n_os=4)
    t_cross = delay + 250e6 / beta
    rise = sampling.filter_taps // 2 * sampling.sample_period
    assert len(ds) == 1
    assert abs(ds.times[0] - t_cross) <= rise + 2 * sampling.sample_period


def test_detection_set_csv_round_trip():
    ds = DetectionSet([1e-3, 2.5e-3], [1e6, -3e6], [2, 5])
    back = DetectionSet.from_csv(ds.to_csv())
    assert np.array_equal(back.times, ds.times)
    assert np.array_equal(back.freqs, ds.freqs)
    assert np.array_equal(back.beams, ds.beams)
    assert ds.to_csv().splitlines()[0] == "time_s,freq_hz,beam"


def test_detection_set_ops():
    a = DetectionSet([3.0, 1.0], [0.0, 1.0])
    b = DetectionSet([2.0], [5.0])
    u = a.union(b).sorted()
    assert u.times.tolist() == [1.0, 2.0, 3.0]
    assert u.freqs.tolist() == [1.0, 5.0, 0.0]
    with pytest.raises(ValueError):
        DetectionSet([1.0], [])
