import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetero_eeg.errors import ConfigError, DegenerateInputError, UnsupportedOperationError
from hetero_eeg.montage import layout_from_labels
from hetero_eeg.signal import (
    DatasetBundle,
    PreprocessConfig,
    RawRecording,
    bandpass_filter,
    epoch_and_normalize,
    preprocess_recording,
    preprocess_recordings,
    resample,
    zscore_channels,
)


def sine(freq, rate, n, channels=1):
    t = np.arange(n) / rate
    return np.tile(np.sin(2 * np.pi * freq * t), (channels, 1))


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def _rec(x, rate=250.0, markers=()):
    return RawRecording("d", "s1", rate, x, list(markers))


def test_config_bounds():
    PreprocessConfig()
    with pytest.raises(ConfigError):
        PreprocessConfig(band_low_hz=40, band_high_hz=4)
    with pytest.raises(ConfigError):
        PreprocessConfig(band_high_hz=70)  # above 125/2
    with pytest.raises(ConfigError):
        PreprocessConfig(filter_order=0)


# -- band-pass -------------------------------------------------------------------


def test_bandpass_rejects_50hz():
    x = sine(50, 250, 2500)
    y = bandpass_filter(_rec(x), PreprocessConfig()).signal
    # skip the edges, where forward-backward padding dominates
    assert rms(y[:, 250:-250]) < 0.1 * rms(x[:, 250:-250])


def test_bandpass_passes_10hz():
    x = sine(10, 250, 2500)
    y = bandpass_filter(_rec(x), PreprocessConfig()).signal
    assert abs(rms(y) / rms(x) - 1) < 0.2


@pytest.mark.parametrize("freq", [1.0, 60.0, 80.0, 100.0])
def test_bandpass_stopband_20db(freq):
    """Oracle frequency sweep: steady-state gain outside the band is <= -20 dB."""
    x = sine(freq, 250, 5000)
    y = bandpass_filter(_rec(x), PreprocessConfig()).signal
    gain = rms(y[:, 1000:-1000]) / rms(x[:, 1000:-1000])
    assert 20 * np.log10(gain) <= -20


def test_bandpass_zero_signal():
    y = bandpass_filter(_rec(np.zeros((3, 500))), PreprocessConfig()).signal
    assert np.all(y == 0)


def test_bandpass_nyquist_guard():
    with pytest.raises(ConfigError, match="Nyquist"):
        bandpass_filter(_rec(np.zeros((1, 100)), rate=60.0), PreprocessConfig())


# -- resample -----------------------------------------------------------------------


def test_resample_halves_length_and_markers():
    rec = resample(_rec(np.random.default_rng(0).standard_normal((2, 1000)), markers=[(400, 1)]), 125)
    assert rec.signal.shape == (2, 500)
    assert rec.sample_rate == 125
    assert rec.event_markers == [(200, 1)]


def test_resample_preserves_dc():
    y = resample(_rec(np.full((2, 1000), 3.25)), 125).signal
    assert np.max(np.abs(y - 3.25)) < 1e-9


def test_resample_noninteger_ratio():
    rec = resample(_rec(np.zeros((1, 1000)), rate=160.0), 125)
    assert rec.signal.shape[1] == 1000 * 125 // 160


def test_resample_refuses_upsampling():
    with pytest.raises(UnsupportedOperationError):
        resample(_rec(np.zeros((1, 100)), rate=100.0), 125)


# -- epoching --------------------------------------------------------------------------


def test_epoch_length_at_125hz():
    x = np.random.default_rng(0).standard_normal((3, 600))
    epochs = epoch_and_normalize(_rec(x, rate=125.0, markers=[(0, 1)]), PreprocessConfig())
    assert len(epochs) == 1 and epochs[0].data.shape == (3, 500)
    assert epochs[0].label == 1


def test_two_point_zscore():
    x = np.tile([1.0, 3.0], 250)[None, :]
    out = zscore_channels(x)
    assert set(np.unique(out)) == {-1.0, 1.0}


def test_truncated_epoch_dropped_with_warning(caplog_json):
    rec = _rec(np.random.default_rng(0).standard_normal((2, 450)), rate=125.0, markers=[(0, 0)])
    assert epoch_and_normalize(rec, PreprocessConfig()) == []
    records = [json.loads(r.getMessage()) for r in caplog_json.records]
    assert [r["code"] for r in records] == ["epoch_truncated"]
    assert set(records[0]) == {"code", "subject_id", "trial_index", "detail"}


def test_zero_variance_epoch_identifies_channel():
    x = np.random.default_rng(0).standard_normal((3, 600))
    x[1] = 2.0
    with pytest.raises(DegenerateInputError, match=r"'s1', trial 0, channel 1"):
        epoch_and_normalize(_rec(x, rate=125.0, markers=[(0, 0)]), PreprocessConfig())


def test_non_binary_labels_skipped(caplog_json):
    x = np.random.default_rng(0).standard_normal((2, 1200))
    out = epoch_and_normalize(_rec(x, rate=125.0, markers=[(0, 2), (600, 0)]), PreprocessConfig())
    assert [e.label for e in out] == [0]
    assert json.loads(caplog_json.records[0].getMessage())["code"] == "label_excluded"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 4))
def test_zscore_postcondition_every_epoch(seed, channels, n_markers):
    rng = np.random.default_rng(seed)
    n = 1000 * n_markers + 300
    scale = rng.uniform(1e-3, 1e3, size=(channels, 1))
    x = rng.standard_normal((channels, n)) * scale + rng.normal(0, 100, size=(channels, 1))
    markers = [(int(k * 1000 + rng.integers(0, 300)), int(rng.integers(0, 2))) for k in range(n_markers)]
    rec = RawRecording("d", "s", 250.0, x, markers)
    epochs = preprocess_recording(rec, PreprocessConfig())
    assert len(epochs) == n_markers
    for e in epochs:
        d = e.data.astype(float)
        assert np.all(np.abs(d.mean(axis=1)) < 1e-6)
        assert np.all(np.abs(d.std(axis=1) - 1) < 1e-4)


def test_preprocessing_is_bitwise_stable():
    rng = np.random.default_rng(3)
    rec = RawRecording("d", "s", 250.0, rng.standard_normal((4, 3000)), [(0, 0), (1200, 1)])
    a = preprocess_recording(rec, PreprocessConfig())
    b = preprocess_recording(rec, PreprocessConfig())
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))


def test_preprocess_recordings_builds_bundle():
    rng = np.random.default_rng(4)
    names = ["C3", "Cz", "C4"]
    recs = [RawRecording("d", f"s{i}", 250.0, rng.standard_normal((3, 3000)), [(0, 0), (1200, 1)]) for i in range(2)]
    bundle = preprocess_recordings(recs, PreprocessConfig(), layout_from_labels("d", names))
    assert bundle.data.shape == (4, 3, 500)
    assert bundle.subjects == {"s0": [0, 1], "s1": [2, 3]}
    assert bundle.data.dtype == np.float32


# -- bundles -----------------------------------------------------------------------------


def _bundle(n=6, names=("C3", "Cz", "C4"), T=20, seed=0):
    rng = np.random.default_rng(seed)
    return DatasetBundle("d", layout_from_labels("d", list(names)), rng.standard_normal((n, len(names), T)),
                         np.arange(n) % 2, [f"s{i // 2}" for i in range(n)])


def test_bundle_selection():
    b = _bundle()
    sub = b.select_subjects(["s1"])
    assert sub.subject_ids == ["s1", "s1"] and np.array_equal(sub.data, b.data[2:4])
    ch = b.select_channels(["C4", "C3"])
    assert ch.sensor_names == ["C4", "C3"]
    assert np.array_equal(ch.data[:, 0], b.data[:, 2])


def test_bundle_rejects_bad_labels():
    with pytest.raises(ConfigError):
        DatasetBundle("d", layout_from_labels("d", ["Cz"]), np.zeros((1, 1, 4)), [3], ["s"])
