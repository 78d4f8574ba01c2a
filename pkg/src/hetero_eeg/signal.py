"""Recording containers and preprocessing: band-pass, resample, epoch, z-score."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np
from scipy import signal as sps

from .diagnostics import emit_warning
from .errors import ConfigError, DegenerateInputError, ShapeError, UnsupportedOperationError
from .montage import ElectrodeLayout, layout_from_labels


@dataclass
class PreprocessConfig:
    band_low_hz: float = 4.0
    band_high_hz: float = 40.0
    target_rate_hz: float = 125.0
    window_seconds: float = 4.0
    filter_order: int = 4

    def __post_init__(self) -> None:
        if not 0 < self.band_low_hz < self.band_high_hz < self.target_rate_hz / 2:
            raise ConfigError(
                "preprocess: need 0 < band_low_hz < band_high_hz < target_rate_hz/2, got "
                f"{self.band_low_hz}, {self.band_high_hz}, {self.target_rate_hz}"
            )
        if self.window_seconds <= 0:
            raise ConfigError(f"preprocess.window_seconds must be > 0, got {self.window_seconds}")
        if int(self.filter_order) != self.filter_order or self.filter_order < 1:
            raise ConfigError(f"preprocess.filter_order must be a positive integer, got {self.filter_order}")


@dataclass
class RawRecording:
    dataset_id: str
    subject_id: str
    sample_rate: float
    signal: np.ndarray  # (channels, samples)
    event_markers: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.signal = np.asarray(self.signal)
        if self.signal.ndim != 2:
            raise ShapeError(f"recording signal must be (channels, samples), got shape {self.signal.shape}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be > 0, got {self.sample_rate}")
        n = self.signal.shape[1]
        for idx, _ in self.event_markers:
            if not 0 <= idx < n:
                raise ConfigError(f"event marker at sample {idx} outside recording of {n} samples")


@dataclass
class TrialEpoch:
    dataset_id: str
    subject_id: str
    label: int
    data: np.ndarray  # (S, T)


@dataclass
class DatasetBundle:
    """All trials of one dataset, stored as stacked arrays.

    ``data`` is (N, S, T) float32, ``labels`` (N,) int64 and ``subject_ids`` a
    list of N strings. ``trials`` gives the per-trial view.
    """

    dataset_id: str
    layout: ElectrodeLayout
    data: np.ndarray
    labels: np.ndarray
    subject_ids: list[str]
    sample_rate_hz: float = 125.0

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.subject_ids = [str(s) for s in self.subject_ids]
        if self.data.ndim != 3:
            raise ShapeError(f"bundle data must be (N, S, T), got shape {self.data.shape}")
        N, S, _ = self.data.shape
        if S != self.layout.n_sensors:
            raise ShapeError(
                f"bundle {self.dataset_id!r}: trials have {S} channels, layout has {self.layout.n_sensors}"
            )
        if len(self.labels) != N or len(self.subject_ids) != N:
            raise ShapeError(
                f"bundle {self.dataset_id!r}: {N} trials but {len(self.labels)} labels, "
                f"{len(self.subject_ids)} subject ids"
            )
        if N and not np.isin(self.labels, (0, 1)).all():
            raise ConfigError(f"bundle {self.dataset_id!r}: labels must be 0 or 1")

    @classmethod
    def from_trials(
        cls, layout: ElectrodeLayout, trials: Sequence[TrialEpoch], sample_rate_hz: float = 125.0
    ) -> "DatasetBundle":
        if not trials:
            raise ConfigError("cannot build a bundle from zero trials")
        shapes = {t.data.shape for t in trials}
        if len(shapes) != 1:
            raise ShapeError(f"trials disagree on shape: {sorted(shapes)}")
        return cls(
            dataset_id=trials[0].dataset_id,
            layout=layout,
            data=np.stack([t.data for t in trials]),
            labels=np.array([t.label for t in trials]),
            subject_ids=[t.subject_id for t in trials],
            sample_rate_hz=sample_rate_hz,
        )

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    @property
    def sensor_names(self) -> list[str]:
        return self.layout.sensor_names

    @property
    def trials(self) -> Iterator[TrialEpoch]:
        for i in range(len(self)):
            yield TrialEpoch(self.dataset_id, self.subject_ids[i], int(self.labels[i]), self.data[i])

    @property
    def subjects(self) -> dict[str, list[int]]:
        index: dict[str, list[int]] = {}
        for i, s in enumerate(self.subject_ids):
            index.setdefault(s, []).append(i)
        return index

    def select(self, indices: Sequence[int] | np.ndarray) -> "DatasetBundle":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            data=self.data[idx],
            labels=self.labels[idx],
            subject_ids=[self.subject_ids[i] for i in idx],
        )

    def select_subjects(self, subjects: Sequence[str]) -> "DatasetBundle":
        keep = set(subjects)
        return self.select([i for i, s in enumerate(self.subject_ids) if s in keep])

    def select_channels(self, names: Sequence[str]) -> "DatasetBundle":
        idx = [self.layout.index(n) for n in names]
        return replace(self, layout=self.layout.subset(names), data=self.data[:, idx, :])

    def equals(self, other: "DatasetBundle") -> bool:
        return (
            self.dataset_id == other.dataset_id
            and self.sensor_names == other.sensor_names
            and float(self.sample_rate_hz) == float(other.sample_rate_hz)
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.labels, other.labels)
            and self.subject_ids == other.subject_ids
        )


def _nyquist_check(rate: float, cfg: PreprocessConfig) -> None:
    nyq = rate / 2
    if cfg.band_high_hz >= nyq or cfg.band_low_hz >= nyq:
        raise ConfigError(
            f"band edges ({cfg.band_low_hz}, {cfg.band_high_hz}) Hz must lie below Nyquist {nyq} Hz"
        )


def bandpass_filter(rec: RawRecording, cfg: PreprocessConfig) -> RawRecording:
    """Zero-phase Butterworth band-pass (forward-backward, second-order sections)."""
    _nyquist_check(rec.sample_rate, cfg)
    sos = sps.butter(
        int(cfg.filter_order),
        [cfg.band_low_hz, cfg.band_high_hz],
        btype="bandpass",
        fs=rec.sample_rate,
        output="sos",
    )
    x = np.asarray(rec.signal, dtype=float)
    if x.shape[1] == 0:
        return replace(rec, signal=x.copy())
    y = sps.sosfiltfilt(sos, x, axis=1)
    return replace(rec, signal=y, event_markers=list(rec.event_markers))


def resample(rec: RawRecording, target_rate: float) -> RawRecording:
    """Polyphase anti-aliased decimation to ``target_rate``; markers rescaled."""
    if target_rate <= 0:
        raise ConfigError(f"target_rate must be > 0, got {target_rate}")
    if target_rate > rec.sample_rate:
        raise UnsupportedOperationError(
            f"upsampling from {rec.sample_rate} Hz to {target_rate} Hz is not supported"
        )
    ratio = Fraction(str(target_rate)) / Fraction(str(rec.sample_rate))
    up, down = ratio.numerator, ratio.denominator
    x = np.asarray(rec.signal, dtype=float)
    n_out = (x.shape[1] * up) // down
    if up == down:
        y = x.copy()
    else:
        y = sps.resample_poly(x, up, down, axis=1, padtype="line")[:, :n_out]
    markers = []
    for idx, label in rec.event_markers:
        new = (idx * up) // down
        if new < n_out:
            markers.append((new, label))
        else:
            emit_warning("marker_dropped", f"marker at sample {idx} falls past the resampled end",
                         subject_id=rec.subject_id)
    return RawRecording(rec.dataset_id, rec.subject_id, float(target_rate), y, markers)


def zscore_channels(x: np.ndarray, subject_id: str = "", trial_index: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    bad = np.flatnonzero(sd[:, 0] <= 1e-12 * np.maximum(1.0, np.abs(mu[:, 0])))
    if bad.size:
        raise DegenerateInputError(
            f"subject {subject_id!r}, trial {trial_index}, channel {int(bad[0])}: zero variance"
        )
    return (x - mu) / sd


def epoch_and_normalize(rec: RawRecording, cfg: PreprocessConfig) -> list[TrialEpoch]:
    """Cut one window per left/right marker and z-score each channel within it.

    Windows that would run past the end of the recording are dropped with a
    ``epoch_truncated`` warning; markers labelled other than 0/1 are skipped.
    """
    window = int(round(cfg.window_seconds * rec.sample_rate))
    n = rec.signal.shape[1]
    out: list[TrialEpoch] = []
    for k, (start, label) in enumerate(rec.event_markers):
        if label not in (0, 1):
            emit_warning("label_excluded", f"marker label {label} is not left/right",
                         subject_id=rec.subject_id, trial_index=k)
            continue
        if start < 0 or start + window > n:
            emit_warning(
                "epoch_truncated",
                f"window [{start}, {start + window}) exceeds {n} samples",
                subject_id=rec.subject_id,
                trial_index=k,
            )
            continue
        seg = zscore_channels(rec.signal[:, start:start + window], rec.subject_id, k)
        out.append(TrialEpoch(rec.dataset_id, rec.subject_id, int(label), seg.astype(np.float32)))
    return out


def preprocess_recording(rec: RawRecording, cfg: PreprocessConfig) -> list[TrialEpoch]:
    """Filter, resample and epoch one recording in the fixed order."""
    filtered = bandpass_filter(rec, cfg)
    resampled = resample(filtered, cfg.target_rate_hz)
    return epoch_and_normalize(resampled, cfg)


def preprocess_recordings(
    recordings: Sequence[RawRecording],
    cfg: PreprocessConfig,
    layout: ElectrodeLayout | None = None,
    sensor_names: Sequence[str] | None = None,
) -> DatasetBundle:
    trials: list[TrialEpoch] = []
    for rec in recordings:
        trials.extend(preprocess_recording(rec, cfg))
    if layout is None:
        if sensor_names is None:
            raise ConfigError("need a layout or sensor names to build a bundle")
        layout = layout_from_labels(trials[0].dataset_id if trials else "dataset", sensor_names)
    return DatasetBundle.from_trials(layout, trials, cfg.target_rate_hz)
