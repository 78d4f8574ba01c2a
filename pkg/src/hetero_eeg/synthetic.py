"""Synthetic heterogeneous motor-imagery datasets.

Generative model for trial ``n`` of subject ``s`` in dataset ``d``::

    x = M_d @ e + sep * y_n * (g_s * a) (x) w(t - j_n) + subject_shift * (v_s (x) u_s)

* ``M_d`` mixes independent Gaussian sources ``e`` with a smooth spatial
  kernel over the flattened scalp grid; each source is AR(1) noise plus a
  Gaussian background rhythm whose AR coefficient and frequency depend on the
  dataset (``dataset_shift``).
* ``a`` is a topography lateralized over the left motor cortex, ``w`` a
  phase-locked 10 Hz burst and ``y_n = +1/-1`` for right/left imagery. A
  single-signed blob keeps the class visible to node-exchangeable readouts
  (global mean pooling), which a left-minus-right pattern would cancel.
* ``g_s`` are per-subject channel gains on the class pattern and
  ``v_s (x) u_s`` a per-subject additive fingerprint (``subject_shift``).
* Discriminative subject-specific patterns (``subject_specific``) add a second
  label-dependent component whose topography is drawn per subject.

Every dataset shares a few midline/near-midline "core" sensors; the other
sensors are dealt round-robin from the most to the least informative
position, so no dataset holds all of the strong motor sensors and the common
sensor set is weak.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError
from .montage import grid_position, layout_from_labels
from .signal import DatasetBundle, zscore_channels

CANDIDATE_SENSORS = [
    "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "C5", "C3", "C1", "Cz", "C2", "C4", "C6",
    "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "AF3", "AFz", "AF4", "F7", "F5", "F3",
    "F1", "Fz", "F2", "F4", "F6", "F8", "FT7", "FT8", "T7", "T8", "TP7", "TP8", "P7", "P5",
    "P3", "P1", "Pz", "P2", "P4", "P6", "P8", "PO7", "PO3", "POz", "PO4", "PO8", "O1", "Oz", "O2",
]
CORE_SENSORS = ["Cz", "CPz", "FCz", "C1", "C2"]
HOMOLOGOUS_PAIRS = [("FC3", "FC4"), ("C3", "C4"), ("CP3", "CP4"), ("FC5", "FC6"), ("C5", "C6"), ("CP5", "CP6")]
LEFT_MOTOR = (-2.0, 0.0)


@dataclass
class SyntheticSpec:
    n_datasets: int = 3
    channels_per_dataset: list[int] = field(default_factory=lambda: [8, 12, 16])
    subjects: int = 6
    trials_per_subject: int = 60
    class_separation: float = 2.0
    subject_shift: float = 1.0
    dataset_shift: float = 1.0
    subject_specific: float = 0.0
    seed: int = 0
    sample_rate_hz: float = 125.0
    n_samples: int = 64
    n_core: int = 3
    topography_width: float = 1.2
    latency_jitter: int = 2
    mixing_length: float = 1.0

    def __post_init__(self) -> None:
        self.channels_per_dataset = [int(c) for c in self.channels_per_dataset]
        if self.n_datasets < 1 or len(self.channels_per_dataset) != self.n_datasets:
            raise ConfigError("channels_per_dataset must list one channel count per dataset")
        if len(set(self.channels_per_dataset)) != len(self.channels_per_dataset):
            raise ConfigError("channels_per_dataset must be distinct across datasets")
        if min(self.channels_per_dataset) < 2 or self.subjects < 1 or self.trials_per_subject < 2:
            raise ConfigError("channel, subject and trial counts must be positive (>= 2 channels, >= 2 trials)")
        if self.n_samples < 16 or self.sample_rate_hz <= 0:
            raise ConfigError("n_samples must be >= 16 and sample_rate_hz > 0")
        if self.mixing_length <= 0:
            raise ConfigError("mixing_length must be > 0")
        if not 0 <= self.n_core <= min(len(CORE_SENSORS), min(self.channels_per_dataset)):
            raise ConfigError(f"n_core must be in [0, {min(len(CORE_SENSORS), min(self.channels_per_dataset))}]")
        total_specific = sum(c - self.n_core for c in self.channels_per_dataset)
        if total_specific > len(CANDIDATE_SENSORS) - self.n_core:
            raise ConfigError("not enough distinct sensor names for the requested channel counts")
        for name in ("class_separation", "subject_shift", "dataset_shift", "subject_specific"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def class_topography(names: Sequence[str], width: float) -> np.ndarray:
    pos = np.array([grid_position(n) for n in names])

    def blob(center):
        return np.exp(-((pos - np.asarray(center)) ** 2).sum(1) / (2 * width**2))

    return blob(LEFT_MOTOR)


def dataset_sensor_names(spec: SyntheticSpec) -> list[list[str]]:
    core = CORE_SENSORS[: spec.n_core]
    pool = [n for n in CANDIDATE_SENSORS if n not in core]
    strength = np.abs(class_topography(pool, spec.topography_width))
    order = [pool[i] for i in np.argsort(-strength, kind="stable")]
    wanted = [c - spec.n_core for c in spec.channels_per_dataset]
    picked: list[list[str]] = [[] for _ in wanted]
    it = iter(order)
    while any(len(p) < w for p, w in zip(picked, wanted)):
        for d, w in enumerate(wanted):
            if len(picked[d]) < w:
                picked[d].append(next(it))
    out = []
    for p in picked:
        names = core + p
        out.append(sorted(names, key=lambda n: CANDIDATE_SENSORS.index(n)))
    return out


def spatial_mixing(names: Sequence[str], length: float = 1.0) -> np.ndarray:
    pos = np.array([grid_position(n) for n in names])
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    m = np.exp(-d2 / (2 * length**2))
    return m / np.sqrt((m**2).sum(1, keepdims=True))


def class_waveform(n_samples: int, rate: float, freq: float = 10.0, shift: int = 0) -> np.ndarray:
    t = (np.arange(n_samples) - shift) / rate
    return np.hanning(n_samples) * np.sin(2 * np.pi * freq * t)


@dataclass
class DatasetParams:
    ar: float
    rhythm_hz: float
    rhythm_amp: float


def dataset_params(spec: SyntheticSpec, d: int) -> DatasetParams:
    frac = d / max(spec.n_datasets - 1, 1)
    ar = float(np.clip(0.5 + spec.dataset_shift * 0.35 * (frac - 0.5), 0.05, 0.95))
    rhythm_hz = 6.0 + spec.dataset_shift * 14.0 * frac
    rhythm_amp = 0.5 * spec.dataset_shift
    return DatasetParams(ar, rhythm_hz, rhythm_amp)


def temporal_covariance(spec: SyntheticSpec, p: DatasetParams) -> np.ndarray:
    T = spec.n_samples
    lag = np.abs(np.arange(T)[:, None] - np.arange(T)[None, :])
    cov = p.ar**lag / (1 - p.ar**2)
    t = np.arange(T) / spec.sample_rate_hz
    c, s = np.cos(2 * np.pi * p.rhythm_hz * t), np.sin(2 * np.pi * p.rhythm_hz * t)
    return cov + p.rhythm_amp**2 * (np.outer(c, c) + np.outer(s, s))


def _sources(rng: np.random.Generator, n: int, S: int, spec: SyntheticSpec, p: DatasetParams) -> np.ndarray:
    T = spec.n_samples
    white = rng.standard_normal((n, S, T))
    e = np.empty_like(white)
    e[..., 0] = white[..., 0] / np.sqrt(1 - p.ar**2)
    for t in range(1, T):
        e[..., t] = p.ar * e[..., t - 1] + white[..., t]
    t = np.arange(T) / spec.sample_rate_hz
    amp = rng.standard_normal((n, S, 2)) * p.rhythm_amp
    e += amp[..., :1] * np.cos(2 * np.pi * p.rhythm_hz * t) + amp[..., 1:] * np.sin(2 * np.pi * p.rhythm_hz * t)
    return e


@dataclass
class SubjectParams:
    gains: np.ndarray
    fingerprint_topo: np.ndarray
    fingerprint_wave: np.ndarray
    specific_topo: np.ndarray


def _subject_params(rng: np.random.Generator, names: Sequence[str], spec: SyntheticSpec) -> SubjectParams:
    S, T = len(names), spec.n_samples
    gains = np.exp(0.5 * spec.subject_shift * rng.standard_normal(S))
    f = rng.uniform(5.0, 30.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.hanning(T) * np.sin(2 * np.pi * f * np.arange(T) / spec.sample_rate_hz + phase)
    topo = rng.standard_normal(S)
    specific = rng.standard_normal(S)
    specific /= np.linalg.norm(specific)
    return SubjectParams(gains, topo / np.linalg.norm(topo) * np.sqrt(S), wave, specific * np.sqrt(S))


def generate_synthetic(spec: SyntheticSpec | dict | None = None) -> list[DatasetBundle]:
    """Deterministic (given ``spec.seed``) list of z-scored, epoched bundles."""
    if spec is None:
        spec = SyntheticSpec()
    elif isinstance(spec, dict):
        spec = SyntheticSpec(**spec)
    root = np.random.SeedSequence(spec.seed)
    dataset_seqs = root.spawn(spec.n_datasets)
    waveform = class_waveform(spec.n_samples, spec.sample_rate_hz)
    bundles = []
    for d, (names, dseq) in enumerate(zip(dataset_sensor_names(spec), dataset_seqs)):
        dataset_id = f"synth{d}"
        p = dataset_params(spec, d)
        mix = spatial_mixing(names, spec.mixing_length)
        topo = class_topography(names, spec.topography_width)
        S, T = len(names), spec.n_samples
        data, labels, subjects = [], [], []
        for s, sseq in enumerate(dseq.spawn(spec.subjects)):
            rng = np.random.default_rng(sseq)
            sp = _subject_params(rng, names, spec)
            n = spec.trials_per_subject
            y = np.array([0, 1] * (n // 2) + [0] * (n % 2))
            rng.shuffle(y)
            sign = 2.0 * y - 1.0
            e = _sources(rng, n, S, spec, p)
            x = np.einsum("ij,njt->nit", mix, e)
            jitter = rng.integers(-spec.latency_jitter, spec.latency_jitter + 1, size=n)
            pattern = sp.gains * topo
            specific_wave = class_waveform(T, spec.sample_rate_hz, freq=18.0)
            for k in range(n):
                w = np.roll(waveform, int(jitter[k]))
                x[k] += spec.class_separation * sign[k] * np.outer(pattern, w)
                x[k] += spec.subject_specific * sign[k] * np.outer(sp.specific_topo, specific_wave)
            x += 0.5 * spec.subject_shift * np.outer(sp.fingerprint_topo, sp.fingerprint_wave)[None]
            subject_id = f"{dataset_id}-s{s:02d}"
            for k in range(n):
                data.append(zscore_channels(x[k], subject_id, k).astype(np.float32))
                labels.append(int(y[k]))
                subjects.append(subject_id)
        layout = layout_from_labels(dataset_id, names)
        layout.global_pairs = [p for p in HOMOLOGOUS_PAIRS if p[0] in names and p[1] in names]
        bundles.append(DatasetBundle(dataset_id, layout, np.stack(data), np.array(labels), subjects,
                                     spec.sample_rate_hz))
    return bundles


def bayes_accuracy(spec: SyntheticSpec, dataset: int = 0, n_subject_draws: int = 64) -> float:
    """Bayes-optimal accuracy of the generator for one dataset, averaged over subjects.

    For a known subject the two classes are Gaussians with means +/- mu and the
    Kronecker covariance (M M^T) (x) C_t, so the optimal error is
    Phi(-||mu||_Sigma). Latency jitter, the subject-specific component and the
    z-scoring are ignored, which makes this an upper bound for the pipeline.
    """
    names = dataset_sensor_names(spec)[dataset]
    p = dataset_params(spec, dataset)
    mix = spatial_mixing(names, spec.mixing_length)
    cov_s = mix @ mix.T
    cov_t = temporal_covariance(spec, p)
    w = class_waveform(spec.n_samples, spec.sample_rate_hz)
    q_t = float(w @ np.linalg.solve(cov_t, w))
    topo = class_topography(names, spec.topography_width)
    rng = np.random.default_rng(12345)
    accs = []
    for _ in range(n_subject_draws):
        g = np.exp(0.5 * spec.subject_shift * rng.standard_normal(len(names)))
        a = g * topo
        q_s = float(a @ np.linalg.solve(cov_s + 1e-9 * np.eye(len(names)), a))
        accs.append(stats.norm.cdf(spec.class_separation * np.sqrt(q_s * q_t)))
    return float(np.mean(accs))
