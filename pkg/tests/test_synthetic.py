import numpy as np
import pytest
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis
from sklearn.model_selection import cross_val_score

from hetero_eeg.errors import ConfigError
from hetero_eeg.signal import DatasetBundle
from hetero_eeg.synthetic import SyntheticSpec, bayes_accuracy, dataset_sensor_names, generate_synthetic


@pytest.fixture(scope="module")
def default_bundles():
    return generate_synthetic(SyntheticSpec())


def test_seed_determinism():
    a = generate_synthetic(SyntheticSpec(seed=7, subjects=2, trials_per_subject=6))
    b = generate_synthetic(SyntheticSpec(seed=7, subjects=2, trials_per_subject=6))
    for x, y in zip(a, b):
        assert x.data.tobytes() == y.data.tobytes() and np.array_equal(x.labels, y.labels)


def test_shapes_and_heterogeneity(default_bundles):
    spec = SyntheticSpec()
    assert [b.n_channels for b in default_bundles] == spec.channels_per_dataset
    for b in default_bundles:
        assert len(b) == spec.subjects * spec.trials_per_subject and b.n_samples == spec.n_samples
        assert abs(b.labels.mean() - 0.5) < 1e-9
        assert np.allclose(b.data.mean(-1), 0, atol=1e-5)
    common = set.intersection(*(set(n) for n in dataset_sensor_names(spec)))
    assert len(common) == spec.n_core


def test_bayes_rate_at_defaults():
    for d in range(3):
        assert bayes_accuracy(SyntheticSpec(), d) > 0.95


def test_linear_discriminant_within_dataset(default_bundles):
    for b in default_bundles:
        X = b.data.reshape(len(b), -1)
        lda = LinearDiscriminantAnalysis(solver="lsqr", shrinkage="auto")
        acc = cross_val_score(lda, X, b.labels, cv=5).mean()
        assert acc >= 0.90, (b.dataset_id, acc)


def test_no_signal_gives_chance():
    bundles = generate_synthetic(SyntheticSpec(class_separation=0.0, trials_per_subject=100))
    correct = total = 0
    for b in bundles:
        X = b.data.reshape(len(b), -1)
        train = np.array([int(s[-2:]) < 3 for s in b.subject_ids])
        lda = LinearDiscriminantAnalysis(solver="lsqr", shrinkage="auto").fit(X[train], b.labels[train])
        correct += int((lda.predict(X[~train]) == b.labels[~train]).sum())
        total += int((~train).sum())
    assert abs(correct / total - 0.5) <= 0.03


def test_relabeling_subjects_keeps_payloads(default_bundles):
    b = default_bundles[0]
    names = list(b.subjects)
    mapping = dict(zip(names, reversed(names)))
    relabeled = DatasetBundle(b.dataset_id, b.layout, b.data, b.labels, [mapping[s] for s in b.subject_ids])
    assert relabeled.data.tobytes() == b.data.tobytes()
    for old, new in mapping.items():
        assert np.array_equal(relabeled.select_subjects([new]).data, b.select_subjects([old]).data)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(channels_per_dataset=[8, 8, 16])
    with pytest.raises(ConfigError):
        SyntheticSpec(class_separation=-1)
    with pytest.raises(ConfigError):
        SyntheticSpec(n_datasets=2)
