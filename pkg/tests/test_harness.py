import numpy as np
import pytest
import torch

from hetero_eeg.config import AblationSpec, LossWeights, OptimizerConfig, desk_config
from hetero_eeg.errors import ConfigError, RoutingError
from hetero_eeg.harness import (
    InterleavedBatches,
    aggregate_reports,
    collect_embeddings,
    common_channel_projection,
    evaluate,
    export_embeddings,
    predict,
    read_embeddings,
    run_ablation,
    split_inter_subject,
    train,
)
from hetero_eeg.metrics import accuracy_from_confusion, confusion_matrix, f1_per_class, macro_f1_from_confusion
from hetero_eeg.model import GcnBlockConfig, ModelConfig, TemporalBlockConfig, TemporalEncoderConfig
from hetero_eeg.signal import DatasetBundle
from hetero_eeg.synthetic import SyntheticSpec, generate_synthetic

from conftest import chain_layout


def toy_bundle(dataset_id, n_subjects, trials_per_subject, names=("A", "B", "C"), T=16, seed=0):
    rng = np.random.default_rng(seed)
    n = n_subjects * trials_per_subject
    subjects = [f"S{i + 1}" for i in range(n_subjects) for _ in range(trials_per_subject)]
    labels = np.tile(np.arange(trials_per_subject) % 2, n_subjects)
    return DatasetBundle(dataset_id, chain_layout(names, dataset_id), rng.standard_normal((n, len(names), T)),
                         labels, subjects)


@pytest.fixture(scope="module")
def small_bundles():
    spec = SyntheticSpec(subjects=4, trials_per_subject=40, n_samples=64, class_separation=2.0,
                         topography_width=1.2, seed=0)
    return generate_synthetic(spec)


def small_config(steps=20, **changes):
    cfg = desk_config(seed=0)
    return cfg.replace(optimizer=OptimizerConfig(batch_size_per_dataset=8, steps=steps), **changes)


# -- splits ------------------------------------------------------------------------------


def test_nine_subject_leave_one_out_split():
    b = toy_bundle("bcic", 9, 288, T=4)
    plans = split_inter_subject([b], "bcic", 9, seed=0)
    assert len(plans) == 9
    for p in plans:
        counts = p.trial_counts([b])["bcic"]
        assert counts["train_subjects"] == 8 and counts["test_subjects"] == 1
        assert counts["train_trials"] == 2304 and counts["test_trials"] == 288


def test_partition_is_deterministic_and_covering():
    b = toy_bundle("x", 4, 4)
    a1, a2 = split_inter_subject([b], "x", 2, seed=5), split_inter_subject([b], "x", 2, seed=5)
    assert [p.to_dict() for p in a1] == [p.to_dict() for p in a2]
    tests = [set(p.test_subjects["x"]) for p in a1]
    assert tests[0].isdisjoint(tests[1]) and tests[0] | tests[1] == set(b.subjects)
    for p in a1:
        assert set(p.train_subjects["x"]).isdisjoint(p.test_subjects["x"])


def test_sources_train_on_every_subject():
    tgt, src = toy_bundle("t", 4, 4), toy_bundle("s", 3, 4, seed=1)
    for p in split_inter_subject([tgt, src], "t", 2, seed=0):
        assert p.test_subjects["s"] == [] and p.train_subjects["s"] == ["S1", "S2", "S3"]


def test_all_target_mode_rotates_every_dataset():
    bundles = [toy_bundle("a", 6, 4), toy_bundle("b", 6, 4, seed=1)]
    plans = split_inter_subject(bundles, "all", 3, seed=0, test_subjects_per_fold=2)
    for d in ("a", "b"):
        held = [s for p in plans for s in p.test_subjects[d]]
        assert sorted(held) == sorted(bundles[0].subjects) and len(set(held)) == 6


def test_split_errors():
    b = toy_bundle("x", 3, 4)
    with pytest.raises(ConfigError, match="3 subjects"):
        split_inter_subject([b], "x", 4)
    with pytest.raises(ConfigError, match="not among"):
        split_inter_subject([b], "y", 2)


def test_validation_subjects_come_from_training():
    b = toy_bundle("x", 5, 4)
    for p in split_inter_subject([b], "x", 5, seed=1, val_subjects=1):
        assert set(p.val_subjects["x"]) <= set(p.train_subjects["x"])
        assert len(p.fit_subjects("x")) == 3


def test_common_channel_projection():
    a = toy_bundle("a", 2, 2, names=("A", "B", "C"))
    b = toy_bundle("b", 2, 2, names=("B", "C", "D"), seed=1)
    pa, pb = common_channel_projection([a, b])
    assert pa.sensor_names == pb.sensor_names == ["B", "C"]
    assert np.array_equal(pa.data, a.data[:, [1, 2]]) and np.array_equal(pb.data, b.data[:, [0, 1]])
    again = common_channel_projection([pa, pb])
    assert all(x.equals(y) for x, y in zip(again, (pa, pb)))
    with pytest.raises(ConfigError):
        common_channel_projection([a, toy_bundle("c", 2, 2, names=("X", "Y"))])


# -- batching -------------------------------------------------------------------------------


def test_interleaved_batches_equal_sizes_and_truncation():
    it = iter(InterleavedBatches({"a": 10, "b": 23}, 4, np.random.default_rng(0)))
    sizes = [len(next(it)["a"]) for _ in range(6)]
    assert sizes == [4, 4, 2, 4, 4, 2]
    batch = next(it)
    assert len(batch["a"]) == len(batch["b"]) and max(batch["b"]) < 23


def test_label_aligned_batches_match_classes():
    ya = np.array([0, 1] * 10)
    yb = np.array([0] * 5 + [1] * 9)
    it = iter(InterleavedBatches({"a": 20, "b": 14}, 4, np.random.default_rng(1), {"a": ya, "b": yb}))
    seen = []
    for _ in range(6):
        rows = next(it)
        assert np.array_equal(ya[rows["a"]], yb[rows["b"]])
        seen += rows["b"].tolist()
    with pytest.raises(ConfigError):
        InterleavedBatches({"a": 4, "b": 4}, 2, np.random.default_rng(0), {"a": np.zeros(4), "b": np.array([0, 1, 0, 1])})


# -- metrics -----------------------------------------------------------------------------


def test_f1_hand_case():
    # class 1 as positive: TP=3, FP=1, FN=2, TN=4
    cm = np.array([[4, 1], [2, 3]])
    assert f1_per_class(cm)[1] == pytest.approx(2 * 0.75 * 0.6 / (0.75 + 0.6))
    assert round(float(f1_per_class(cm)[1]), 4) == 0.6667
    assert macro_f1_from_confusion(cm) == pytest.approx(np.mean(f1_per_class(cm)))


def test_perfect_and_constant_predictors():
    y = np.array([0, 1, 0, 1, 1, 0])
    cm = confusion_matrix(y, y)
    assert accuracy_from_confusion(cm) == 1.0 and macro_f1_from_confusion(cm) == 1.0
    assert accuracy_from_confusion(confusion_matrix(y, np.zeros_like(y))) == 0.5
    assert cm.sum(1).tolist() == [3, 3]


# -- training ------------------------------------------------------------------------------


def test_zero_learning_rate_leaves_parameters(small_bundles):
    plan = split_inter_subject(small_bundles, "all", 2, seed=0)[0]
    cfg = small_config(steps=0)
    s0, _ = train(small_bundles, plan, cfg)
    cfg1 = small_config(steps=1)
    cfg1 = cfg1.replace(optimizer=OptimizerConfig(lr=0.0, batch_size_per_dataset=8, steps=1))
    s1, _ = train(small_bundles, plan, cfg1)
    for (k, v0), v1 in zip(s0.model.state_dict().items(), s1.model.state_dict().values()):
        if "running" in k or "num_batches" in k:
            continue
        assert torch.equal(v0, v1), k


def test_training_is_reproducible(small_bundles):
    plan = split_inter_subject(small_bundles, "all", 2, seed=0)[0]
    cfg = small_config(steps=11)
    s1, log1 = train(small_bundles, plan, cfg)
    s2, log2 = train(small_bundles, plan, cfg)
    assert log1[0]["total"] == log2[0]["total"] and log1[10]["total"] == log2[10]["total"]
    assert evaluate(s1, small_bundles, plan).to_dict() == evaluate(s2, small_bundles, plan).to_dict()


def test_mdd_weight_decomposition(small_bundles):
    plan = split_inter_subject(small_bundles, "all", 2, seed=0)[0]
    _, log0 = train(small_bundles, plan, small_config(steps=1, loss=LossWeights(1.0, 0.0)))
    _, log1 = train(small_bundles, plan, small_config(steps=1, loss=LossWeights(1.0, 0.1)))
    assert log0[0]["ce"] == log1[0]["ce"]
    assert log1[0]["total"] - log0[0]["total"] == pytest.approx(0.1 * log1[0]["mdd"], rel=1e-5)


def sanity_config(steps):
    cfg = desk_config(seed=0)
    return cfg.replace(optimizer=OptimizerConfig(batch_size_per_dataset=64, steps=steps))


@pytest.fixture(scope="module")
def default_split():
    bundles = generate_synthetic(SyntheticSpec())
    return bundles, split_inter_subject(bundles, "all", 3, seed=0, test_subjects_per_fold=2)[0]


def test_loss_decreases_over_first_50_steps(default_split):
    bundles, plan = default_split
    _, log = train(bundles, plan, sanity_config(50))
    blocks = np.array([r["total"] for r in log]).reshape(5, 10).mean(1)
    assert np.all(np.diff(blocks) < 0), blocks


def test_overfit_sanity_run_on_default_synthetic_data(default_split):
    bundles, plan = default_split
    state, _ = train(bundles, plan, sanity_config(200))
    for b in bundles:
        fit = b.select_subjects(plan.train_subjects[b.dataset_id])
        _, logits = predict(state, fit)
        assert (logits.argmax(1) == fit.labels).mean() >= 0.95, b.dataset_id


def test_evaluation_is_side_effect_free(small_bundles):
    plan = split_inter_subject(small_bundles, "all", 2, seed=0)[0]
    state, _ = train(small_bundles, plan, small_config(steps=5))
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    r1, r2 = evaluate(state, small_bundles, plan), evaluate(state, small_bundles, plan)
    assert r1.to_dict() == r2.to_dict()
    assert all(torch.equal(before[k], v) for k, v in state.model.state_dict().items())
    for entry in r1.per_dataset.values():
        cm = np.array(entry["confusion"])
        assert entry["accuracy"] == accuracy_from_confusion(cm) and entry["f1"] == macro_f1_from_confusion(cm)
    agg = aggregate_reports([r1, r2])
    assert all(v["accuracy_std"] == 0.0 and v["n_folds"] == 2 for v in agg.values())


def test_routing_error_for_unknown_dataset(small_bundles):
    plan = split_inter_subject(small_bundles, "all", 2, seed=0)[0]
    state, _ = train(small_bundles, plan, small_config(steps=1))
    stranger = toy_bundle("unknown", 2, 2)
    with pytest.raises(RoutingError):
        predict(state, stranger)


def test_export_embeddings_round_trip(small_bundles, tmp_path):
    plan = split_inter_subject(small_bundles, "all", 2, seed=0)[0]
    state, _ = train(small_bundles, plan, small_config(steps=3))
    path = export_embeddings(state, small_bundles, plan, tmp_path / "emb.csv")
    ds, subs, labels, z = read_embeddings(path)
    n_test = sum(len(b.select_subjects(plan.test_subjects[b.dataset_id])) for b in small_bundles)
    assert len(ds) == n_test and z.shape == (n_test, state.model.cfg.latent_dim)
    first = small_bundles[1].select_subjects(plan.test_subjects[small_bundles[1].dataset_id])
    row = ds.index(first.dataset_id)
    with torch.no_grad():
        direct, _ = state.model.branch_forward(first.dataset_id, torch.as_tensor(first.data[:1]))
    assert np.abs(z[row] - direct.numpy()[0]).max() < 1e-6
    assert subs[row] == first.subject_ids[0] and labels[row] == first.labels[0]


def test_ablation_grid_and_single_branch(small_bundles):
    plan = split_inter_subject(small_bundles, "all", 2, seed=0)[0]
    reports = run_ablation(small_bundles, plan, small_config(steps=2))
    assert sorted(reports) == [(False, False), (False, True), (True, False), (True, True)]
    assert len({r.fold_id for r in reports.values()}) == 1
    single = small_config(steps=2, ablation=AblationSpec(False, False, "common", "single"))
    state, log = train(small_bundles, plan, single)
    assert set(state.routes.values()) == {"pooled"} and len(state.model.dataset_ids) == 1
    assert all(r["mdd"] == 0.0 for r in log)
    assert len(set(map(len, state.channels.values()))) == 1
