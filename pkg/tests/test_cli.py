import json

import numpy as np
import pytest

from hetero_eeg.canonical import load_canonical, write_recordings
from hetero_eeg.cli import main
from hetero_eeg.signal import RawRecording
from hetero_eeg.synthetic import SyntheticSpec, generate_synthetic

SMALL_SPEC = {"subjects": 4, "trials_per_subject": 10}


def last_error(capsys):
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("{")]
    return json.loads(lines[-1])


@pytest.fixture
def synth_dir(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SMALL_SPEC))
    out = tmp_path / "synth"
    assert main(["synth", "--spec", str(spec), "--seed", "3", "--output-dir", str(out)]) == 0
    cfg = json.loads((out / "experiment.json").read_text())
    cfg["optimizer"]["steps"] = 3
    cfg["split"].update({"n_folds": 2, "folds": [0]})
    (out / "experiment.json").write_text(json.dumps(cfg))
    return out


def test_synth_round_trips(synth_dir):
    expected = generate_synthetic(SyntheticSpec(seed=3, **SMALL_SPEC))
    for b in expected:
        assert load_canonical(synth_dir / b.dataset_id).equals(b)
    manifests = list(synth_dir.glob("run-synth-*.json"))
    assert len(manifests) == 1
    m = json.loads(manifests[0].read_text())
    assert m["seed"] == 3 and set(m["input_hashes"]) == {"synth0", "synth1", "synth2"}


def test_train_then_evaluate_and_export(synth_dir):
    cfg = str(synth_dir / "experiment.json")
    assert main(["train", "--config", cfg]) == 0
    runs = synth_dir / "runs"
    names = {p.name.split("-")[0] + "-" + p.suffix for p in runs.iterdir()}
    assert {"model-.ckpt", "train-.ndjson", "report-.json", "summary-.json", "run-.json"} <= names
    (h,) = {p.stem.rsplit("-", 1)[1] for p in runs.glob("model-fold0-*.ckpt")}
    log = [json.loads(l) for l in (runs / f"train-fold0-{h}.ndjson").read_text().splitlines()]
    assert [r["step"] for r in log] == [0, 1, 2]
    assert {"dataset_losses", "ce", "mdd", "total", "grad_norm", "lr"} <= set(log[0])
    report = json.loads((runs / f"report-fold0-{h}.json").read_text())
    assert report["config_hash"] == h and set(report["per_dataset"]) == {"synth0", "synth1", "synth2"}

    assert main(["evaluate", "--config", cfg]) == 0
    again = json.loads((runs / f"eval-fold0-{h}.json").read_text())
    assert again["per_dataset"] == report["per_dataset"]
    assert main(["export-embeddings", "--config", cfg]) == 0
    rows = (runs / f"embeddings-fold0-{h}.csv").read_text().splitlines()
    assert rows[0].startswith("dataset_id,subject_id,label,f_0")
    assert len(rows) - 1 == sum(v["n_trials"] for v in report["per_dataset"].values())
    assert main(["build-graph", "--config", cfg]) == 0
    assert len(list(runs.glob(f"graph-synth*-{h}.json"))) == 3


def test_evaluate_with_mismatched_checkpoint(synth_dir, capsys):
    cfg = str(synth_dir / "experiment.json")
    assert main(["train", "--config", cfg]) == 0
    (ckpt,) = (synth_dir / "runs").glob("model-fold0-*.ckpt")
    assert main(["evaluate", "--config", cfg, "--seed", "99", "--checkpoint", str(ckpt)]) == 1
    err = last_error(capsys)
    assert err["code"] == "hash_mismatch" and "hash" in err["detail"].lower()
    assert main(["evaluate", "--config", cfg, "--seed", "99"]) == 1
    assert "no checkpoint" in last_error(capsys)["detail"]


def test_same_config_and_seed_reproduce_reports(synth_dir, tmp_path):
    cfg = str(synth_dir / "experiment.json")
    assert main(["train", "--config", cfg, "--output-dir", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", cfg, "--output-dir", str(tmp_path / "b")]) == 0
    (ra,) = (tmp_path / "a").glob("report-fold0-*.json")
    (rb,) = (tmp_path / "b").glob("report-fold0-*.json")
    assert ra.name == rb.name and ra.read_text() == rb.read_text()


def test_ablate_writes_four_cells(synth_dir):
    assert main(["ablate", "--config", str(synth_dir / "experiment.json")]) == 0
    cells = {p.name.split("-fold")[0] for p in (synth_dir / "runs").glob("ablation-gnn*-fold0-*.json")}
    assert cells == {"ablation-gnn0-mdd0", "ablation-gnn0-mdd1", "ablation-gnn1-mdd0", "ablation-gnn1-mdd1"}


def test_preprocess_command(tmp_path):
    rng = np.random.default_rng(0)
    rate = 250.0
    recs = [RawRecording("raw", f"s{i}", rate, rng.standard_normal((3, 3000)), [(100, 0), (1200, 1)])
            for i in range(2)]
    write_recordings(recs, ["C3", "Cz", "C4"], tmp_path / "raw")
    assert main(["preprocess", "--input", str(tmp_path / "raw"), "--output-dir", str(tmp_path / "out")]) == 0
    (bundle_dir,) = [p for p in (tmp_path / "out").iterdir() if p.is_dir()]
    b = load_canonical(bundle_dir)
    assert len(b) == 4 and b.n_samples == 500 and b.sensor_names == ["C3", "Cz", "C4"]


@pytest.mark.parametrize(
    "argv, code",
    [
        (["train"], 1),
        (["train", "--config", "/nonexistent.json"], 1),
        (["nonsense"], 1),
        (["train", "--config", "x", "--seed", "-4"], 1),
    ],
)
def test_failures_emit_error_records(argv, code, capsys):
    assert main(argv) == code
    err = last_error(capsys)
    assert set(err) == {"code", "error", "detail", "command"}


def test_corrupt_bundle_is_a_validation_error(synth_dir, capsys):
    (synth_dir / "synth0" / "trials.bin").write_bytes(b"")
    assert main(["train", "--config", str(synth_dir / "experiment.json")]) == 1
    assert last_error(capsys)["error"] == "FormatError"


def test_unwritable_output_is_a_runtime_failure(synth_dir, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    assert main(["train", "--config", str(synth_dir / "experiment.json"), "--output-dir", str(blocker)]) == 2
    assert last_error(capsys)["command"] == "train"
