import json

import pytest

from hetero_eeg.config import canonical_json, config_from_dict, config_hash, desk_config, parse_and_validate_config
from hetero_eeg.errors import ConfigError


def write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj), encoding="utf-8")
    return p


@pytest.fixture
def bundle_dir(tmp_path):
    d = tmp_path / "bundle"
    d.mkdir()
    return d


def test_minimal_config_gets_defaults(tmp_path, bundle_dir):
    cfg = parse_and_validate_config(write(tmp_path, {"datasets": [{"bundle_path": "bundle"}]}))
    o = cfg.optimizer
    assert (o.lr, o.betas, o.weight_decay, o.batch_size_per_dataset) == (0.005, [0.9, 0.999], 0.0001, 256)
    assert (cfg.loss.w1, cfg.loss.w2) == (1.0, 0.1)
    assert cfg.ablation.use_gnn and cfg.ablation.use_mdd
    assert cfg.datasets[0].bundle_path == str(bundle_dir.resolve())


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"optimizer": {"lr": -1}}, "optimizer.lr"),
        ({"optimizer": {"batch_size_per_dataset": 0}}, "optimizer.batch_size_per_dataset"),
        ({"loss": {"w1": 0, "w2": 0}}, "loss"),
        ({"model": {"gcn": {"pool_ratio": 0}}}, "model.gcn.pool_ratio"),
        ({"preprocess": {"band_high_hz": 80}}, "preprocess"),
        ({"split": {"n_folds": 0}}, "split.n_folds"),
        ({"ablation": {"channel_mode": "some"}}, "ablation.channel_mode"),
        ({"optimizer": {"steps": "many"}}, "optimizer.steps"),
    ],
)
def test_bound_violations_name_the_field(tmp_path, bundle_dir, patch, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        parse_and_validate_config(write(tmp_path, {"datasets": [{"bundle_path": "bundle"}], **patch}))


def test_unknown_keys_are_listed(tmp_path, bundle_dir):
    with pytest.raises(ConfigError, match="bogus, extra"):
        parse_and_validate_config(write(tmp_path, {"datasets": [{"bundle_path": "bundle"}], "extra": 1, "bogus": 2}))
    with pytest.raises(ConfigError, match="optimizer.*momentum"):
        parse_and_validate_config(write(tmp_path, {"optimizer": {"momentum": 0.9}}))


def test_missing_paths_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        parse_and_validate_config(write(tmp_path, {"datasets": [{"bundle_path": "nowhere"}]}))
    bad = tmp_path / "bad.json"
    bad.write_bytes(b"{not json")
    with pytest.raises(ConfigError, match="JSON"):
        parse_and_validate_config(bad)
    with pytest.raises(ConfigError, match="not found"):
        parse_and_validate_config(tmp_path / "absent.json")


def test_identical_files_identical_hash(tmp_path, bundle_dir):
    body = {"datasets": [{"bundle_path": "bundle"}], "optimizer": {"lr": 0.001}, "seed": 4}
    a = parse_and_validate_config(write(tmp_path, body, "a.json"))
    b = parse_and_validate_config(write(tmp_path, dict(reversed(list(body.items()))), "b.json"))
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(a.replace(seed=5))
    assert config_hash(a) == config_hash(a.replace(output_dir="elsewhere"))


def test_canonical_json_round_trips():
    cfg = desk_config(seed=3)
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert canonical_json(again) == canonical_json(cfg)
