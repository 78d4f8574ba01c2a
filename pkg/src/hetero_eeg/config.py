"""Declarative experiment configuration.

A run is described by one JSON file. Parsing fills every default, rejects
unknown keys, checks ranges and computes a canonical hash (sorted keys,
``repr`` floats) that names all run artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .losses import LossWeights
from .model import GcnBlockConfig, ModelConfig, TemporalBlockConfig, TemporalEncoderConfig
from .signal import PreprocessConfig


@dataclass
class GraphConfig:
    kind: str = "neighbourhood"  # or "correlation"
    k: int = 5
    global_pairs: list[list[str]] | None = None  # None -> default motor-cortex pairs

    def __post_init__(self) -> None:
        if self.kind not in ("neighbourhood", "correlation"):
            raise ConfigError(f"graph.kind must be 'neighbourhood' or 'correlation', got {self.kind!r}")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"graph.k must be a positive integer, got {self.k}")
        if self.global_pairs is not None:
            for p in self.global_pairs:
                if not (isinstance(p, (list, tuple)) and len(p) == 2 and all(isinstance(n, str) for n in p)):
                    raise ConfigError(f"graph.global_pairs entries must be [name, name], got {p!r}")


@dataclass
class DatasetEntry:
    bundle_path: str
    layout_path: str | None = None
    dataset_id: str | None = None
    graph: GraphConfig = field(default_factory=GraphConfig)


@dataclass
class OptimizerConfig:
    lr: float = 0.005
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 0.0001
    batch_size_per_dataset: int = 256
    steps: int = 2000
    eval_every: int = 100
    val_subjects: int = 0  # subjects per dataset held out of training for checkpoint selection
    pairing: str = "random"  # how batch rows line up across datasets: random (index pairing) | label_aligned

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ConfigError(f"optimizer.lr must be >= 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"optimizer.betas must be two numbers in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ConfigError(f"optimizer.weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size_per_dataset < 1:
            raise ConfigError(f"optimizer.batch_size_per_dataset must be >= 1, got {self.batch_size_per_dataset}")
        if self.steps < 0:
            raise ConfigError(f"optimizer.steps must be >= 0, got {self.steps}")
        if self.eval_every < 1:
            raise ConfigError(f"optimizer.eval_every must be >= 1, got {self.eval_every}")
        if self.val_subjects < 0:
            raise ConfigError(f"optimizer.val_subjects must be >= 0, got {self.val_subjects}")
        if self.pairing not in ("label_aligned", "random"):
            raise ConfigError(f"optimizer.pairing must be 'label_aligned' or 'random', got {self.pairing!r}")


@dataclass
class SplitConfig:
    target_dataset: str | None = None  # None/"all": every dataset holds out subjects
    n_folds: int = 2
    seed: int = 0
    test_subjects_per_fold: int | None = None
    folds: list[int] | None = None  # subset of folds to run; None = all

    def __post_init__(self) -> None:
        if self.n_folds < 1:
            raise ConfigError(f"split.n_folds must be >= 1, got {self.n_folds}")
        if self.test_subjects_per_fold is not None and self.test_subjects_per_fold < 1:
            raise ConfigError("split.test_subjects_per_fold must be >= 1")


@dataclass
class AblationSpec:
    use_gnn: bool = True
    use_mdd: bool = True
    channel_mode: str = "all"  # or "common"
    branch_mode: str = "per_dataset"  # or "single"

    def __post_init__(self) -> None:
        if self.channel_mode not in ("all", "common"):
            raise ConfigError(f"ablation.channel_mode must be 'all' or 'common', got {self.channel_mode!r}")
        if self.branch_mode not in ("single", "per_dataset"):
            raise ConfigError(f"ablation.branch_mode must be 'single' or 'per_dataset', got {self.branch_mode!r}")
        if self.branch_mode == "single" and self.channel_mode != "common":
            raise ConfigError("ablation.branch_mode='single' needs channel_mode='common' (one input width)")


@dataclass
class ExperimentConfig:
    datasets: list[DatasetEntry] = field(default_factory=list)
    graph: GraphConfig = field(default_factory=GraphConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    seed: int = 0
    threads: int = 1
    output_dir: str = "runs"

    def graph_for(self, dataset_id: str) -> GraphConfig:
        for d in self.datasets:
            if d.dataset_id == dataset_id:
                return d.graph
        return self.graph

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        return config_hash(self)


# -- parsing ---------------------------------------------------------------

_NESTED = {
    ("graph",): GraphConfig,
    ("preprocess",): PreprocessConfig,
    ("model",): ModelConfig,
    ("model", "temporal"): TemporalEncoderConfig,
    ("model", "gcn"): GcnBlockConfig,
    ("loss",): LossWeights,
    ("optimizer",): OptimizerConfig,
    ("split",): SplitConfig,
    ("ablation",): AblationSpec,
}


def _check_keys(d: Any, cls, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object, got {type(d).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {', '.join(unknown)}")


def _check_types(d: dict, cls, where: str) -> None:
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v, t = d[f.name], str(f.type)
        name = f"{where}.{f.name}" if where else f.name
        if t in ("int",) and not (isinstance(v, int) and not isinstance(v, bool)):
            raise ConfigError(f"{name} must be an integer, got {v!r}")
        if t in ("float",) and not (isinstance(v, (int, float)) and not isinstance(v, bool)):
            raise ConfigError(f"{name} must be a number, got {v!r}")
        if t == "bool" and not isinstance(v, bool):
            raise ConfigError(f"{name} must be true/false, got {v!r}")
        if t == "str" and not isinstance(v, str):
            raise ConfigError(f"{name} must be a string, got {v!r}")


def _build(cls, d: dict, where: str):
    _check_keys(d, cls, where)
    _check_types(d, cls, where)
    try:
        return cls(**d)
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if where in msg or not where else f"{where}: {msg}") from None
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    _check_keys(raw, ExperimentConfig, "")
    _check_types(raw, ExperimentConfig, "")
    d = dict(raw)
    if "model" in d:
        m = dict(d["model"]) if isinstance(d["model"], dict) else d["model"]
        _check_keys(m, ModelConfig, "model")
        if "temporal" in m:
            t = dict(m["temporal"]) if isinstance(m["temporal"], dict) else m["temporal"]
            _check_keys(t, TemporalEncoderConfig, "model.temporal")
            if "blocks" in t:
                if not isinstance(t["blocks"], list):
                    raise ConfigError("model.temporal.blocks must be a list")
                t["blocks"] = [
                    _build(TemporalBlockConfig, b, f"model.temporal.blocks[{i}]") for i, b in enumerate(t["blocks"])
                ]
            m["temporal"] = _build(TemporalEncoderConfig, t, "model.temporal")
        if "gcn" in m:
            m["gcn"] = _build(GcnBlockConfig, m["gcn"], "model.gcn")
        d["model"] = _build(ModelConfig, m, "model")
    for key, cls in [("graph", GraphConfig), ("preprocess", PreprocessConfig), ("loss", LossWeights),
                     ("optimizer", OptimizerConfig), ("split", SplitConfig), ("ablation", AblationSpec)]:
        if key in d:
            d[key] = _build(cls, d[key], key)
    if "datasets" in d:
        if not isinstance(d["datasets"], list):
            raise ConfigError("datasets must be a list")
        entries = []
        for i, e in enumerate(d["datasets"]):
            _check_keys(e, DatasetEntry, f"datasets[{i}]")
            e = dict(e)
            if "graph" in e:
                e["graph"] = _build(GraphConfig, e["graph"], f"datasets[{i}].graph")
            if not isinstance(e.get("bundle_path"), str):
                raise ConfigError(f"datasets[{i}].bundle_path is required")
            entries.append(DatasetEntry(**e))
        d["datasets"] = entries
    if "threads" in d and d["threads"] < 1:
        raise ConfigError(f"threads must be >= 1, got {d['threads']}")
    return ExperimentConfig(**d)


def parse_and_validate_config(path: str | Path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: not UTF-8 JSON ({exc})") from None
    cfg = config_from_dict(raw)
    base = path.parent
    for i, e in enumerate(cfg.datasets):
        e.bundle_path = str((base / e.bundle_path).resolve()) if not Path(e.bundle_path).is_absolute() else e.bundle_path
        if e.layout_path is not None and not Path(e.layout_path).is_absolute():
            e.layout_path = str((base / e.layout_path).resolve())
        if check_paths:
            if not Path(e.bundle_path).exists():
                raise ConfigError(f"datasets[{i}].bundle_path does not exist: {e.bundle_path}")
            if e.layout_path is not None and not Path(e.layout_path).exists():
                raise ConfigError(f"datasets[{i}].layout_path does not exist: {e.layout_path}")
    return cfg


def _canonical(obj: Any) -> Any:
    if isinstance(obj, float):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def canonical_json(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    d.pop("output_dir", None)
    d.pop("threads", None)
    return json.dumps(_canonical(d), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def desk_config(**changes) -> ExperimentConfig:
    """Small-model settings sized for short trials and CPU training.

    Two short temporal blocks, one GCN/SAGPool block keeping three quarters
    of the nodes, 32 graph features and 16 trials per dataset per step;
    everything else keeps the defaults. ``changes`` are passed to
    ``ExperimentConfig.replace``.
    """
    model = ModelConfig(
        temporal=TemporalEncoderConfig(blocks=[TemporalBlockConfig(15, 8, 4, 0.25), TemporalBlockConfig(7, 8, 4, 0.25)]),
        gcn=GcnBlockConfig(n_blocks=1, hidden_features=32, pool_ratio=0.75),
    )
    return ExperimentConfig(model=model, optimizer=OptimizerConfig(batch_size_per_dataset=16)).replace(**changes)
