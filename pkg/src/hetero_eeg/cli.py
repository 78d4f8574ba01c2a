"""Command-line entry points.

Every command reads one experiment config (JSON), writes its artifacts under
the output directory with the config hash in their names and finishes with a
run manifest. Exit codes: 0 success, 1 validation error, 2 runtime failure;
failures also print one JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from . import __version__
from .canonical import load_canonical, load_recordings, write_canonical
from .config import ExperimentConfig, config_from_dict, config_hash, desk_config, parse_and_validate_config
from .errors import ConfigError, FormatError, HashMismatchError, HeteroEEGError, RoutingError
from .harness import (
    aggregate_reports,
    build_model,
    evaluate,
    export_embeddings,
    prepare,
    run_ablation,
    split_inter_subject,
    train,
    TrainState,
)
from .model import load_checkpoint_into, save_checkpoint
from .montage import export_graph, layout_from_labels, load_layout
from .signal import DatasetBundle, preprocess_recordings
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger("hetero_eeg")

VALIDATION_ERRORS = (ConfigError, FormatError, HashMismatchError, RoutingError)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems are validation errors (exit 1), not argparse's 2
        raise ConfigError(message)


# -- inputs ---------------------------------------------------------------------


def _hash_path(path: Path) -> str:
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        h.update(f.relative_to(path).as_posix().encode() if path.is_dir() else f.name.encode())
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def load_datasets(cfg: ExperimentConfig) -> list[DatasetBundle]:
    """Load every configured bundle, applying layout and id overrides."""
    if not cfg.datasets:
        raise ConfigError("config lists no datasets")
    out = []
    for entry in cfg.datasets:
        b = load_canonical(entry.bundle_path)
        layout = b.layout
        if entry.layout_path is not None:
            layout = load_layout(entry.layout_path)
            if layout.sensor_names != b.sensor_names:
                layout = layout.subset(b.sensor_names)
        elif not any(layout.neighbour_lists):
            try:
                layout = layout_from_labels(b.dataset_id, b.sensor_names)
            except ConfigError:
                pass  # non-10-20 labels: keep the bare layout
        dataset_id = entry.dataset_id or b.dataset_id
        layout.dataset_id = dataset_id
        out.append(DatasetBundle(dataset_id, layout, b.data, b.labels, b.subject_ids, b.sample_rate_hz))
    ids = [b.dataset_id for b in out]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate dataset ids {ids}; set datasets[i].dataset_id")
    return out


def _plans(cfg: ExperimentConfig, bundles: Sequence[DatasetBundle]):
    s = cfg.split
    plans = split_inter_subject(bundles, s.target_dataset, s.n_folds, s.seed, s.test_subjects_per_fold,
                                cfg.optimizer.val_subjects)
    if s.folds is not None:
        bad = [f for f in s.folds if not 0 <= f < len(plans)]
        if bad:
            raise ConfigError(f"split.folds {bad} out of range for {len(plans)} folds")
        plans = [plans[f] for f in s.folds]
    return plans


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


class Run:
    """Bookkeeping for one command: output dir, hash and the run manifest."""

    def __init__(self, command: str, cfg: ExperimentConfig, out_dir: Path, inputs: dict[str, str]):
        self.command = command
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.out = out_dir
        self.inputs = inputs
        self.start = dt.datetime.now(dt.timezone.utc).isoformat()
        self.artifacts: list[str] = []
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, stem: str, suffix: str) -> Path:
        p = self.out / f"{stem}-{self.hash}{suffix}"
        self.artifacts.append(p.name)
        return p

    def finish(self, argv: Sequence[str]) -> Path:
        manifest = {
            "tool_version": __version__,
            "config_hash": self.hash,
            "input_hashes": self.inputs,
            "seed": self.cfg.seed,
            "start": self.start,
            "end": dt.datetime.now(dt.timezone.utc).isoformat(),
            "command": [self.command, *argv],
            "artifacts": self.artifacts,
        }
        return _write_json(self.out / f"run-{self.command}-{self.hash}.json", manifest)


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError(f"{args.command} requires --config")
    cfg = parse_and_validate_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.output_dir is not None:
        changes["output_dir"] = args.output_dir
    elif not Path(cfg.output_dir).is_absolute():
        changes["output_dir"] = str((Path(args.config).parent / cfg.output_dir).resolve())
    return cfg.replace(**changes) if changes else cfg


def _start(args, cfg: ExperimentConfig) -> Run:
    inputs = {e.bundle_path: _hash_path(Path(e.bundle_path)) for e in cfg.datasets}
    inputs.update({e.layout_path: _hash_path(Path(e.layout_path)) for e in cfg.datasets if e.layout_path})
    return Run(args.command, cfg, Path(cfg.output_dir), inputs)


# -- commands ---------------------------------------------------------------------


def cmd_synth(args, argv) -> None:
    spec = SyntheticSpec()
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read synthetic spec {args.spec}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("synthetic spec must be a JSON object")
        unknown = sorted(set(raw) - set(asdict(spec)))
        if unknown:
            raise ConfigError(f"unknown keys in synthetic spec: {', '.join(unknown)}")
        spec = SyntheticSpec(**raw)
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.output_dir or "synthetic")
    bundles = generate_synthetic(spec)
    entries = []
    for b in bundles:
        write_canonical(b, out / b.dataset_id)
        entries.append({"bundle_path": b.dataset_id})
    # a ready-to-run experiment config next to the bundles
    raw = desk_config(seed=spec.seed).to_dict()
    raw["datasets"] = entries
    cfg = config_from_dict(raw)
    inputs = {e["bundle_path"]: _hash_path(out / e["bundle_path"]) for e in entries}
    run = Run("synth", cfg, out, inputs)
    _write_json(out / "spec.json", spec.to_dict())
    _write_json(out / "experiment.json", raw)
    run.artifacts += [b.dataset_id for b in bundles] + ["spec.json", "experiment.json"]
    run.finish(argv)


def cmd_preprocess(args, argv) -> None:
    cfg = parse_and_validate_config(args.config, check_paths=False) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if not args.input:
        raise ConfigError("preprocess requires --input (a raw recordings directory)")
    recordings, names = load_recordings(args.input)
    if not recordings:
        raise FormatError(f"{args.input}: no recordings")
    layout = load_layout(args.layout) if args.layout else layout_from_labels(recordings[0].dataset_id, names)
    if layout.sensor_names != list(names):
        layout = layout.subset(names)
    bundle = preprocess_recordings(recordings, cfg.preprocess, layout)
    run = Run("preprocess", cfg, Path(args.output_dir or cfg.output_dir), {args.input: _hash_path(Path(args.input))})
    target = run.path(bundle.dataset_id, "")
    write_canonical(bundle, target)
    run.finish(argv)


def cmd_build_graph(args, argv) -> None:
    from .harness import _graph_for

    cfg = _load_config(args)
    run = _start(args, cfg)
    for b in load_datasets(cfg):
        a_hat = _graph_for(b, b.data, cfg)
        export_graph(a_hat, run.path(f"graph-{b.dataset_id}", ".json"))
    run.finish(argv)


def _checkpoint_name(run: Run, fold: int) -> Path:
    return run.path(f"model-fold{fold}", ".ckpt")


def cmd_train(args, argv) -> None:
    cfg = _load_config(args)
    run = _start(args, cfg)
    bundles = load_datasets(cfg)
    reports = []
    for plan in _plans(cfg, bundles):
        state, _ = train(bundles, plan, cfg, log_path=run.path(f"train-fold{plan.fold_id}", ".ndjson"))
        save_checkpoint(state.model, _checkpoint_name(run, plan.fold_id), run.hash,
                        extra={"fold": plan.fold_id, "seed": cfg.seed, "best_step": state.best_step})
        rep = evaluate(state, bundles, plan)
        reports.append(rep)
        _write_json(run.path(f"report-fold{plan.fold_id}", ".json"), rep.to_dict())
    _write_json(run.path("summary", ".json"), {"folds": [r.fold_id for r in reports],
                                               "aggregate": aggregate_reports(reports)})
    run.finish(argv)


def _restore(cfg: ExperimentConfig, bundles, plan, ckpt: Path, expected_hash: str) -> TrainState:
    import torch

    prep = prepare(bundles, plan, cfg)
    model = build_model(prep, cfg)
    load_checkpoint_into(model, ckpt, expected_hash)
    model.eval()
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optimizer.lr)
    return TrainState(model, opt, cfg.optimizer.steps, cfg.seed, prep.routes, prep.channels, expected_hash,
                      ablation=cfg.ablation)


def _checkpoints(args, run: Run, plans) -> dict[int, Path]:
    if args.checkpoint:
        if len(plans) != 1:
            raise ConfigError("--checkpoint names one fold; restrict split.folds to a single fold")
        return {plans[0].fold_id: Path(args.checkpoint)}
    out = {}
    for plan in plans:
        p = run.out / f"model-fold{plan.fold_id}-{run.hash}.ckpt"
        if not p.exists():
            raise ConfigError(f"no checkpoint {p.name} in {run.out}; run 'train' with this config first")
        out[plan.fold_id] = p
    return out


def cmd_evaluate(args, argv) -> None:
    cfg = _load_config(args)
    run = _start(args, cfg)
    bundles = load_datasets(cfg)
    plans = _plans(cfg, bundles)
    ckpts = _checkpoints(args, run, plans)
    reports = []
    for plan in plans:
        state = _restore(cfg, bundles, plan, ckpts[plan.fold_id], run.hash)
        rep = evaluate(state, bundles, plan)
        reports.append(rep)
        _write_json(run.path(f"eval-fold{plan.fold_id}", ".json"), rep.to_dict())
    _write_json(run.path("eval-summary", ".json"), {"folds": [r.fold_id for r in reports],
                                                    "aggregate": aggregate_reports(reports)})
    run.finish(argv)


def cmd_ablate(args, argv) -> None:
    cfg = _load_config(args)
    run = _start(args, cfg)
    bundles = load_datasets(cfg)
    per_cell: dict[str, list] = {}
    for plan in _plans(cfg, bundles):
        reports = run_ablation(bundles, plan, cfg)
        for (use_gnn, use_mdd), rep in reports.items():
            name = f"gnn{int(use_gnn)}-mdd{int(use_mdd)}"
            per_cell.setdefault(name, []).append(rep)
            _write_json(run.path(f"ablation-{name}-fold{plan.fold_id}", ".json"), rep.to_dict())
    _write_json(run.path("ablation-summary", ".json"),
                {name: aggregate_reports(reps) for name, reps in per_cell.items()})
    run.finish(argv)


def cmd_export_embeddings(args, argv) -> None:
    cfg = _load_config(args)
    run = _start(args, cfg)
    bundles = load_datasets(cfg)
    plans = _plans(cfg, bundles)
    ckpts = _checkpoints(args, run, plans)
    for plan in plans:
        state = _restore(cfg, bundles, plan, ckpts[plan.fold_id], run.hash)
        export_embeddings(state, bundles, plan, run.path(f"embeddings-fold{plan.fold_id}", ".csv"))
    run.finish(argv)


COMMANDS = {
    "preprocess": cmd_preprocess,
    "build-graph": cmd_build_graph,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetero-eeg", description="Multi-dataset EEG graph transfer learning")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--output-dir", help="override the config output directory")
        if name == "synth":
            p.add_argument("--spec", help="synthetic generator spec (JSON)")
        if name == "preprocess":
            p.add_argument("--input", help="raw recordings directory (recordings.json + signal.bin)")
            p.add_argument("--layout", help="electrode layout JSON for the output bundle")
        if name in ("evaluate", "export-embeddings"):
            p.add_argument("--checkpoint", help="checkpoint to use instead of the one named by the config hash")
    return parser


def _error_record(code: str, exc: BaseException, command: str | None) -> str:
    return json.dumps({"code": code, "error": type(exc).__name__, "detail": str(exc), "command": command})


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not logging.getLogger().handlers and not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if args.seed is not None and args.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {args.seed}")
        COMMANDS[command](args, argv[1:])
    except VALIDATION_ERRORS as exc:
        code = "hash_mismatch" if isinstance(exc, HashMismatchError) else getattr(exc, "code", "validation_error")
        print(_error_record(code, exc, command), file=sys.stderr)
        return 1
    except (HeteroEEGError, OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(_error_record(getattr(exc, "code", "runtime_error"), exc, command), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
