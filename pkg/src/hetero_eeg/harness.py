"""Inter-subject cross-validation, multi-dataset training and evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch

from .config import AblationSpec, ExperimentConfig, config_hash
from .diagnostics import emit_error
from .errors import ConfigError, NumericError, RoutingError
from .losses import LabeledLatentBatch, LossWeights, cross_entropy, mdd_total
from .metrics import accuracy_from_confusion, confusion_matrix, macro_f1_from_confusion
from .model import MultiBranchModel
from .montage import (
    build_correlation_adjacency,
    build_neighbourhood_adjacency,
    normalize_adjacency,
)
from .signal import DatasetBundle

log = logging.getLogger(__name__)

SINGLE_BRANCH = "pooled"


# -- splits -----------------------------------------------------------------


@dataclass
class SplitPlan:
    fold_id: int
    train_subjects: dict[str, list[str]]
    test_subjects: dict[str, list[str]]
    val_subjects: dict[str, list[str]] = field(default_factory=dict)

    def fit_subjects(self, dataset_id: str) -> list[str]:
        """Training subjects minus those held out for validation."""
        val = set(self.val_subjects.get(dataset_id, []))
        return [s for s in self.train_subjects.get(dataset_id, []) if s not in val]

    def validate(self, bundles: Sequence[DatasetBundle]) -> None:
        by_id = {b.dataset_id: b for b in bundles}
        for d in set(self.train_subjects) | set(self.test_subjects):
            if d not in by_id:
                raise ConfigError(f"split references unknown dataset {d!r}")
            known = set(by_id[d].subjects)
            tr, te = set(self.train_subjects.get(d, [])), set(self.test_subjects.get(d, []))
            if tr & te:
                raise ConfigError(f"fold {self.fold_id}: subjects {sorted(tr & te)} in both train and test of {d!r}")
            missing = (tr | te) - known
            if missing:
                raise ConfigError(f"fold {self.fold_id}: unknown subjects {sorted(missing)} in {d!r}")
            if not set(self.val_subjects.get(d, [])) <= tr:
                raise ConfigError(f"fold {self.fold_id}: validation subjects of {d!r} must come from training")
        if not any(self.test_subjects.values()):
            raise ConfigError(f"fold {self.fold_id}: no test subjects")

    def trial_counts(self, bundles: Sequence[DatasetBundle]) -> dict[str, dict[str, int]]:
        out = {}
        for b in bundles:
            idx = b.subjects
            count = lambda subs: sum(len(idx[s]) for s in subs)  # noqa: E731
            out[b.dataset_id] = {
                "train_subjects": len(self.train_subjects.get(b.dataset_id, [])),
                "train_trials": count(self.train_subjects.get(b.dataset_id, [])),
                "test_subjects": len(self.test_subjects.get(b.dataset_id, [])),
                "test_trials": count(self.test_subjects.get(b.dataset_id, [])),
                "val_subjects": len(self.val_subjects.get(b.dataset_id, [])),
            }
        return out

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "train_subjects": self.train_subjects,
            "test_subjects": self.test_subjects,
            "val_subjects": self.val_subjects,
        }


def _natural_key(s: str):
    import re

    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


def split_inter_subject(
    bundles: Sequence[DatasetBundle],
    target_dataset: str | None,
    n_folds: int,
    seed: int = 0,
    test_subjects_per_fold: int | None = None,
    val_subjects: int = 0,
) -> list[SplitPlan]:
    """Subject-disjoint folds on the target dataset(s).

    Source datasets put every subject in training. ``target_dataset`` of
    ``None`` or ``"all"`` rotates test subjects through every dataset at once.
    """
    ids = [b.dataset_id for b in bundles]
    if target_dataset in (None, "all"):
        targets = ids
    elif target_dataset in ids:
        targets = [target_dataset]
    else:
        raise ConfigError(f"target dataset {target_dataset!r} not among {ids}")
    if n_folds < 1:
        raise ConfigError(f"n_folds must be >= 1, got {n_folds}")

    groups: dict[str, list[list[str]]] = {}
    for k, b in enumerate(bundles):
        if b.dataset_id not in targets:
            continue
        subjects = sorted(b.subjects, key=_natural_key)
        need = n_folds * (test_subjects_per_fold or 1)
        if len(subjects) < need or (n_folds == 1 and test_subjects_per_fold is None):
            raise ConfigError(
                f"dataset {b.dataset_id!r} has {len(subjects)} subjects; {n_folds} folds need at least "
                f"{max(need, 2)}"
            )
        rng = np.random.default_rng([seed, k])
        perm = [subjects[i] for i in rng.permutation(len(subjects))]
        if test_subjects_per_fold:
            chunks = [perm[f * test_subjects_per_fold:(f + 1) * test_subjects_per_fold] for f in range(n_folds)]
        else:
            chunks = [list(c) for c in np.array_split(np.array(perm, dtype=object), n_folds)]
        groups[b.dataset_id] = chunks

    plans = []
    for f in range(n_folds):
        train, test, val = {}, {}, {}
        for b in bundles:
            subjects = sorted(b.subjects, key=_natural_key)
            if b.dataset_id in groups:
                held = set(groups[b.dataset_id][f])
                test[b.dataset_id] = sorted(held, key=_natural_key)
                train[b.dataset_id] = [s for s in subjects if s not in held]
                if val_subjects:
                    if len(train[b.dataset_id]) <= val_subjects:
                        raise ConfigError(
                            f"dataset {b.dataset_id!r}: {len(train[b.dataset_id])} training subjects cannot "
                            f"spare {val_subjects} for validation"
                        )
                    rng = np.random.default_rng([seed, f, 7919])
                    pick = rng.choice(len(train[b.dataset_id]), size=val_subjects, replace=False)
                    val[b.dataset_id] = sorted((train[b.dataset_id][i] for i in pick), key=_natural_key)
            else:
                train[b.dataset_id] = subjects
                test[b.dataset_id] = []
        plan = SplitPlan(f, train, test, val)
        plan.validate(bundles)
        plans.append(plan)
    return plans


def common_channel_projection(bundles: Sequence[DatasetBundle]) -> list[DatasetBundle]:
    """Reduce every bundle to the (name-sorted) intersection of sensor sets."""
    if not bundles:
        return []
    common = set(bundles[0].sensor_names)
    for b in bundles[1:]:
        common &= set(b.sensor_names)
    if not common:
        raise ConfigError("datasets share no sensor names; common-channel mode impossible")
    names = sorted(common)
    return [b.select_channels(names) for b in bundles]


# -- training -----------------------------------------------------------------


@dataclass
class TrainState:
    model: MultiBranchModel
    optimizer: torch.optim.Optimizer
    step: int
    seed: int
    routes: dict[str, str]  # dataset id -> branch id
    channels: dict[str, list[str]]  # dataset id -> sensor names fed to its branch
    config_hash: str
    history: deque = field(default_factory=lambda: deque(maxlen=1000))
    best_step: int | None = None
    ablation: AblationSpec = field(default_factory=AblationSpec)


class InterleavedBatches:
    """One equally sized batch per dataset per step.

    Each epoch reshuffles every dataset; the smallest training set fixes the
    number of batches per epoch and the tail batch is truncated, so all live
    batch sizes match (MDD pairs rows by index).

    With ``labels`` given, rows are label-aligned: position ``i`` of every
    dataset's batch carries the same class, so the paired MDD term compares
    same-class trials. The epoch is then set by the smallest per-class count.
    """

    def __init__(
        self,
        sizes: Mapping[str, int],
        batch_size: int,
        rng: np.random.Generator,
        labels: Mapping[str, np.ndarray] | None = None,
    ):
        if not sizes or min(sizes.values()) < 1:
            raise ConfigError("every participating dataset needs at least one training trial")
        self.sizes = dict(sizes)
        self.batch_size = batch_size
        self.rng = rng
        self.labels = None
        if labels is not None:
            self.labels = {d: np.asarray(labels[d]) for d in self.sizes}
            classes = [set(np.unique(y).tolist()) for y in self.labels.values()]
            self.classes = sorted(set.union(*classes))
            if any(c != set(self.classes) for c in classes):
                raise ConfigError("label-aligned batching needs every class in every dataset's training split")
            per_class = min(int((y == c).sum()) for y in self.labels.values() for c in self.classes)
            self.min_n = per_class * len(self.classes)
        else:
            self.min_n = min(self.sizes.values())
        self.per_epoch = math.ceil(self.min_n / batch_size)

    def __iter__(self) -> Iterator[dict[str, np.ndarray]]:
        if self.labels is None:
            while True:
                perms = {d: self.rng.permutation(n)[: self.min_n] for d, n in self.sizes.items()}
                for j in range(self.per_epoch):
                    lo, hi = j * self.batch_size, min((j + 1) * self.batch_size, self.min_n)
                    yield {d: p[lo:hi] for d, p in perms.items()}
        per_class = self.min_n // len(self.classes)
        while True:
            # one shared label sequence, then each dataset fills it from its own shuffled pools
            pattern = self.rng.permutation(np.repeat(np.arange(len(self.classes)), per_class))
            rows = {}
            for d, y in self.labels.items():
                pools = [self.rng.permutation(np.flatnonzero(y == c))[:per_class] for c in self.classes]
                order = np.empty(self.min_n, dtype=np.int64)
                for k, pool in enumerate(pools):
                    order[pattern == k] = pool
                rows[d] = order
            for j in range(self.per_epoch):
                lo, hi = j * self.batch_size, min((j + 1) * self.batch_size, self.min_n)
                yield {d: r[lo:hi] for d, r in rows.items()}


def _graph_for(bundle: DatasetBundle, train_data: np.ndarray, cfg: ExperimentConfig, graph_cfg=None):
    g = graph_cfg or cfg.graph_for(bundle.dataset_id)
    if g.kind == "neighbourhood":
        pairs = None if g.global_pairs is None else [tuple(p) for p in g.global_pairs]
        adj = build_neighbourhood_adjacency(bundle.layout, pairs)
    else:
        k = min(g.k, bundle.n_channels - 1)
        adj = build_correlation_adjacency(list(train_data), k, bundle.sensor_names)
    return normalize_adjacency(adj)


@dataclass
class PreparedData:
    bundles: dict[str, DatasetBundle]  # after channel projection
    fit: dict[str, DatasetBundle]
    val: dict[str, DatasetBundle]
    routes: dict[str, str]
    channels: dict[str, list[str]]
    branch_table: dict[str, dict]


def prepare(bundles: Sequence[DatasetBundle], split: SplitPlan, cfg: ExperimentConfig) -> PreparedData:
    ab = cfg.ablation
    work = common_channel_projection(bundles) if ab.channel_mode == "common" else list(bundles)
    by_id = {b.dataset_id: b for b in work}
    fit, val = {}, {}
    for d, b in by_id.items():
        subs = split.fit_subjects(d)
        if subs:
            fit[d] = b.select_subjects(subs)
        if split.val_subjects.get(d):
            val[d] = b.select_subjects(split.val_subjects[d])
    if not fit:
        raise ConfigError("split leaves no training data")
    channels = {d: list(b.sensor_names) for d, b in by_id.items()}
    if ab.branch_mode == "single":
        widths = {b.n_channels for b in work}
        if len(widths) != 1:
            raise ConfigError("single-branch training needs one channel count across datasets")
        routes = {d: SINGLE_BRANCH for d in by_id}
        first = next(iter(fit.values()))
        a_hat = None
        if ab.use_gnn:
            pooled = np.concatenate([f.data for f in fit.values()])
            a_hat = _graph_for(first, pooled, cfg, cfg.graph).weights
        table = {SINGLE_BRANCH: {"n_sensors": first.n_channels, "n_samples": first.n_samples, "a_hat": a_hat}}
    else:
        routes = {d: d for d in by_id}
        table = {}
        for d, f in fit.items():
            a_hat = _graph_for(f, f.data, cfg).weights if ab.use_gnn else None
            table[d] = {"n_sensors": f.n_channels, "n_samples": f.n_samples, "a_hat": a_hat}
        for d in by_id:
            if d not in table:
                raise ConfigError(f"dataset {d!r} has no training subjects but needs its own branch")
    return PreparedData(by_id, fit, val, routes, channels, table)


def _grad_norm(model: torch.nn.Module) -> float:
    sq = 0.0
    for p in model.parameters():
        if p.grad is not None:
            sq += float((p.grad.detach() ** 2).sum())
    return math.sqrt(sq)


def build_model(prep: PreparedData, cfg: ExperimentConfig) -> MultiBranchModel:
    return MultiBranchModel(prep.branch_table, cfg.model, use_gnn=cfg.ablation.use_gnn)


def train(
    bundles: Sequence[DatasetBundle],
    split: SplitPlan,
    config: ExperimentConfig,
    log_path: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[TrainState, list[dict]]:
    """Train one fold; returns the state (best validation checkpoint if any) and the step log."""
    torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    split.validate(bundles)
    prep = prepare(bundles, split, config)
    model = build_model(prep, config).to(dtype)
    opt_cfg = config.optimizer
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=opt_cfg.lr,
        betas=tuple(opt_cfg.betas),
        weight_decay=opt_cfg.weight_decay,
    )
    state = TrainState(model, optimizer, 0, config.seed, prep.routes, prep.channels, config_hash(config),
                       ablation=config.ablation)
    # one shared encoder has no dataset pairs to align
    paired = config.ablation.branch_mode == "per_dataset" and len(prep.fit) >= 2
    w2 = config.loss.w2 if config.ablation.use_mdd and paired else 0.0
    if config.loss.w1 == 0 and w2 == 0:
        raise ConfigError("loss weights leave nothing to optimize (w1 = 0 and MDD disabled)")
    weights = LossWeights(config.loss.w1, w2)
    xs = {d: torch.as_tensor(f.data, dtype=dtype) for d, f in prep.fit.items()}
    ys = {d: torch.as_tensor(f.labels) for d, f in prep.fit.items()}
    aligned = {d: f.labels for d, f in prep.fit.items()} if opt_cfg.pairing == "label_aligned" else None
    batches = iter(InterleavedBatches({d: len(f) for d, f in prep.fit.items()}, opt_cfg.batch_size_per_dataset, rng,
                                      aligned))

    records: list[dict] = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    best_acc, best_state = -1.0, None
    try:
        for step in range(opt_cfg.steps):
            model.train()
            idx = next(batches)
            ce_parts, lat = {}, []
            for d, rows in idx.items():
                rows_t = torch.as_tensor(rows)
                z, logits = model.branch_forward(prep.routes[d], xs[d][rows_t])
                y = ys[d][rows_t]
                ce_parts[d] = cross_entropy(logits, y)
                lat.append(LabeledLatentBatch(z, y, d))
            ce = sum(ce_parts.values())
            mdd = mdd_total(lat) if paired else torch.zeros((), dtype=dtype)
            total = weights.w1 * ce + weights.w2 * mdd
            if not torch.isfinite(total):
                detail = {"step": step, "ce": float(ce), "mdd": float(mdd), "grad_norm": _grad_norm(model)}
                emit_error("non_finite_loss", "training aborted", **detail)
                raise NumericError(f"non-finite loss at step {step}: {detail}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            gnorm = _grad_norm(model)
            if not math.isfinite(gnorm):
                emit_error("non_finite_gradient", "training aborted", step=step, ce=float(ce), mdd=float(mdd))
                raise NumericError(f"non-finite gradient norm at step {step}")
            optimizer.step()
            state.step = step + 1
            rec = {
                "step": step,
                "dataset_losses": {d: float(v.detach()) for d, v in ce_parts.items()},
                "ce": float(ce.detach()),
                "mdd": float(mdd.detach()),
                "total": float(total.detach()),
                "grad_norm": gnorm,
                "lr": optimizer.param_groups[0]["lr"],
            }
            records.append(rec)
            state.history.append(rec["total"])
            if sink:
                sink.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(rec)
            last = step + 1 == opt_cfg.steps
            if prep.val and ((step + 1) % opt_cfg.eval_every == 0 or last):
                acc = _validation_accuracy(state, prep)
                rec["val_accuracy"] = acc
                if acc > best_acc:
                    best_acc, state.best_step = acc, step + 1
                    best_state = copy.deepcopy(model.state_dict())
    finally:
        if sink:
            sink.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return state, records


def _validation_accuracy(state: TrainState, prep: PreparedData) -> float:
    correct = total = 0
    for d, b in prep.val.items():
        _, logits = _forward_all(state, d, b.data)
        correct += int((logits.argmax(1) == b.labels).sum())
        total += len(b)
    return correct / max(total, 1)


@torch.no_grad()
def _forward_all(state: TrainState, dataset_id: str, data: np.ndarray, chunk: int = 512):
    model = state.model
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    zs, ls = [], []
    try:
        for lo in range(0, len(data), chunk):
            x = torch.as_tensor(data[lo:lo + chunk], dtype=dtype)
            z, logits = model.branch_forward(state.routes[dataset_id], x)
            zs.append(z.numpy())
            ls.append(logits.numpy())
    finally:
        model.train(was)
    return np.concatenate(zs), np.concatenate(ls)


def _route_bundle(state: TrainState, bundle: DatasetBundle) -> DatasetBundle:
    if bundle.dataset_id not in state.routes:
        raise RoutingError(f"no branch registered for dataset {bundle.dataset_id!r}")
    names = state.channels[bundle.dataset_id]
    return bundle if bundle.sensor_names == names else bundle.select_channels(names)


def predict(state: TrainState, bundle: DatasetBundle) -> tuple[np.ndarray, np.ndarray]:
    """(projected latents, logits) for every trial of ``bundle``, eval mode."""
    b = _route_bundle(state, bundle)
    return _forward_all(state, b.dataset_id, b.data)


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalReport:
    fold_id: int
    seed: int
    config_hash: str
    per_dataset: dict[str, dict]

    def accuracy(self, dataset_id: str | None = None) -> float:
        """Per-dataset accuracy, or pooled accuracy over all tested datasets."""
        if dataset_id is not None:
            return self.per_dataset[dataset_id]["accuracy"]
        cm = sum(np.asarray(v["confusion"]) for v in self.per_dataset.values())
        return accuracy_from_confusion(cm)

    def to_dict(self) -> dict:
        return {"per_dataset": self.per_dataset, "fold_id": self.fold_id, "seed": self.seed,
                "config_hash": self.config_hash}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def report_entry(cm: np.ndarray) -> dict:
    return {
        "accuracy": accuracy_from_confusion(cm),
        "f1": macro_f1_from_confusion(cm),
        "confusion": cm.tolist(),
        "n_trials": int(cm.sum()),
    }


def evaluate(state: TrainState, bundles: Sequence[DatasetBundle], split: SplitPlan) -> EvalReport:
    per = {}
    for b in bundles:
        subs = split.test_subjects.get(b.dataset_id, [])
        if not subs:
            continue
        test = b.select_subjects(subs)
        _, logits = predict(state, test)
        per[b.dataset_id] = report_entry(confusion_matrix(test.labels, logits.argmax(1)))
    return EvalReport(split.fold_id, state.seed, state.config_hash, per)


def aggregate_reports(reports: Sequence[EvalReport]) -> dict[str, dict]:
    """Mean and standard deviation of accuracy/F1 across folds, per dataset."""
    out: dict[str, dict] = {}
    ids = sorted({d for r in reports for d in r.per_dataset})
    for d in ids:
        acc = [r.per_dataset[d]["accuracy"] for r in reports if d in r.per_dataset]
        f1 = [r.per_dataset[d]["f1"] for r in reports if d in r.per_dataset]
        out[d] = {
            "accuracy_mean": float(np.mean(acc)),
            "accuracy_std": float(np.std(acc)),
            "f1_mean": float(np.mean(f1)),
            "f1_std": float(np.std(f1)),
            "n_folds": len(acc),
        }
    return out


ABLATION_CELLS = [(False, False), (True, False), (False, True), (True, True)]


def run_ablation(
    bundles: Sequence[DatasetBundle],
    split: SplitPlan,
    config: ExperimentConfig,
    cells: Sequence[tuple[bool, bool]] = ABLATION_CELLS,
    keep_states: bool = False,
):
    """Train/evaluate each (use_gnn, use_mdd) cell on the same split and seed."""
    reports, states = {}, {}
    for use_gnn, use_mdd in cells:
        spec = AblationSpec(use_gnn, use_mdd, config.ablation.channel_mode, config.ablation.branch_mode)
        cfg = config.replace(ablation=spec)
        state, _ = train(bundles, split, cfg)
        reports[(use_gnn, use_mdd)] = evaluate(state, bundles, split)
        if keep_states:
            states[(use_gnn, use_mdd)] = state
    return (reports, states) if keep_states else reports


# -- embeddings ----------------------------------------------------------------


def collect_embeddings(state: TrainState, bundles: Sequence[DatasetBundle], split: SplitPlan):
    """Test-split rows as (dataset ids, subject ids, labels, latents)."""
    ds, subs, labels, feats = [], [], [], []
    for b in bundles:
        test_subs = split.test_subjects.get(b.dataset_id, [])
        if not test_subs:
            continue
        test = b.select_subjects(test_subs)
        z, _ = predict(state, test)
        ds += [b.dataset_id] * len(test)
        subs += test.subject_ids
        labels += test.labels.tolist()
        feats.append(z)
    width = state.model.cfg.latent_dim
    z_all = np.concatenate(feats) if feats else np.zeros((0, width))
    return ds, subs, np.asarray(labels, dtype=np.int64), z_all


def export_embeddings(state: TrainState, bundles: Sequence[DatasetBundle], split: SplitPlan, path: str | Path) -> Path:
    """CSV with columns dataset_id, subject_id, label, f_0 ... f_{F'-1}."""
    ds, subs, labels, z = collect_embeddings(state, bundles, split)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset_id", "subject_id", "label"] + [f"f_{i}" for i in range(z.shape[1])])
            for i in range(len(ds)):
                w.writerow([ds[i], subs[i], int(labels[i])] + [repr(float(v)) for v in z[i]])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return path


def read_embeddings(path: str | Path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_feat = len(header) - 3
    ds = [r[0] for r in body]
    subs = [r[1] for r in body]
    labels = np.array([int(r[2]) for r in body], dtype=np.int64)
    z = np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), n_feat)
    return ds, subs, labels, z
