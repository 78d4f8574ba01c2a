"""Sensor layouts and the graphs built on top of them.

Two adjacency constructions are provided: a binary neighbourhood graph taken
from curated neighbour lists (plus a few long-range motor-cortex links), and a
sparsified absolute-Pearson-correlation graph estimated from training trials.
Both are normalized with self-loops before being used for graph convolution.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diagnostics import emit_warning
from .errors import ConfigError, DegenerateInputError, FormatError, ShapeError

DEFAULT_GLOBAL_PAIRS: tuple[tuple[str, str], ...] = (
    ("FC3", "FC4"),
    ("C3", "C4"),
    ("CP3", "CP4"),
)

SHIPPED_LAYOUTS = ("bcic2a", "physionet_mi", "openbmi")

LAYOUT_FORMAT_VERSION = "1"


@dataclass
class ElectrodeLayout:
    dataset_id: str
    sensor_names: list[str]
    positions: np.ndarray  # (S, 2)
    neighbour_lists: list[set[int]]
    global_pairs: list[tuple[str, str]] | None = None

    def __post_init__(self) -> None:
        self.sensor_names = list(self.sensor_names)
        self.positions = np.asarray(self.positions, dtype=float).reshape(len(self.sensor_names), 2)
        self.neighbour_lists = [set(int(j) for j in n) for n in self.neighbour_lists]
        self.validate()

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_names)

    def index(self, name: str) -> int:
        try:
            return self.sensor_names.index(name)
        except ValueError:
            raise ConfigError(f"sensor {name!r} not in layout {self.dataset_id!r}") from None

    def validate(self) -> None:
        S = len(self.sensor_names)
        if len(set(self.sensor_names)) != S:
            dupes = sorted({n for n in self.sensor_names if self.sensor_names.count(n) > 1})
            raise ConfigError(f"duplicate sensor names in layout {self.dataset_id!r}: {dupes}")
        if len(self.neighbour_lists) != S:
            raise ConfigError(
                f"layout {self.dataset_id!r}: {len(self.neighbour_lists)} neighbour lists for {S} sensors"
            )
        for i, nbrs in enumerate(self.neighbour_lists):
            for j in nbrs:
                if not 0 <= j < S:
                    raise ConfigError(f"layout {self.dataset_id!r}: neighbour index {j} out of range")
                if j == i:
                    raise ConfigError(f"layout {self.dataset_id!r}: sensor {self.sensor_names[i]} lists itself")
                if i not in self.neighbour_lists[j]:
                    raise ConfigError(
                        f"layout {self.dataset_id!r}: neighbour relation not symmetric for "
                        f"({self.sensor_names[i]}, {self.sensor_names[j]})"
                    )

    def subset(self, names: Sequence[str], dataset_id: str | None = None) -> "ElectrodeLayout":
        """Restrict to ``names`` (in the given order), dropping neighbours that vanish."""
        idx = [self.index(n) for n in names]
        remap = {old: new for new, old in enumerate(idx)}
        nbrs = [{remap[j] for j in self.neighbour_lists[i] if j in remap} for i in idx]
        pairs = None
        if self.global_pairs is not None:
            keep = set(names)
            pairs = [p for p in self.global_pairs if p[0] in keep and p[1] in keep]
        return ElectrodeLayout(
            dataset_id=dataset_id or self.dataset_id,
            sensor_names=list(names),
            positions=self.positions[idx],
            neighbour_lists=nbrs,
            global_pairs=pairs,
        )

    def permuted(self, order: Sequence[int]) -> "ElectrodeLayout":
        return self.subset([self.sensor_names[i] for i in order])

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "format_version": LAYOUT_FORMAT_VERSION,
            "dataset_id": self.dataset_id,
            "sensors": [
                {
                    "name": name,
                    "x": float(self.positions[i, 0]),
                    "y": float(self.positions[i, 1]),
                    "neighbours": [self.sensor_names[j] for j in sorted(self.neighbour_lists[i])],
                }
                for i, name in enumerate(self.sensor_names)
            ],
        }
        if self.global_pairs is not None:
            out["global_pairs"] = [list(p) for p in self.global_pairs]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ElectrodeLayout":
        try:
            sensors = d["sensors"]
            names = [str(s["name"]) for s in sensors]
            positions = [[float(s["x"]), float(s["y"])] for s in sensors]
            lookup = {n: i for i, n in enumerate(names)}
            nbrs = []
            for s in sensors:
                unknown = [n for n in s["neighbours"] if n not in lookup]
                if unknown:
                    raise ConfigError(f"sensor {s['name']!r} has unknown neighbours {unknown}")
                nbrs.append({lookup[n] for n in s["neighbours"]})
            pairs = d.get("global_pairs")
            if pairs is not None:
                pairs = [(str(a), str(b)) for a, b in pairs]
            layout = cls(str(d["dataset_id"]), names, np.asarray(positions).reshape(-1, 2), nbrs, pairs)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise FormatError(f"malformed layout: {exc!r}") from exc
        if pairs is not None:
            _check_pairs(layout, pairs)
        return layout


def load_layout(path: str | Path) -> ElectrodeLayout:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return ElectrodeLayout.from_dict(d)


def save_layout(layout: ElectrodeLayout, path: str | Path) -> None:
    Path(path).write_text(json.dumps(layout.to_dict(), indent=1) + "\n", encoding="utf-8")


def shipped_layout(name: str) -> ElectrodeLayout:
    """Load one of the curated montages bundled with the package."""
    if name not in SHIPPED_LAYOUTS:
        raise ConfigError(f"unknown shipped layout {name!r}; choose from {SHIPPED_LAYOUTS}")
    ref = resources.files("hetero_eeg") / "data" / "layouts" / f"{name}.json"
    return ElectrodeLayout.from_dict(json.loads(ref.read_text(encoding="utf-8")))


# -- grid geometry for 10-20/10-10/10-5 labels ---------------------------

_ROWS = {
    "Fp": 4.0, "AF": 3.0, "F": 2.0, "FT": 1.0, "FC": 1.0, "FTT": 0.5, "T": 0.0, "C": 0.0,
    "TTP": -0.5, "TP": -1.0, "CP": -1.0, "TPP": -1.5, "P": -2.0, "PO": -3.0, "O": -4.0, "I": -5.0,
}
_LABEL = re.compile(r"^(Fp|AF|FTT|FT|FC|TTP|TPP|TP|CP|PO|F|T|C|P|O|I)(z|\d+)(h?)$")


def grid_position(label: str) -> tuple[float, float]:
    """Unitless flattened scalp coordinates for an extended 10-20 label.

    Rows run anterior (+y) to posterior; odd numbers sit left (-x), even right,
    ``z`` on the midline. ``|x| = ceil(n / 2)``. The geometry is a layout
    convention, not a head model.
    """
    m = _LABEL.match(label)
    if not m:
        raise ConfigError(f"cannot place sensor label {label!r} on the grid")
    prefix, num, _ = m.groups()
    y = _ROWS[prefix]
    if num == "z":
        return 0.0, y
    n = int(num)
    x = float((n + 1) // 2)
    return (-x if n % 2 else x), y


def infer_neighbours(positions: np.ndarray, radius: float = 1.5, long_radius: float = 2.25) -> list[set[int]]:
    """Neighbour sets from 2-D positions.

    Sensors closer than ``radius`` are neighbours; Delaunay edges shorter than
    ``long_radius`` bridge gaps in sparse montages. Used to curate the shipped
    layout files and to lay out synthetic montages.
    """
    from scipy.spatial import Delaunay

    pos = np.asarray(positions, dtype=float)
    S = len(pos)
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    nbrs = [set() for _ in range(S)]
    for i in range(S):
        for j in range(i + 1, S):
            if dist[i, j] <= radius:
                nbrs[i].add(j)
                nbrs[j].add(i)
    # Delaunay needs a full-dimensional point set; collinear montages rely on the radius rule alone
    if S >= 4 and np.linalg.matrix_rank(pos - pos.mean(0)) == 2:
        tri = Delaunay(pos, qhull_options="QJ Pp")
        for simplex in tri.simplices:
            for a in range(3):
                for b in range(a + 1, 3):
                    i, j = int(simplex[a]), int(simplex[b])
                    if dist[i, j] <= long_radius:
                        nbrs[i].add(j)
                        nbrs[j].add(i)
    return nbrs


def layout_from_labels(dataset_id: str, names: Sequence[str]) -> ElectrodeLayout:
    pos = np.array([grid_position(n) for n in names])
    return ElectrodeLayout(dataset_id, list(names), pos, infer_neighbours(pos))


# -- adjacency ----------------------------------------------------------


@dataclass
class AdjacencyMatrix:
    weights: np.ndarray
    kind: str  # "neighbourhood" | "correlation"
    sensor_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ShapeError(f"adjacency must be square, got shape {w.shape}")
        if self.kind not in ("neighbourhood", "correlation"):
            raise ConfigError(f"unknown adjacency kind {self.kind!r}")
        self.weights = w

    @property
    def n_sensors(self) -> int:
        return self.weights.shape[0]


@dataclass
class NormalizedAdjacency:
    weights: np.ndarray
    sensor_names: list[str] = field(default_factory=list)
    kind: str = "neighbourhood"

    @property
    def n_sensors(self) -> int:
        return self.weights.shape[0]


def _check_pairs(layout: ElectrodeLayout, pairs: Iterable[tuple[str, str]]) -> None:
    known = set(layout.sensor_names)
    unknown = sorted({n for p in pairs for n in p if n not in known})
    if unknown:
        raise ConfigError(f"global pair sensors not in layout {layout.dataset_id!r}: {unknown}")


def build_neighbourhood_adjacency(
    layout: ElectrodeLayout,
    global_pairs: Sequence[tuple[str, str]] | None = None,
) -> AdjacencyMatrix:
    """Binary graph of direct neighbours plus long-range ``global_pairs``.

    ``global_pairs=None`` falls back to the layout's own pairs, then to the
    default motor-cortex pairs; a default pair missing from the layout is
    skipped with a warning. Explicit pairs must name sensors that exist.
    """
    if not any(layout.neighbour_lists):
        raise ConfigError(f"layout {layout.dataset_id!r} has no neighbour relations")
    S = layout.n_sensors
    w = np.zeros((S, S))
    for i, nbrs in enumerate(layout.neighbour_lists):
        for j in nbrs:
            w[i, j] = w[j, i] = 1.0

    if global_pairs is None and layout.global_pairs is not None:
        global_pairs = layout.global_pairs
    if global_pairs is None:
        known = set(layout.sensor_names)
        pairs = []
        for a, b in DEFAULT_GLOBAL_PAIRS:
            if a in known and b in known:
                pairs.append((a, b))
            else:
                emit_warning(
                    "global_pair_skipped",
                    f"default global pair ({a}, {b}) absent from layout {layout.dataset_id!r}",
                )
    else:
        pairs = [tuple(p) for p in global_pairs]
        _check_pairs(layout, pairs)

    for a, b in pairs:
        i, j = layout.index(a), layout.index(b)
        if i != j:
            w[i, j] = w[j, i] = 1.0
    return AdjacencyMatrix(w, "neighbourhood", list(layout.sensor_names))


def abs_pearson(trial: np.ndarray, trial_index: int = 0) -> np.ndarray:
    """|Pearson r| between every channel pair of one (S, T) trial."""
    x = np.asarray(trial, dtype=float)
    xc = x - x.mean(axis=1, keepdims=True)
    norm = np.sqrt((xc * xc).sum(axis=1))
    scale = np.maximum(np.abs(x).max(axis=1), 1.0)
    flat = np.flatnonzero(norm <= 1e-12 * scale * np.sqrt(x.shape[1]))
    if flat.size:
        raise DegenerateInputError(
            f"trial {trial_index}: channel {int(flat[0])} has zero variance"
        )
    r = (xc @ xc.T) / np.outer(norm, norm)
    return np.clip(np.abs(r), 0.0, 1.0)


def mean_abs_correlation(trials: Sequence[np.ndarray]) -> np.ndarray:
    if len(trials) == 0:
        raise ConfigError("correlation adjacency needs at least one trial")
    S = np.asarray(trials[0]).shape[0]
    acc = np.zeros((S, S))
    for t, trial in enumerate(trials):
        if np.asarray(trial).shape[0] != S:
            raise ShapeError(f"trial {t} has {np.asarray(trial).shape[0]} channels, expected {S}")
        acc += abs_pearson(trial, t)
    acc /= len(trials)
    np.fill_diagonal(acc, 0.0)
    return acc


def top_k_sparsify(w: np.ndarray, k: int) -> np.ndarray:
    """Keep each row's ``k`` largest off-diagonal entries, then symmetrize by max.

    Ties are broken by lower partner index.
    """
    S = w.shape[0]
    if not 1 <= k < S:
        raise ConfigError(f"k must satisfy 1 <= k < S={S}, got {k}")
    keep = np.zeros_like(w, dtype=bool)
    for i in range(S):
        cand = np.delete(np.arange(S), i)
        order = np.argsort(-w[i, cand], kind="stable")
        keep[i, cand[order[:k]]] = True
    sparse = np.where(keep, w, 0.0)
    return np.maximum(sparse, sparse.T)


def build_correlation_adjacency(
    trials: Sequence[np.ndarray],
    k: int,
    sensor_names: Sequence[str] | None = None,
) -> AdjacencyMatrix:
    """Top-``k`` graph of trial-averaged absolute Pearson correlations."""
    dense = mean_abs_correlation(trials)
    return AdjacencyMatrix(top_k_sparsify(dense, k), "correlation", list(sensor_names or []))


def normalize_adjacency(a: AdjacencyMatrix) -> NormalizedAdjacency:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    w = a.weights
    a_tilde = w + np.eye(w.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    a_hat = inv_sqrt[:, None] * a_tilde * inv_sqrt[None, :]
    a_hat = 0.5 * (a_hat + a_hat.T)
    return NormalizedAdjacency(a_hat, list(a.sensor_names), a.kind)


def export_graph(adj: AdjacencyMatrix | NormalizedAdjacency, path: str | Path | None = None) -> dict:
    payload = {
        "sensor_names": list(adj.sensor_names),
        "weights": [float(v) for v in np.asarray(adj.weights).ravel()],
        "kind": adj.kind,
        "normalized": isinstance(adj, NormalizedAdjacency),
    }
    if path is not None:
        Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")
    return payload


def import_graph(path_or_payload: str | Path | dict) -> AdjacencyMatrix | NormalizedAdjacency:
    if isinstance(path_or_payload, dict):
        d = path_or_payload
    else:
        d = json.loads(Path(path_or_payload).read_text(encoding="utf-8"))
    names = list(d["sensor_names"])
    w = np.asarray(d["weights"], dtype=float)
    S = int(round(np.sqrt(w.size)))
    if S * S != w.size:
        raise FormatError(f"graph weights of length {w.size} are not square")
    w = w.reshape(S, S)
    if d.get("normalized"):
        return NormalizedAdjacency(w, names, d.get("kind", "neighbourhood"))
    return AdjacencyMatrix(w, d["kind"], names)
