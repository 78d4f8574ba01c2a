"""Differentiable building blocks and the multi-branch decoder.

Each dataset gets its own branch (temporal CNN -> GCN + SAGPool blocks ->
global mean pool). All branches feed one shared projector and one shared
linear classifier, so the branches must agree on the latent width.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import warnings
import zipfile
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, FormatError, HashMismatchError, RoutingError, ShapeError, VersionError

# even temporal kernels with same padding are intentional; torch pads asymmetrically
warnings.filterwarnings("ignore", message="Using padding='same' with even kernel")


# -- configs ------------------------------------------------------------


@dataclass
class TemporalBlockConfig:
    kernel_length: int
    out_features: int
    pool_length: int
    dropout_rate: float = 0.25


def _default_blocks() -> list[TemporalBlockConfig]:
    return [TemporalBlockConfig(64, 8, 4, 0.25), TemporalBlockConfig(16, 16, 8, 0.25)]


@dataclass
class TemporalEncoderConfig:
    blocks: list[TemporalBlockConfig] = field(default_factory=_default_blocks)
    padding: str = "same"  # or "valid"
    batch_norm: bool = True
    activation: str = "prelu"  # or "identity"

    def __post_init__(self) -> None:
        self.blocks = [b if isinstance(b, TemporalBlockConfig) else TemporalBlockConfig(**b) for b in self.blocks]
        if not self.blocks:
            raise ConfigError("model.temporal.blocks must not be empty")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"model.temporal.padding must be 'same' or 'valid', got {self.padding!r}")
        if self.activation not in ("prelu", "identity"):
            raise ConfigError(f"model.temporal.activation must be 'prelu' or 'identity', got {self.activation!r}")
        for i, b in enumerate(self.blocks):
            if b.kernel_length < 1 or b.out_features < 1 or b.pool_length < 1:
                raise ConfigError(f"model.temporal.blocks[{i}]: kernel_length, out_features, pool_length must be >= 1")
            if not 0 <= b.dropout_rate < 1:
                raise ConfigError(f"model.temporal.blocks[{i}].dropout_rate must be in [0, 1), got {b.dropout_rate}")

    def output_length(self, n_samples: int) -> int:
        """Time steps left after every conv + pool stage."""
        t = n_samples
        for b in self.blocks:
            if self.padding == "valid":
                t = t - b.kernel_length + 1
            t = t // b.pool_length
            if t < 1:
                raise ShapeError(f"{n_samples} samples collapse to zero length in the temporal encoder")
        return t

    def feature_dim(self, n_samples: int) -> int:
        return self.blocks[-1].out_features * self.output_length(n_samples)


@dataclass
class GcnBlockConfig:
    n_blocks: int = 2
    hidden_features: int = 32
    pool_ratio: float = 0.5
    activation: str = "prelu"  # or "relu" / "identity"
    batch_norm: bool = True

    def __post_init__(self) -> None:
        if self.n_blocks < 0:
            raise ConfigError(f"model.gcn.n_blocks must be >= 0, got {self.n_blocks}")
        if self.hidden_features < 1:
            raise ConfigError(f"model.gcn.hidden_features must be >= 1, got {self.hidden_features}")
        if not 0 < self.pool_ratio <= 1:
            raise ConfigError(f"model.gcn.pool_ratio must be in (0, 1], got {self.pool_ratio}")
        if self.activation not in ("prelu", "relu", "identity"):
            raise ConfigError(f"model.gcn.activation must be prelu, relu or identity, got {self.activation!r}")

    def nodes_after(self, n_nodes: int) -> int:
        for _ in range(self.n_blocks):
            n_nodes = pooled_size(n_nodes, self.pool_ratio)
        return n_nodes


@dataclass
class ModelConfig:
    temporal: TemporalEncoderConfig = field(default_factory=TemporalEncoderConfig)
    gcn: GcnBlockConfig = field(default_factory=GcnBlockConfig)
    projector_dims: list[int] = field(default_factory=lambda: [64, 32])
    projector_activation: str = "prelu"
    spatial_depth: int = 2  # feature maps per temporal map in the CNN (no-GNN) branch
    n_classes: int = 2

    def __post_init__(self) -> None:
        if isinstance(self.temporal, Mapping):
            self.temporal = TemporalEncoderConfig(**self.temporal)
        if isinstance(self.gcn, Mapping):
            self.gcn = GcnBlockConfig(**self.gcn)
        self.projector_dims = [int(d) for d in self.projector_dims]
        if not self.projector_dims or min(self.projector_dims) < 1:
            raise ConfigError("model.projector_dims must be a non-empty list of positive integers")
        if self.projector_activation not in ("prelu", "relu", "identity"):
            raise ConfigError(f"model.projector_activation invalid: {self.projector_activation!r}")
        if self.spatial_depth < 1:
            raise ConfigError("model.spatial_depth must be >= 1")
        if self.n_classes != 2:
            raise ConfigError("only binary (2-class) heads are supported")

    @property
    def latent_dim(self) -> int:
        return self.projector_dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)


def pooled_size(n_nodes: int, ratio: float) -> int:
    """ceil(ratio * n_nodes), computed exactly on the decimal value of ``ratio``."""
    if not 0 < ratio <= 1:
        raise ConfigError(f"pool ratio must be in (0, 1], got {ratio}")
    return max(1, math.ceil(Fraction(str(ratio)) * n_nodes))


def _activation(name: str, channels: int = 1) -> nn.Module:
    if name == "prelu":
        return nn.PReLU(channels)
    if name == "relu":
        return nn.ReLU()
    return nn.Identity()


# -- temporal encoder ---------------------------------------------------


class TemporalEncoder(nn.Module):
    """Per-sensor 1-D convolutions along time; sensors never mix here.

    Input (B, S, T) -> output (B, S, F) with F = last out_features x pooled length.
    """

    def __init__(self, cfg: TemporalEncoderConfig, n_samples: int):
        super().__init__()
        self.cfg = cfg
        self.n_samples = n_samples
        self.out_length = cfg.output_length(n_samples)
        self.out_features = cfg.feature_dim(n_samples)
        layers: list[nn.Module] = []
        in_ch = 1
        for b in cfg.blocks:
            pad = "same" if cfg.padding == "same" else 0
            layers.append(nn.Conv1d(in_ch, b.out_features, b.kernel_length, padding=pad))
            if cfg.batch_norm:
                layers.append(nn.BatchNorm1d(b.out_features))
            layers.append(_activation(cfg.activation, b.out_features))
            layers.append(nn.AvgPool1d(b.pool_length))
            layers.append(nn.Dropout(b.dropout_rate))
            in_ch = b.out_features
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.n_samples:
            raise ShapeError(f"temporal encoder expects (batch, sensors, {self.n_samples}), got {tuple(x.shape)}")
        B, S, T = x.shape
        h = self.net(x.reshape(B * S, 1, T))
        return h.reshape(B, S, -1)


def temporal_forward(x: torch.Tensor, encoder: TemporalEncoder, mode: str = "eval") -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = encoder.training
    encoder.train(mode == "train")
    try:
        return encoder(x)
    finally:
        encoder.train(was_training)


# -- graph convolution ---------------------------------------------------


def gcn_layer_forward(x: torch.Tensor, a_hat: torch.Tensor, theta: torch.Tensor, activation=None) -> torch.Tensor:
    """sigma(A_hat X Theta) for x (B, S, F), a_hat (S, S) or (B, S, S), theta (F, F')."""
    if x.dim() != 3:
        raise ShapeError(f"node features must be (batch, nodes, features), got {tuple(x.shape)}")
    S, Fin = x.shape[1], x.shape[2]
    if a_hat.shape[-1] != S or a_hat.shape[-2] != S:
        raise ShapeError(f"adjacency {tuple(a_hat.shape)} does not match {S} nodes")
    if theta.shape[0] != Fin:
        raise ShapeError(f"weights {tuple(theta.shape)} do not match {Fin} input features")
    out = torch.matmul(a_hat, torch.matmul(x, theta))
    return activation(out) if activation is not None else out


def gcn_layer_nodewise(x: torch.Tensor, a_hat: torch.Tensor, theta: torch.Tensor, activation=None) -> torch.Tensor:
    """Same layer written as per-node neighbourhood aggregation, one node at a time.

    x_i' = sigma(Theta^T sum_{j in N(i) u {i}} c_ij x_j) with c_ij = A_hat[i, j].
    Slow; kept as an independent cross-check of the matrix form.
    """
    B, S, _ = x.shape
    rows = []
    for b in range(B):
        adj = a_hat[b] if a_hat.dim() == 3 else a_hat
        nodes = []
        for i in range(S):
            agg = torch.zeros_like(x[b, 0])
            for j in range(S):
                if j == i or adj[i, j] != 0:
                    agg = agg + adj[i, j] * x[b, j]
            nodes.append(theta.T @ agg)
        rows.append(torch.stack(nodes))
    out = torch.stack(rows)
    return activation(out) if activation is not None else out


class GCNLayer(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x: torch.Tensor, a_hat: torch.Tensor) -> torch.Tensor:
        out = gcn_layer_forward(x, a_hat, self.weight)
        return out + self.bias if self.bias is not None else out


def top_k_indices(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k highest scores per row, ties to the lower index, sorted ascending."""
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices[..., :k]
    return torch.sort(order, dim=-1).values


class SAGPool(nn.Module):
    """Self-attention graph pooling.

    A one-output GCN layer scores every node, the top ceil(ratio * S) nodes are
    kept, their features are gated by tanh(score) and the adjacency is cut down
    to the kept rows/columns.
    """

    def __init__(self, in_features: int, ratio: float):
        super().__init__()
        pooled_size(1, ratio)
        self.ratio = ratio
        self.score = GCNLayer(in_features, 1)

    def forward(self, x: torch.Tensor, a_hat: torch.Tensor):
        scores = self.score(x, a_hat).squeeze(-1)  # (B, S)
        return sagpool_select(x, a_hat, scores, self.ratio)


def sagpool_select(x: torch.Tensor, a_hat: torch.Tensor, scores: torch.Tensor, ratio: float):
    """Selection + gating half of SAGPool, given precomputed scores (B, S)."""
    B, S, Fdim = x.shape
    k = pooled_size(S, ratio)
    idx = top_k_indices(scores.detach(), k)  # (B, k)
    gate = torch.tanh(torch.gather(scores, 1, idx))
    x_new = torch.gather(x, 1, idx.unsqueeze(-1).expand(B, k, Fdim)) * gate.unsqueeze(-1)
    a_full = a_hat if a_hat.dim() == 3 else a_hat.unsqueeze(0).expand(B, S, S)
    rows = torch.gather(a_full, 1, idx.unsqueeze(-1).expand(B, k, S))
    a_new = torch.gather(rows, 2, idx.unsqueeze(1).expand(B, k, k))
    return x_new, a_new, idx


def global_mean_pool(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] < 1:
        raise ShapeError("global mean pooling needs at least one node")
    return x.mean(dim=1)


class GCNBlock(nn.Module):
    """GCN layer -> batch norm -> activation -> SAGPool."""

    def __init__(self, in_features: int, cfg: GcnBlockConfig):
        super().__init__()
        self.gcn = GCNLayer(in_features, cfg.hidden_features)
        self.norm = nn.BatchNorm1d(cfg.hidden_features) if cfg.batch_norm else None
        self.act = _activation(cfg.activation)
        self.pool = SAGPool(cfg.hidden_features, cfg.pool_ratio)

    def forward(self, x: torch.Tensor, a_hat: torch.Tensor):
        h = self.gcn(x, a_hat)
        if self.norm is not None:
            B, S, Fdim = h.shape
            h = self.norm(h.reshape(B * S, Fdim)).reshape(B, S, Fdim)
        h = self.act(h)
        return self.pool(h, a_hat)


# -- branches -------------------------------------------------------------


class GraphBranch(nn.Module):
    """Temporal encoder followed by GCN/SAGPool blocks and global mean pooling."""

    def __init__(self, n_sensors: int, n_samples: int, a_hat: np.ndarray, cfg: ModelConfig):
        super().__init__()
        if a_hat.shape != (n_sensors, n_sensors):
            raise ShapeError(f"adjacency {a_hat.shape} does not match {n_sensors} sensors")
        self.n_sensors = n_sensors
        self.temporal = TemporalEncoder(cfg.temporal, n_samples)
        self.register_buffer("a_hat", torch.as_tensor(np.asarray(a_hat), dtype=torch.float32))
        blocks = []
        in_f = self.temporal.out_features
        for _ in range(cfg.gcn.n_blocks):
            blocks.append(GCNBlock(in_f, cfg.gcn))
            in_f = cfg.gcn.hidden_features
        self.blocks = nn.ModuleList(blocks)
        self.out_features = in_f

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.temporal(x)
        a = self.a_hat.to(h.dtype)
        for block in self.blocks:
            h, a, _ = block(h, a)
        return global_mean_pool(h)


class SpatialConvBranch(nn.Module):
    """Temporal encoder followed by a depthwise convolution across all sensors.

    Stands in for the graph blocks when the GNN is ablated; the spatial kernel
    spans every sensor and ignores the layout.
    """

    def __init__(self, n_sensors: int, n_samples: int, cfg: ModelConfig):
        super().__init__()
        self.n_sensors = n_sensors
        self.temporal = TemporalEncoder(cfg.temporal, n_samples)
        maps = cfg.temporal.blocks[-1].out_features
        self.maps, self.steps = maps, self.temporal.out_length
        depth = maps * cfg.spatial_depth
        self.spatial = nn.Conv2d(maps, depth, (n_sensors, 1), groups=maps)
        self.norm = nn.BatchNorm2d(depth) if cfg.gcn.batch_norm else None
        self.act = _activation(cfg.gcn.activation, depth)
        self.dropout = nn.Dropout(cfg.temporal.blocks[-1].dropout_rate)
        self.fc = nn.Linear(depth * self.steps, cfg.gcn.hidden_features)
        self.out_features = cfg.gcn.hidden_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, S, _ = x.shape
        h = self.temporal(x).reshape(B, S, self.maps, self.steps).permute(0, 2, 1, 3)  # (B, maps, S, T')
        h = self.spatial(h)
        if self.norm is not None:
            h = self.norm(h)
        h = self.dropout(self.act(h))
        return self.fc(h.flatten(1))


class Projector(nn.Module):
    def __init__(self, in_features: int, dims: Sequence[int], activation: str = "prelu"):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_features
        for i, d in enumerate(dims):
            layers.append(nn.Linear(prev, d))
            if i < len(dims) - 1:
                layers.append(_activation(activation, d))
            prev = d
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class MultiBranchModel(nn.Module):
    """Per-dataset encoder branches with a shared projector and classifier.

    ``branch_table`` maps dataset ids to ``{"n_sensors", "n_samples", "a_hat"}``
    (``a_hat`` omitted for spatial-convolution branches).
    """

    def __init__(self, branch_table: Mapping[str, dict], cfg: ModelConfig, use_gnn: bool = True):
        super().__init__()
        if not branch_table:
            raise ConfigError("model needs at least one branch")
        self.cfg = cfg
        self.use_gnn = use_gnn
        self.dataset_ids = list(branch_table)
        self._slot = {d: f"b{i}" for i, d in enumerate(self.dataset_ids)}
        self.branches = nn.ModuleDict()
        for d, spec in branch_table.items():
            if use_gnn:
                br = GraphBranch(spec["n_sensors"], spec["n_samples"], np.asarray(spec["a_hat"]), cfg)
            else:
                br = SpatialConvBranch(spec["n_sensors"], spec["n_samples"], cfg)
            self.branches[self._slot[d]] = br
        widths = {br.out_features for br in self.branches.values()}
        assert len(widths) == 1
        self.projector = Projector(widths.pop(), cfg.projector_dims, cfg.projector_activation)
        self.classifier = nn.Linear(cfg.latent_dim, cfg.n_classes)

    def branch(self, dataset_id: str) -> nn.Module:
        try:
            return self.branches[self._slot[dataset_id]]
        except KeyError:
            raise RoutingError(f"no branch registered for dataset {dataset_id!r}; have {self.dataset_ids}") from None

    def encode(self, dataset_id: str, x: torch.Tensor) -> torch.Tensor:
        br = self.branch(dataset_id)
        if x.dim() != 3 or x.shape[1] != br.n_sensors:
            raise ShapeError(f"dataset {dataset_id!r} expects {br.n_sensors} sensors, got input {tuple(x.shape)}")
        return br(x)

    def project(self, z: torch.Tensor) -> torch.Tensor:
        return self.projector(z)

    def classify(self, z_proj: torch.Tensor) -> torch.Tensor:
        if z_proj.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"classifier expects {self.cfg.latent_dim} features, got {z_proj.shape[-1]}")
        return self.classifier(z_proj)

    def branch_forward(self, dataset_id: str, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(projected latents, logits) for one dataset's batch."""
        z = self.project(self.encode(dataset_id, x))
        return z, self.classify(z)

    def forward(self, dataset_id: str, x: torch.Tensor):
        return self.branch_forward(dataset_id, x)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_VERSION = "1"


def save_checkpoint(model: MultiBranchModel, path: str | Path, config_hash: str, extra: dict | None = None) -> Path:
    """Zip container: manifest.json + tensors.bin (little-endian float32)."""
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "offset_bytes": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "use_gnn": model.use_gnn,
        "model_config": model.cfg.to_dict(),
        "branches": {
            d: {"slot": model._slot[d], "n_sensors": model.branch(d).n_sensors}
            for d in model.dataset_ids
        },
        "tensors": entries,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr("tensors.bin", b"".join(blobs))
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            payload = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a valid checkpoint ({exc})") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {manifest.get('format_version')!r} unsupported")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset_bytes"]).reshape(e["shape"])
        dtype = getattr(torch, e["dtype"])
        tensors[e["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    return manifest, tensors


def load_checkpoint_into(model: MultiBranchModel, path: str | Path, config_hash: str | None) -> dict:
    manifest, tensors = read_checkpoint(path)
    if config_hash is not None and manifest["config_hash"] != config_hash:
        raise HashMismatchError(
            f"checkpoint config hash {manifest['config_hash']} does not match config hash {config_hash}"
        )
    model.load_state_dict(tensors)
    return manifest


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def state_bytes(model: nn.Module) -> bytes:
    buf = io.BytesIO()
    for name, t in model.state_dict().items():
        buf.write(name.encode())
        buf.write(t.detach().cpu().numpy().tobytes())
    return buf.getvalue()
