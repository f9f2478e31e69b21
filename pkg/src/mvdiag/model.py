"""Per-modality GraphSAGE encoders, diagnosis heads and the training loop.

Everything runs in float64 on CPU. A batch packs several samples into one
block-diagonal graph; readouts and the ranking softmax work per segment.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import seeds
from .dataset import FailureSample
from .losses import (
    cross_modal_loss,
    fti_loss,
    rcl_loss,
    safe_normalize,
    segment_softmax,
    static_total_loss,
    task_oriented_loss,
    total_loss,
)

__all__ = [
    "AGGREGATORS",
    "DimensionMismatch",
    "EmptyDataset",
    "NonFiniteLoss",
    "ModelConfig",
    "TrainConfig",
    "GraphBatch",
    "collate",
    "SageLayer",
    "Encoder",
    "DiagnosisModel",
    "ModelOutput",
    "loss_components",
    "train",
    "Checkpoint",
    "grad_check",
]

log = logging.getLogger(__name__)

AGGREGATORS = ("mean", "pool", "lstm")
DTYPE = torch.float64


class DimensionMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, batch_id: int, epoch: int):
        super().__init__(f"non-finite loss in epoch {epoch}, batch {batch_id}")
        self.batch_id = batch_id
        self.epoch = epoch


@dataclass
class ModelConfig:
    input_dim: int = 128
    hidden_dim: int = 64
    output_dim: int = 32
    n_layers: int = 2
    aggregator: str = "mean"
    head_hidden: int = 64
    n_classes: int = 6
    tau: float = 0.3
    omega: float = 0.1
    dynamic_weights: bool = True
    task_oriented: bool = True
    cross_modal: bool = True

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if min(self.input_dim, self.hidden_dim, self.output_dim, self.head_hidden) < 1:
            raise ValueError("layer widths must be positive")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")

    def widths(self) -> list[int]:
        return [self.input_dim] + [self.hidden_dim] * (self.n_layers - 1) + [self.output_dim]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 10
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for the contrastive terms")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")


# ---------------------------------------------------------------- batching


@dataclass
class GraphBatch:
    x: torch.Tensor  # (N, 3, d)
    src: torch.Tensor  # message source per directed edge
    dst: torch.Tensor
    segment: torch.Tensor  # graph id per node
    offsets: list[int]
    neighbors: list[list[int]]  # global ids, ascending
    roots: torch.Tensor | None = None  # global node index per graph
    types: torch.Tensor | None = None
    root_names: list[str] | None = None

    @property
    def n_graphs(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


def collate(samples: Sequence[FailureSample]) -> GraphBatch:
    if not samples:
        raise EmptyDataset("cannot batch zero samples")
    dims = {s.features.shape[2] for s in samples}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed feature widths {sorted(dims)}")
    offsets = [0]
    src, dst, seg, nbrs = [], [], [], []
    for g, s in enumerate(samples):
        base = offsets[-1]
        for a, b in s.graph.edges:
            src.append(base + a)
            dst.append(base + b)
        nbrs.extend([[base + u for u in nb] for nb in s.graph.neighbors()])
        seg.extend([g] * len(s.nodes))
        offsets.append(base + len(s.nodes))
    labeled = all(s.root_cause is not None for s in samples)
    typed = all(s.failure_type is not None for s in samples)
    return GraphBatch(
        x=torch.from_numpy(np.concatenate([s.features for s in samples])).to(DTYPE),
        src=torch.tensor(src, dtype=torch.long),
        dst=torch.tensor(dst, dtype=torch.long),
        segment=torch.tensor(seg, dtype=torch.long),
        offsets=offsets,
        neighbors=nbrs,
        roots=torch.tensor([offsets[i] + s.root_cause for i, s in enumerate(samples)]) if labeled else None,
        types=torch.tensor([s.failure_type for s in samples]) if typed else None,
        root_names=[s.root_instance for s in samples] if labeled else None,
    )


# ---------------------------------------------------------------- encoders


class SageLayer(nn.Module):
    """h_v <- normalize(relu(W [h_v ; agg(h_u, u in N(v))])), bias-free."""

    def __init__(self, in_dim: int, out_dim: int, aggregator: str = "mean"):
        super().__init__()
        self.aggregator = aggregator
        self.in_dim = in_dim
        self.weight = nn.Linear(2 * in_dim, out_dim, bias=False, dtype=DTYPE)
        if aggregator == "pool":
            self.pool = nn.Linear(in_dim, in_dim, dtype=DTYPE)
        elif aggregator == "lstm":
            self.lstm = nn.LSTM(in_dim, in_dim, batch_first=True, dtype=DTYPE)

    def aggregate(self, h: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        n = h.shape[0]
        if self.aggregator == "mean":
            deg = torch.zeros(n, dtype=h.dtype).index_add(0, batch.dst, torch.ones(len(batch.dst), dtype=h.dtype))
            acc = torch.zeros_like(h).index_add(0, batch.dst, h[batch.src])
            return acc / deg.clamp(min=1).unsqueeze(1)
        if self.aggregator == "pool":
            z = torch.relu(self.pool(h))
            idx = batch.dst.unsqueeze(1).expand(-1, h.shape[1])
            return torch.zeros_like(h).scatter_reduce(0, idx, z[batch.src], reduce="amax", include_self=False)
        # lstm over neighbors in ascending index order; isolated nodes get zeros
        out = torch.zeros_like(h)
        busy = [v for v in range(n) if batch.neighbors[v]]
        if not busy:
            return out
        lengths = [len(batch.neighbors[v]) for v in busy]
        width = max(lengths)
        pad = torch.tensor([batch.neighbors[v] + [0] * (width - len(batch.neighbors[v])) for v in busy])
        seqs = nn.utils.rnn.pack_padded_sequence(h[pad], lengths, batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.lstm(seqs)
        return out.index_copy(0, torch.tensor(busy), h_n[-1])

    def forward(self, h: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        if h.shape[1] != self.in_dim:
            raise DimensionMismatch(f"layer expects width {self.in_dim}, got {h.shape[1]}")
        z = torch.relu(self.weight(torch.cat([h, self.aggregate(h, batch)], dim=1)))
        return safe_normalize(z)


class Encoder(nn.Module):
    def __init__(self, widths: Sequence[int], aggregator: str = "mean"):
        super().__init__()
        self.layers = nn.ModuleList(
            SageLayer(a, b, aggregator) for a, b in zip(widths[:-1], widths[1:])
        )

    def forward(self, x: torch.Tensor, batch: GraphBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """Node embeddings (N, d_out) and per-graph max readout (G, d_out)."""
        h = x
        for layer in self.layers:
            h = layer(h, batch)
        idx = batch.segment.unsqueeze(1).expand(-1, h.shape[1])
        pooled = torch.zeros(batch.n_graphs, h.shape[1], dtype=h.dtype).scatter_reduce(
            0, idx, h, reduce="amax", include_self=False
        )
        return h, pooled


@dataclass
class ModelOutput:
    node: list[torch.Tensor]  # per modality (N, d_out)
    graph: list[torch.Tensor]  # per modality (G, d_out)
    fti_logits: torch.Tensor  # (G, C)
    rcl_scores: torch.Tensor  # (N,)

    def class_probs(self) -> torch.Tensor:
        return torch.softmax(self.fti_logits, dim=1)

    def node_probs(self, batch: GraphBatch) -> torch.Tensor:
        return segment_softmax(self.rcl_scores, batch.segment, batch.n_graphs)


def _mlp(inp: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(inp, hidden, dtype=DTYPE), nn.ReLU(), nn.Linear(hidden, out, dtype=DTYPE))


class DiagnosisModel(nn.Module):
    MODALITIES = ("metric", "trace", "log")

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.widths()
        self.encoders = nn.ModuleDict({m: Encoder(widths, config.aggregator) for m in self.MODALITIES})
        joint = 3 * config.output_dim
        self.fti_head = _mlp(joint, config.head_hidden, config.n_classes)
        self.rcl_head = _mlp(joint, config.head_hidden, 1)
        self.rho = nn.Parameter(torch.zeros(4, dtype=DTYPE))  # theta = exp(rho) = 1 at start

    def shared_parameters(self) -> list[nn.Parameter]:
        return list(self.encoders.parameters())

    def encode(self, batch: GraphBatch, x: torch.Tensor | None = None) -> tuple[list, list]:
        x = batch.x if x is None else x
        if x.shape[2] != self.config.input_dim:
            raise DimensionMismatch(f"model expects {self.config.input_dim}-d features, got {x.shape[2]}")
        nodes, graphs = [], []
        for m, name in enumerate(self.MODALITIES):
            e, f = self.encoders[name](x[:, m, :], batch)
            nodes.append(e)
            graphs.append(f)
        return nodes, graphs

    def heads(self, nodes: list[torch.Tensor], graphs: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        logits = self.fti_head(torch.cat(graphs, dim=1))
        scores = self.rcl_head(torch.cat(nodes, dim=1)).squeeze(1)
        return logits, scores

    def forward(self, batch: GraphBatch, x: torch.Tensor | None = None) -> ModelOutput:
        nodes, graphs = self.encode(batch, x)
        logits, scores = self.heads(nodes, graphs)
        return ModelOutput(nodes, graphs, logits, scores)


def loss_components(model: DiagnosisModel, out: ModelOutput, batch: GraphBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """(components[rcl, fti, to, cm], total) for a labeled batch."""
    cfg = model.config
    zero = torch.zeros((), dtype=DTYPE)
    l_rcl = rcl_loss(out.rcl_scores, batch.segment, batch.roots, batch.n_graphs)
    l_fti = fti_loss(out.fti_logits, batch.types)
    fm, ft, fl = out.graph
    l_to = zero
    if cfg.task_oriented and batch.n_graphs >= 2:
        l_to = task_oriented_loss(fm, ft, fl, batch.root_names, batch.types.tolist(), cfg.tau)
    l_cm = cross_modal_loss(fm, ft, fl, cfg.tau) if cfg.cross_modal else zero
    comps = torch.stack([l_rcl, l_fti, l_to, l_cm])
    if cfg.dynamic_weights:
        return comps, total_loss(comps, model.rho, cfg.omega)
    return comps, static_total_loss(comps, cfg.omega)


# ---------------------------------------------------------------- training


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    # a trailing singleton would starve the contrastive terms; fold it into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train(
    samples: Sequence[FailureSample],
    model_config: ModelConfig,
    train_config: TrainConfig | None = None,
    seed: int = 0,
    type_labels: Sequence[str] | None = None,
    fingerprints: dict | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> "Checkpoint":
    """Fit a model and return the checkpoint with the lowest epoch loss."""
    tc = train_config or TrainConfig()
    if not samples:
        raise EmptyDataset("training set is empty")
    if any(s.root_cause is None or s.failure_type is None for s in samples):
        raise ValueError("training samples must be labeled")
    with torch.random.fork_rng():
        torch.manual_seed(seeds.substream_seed(seed, "train/init"))
        model = DiagnosisModel(model_config)
    batch_rng = np.random.default_rng(seeds.substream_seed(seed, "train/batches"))
    decay = [p for n, p in model.named_parameters() if n != "rho"]
    opt = torch.optim.Adam(
        [{"params": decay, "weight_decay": tc.weight_decay}, {"params": [model.rho], "weight_decay": 0.0}],
        lr=tc.lr,
    )
    history: list[float] = []
    best = math.inf
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    wait = 0
    for epoch in range(tc.max_epochs):
        total = 0.0
        chunks = _batches(len(samples), tc.batch_size, batch_rng)
        for b, idx in enumerate(chunks):
            batch = collate([samples[i] for i in idx])
            _, loss = loss_components(model, model(batch), batch)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(b, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        epoch_loss = total / len(chunks)
        history.append(epoch_loss)
        if progress is not None:
            progress(epoch, epoch_loss)
        if best - epoch_loss > tc.min_delta:
            best, best_epoch, wait = epoch_loss, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            if epoch_loss < best:
                best, best_epoch = epoch_loss, epoch
                best_state = copy.deepcopy(model.state_dict())
            wait += 1
            if wait >= tc.patience:
                break
    log.info("training stopped after %d epochs, best %.6f at %d", len(history), best, best_epoch)
    return Checkpoint(
        model_config=model_config,
        train_config=tc,
        state={k: v.detach().numpy().copy() for k, v in best_state.items()},
        seed=seed,
        epoch=best_epoch,
        loss_history=history,
        type_labels=list(type_labels) if type_labels is not None else [str(i) for i in range(model_config.n_classes)],
        fingerprints=dict(fingerprints or {}),
    )


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_FORMAT = "mvdiag-checkpoint/1"


def _config_from(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    state: dict[str, np.ndarray]
    seed: int
    epoch: int
    loss_history: list[float]
    type_labels: list[str]
    fingerprints: dict = field(default_factory=dict)  # extractors / embedding

    def config_hash(self) -> str:
        doc = {"model": asdict(self.model_config), "train": asdict(self.train_config),
               "types": self.type_labels, "fingerprints": self.fingerprints}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def theta(self) -> np.ndarray:
        return np.exp(self.state["rho"])

    def build_model(self) -> DiagnosisModel:
        model = DiagnosisModel(self.model_config)
        model.load_state_dict({k: torch.from_numpy(np.asarray(v, dtype=np.float64)) for k, v in self.state.items()})
        model.eval()
        return model

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "model_config": asdict(self.model_config),
            "train_config": asdict(self.train_config),
            "config_hash": self.config_hash(),
            "seed": self.seed,
            "epoch": self.epoch,
            "loss_history": self.loss_history,
            "type_labels": self.type_labels,
            "fingerprints": self.fingerprints,
            "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.state.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "Checkpoint":
        fmt = d.get("format", "")
        if fmt.split("/")[0] != CHECKPOINT_FORMAT.split("/")[0] or fmt.split("/")[-1] != "1":
            raise ValueError(f"unsupported checkpoint format {fmt!r}")
        ck = cls(
            model_config=_config_from(ModelConfig, d["model_config"]),
            train_config=_config_from(TrainConfig, d["train_config"]),
            state={k: np.asarray(w["data"], dtype=np.float64).reshape(w["shape"]) for k, w in d["weights"].items()},
            seed=int(d["seed"]),
            epoch=int(d["epoch"]),
            loss_history=[float(x) for x in d["loss_history"]],
            type_labels=list(d["type_labels"]),
            fingerprints=dict(d.get("fingerprints", {})),
        )
        if d.get("config_hash") not in (None, ck.config_hash()):
            raise ValueError("checkpoint config hash does not match its contents")
        return ck

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- verification


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    probes: Sequence[tuple[int, int]] | None = None,
    h: float = 1e-5,
    floor: float = 1e-5,
) -> float:
    """Max relative error between autograd and central differences.

    ``probes`` are (parameter index, flat coordinate) pairs; all coordinates
    when omitted. The step is ``h * max(1, |x|)``. ``floor`` bounds the
    denominator so coordinates with vanishing gradients compare absolutely.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    if probes is None:
        probes = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    worst = 0.0
    with torch.no_grad():
        for pi, j in probes:
            flat = params[pi].view(-1)
            x0 = flat[j].item()
            step = h * max(1.0, abs(x0))
            flat[j] = x0 + step
            up = loss_fn().item()
            flat[j] = x0 - step
            down = loss_fn().item()
            flat[j] = x0
            numeric = (up - down) / (2 * step)
            g = grads[pi]
            analytic = 0.0 if g is None else g.reshape(-1)[j].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    return worst
