"""Skip-gram with negative sampling over alert tokens.

Every (sample, node, modality) alert list is one sentence. Training pairs and
negative draws are materialized with numpy first; the SGD pass itself is the
hot kernel.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._accel import NUMBA_ENABLED, jit

__all__ = ["EmbeddingTable", "EmptyCorpus", "train_embedding", "encode_tokens", "SGNS_DEFAULTS"]

SGNS_DEFAULTS = {"window": 3, "negatives": 5, "epochs": 5, "lr": 0.05, "min_lr_fraction": 1e-4}


class EmptyCorpus(ValueError):
    """The corpus contains no tokens."""


@jit
def _sgns_kernel(w_in, w_out, centers, contexts, negatives, lrs):
    d = w_in.shape[1]
    k = negatives.shape[1]
    grad = np.empty(d)
    for i in range(centers.shape[0]):
        c = centers[i]
        ctx = contexts[i]
        lr = lrs[i]
        for x in range(d):
            grad[x] = 0.0
        for j in range(k + 1):
            if j == 0:
                t = ctx
                label = 1.0
            else:
                t = negatives[i, j - 1]
                if t == ctx:
                    continue
                label = 0.0
            f = 0.0
            for x in range(d):
                f += w_in[c, x] * w_out[t, x]
            g = (label - 1.0 / (1.0 + np.exp(-f))) * lr
            for x in range(d):
                grad[x] += g * w_out[t, x]
                w_out[t, x] += g * w_in[c, x]
        for x in range(d):
            w_in[c, x] += grad[x]


def _sgns_numpy(w_in, w_out, centers, contexts, negatives, lrs):
    for i in range(centers.shape[0]):
        c, ctx, lr = centers[i], contexts[i], lrs[i]
        grad = np.zeros(w_in.shape[1])
        targets = [(ctx, 1.0)] + [(t, 0.0) for t in negatives[i] if t != ctx]
        for t, label in targets:
            f = float(w_in[c] @ w_out[t])
            g = (label - 1.0 / (1.0 + np.exp(-f))) * lr
            grad += g * w_out[t]
            w_out[t] += g * w_in[c]
        w_in[c] += grad


def sgns_pass(w_in, w_out, centers, contexts, negatives, lrs, use_numba: bool | None = None):
    """One SGD sweep over the materialized pairs; updates ``w_in``/``w_out`` in place."""
    if use_numba is None:
        use_numba = NUMBA_ENABLED
    fn = _sgns_kernel if use_numba else _sgns_numpy
    fn(w_in, w_out, centers, contexts, negatives, lrs)


@dataclass
class EmbeddingTable:
    dim: int
    tokens: list[str]
    vectors: np.ndarray
    unk: np.ndarray
    hyperparams: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def vector(self, token: str) -> np.ndarray:
        i = self._index.get(token)
        return self.unk if i is None else self.vectors[i]

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "seed": self.seed,
            "hyperparams": self.hyperparams,
            "tokens": self.tokens,
            "vectors": self.vectors.tolist(),
            "unk": self.unk.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EmbeddingTable":
        dim = int(d["dim"])
        vectors = np.asarray(d["vectors"], dtype=np.float64).reshape(-1, dim)
        return cls(dim, list(d["tokens"]), vectors, np.asarray(d["unk"], dtype=np.float64),
                   dict(d.get("hyperparams", {})), int(d.get("seed", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        return cls.from_json(json.loads(Path(path).read_text()))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.tokens).encode())
        h.update(np.ascontiguousarray(self.vectors).tobytes())
        h.update(self.unk.tobytes())
        return h.hexdigest()[:16]


def train_embedding(
    corpus: Iterable[Sequence[str]],
    dim: int = 128,
    seed: int = 0,
    window: int = SGNS_DEFAULTS["window"],
    negatives: int = SGNS_DEFAULTS["negatives"],
    epochs: int = SGNS_DEFAULTS["epochs"],
    lr: float = SGNS_DEFAULTS["lr"],
    use_numba: bool | None = None,
) -> EmbeddingTable:
    """Train token vectors by skip-gram with negative sampling.

    ``corpus`` is an iterable of token sentences. The learning rate decays
    linearly from ``lr`` to ``lr * 1e-4`` over all pairs of all epochs.
    """
    sentences = [list(s) for s in corpus]
    counts: dict[str, int] = {}
    for s in sentences:
        for tok in s:
            counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise EmptyCorpus("no tokens to embed")
    vocab = sorted(counts)
    index = {t: i for i, t in enumerate(vocab)}
    rng = np.random.default_rng(seed)
    w_in = (rng.random((len(vocab), dim)) - 0.5) / dim
    w_out = np.zeros((len(vocab), dim))
    unk = (rng.random(dim) - 0.5) / dim

    centers, contexts = [], []
    for s in sentences:
        ids = [index[t] for t in s]
        for i, c in enumerate(ids):
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i:
                    centers.append(c)
                    contexts.append(ids[j])
    centers_a = np.asarray(centers, dtype=np.int64)
    contexts_a = np.asarray(contexts, dtype=np.int64)
    n_pairs = len(centers)
    if n_pairs:
        freq = np.array([counts[t] for t in vocab], dtype=np.float64) ** 0.75
        freq /= freq.sum()
        total = n_pairs * epochs
        for epoch in range(epochs):
            negs = rng.choice(len(vocab), size=(n_pairs, negatives), p=freq).astype(np.int64)
            step = epoch * n_pairs + np.arange(n_pairs)
            lrs = lr * np.maximum(SGNS_DEFAULTS["min_lr_fraction"], 1.0 - step / total)
            sgns_pass(w_in, w_out, centers_a, contexts_a, negs, lrs, use_numba)

    hyper = {"window": window, "negatives": negatives, "epochs": epochs, "lr": lr, "method": "skip-gram/neg"}
    return EmbeddingTable(dim, vocab, w_in, unk, hyper, seed)


def encode_tokens(tokens: Sequence[str], table: EmbeddingTable) -> np.ndarray:
    """Mean of the token vectors; the zero vector when there are no tokens."""
    if not tokens:
        return np.zeros(table.dim)
    acc = np.zeros(table.dim)
    for tok in tokens:
        acc += table.vector(tok)
    return acc / len(tokens)
