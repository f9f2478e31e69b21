"""Contrastive, diagnosis and dynamically weighted losses.

All functions take float64 tensors and stay differentiable end to end.
Cosine similarity with a zero vector is defined as 0.
"""

from __future__ import annotations

from typing import Sequence

import torch

__all__ = [
    "BatchTooSmall",
    "LabelOutOfRange",
    "RootIndexInvalid",
    "safe_normalize",
    "cosine_matrix",
    "phi",
    "task_oriented_loss",
    "task_oriented_loss_single",
    "cross_modal_loss",
    "cross_modal_pair_loss",
    "fti_loss",
    "rcl_loss",
    "segment_softmax",
    "total_loss",
    "static_total_loss",
]


class BatchTooSmall(ValueError):
    """Contrastive terms need at least two samples."""


class LabelOutOfRange(ValueError):
    pass


class RootIndexInvalid(ValueError):
    pass


def safe_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2-normalize along ``dim``; all-zero vectors stay zero (and keep a finite gradient)."""
    norm = x.norm(dim=dim, keepdim=True)
    return x / torch.where(norm > 0, norm, torch.ones_like(norm))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return safe_normalize(a) @ safe_normalize(b).T


def phi(f: torch.Tensor, g: torch.Tensor, tau: float) -> torch.Tensor:
    """exp(cos(f, g) / tau) for a pair of vectors (or row-wise for matrices)."""
    sim = (safe_normalize(f) * safe_normalize(g)).sum(-1)
    return torch.exp(sim / tau)


def task_oriented_loss_single(features: torch.Tensor, labels: Sequence, tau: float) -> torch.Tensor:
    """Supervised contrastive term of one modality.

    Positives of i are the other samples sharing its label, negatives those
    with a different label. Samples without positives contribute 0. Summed
    over samples.
    """
    n = features.shape[0]
    if n < 2:
        raise BatchTooSmall(f"task-oriented loss needs n >= 2, got {n}")
    lab = list(labels)
    same = torch.tensor([[lab[i] == lab[j] for j in range(n)] for i in range(n)], dtype=torch.bool)
    eye = torch.eye(n, dtype=torch.bool)
    pos = same & ~eye
    neg = ~same
    s = cosine_matrix(features, features) / tau
    e = torch.exp(s)
    neg_sum = (e * neg).sum(1, keepdim=True)
    # -log(e / (e + neg)) written so that an empty negative set gives exactly 0
    log_ratio = -torch.log1p(neg_sum * torch.exp(-s))
    n_pos = pos.sum(1)
    per_anchor = -(log_ratio * pos).sum(1) / n_pos.clamp(min=1)
    return torch.where(n_pos > 0, per_anchor, torch.zeros_like(per_anchor)).sum()


def task_oriented_loss(
    f_metric: torch.Tensor, f_trace: torch.Tensor, f_log: torch.Tensor,
    roots: Sequence, types: Sequence, tau: float,
) -> torch.Tensor:
    """Metric and trace positives share the root cause; log positives share the failure type."""
    return (
        task_oriented_loss_single(f_metric, roots, tau)
        + task_oriented_loss_single(f_trace, roots, tau)
        + task_oriented_loss_single(f_log, types, tau)
    )


def _directed_cm(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    # l(a_i, b_i) for every i: own-view negatives (a != i) plus all cross-view terms
    n = a.shape[0]
    saa = torch.exp(cosine_matrix(a, a) / tau)
    sab = torch.exp(cosine_matrix(a, b) / tau)
    off = ~torch.eye(n, dtype=torch.bool)
    denom = (saa * off).sum(1) + sab.sum(1)
    return -(torch.log(torch.diagonal(sab)) - torch.log(denom))


def cross_modal_pair_loss(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    n = a.shape[0]
    if n < 1:
        raise BatchTooSmall("cross-modal loss needs at least one sample")
    return (_directed_cm(a, b, tau).sum() + _directed_cm(b, a, tau).sum()) / (2 * n)


def cross_modal_loss(f_metric: torch.Tensor, f_trace: torch.Tensor, f_log: torch.Tensor, tau: float) -> torch.Tensor:
    """Metrics are the core view: (metric ~ trace) + (metric ~ log)."""
    return cross_modal_pair_loss(f_metric, f_trace, tau) + cross_modal_pair_loss(f_metric, f_log, tau)


def fti_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {logits.shape[1]})")
    return -torch.log_softmax(logits, dim=1).gather(1, labels.view(-1, 1)).mean()


def segment_log_softmax(scores: torch.Tensor, segment: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Log-softmax of ``scores`` within each segment (graph)."""
    seg_max = torch.full((n_segments,), -torch.inf, dtype=scores.dtype).scatter_reduce(
        0, segment, scores.detach(), reduce="amax", include_self=True
    )
    shifted = scores - seg_max[segment]
    denom = torch.zeros(n_segments, dtype=scores.dtype).index_add(0, segment, torch.exp(shifted))
    return shifted - torch.log(denom)[segment]


def segment_softmax(scores: torch.Tensor, segment: torch.Tensor, n_segments: int) -> torch.Tensor:
    return torch.exp(segment_log_softmax(scores, segment, n_segments))


def rcl_loss(scores: torch.Tensor, segment: torch.Tensor, roots: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Mean negative log-probability of each graph's root node under a per-graph softmax.

    ``roots`` holds global node indices into ``scores``.
    """
    roots = torch.as_tensor(roots, dtype=torch.long)
    if roots.numel() != n_segments:
        raise RootIndexInvalid("one root per graph is required")
    if roots.min() < 0 or roots.max() >= scores.shape[0] or not torch.equal(
        segment[roots], torch.arange(n_segments)
    ):
        raise RootIndexInvalid("root index outside its graph")
    return -segment_log_softmax(scores, segment, n_segments)[roots].mean()


def total_loss(components: torch.Tensor, rho: torch.Tensor, omega: float) -> torch.Tensor:
    """Uncertainty-style weighting with theta = exp(rho).

    ``components`` = (rcl, fti, task-oriented, cross-modal); the last two are
    scaled by ``omega`` inside the sum.
    """
    scale = torch.tensor([1.0, 1.0, omega, omega], dtype=components.dtype)
    theta2 = torch.exp(2 * rho)
    return (components * scale / (2 * theta2) + torch.log1p(theta2)).sum()


def static_total_loss(components: torch.Tensor, omega: float) -> torch.Tensor:
    scale = torch.tensor([1.0, 1.0, omega, omega], dtype=components.dtype)
    return (components * scale).sum()
