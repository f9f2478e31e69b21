"""Ranking and classification metrics plus inter-task affinity."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import torch

from .losses import fti_loss, rcl_loss

__all__ = [
    "RclResult",
    "FtiResult",
    "ZeroLoss",
    "hr_at_k",
    "avg_at_k",
    "mrr_at_k",
    "prf1",
    "inter_task_affinity",
    "model_affinity",
    "summary",
    "dumps_summary",
]


class ZeroLoss(ZeroDivisionError):
    """The target task's loss is (numerically) zero before the update."""


@dataclass(frozen=True)
class RclResult:
    ranking: tuple
    truth: Hashable

    def rank(self) -> int | None:
        """1-based position of the truth, None when absent."""
        for i, r in enumerate(self.ranking):
            if r == self.truth:
                return i + 1
        return None


@dataclass(frozen=True)
class FtiResult:
    predicted: int
    truth: int


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")


def hr_at_k(results: Sequence[RclResult], k: int) -> float:
    _check_k(k)
    if not results:
        return 0.0
    hits = 0
    for r in results:
        pos = r.rank()
        if pos is not None and pos <= k:
            hits += 1
    return hits / len(results)


def avg_at_k(results: Sequence[RclResult], k: int) -> float:
    _check_k(k)
    return sum(hr_at_k(results, i) for i in range(1, k + 1)) / k


def mrr_at_k(results: Sequence[RclResult], k: int) -> float:
    _check_k(k)
    if not results:
        return 0.0
    acc = 0.0
    for r in results:
        pos = r.rank()
        if pos is not None and pos <= k:
            acc += 1.0 / pos
    return acc / len(results)


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


def prf1(results: Sequence[FtiResult], averaging: str = "macro") -> tuple[float, float, float]:
    """Precision, recall, F1.

    Macro: unweighted mean of per-class values over every class seen in truth
    or prediction, with F1 taken per class (0 where undefined). Micro: pooled
    counts, which equals accuracy for single-label data.
    """
    if not results:
        raise ValueError("prf1 needs at least one result")
    classes = sorted({r.truth for r in results} | {r.predicted for r in results})
    tp = {c: 0 for c in classes}
    fp = dict(tp)
    fn = dict(tp)
    for r in results:
        if r.predicted == r.truth:
            tp[r.truth] += 1
        else:
            fp[r.predicted] += 1
            fn[r.truth] += 1
    if averaging == "micro":
        t, p, n = sum(tp.values()), sum(fp.values()), sum(fn.values())
        precision, recall = _ratio(t, t + p), _ratio(t, t + n)
        return precision, recall, _ratio(2 * t, 2 * t + p + n)
    if averaging != "macro":
        raise ValueError("averaging must be 'macro' or 'micro'")
    ps = [_ratio(tp[c], tp[c] + fp[c]) for c in classes]
    rs = [_ratio(tp[c], tp[c] + fn[c]) for c in classes]
    fs = [_ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn[c]) for c in classes]
    m = len(classes)
    return sum(ps) / m, sum(rs) / m, sum(fs) / m


def inter_task_affinity(
    shared: Sequence[torch.nn.Parameter],
    loss_t1: Callable[[], torch.Tensor],
    loss_t2: Callable[[], torch.Tensor],
    lr: float = 1e-3,
) -> float:
    """Z = 1 - L_t2(after one plain gradient step on t1) / L_t2(before).

    The step touches only ``shared``; their values are restored afterwards so
    the caller's model is left as it was.
    """
    shared = list(shared)
    with torch.no_grad():
        before = loss_t2().item()
    if abs(before) < 1e-12:
        raise ZeroLoss("target task loss is zero")
    grads = torch.autograd.grad(loss_t1(), shared, allow_unused=True)
    saved = [p.detach().clone() for p in shared]
    try:
        with torch.no_grad():
            for p, g in zip(shared, grads):
                if g is not None:
                    p.sub_(lr * g)
            after = loss_t2().item()
    finally:
        with torch.no_grad():
            for p, s in zip(shared, saved):
                p.copy_(s)
    return 1.0 - after / before


def model_affinity(model, batch, source: str, target: str, lr: float = 1e-3) -> float:
    """Affinity between the RCL and FTI tasks on a labeled batch; works on a copy of ``model``."""
    clone = copy.deepcopy(model)

    def task(name: str) -> Callable[[], torch.Tensor]:
        def fn() -> torch.Tensor:
            out = clone(batch)
            if name == "rcl":
                return rcl_loss(out.rcl_scores, batch.segment, batch.roots, batch.n_graphs)
            if name == "fti":
                return fti_loss(out.fti_logits, batch.types)
            raise ValueError(f"unknown task {name!r}")
        return fn

    return inter_task_affinity(clone.shared_parameters(), task(source), task(target), lr)


def summary(rcl: Sequence[RclResult], fti: Sequence[FtiResult] | None = None) -> dict:
    out = {
        "HR@1": hr_at_k(rcl, 1),
        "HR@3": hr_at_k(rcl, 3),
        "Avg@3": avg_at_k(rcl, 3),
        "MRR@3": mrr_at_k(rcl, 3),
        "n_rcl": len(rcl),
    }
    if fti:
        p, r, f = prf1(fti, "macro")
        mp, mr, mf = prf1(fti, "micro")
        out.update({"precision": p, "recall": r, "F1": f,
                    "micro_precision": mp, "micro_recall": mr, "micro_F1": mf, "n_fti": len(fti)})
    return out


def dumps_summary(s: dict) -> str:
    return json.dumps(s, indent=2, sort_keys=False)
