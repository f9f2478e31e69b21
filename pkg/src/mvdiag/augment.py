"""Node-dropping augmentation: inactivate floor(p * |V|) non-root instances."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import seeds
from .dataset import FailureSample, InstanceGraph

__all__ = ["AugmentConfig", "NothingToDrop", "augment", "augment_dataset", "drop_count"]


class NothingToDrop(UserWarning):
    """floor(p * |V|) is zero; the sample is returned unmodified."""


@dataclass(frozen=True)
class AugmentConfig:
    inactivation_probability: float = 0.2
    copies_per_sample: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.inactivation_probability < 1.0:
            raise ValueError("inactivation_probability must lie in [0, 1)")
        if self.copies_per_sample < 0:
            raise ValueError("copies_per_sample must be >= 0")


def drop_count(p: float, n_nodes: int) -> int:
    # guard against 0.2 * 10 -> 1.9999999 style rounding
    return int(math.floor(p * n_nodes + 1e-9))


def augment(sample: FailureSample, p: float, rng: np.random.Generator) -> FailureSample:
    n = len(sample.nodes)
    if n < 2 or sample.root_cause is None:
        raise ValueError("augmentation needs a labeled sample with at least 2 nodes")
    m = drop_count(p, n)
    if m == 0:
        warnings.warn(NothingToDrop(f"floor({p} * {n}) = 0"), stacklevel=2)
        return FailureSample(
            InstanceGraph(list(sample.nodes), list(sample.graph.edges)),
            sample.features.copy(), sample.root_cause, sample.failure_type, False,
            None, dict(sample.meta),
        )
    candidates = np.array([i for i in range(n) if i != sample.root_cause])
    dropped = set(rng.choice(candidates, size=m, replace=False).tolist())
    keep = [i for i in range(n) if i not in dropped]
    remap = {old: new for new, old in enumerate(keep)}
    edges = [(remap[a], remap[b]) for a, b in sample.graph.edges if a in remap and b in remap]
    return FailureSample(
        InstanceGraph([sample.nodes[i] for i in keep], edges),
        sample.features[keep].copy(),
        remap[sample.root_cause],
        sample.failure_type,
        True,
        remap,
        dict(sample.meta),
    )


def augment_dataset(samples: Sequence[FailureSample], cfg: AugmentConfig) -> list[FailureSample]:
    """Originals followed by ``copies_per_sample`` augmented copies of each.

    Each sample draws from its own derived stream so results do not depend on
    processing order. Samples where nothing can be dropped add no copy.
    """
    out = list(samples)
    for i, s in enumerate(samples):
        rng = np.random.default_rng(seeds.substream_seed(cfg.seed, f"augment/{i}"))
        for _ in range(cfg.copies_per_sample):
            if len(s.nodes) < 2 or drop_count(cfg.inactivation_probability, len(s.nodes)) == 0:
                continue
            out.append(augment(s, cfg.inactivation_probability, rng))
    return out
