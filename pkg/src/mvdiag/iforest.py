"""Isolation forest with array-encoded trees.

Tree building and path-length scoring are the hot loops of trace alert
extraction; both are numba kernels (see :mod:`mvdiag._accel`). All randomness
is drawn up front with numpy so the compiled and interpreted kernels build
identical trees.
"""

from __future__ import annotations

import base64
import math

import numpy as np

from ._accel import NUMBA_ENABLED, jit

__all__ = ["IsolationForest", "average_path_length", "anomaly_score"]

EULER_GAMMA = 0.5772156649015329


def average_path_length(n: float) -> float:
    """c(n): average unsuccessful-search path length of a BST with n points."""
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1.0) + EULER_GAMMA) - 2.0 * (n - 1.0) / n


def anomaly_score(mean_path: np.ndarray | float, sample_size: int) -> np.ndarray | float:
    """s(x) = 2 ** (-E[h(x)] / c(n))."""
    c = average_path_length(sample_size)
    if c == 0.0:
        return np.full_like(np.asarray(mean_path, dtype=float), 0.5) if np.ndim(mean_path) else 0.5
    return np.power(2.0, -np.asarray(mean_path, dtype=float) / c)


@jit
def _c(n):
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (np.log(n - 1.0) + 0.5772156649015329) - 2.0 * (n - 1.0) / n


@jit
def _build_tree(X, idx, height_limit, u_feat, u_split, feat, thr, left, size):
    """Grow one isolation tree over rows ``X[idx]`` into preallocated arrays.

    Node k consumes u_feat[k] and u_split[k]. Returns the node count.
    """
    n_features = X.shape[1]
    stack_node = np.empty(feat.shape[0], np.int64)
    stack_lo = np.empty(feat.shape[0], np.int64)
    stack_hi = np.empty(feat.shape[0], np.int64)
    stack_depth = np.empty(feat.shape[0], np.int64)
    lo_f = np.empty(n_features)
    hi_f = np.empty(n_features)
    cand = np.empty(n_features, np.int64)
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = idx.shape[0]
    stack_depth[0] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        depth = stack_depth[top]
        n = hi - lo
        size[node] = n
        feat[node] = -1
        left[node] = -1
        thr[node] = 0.0
        if depth >= height_limit or n <= 1:
            continue
        for f in range(n_features):
            lo_f[f] = np.inf
            hi_f[f] = -np.inf
        for i in range(lo, hi):
            row = idx[i]
            for f in range(n_features):
                v = X[row, f]
                if v < lo_f[f]:
                    lo_f[f] = v
                if v > hi_f[f]:
                    hi_f[f] = v
        n_cand = 0
        for f in range(n_features):
            if hi_f[f] > lo_f[f]:
                cand[n_cand] = f
                n_cand += 1
        if n_cand == 0:
            continue
        pick = int(u_feat[node] * n_cand)
        if pick >= n_cand:
            pick = n_cand - 1
        f = cand[pick]
        t = lo_f[f] + u_split[node] * (hi_f[f] - lo_f[f])
        # in-place partition: rows with X < t first
        i = lo
        j = hi - 1
        while i <= j:
            if X[idx[i], f] < t:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        feat[node] = f
        thr[node] = t
        left[node] = n_nodes
        stack_node[top] = n_nodes
        stack_lo[top] = lo
        stack_hi[top] = i
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = n_nodes + 1
        stack_lo[top] = i
        stack_hi[top] = hi
        stack_depth[top] = depth + 1
        top += 1
        n_nodes += 2
    return n_nodes


@jit
def _mean_path_kernel(X, feat, thr, left, size, offsets):
    n_trees = offsets.shape[0] - 1
    out = np.zeros(X.shape[0])
    for r in range(X.shape[0]):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            depth = 0
            while feat[base + node] >= 0:
                if X[r, feat[base + node]] < thr[base + node]:
                    node = left[base + node]
                else:
                    node = left[base + node] + 1
                depth += 1
            acc += depth + _c(size[base + node])
        out[r] = acc / n_trees
    return out


_c_vec = np.vectorize(average_path_length, otypes=[float])


def _mean_path_numpy(X, feat, thr, left, size, offsets):
    """Vectorized traversal: all rows descend one tree level at a time."""
    n = X.shape[0]
    total = np.zeros(n)
    rows = np.arange(n)
    for t in range(offsets.shape[0] - 1):
        base = offsets[t]
        node = np.zeros(n, np.int64)
        depth = np.zeros(n)
        f = feat[base + node]
        active = f >= 0
        while active.any():
            a = rows[active]
            na = node[a]
            go_left = X[a, feat[base + na]] < thr[base + na]
            node[a] = left[base + na] + (~go_left)
            depth[a] += 1
            active[a] = feat[base + node[a]] >= 0
        total += depth + _c_vec(size[base + node])
    return total / (offsets.shape[0] - 1)


def mean_path_length(X, feat, thr, left, size, offsets):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if NUMBA_ENABLED:
        return _mean_path_kernel(X, feat, thr, left, size, offsets)
    return _mean_path_numpy(X, feat, thr, left, size, offsets)


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii")


def _unb64(s: str, dtype) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype=dtype).copy()


class IsolationForest:
    """Ensemble of isolation trees over a small dense feature matrix."""

    def __init__(self, n_trees: int = 100, subsample_size: int = 256):
        if n_trees < 1 or subsample_size < 1:
            raise ValueError("n_trees and subsample_size must be positive")
        self.n_trees = n_trees
        self.subsample_size = subsample_size
        self.sample_size = 0
        self.feat = self.thr = self.left = self.size = self.offsets = None

    @property
    def height_limit(self) -> int:
        return max(0, math.ceil(math.log2(self.sample_size))) if self.sample_size > 1 else 0

    def fit(self, X: np.ndarray, rng: np.random.Generator) -> "IsolationForest":
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("fit needs a non-empty 2-D array")
        n = X.shape[0]
        psi = min(self.subsample_size, n)
        self.sample_size = psi
        limit = self.height_limit
        max_nodes = 2 * psi + 1
        feats, thrs, lefts, sizes, offsets = [], [], [], [], [0]
        for _ in range(self.n_trees):
            idx = rng.choice(n, size=psi, replace=False) if psi < n else rng.permutation(n)
            u = rng.random((2, max_nodes))
            feat = np.empty(max_nodes, np.int64)
            thr = np.empty(max_nodes)
            left = np.empty(max_nodes, np.int64)
            size = np.empty(max_nodes, np.int64)
            k = _build_tree(X, idx.astype(np.int64), limit, u[0], u[1], feat, thr, left, size)
            feats.append(feat[:k]); thrs.append(thr[:k]); lefts.append(left[:k]); sizes.append(size[:k])
            offsets.append(offsets[-1] + k)
        self.feat = np.concatenate(feats).astype(np.int64)
        self.thr = np.concatenate(thrs)
        self.left = np.concatenate(lefts).astype(np.int64)
        self.size = np.concatenate(sizes).astype(np.int64)
        self.offsets = np.asarray(offsets, np.int64)
        return self

    def tree_heights(self) -> list[int]:
        heights = []
        for t in range(self.n_trees):
            base = self.offsets[t]
            best, stack = 0, [(0, 0)]
            while stack:
                node, d = stack.pop()
                best = max(best, d)
                if self.feat[base + node] >= 0:
                    stack += [(self.left[base + node], d + 1), (self.left[base + node] + 1, d + 1)]
            heights.append(best)
        return heights

    def mean_path(self, X: np.ndarray) -> np.ndarray:
        if self.feat is None:
            raise RuntimeError("forest is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return mean_path_length(X, self.feat, self.thr, self.left, self.size, self.offsets)

    def score(self, X: np.ndarray) -> np.ndarray:
        return anomaly_score(self.mean_path(X), self.sample_size)

    def to_json(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "subsample_size": self.subsample_size,
            "sample_size": self.sample_size,
            "feat": _b64(self.feat.astype("<i1")),
            "thr": _b64(self.thr.astype("<f8")),
            "left": _b64(self.left.astype("<i4")),
            "size": _b64(self.size.astype("<i4")),
            "offsets": _b64(self.offsets.astype("<i4")),
        }

    @classmethod
    def from_json(cls, d: dict) -> "IsolationForest":
        f = cls(d["n_trees"], d["subsample_size"])
        f.sample_size = d["sample_size"]
        f.feat = _unb64(d["feat"], "<i1").astype(np.int64)
        f.thr = _unb64(d["thr"], "<f8")
        f.left = _unb64(d["left"], "<i4").astype(np.int64)
        f.size = _unb64(d["size"], "<i4").astype(np.int64)
        f.offsets = _unb64(d["offsets"], "<i4").astype(np.int64)
        return f
