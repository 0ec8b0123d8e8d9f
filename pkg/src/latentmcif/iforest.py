"""Isolation forests built from scratch.

Trees are stored as fixed-width node arrays (one row per tree) so building and
scoring can run inside numba kernels.  All randomness is drawn up front in
Python from per-tree generators; a kernel only consumes the pre-drawn uniform
stream, in depth-first preorder, two draws per internal node (split dimension,
then split value).  That makes every tree exactly reproducible from
``(seed, tree index)`` and replayable by an independent implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numba
import numpy as np
from numba import njit, prange

from .seeding import derive_seed

# TBB in this image is too old for numba; OpenMP keeps parallel kernels thread-safe.
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"

FOREST_FORMAT = "latentmcif.isolation_forest"
FOREST_FORMAT_VERSION = 1

DEFAULT_PSI = 256
MCIF_ESTIMATORS = 200
BASELINE_ESTIMATORS = 2400

EULER_GAMMA = 0.5772156649015329
_EXACT_HARMONIC_LIMIT = 1000


class ForestError(ValueError):
    pass


def harmonic(m: int) -> float:
    """H(m) = sum_{k=1}^{m} 1/k; exact summation up to m = 1000, asymptotic above."""
    if m <= 0:
        return 0.0
    if m <= _EXACT_HARMONIC_LIMIT:
        return math.fsum(1.0 / k for k in range(1, m + 1))
    return math.log(m) + EULER_GAMMA + 1.0 / (2 * m) - 1.0 / (12 * m * m)


def avg_path_correction(n: int) -> float:
    """Average path length of an unsuccessful BST search over ``n`` points."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


def height_limit(psi: int) -> int:
    return int(math.ceil(math.log2(psi))) if psi > 1 else 0


def set_jobs(n_jobs: int | None) -> None:
    """Cap the numba worker pool used for tree building and scoring."""
    if n_jobs is None:
        return
    numba.set_num_threads(max(1, min(int(n_jobs), numba.config.NUMBA_NUM_THREADS)))


def weighted_subsample(
    n: int, k: int, rng: np.random.Generator, weights: np.ndarray | None = None
) -> np.ndarray:
    """Draw ``k`` of ``n`` row indices without replacement, P ~ weights.

    Weighted reservoir sampling with exponential keys: key_i = log(u_i) / w_i,
    keep the k largest.  Unit weights reduce this to a uniform draw consuming
    the identical random stream.  Returned indices are sorted.
    """
    u = rng.random(n)
    w = np.ones(n) if weights is None else weights
    with np.errstate(divide="ignore"):
        keys = np.log(u) / w
    if k >= n:
        return np.arange(n)
    top = np.argpartition(-keys, k - 1)[:k]
    return np.sort(top)


@njit(cache=True)
def _build_tree(X, idx, uniforms, limit, split_dim, split_value, left, right, size):
    d = X.shape[1]
    n = idx.shape[0]
    cap = 2 * n
    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    lo = np.empty(d)
    hi = np.empty(d)
    top = 1
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    n_nodes = 1
    ui = 0
    while top > 0:
        top -= 1
        node = st_node[top]
        s = st_start[top]
        e = st_end[top]
        depth = st_depth[top]
        cnt = e - s
        size[node] = cnt
        split_dim[node] = -1
        left[node] = -1
        right[node] = -1
        split_value[node] = 0.0
        if cnt <= 1 or depth >= limit:
            continue
        for j in range(d):
            lo[j] = X[idx[s], j]
            hi[j] = X[idx[s], j]
        for i in range(s + 1, e):
            r = idx[i]
            for j in range(d):
                v = X[r, j]
                if v < lo[j]:
                    lo[j] = v
                elif v > hi[j]:
                    hi[j] = v
        k = 0
        for j in range(d):
            if hi[j] > lo[j]:
                k += 1
        if k == 0:
            continue
        pick = int(uniforms[ui] * k)
        if pick >= k:
            pick = k - 1
        ui += 1
        dim = -1
        seen = 0
        for j in range(d):
            if hi[j] > lo[j]:
                if seen == pick:
                    dim = j
                    break
                seen += 1
        a = lo[dim]
        b = hi[dim]
        value = a + uniforms[ui] * (b - a)
        ui += 1
        if value <= a:
            value = np.nextafter(a, b)
        if value >= b:
            value = np.nextafter(b, a)
            if value <= a:
                value = b
        # partition idx[s:e]: rows with X[:, dim] < value first
        i = s
        jj = e - 1
        while i <= jj:
            if X[idx[i], dim] < value:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[jj]
                idx[jj] = tmp
                jj -= 1
        mid = i
        split_dim[node] = dim
        split_value[node] = value
        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        left[node] = lchild
        right[node] = rchild
        st_node[top] = rchild
        st_start[top] = mid
        st_end[top] = e
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lchild
        st_start[top] = s
        st_end[top] = mid
        st_depth[top] = depth + 1
        top += 1
    return n_nodes


@njit(parallel=True, cache=True)
def _build_forest(X, sub_idx, uniforms, limit, split_dim, split_value, left, right, size, n_nodes):
    for t in prange(sub_idx.shape[0]):
        idx = sub_idx[t].copy()
        n_nodes[t] = _build_tree(
            X, idx, uniforms[t], limit,
            split_dim[t], split_value[t], left[t], right[t], size[t],
        )


@njit(parallel=True, cache=True)
def _path_lengths(X, split_dim, split_value, left, right, size, ctable, out):
    n_trees = split_dim.shape[0]
    for i in prange(X.shape[0]):
        for t in range(n_trees):
            node = 0
            depth = 0
            while split_dim[t, node] >= 0:
                if X[i, split_dim[t, node]] < split_value[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
                depth += 1
            out[i, t] = depth + ctable[size[t, node]]


@njit(parallel=True, cache=True)
def _mean_path_length(X, split_dim, split_value, left, right, size, ctable, out):
    n_trees = split_dim.shape[0]
    for i in prange(X.shape[0]):
        total = 0.0
        for t in range(n_trees):
            node = 0
            depth = 0
            while split_dim[t, node] >= 0:
                if X[i, split_dim[t, node]] < split_value[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
                depth += 1
            total += depth + ctable[size[t, node]]
        out[i] = total / n_trees


@dataclass(frozen=True, eq=False)
class IsolationTree:
    """One tree as parallel node arrays; ``split_dim == -1`` marks an external node."""

    split_dim: np.ndarray
    split_value: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    height_limit: int

    @property
    def n_nodes(self) -> int:
        return int(self.split_dim.shape[0])

    def depth(self) -> int:
        best = 0
        stack = [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.split_dim[node] >= 0:
                stack.append((int(self.left[node]), d + 1))
                stack.append((int(self.right[node]), d + 1))
        return best

    def nodes(self) -> list[dict[str, Any]]:
        out = []
        for i in range(self.n_nodes):
            if self.split_dim[i] >= 0:
                out.append({
                    "split_dim": int(self.split_dim[i]),
                    "split_value": float(self.split_value[i]),
                    "left": int(self.left[i]),
                    "right": int(self.right[i]),
                })
            else:
                out.append({"size": int(self.size[i])})
        return out


def path_length(tree: IsolationTree, x: np.ndarray) -> float:
    """Edges from the root to the reached external node plus c(size) there."""
    node = 0
    depth = 0
    while tree.split_dim[node] >= 0:
        if x[tree.split_dim[node]] < tree.split_value[node]:
            node = tree.left[node]
        else:
            node = tree.right[node]
        depth += 1
    return depth + avg_path_correction(int(tree.size[node]))


@dataclass(eq=False)
class IsolationForest:
    split_dim: np.ndarray
    split_value: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    n_nodes: np.ndarray
    psi: int
    n_features: int
    seed: int
    weighted: bool = False
    c_psi: float = field(init=False)
    _ctable: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.c_psi = avg_path_correction(self.psi)
        self._ctable = np.array([avg_path_correction(k) for k in range(self.psi + 1)])

    @property
    def n_estimators(self) -> int:
        return int(self.split_dim.shape[0])

    @property
    def height_limit(self) -> int:
        return height_limit(self.psi)

    def tree(self, t: int) -> IsolationTree:
        m = int(self.n_nodes[t])
        return IsolationTree(
            self.split_dim[t, :m].copy(), self.split_value[t, :m].copy(),
            self.left[t, :m].copy(), self.right[t, :m].copy(), self.size[t, :m].copy(),
            self.height_limit,
        )

    @property
    def trees(self) -> list[IsolationTree]:
        return [self.tree(t) for t in range(self.n_estimators)]

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        if X.shape[1] != self.n_features:
            raise ForestError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        """Per-tree path lengths, shape (n_points, n_estimators)."""
        X = self._check(X)
        out = np.empty((X.shape[0], self.n_estimators))
        _path_lengths(X, self.split_dim, self.split_value, self.left, self.right,
                      self.size, self._ctable, out)
        return out

    def mean_path_length(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        out = np.empty(X.shape[0])
        _mean_path_length(X, self.split_dim, self.split_value, self.left, self.right,
                          self.size, self._ctable, out)
        return out

    def score(self, X: np.ndarray) -> np.ndarray:
        """Anomaly score 2^(-E[h(x)] / c(psi)) in (0, 1); higher is more anomalous."""
        return np.power(2.0, -self.mean_path_length(X) / self.c_psi)

    def to_dict(self) -> dict[str, Any]:
        trees = []
        for t in range(self.n_estimators):
            m = int(self.n_nodes[t])
            trees.append({
                "split_dim": self.split_dim[t, :m].tolist(),
                "split_value": self.split_value[t, :m].tolist(),
                "left": self.left[t, :m].tolist(),
                "right": self.right[t, :m].tolist(),
                "size": self.size[t, :m].tolist(),
            })
        return {
            "format": FOREST_FORMAT,
            "version": FOREST_FORMAT_VERSION,
            "psi": self.psi,
            "n_features": self.n_features,
            "n_estimators": self.n_estimators,
            "height_limit": self.height_limit,
            "c_psi": self.c_psi,
            "seed": self.seed,
            "tree_seed_rule": "derive_seed(seed, 'tree', index)",
            "weighted": self.weighted,
            "trees": trees,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "IsolationForest":
        if doc.get("format") != FOREST_FORMAT or doc.get("version") != FOREST_FORMAT_VERSION:
            raise ForestError(f"unsupported forest document {doc.get('format')!r} v{doc.get('version')}")
        psi = int(doc["psi"])
        trees = doc["trees"]
        width = max(2 * psi - 1, max(len(t["size"]) for t in trees))
        shape = (len(trees), width)
        split_dim = np.full(shape, -1, np.int32)
        split_value = np.zeros(shape)
        left = np.full(shape, -1, np.int32)
        right = np.full(shape, -1, np.int32)
        size = np.zeros(shape, np.int32)
        n_nodes = np.zeros(len(trees), np.int32)
        for t, tr in enumerate(trees):
            m = len(tr["size"])
            n_nodes[t] = m
            split_dim[t, :m] = tr["split_dim"]
            split_value[t, :m] = tr["split_value"]
            left[t, :m] = tr["left"]
            right[t, :m] = tr["right"]
            size[t, :m] = tr["size"]
        return cls(split_dim, split_value, left, right, size, n_nodes, psi,
                   int(doc["n_features"]), int(doc["seed"]), bool(doc.get("weighted", False)))


def draw_tree_streams(
    n: int, n_estimators: int, psi: int, seed: int, weights: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Subsample indices (n_estimators, psi) and split uniforms (n_estimators, 2(psi-1))."""
    sub = np.empty((n_estimators, psi), np.int64)
    uni = np.empty((n_estimators, max(2 * (psi - 1), 1)))
    for t in range(n_estimators):
        rng = np.random.default_rng(derive_seed(seed, "tree", t))
        sub[t] = weighted_subsample(n, psi, rng, weights)
        uni[t] = rng.random(uni.shape[1])
    return sub, uni


def build_from_streams(
    data: np.ndarray, sub_idx: np.ndarray, uniforms: np.ndarray, seed: int = 0, weighted: bool = False
) -> IsolationForest:
    data = np.ascontiguousarray(data, dtype=np.float64)
    n_estimators, psi = sub_idx.shape
    width = 2 * psi - 1
    shape = (n_estimators, width)
    split_dim = np.full(shape, -1, np.int32)
    split_value = np.zeros(shape)
    left = np.full(shape, -1, np.int32)
    right = np.full(shape, -1, np.int32)
    size = np.zeros(shape, np.int32)
    n_nodes = np.zeros(n_estimators, np.int32)
    _build_forest(data, np.ascontiguousarray(sub_idx), np.ascontiguousarray(uniforms),
                  height_limit(psi), split_dim, split_value, left, right, size, n_nodes)
    return IsolationForest(split_dim, split_value, left, right, size, n_nodes,
                           psi, data.shape[1], seed, weighted)


def fit(
    data: np.ndarray,
    n_estimators: int = MCIF_ESTIMATORS,
    psi: int = DEFAULT_PSI,
    weights: np.ndarray | None = None,
    seed: int = 0,
) -> IsolationForest:
    """Fit an isolation forest on the rows of ``data``.

    Each tree sees min(psi, n) rows drawn without replacement with probability
    proportional to ``weights`` (uniform when omitted).
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ForestError(f"data must be 2-D, got shape {data.shape}")
    n, d = data.shape
    if d == 0:
        raise ForestError("data has zero feature dimensions")
    if n < 2:
        raise ForestError(f"need at least 2 rows to fit, got {n}")
    if psi < 2:
        raise ForestError(f"psi must be >= 2, got {psi}")
    if n_estimators < 1:
        raise ForestError(f"n_estimators must be >= 1, got {n_estimators}")
    if not np.all(np.isfinite(data)):
        raise ForestError("data contains non-finite values")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ForestError(f"weights must have shape ({n},), got {weights.shape}")
        if not (np.all(np.isfinite(weights)) and np.all(weights > 0)):
            raise ForestError("weights must be positive and finite")
    psi_eff = min(psi, n)
    sub, uni = draw_tree_streams(n, n_estimators, psi_eff, seed, weights)
    return build_from_streams(data, sub, uni, seed, weights is not None)


def score(forest: IsolationForest, x: np.ndarray) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    s = forest.score(x)
    return float(s[0]) if x.ndim == 1 else s
