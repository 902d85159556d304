"""CART regression forests with bootstrap resampling and out-of-bag prediction."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import _engine
from .errors import DimensionMismatch, InvalidInput

FOREST_FORMAT = "fact-rf/forest"
FOREST_VERSION = 1

_threads = int(os.environ.get("FACT_THREADS", "1"))


def set_threads(n: int) -> None:
    """Set the worker count used when growing forests (results never depend on it)."""
    global _threads
    if n < 1:
        raise InvalidInput("threads must be >= 1")
    _threads = int(n)


def get_threads() -> int:
    return _threads


def scale_unit(X, lo=None, hi=None):
    """Min-max scale columns to [0, 1]; constant columns map to 0.5.

    ``lo``/``hi`` default to the column extremes of ``X`` itself. Returns the
    scaled matrix with the statistics used, so test data can reuse them.
    """
    X = np.asarray(X, dtype=np.float64)
    if lo is None:
        lo = X.min(axis=0)
        hi = X.max(axis=0)
    span = hi - lo
    const = span <= 0
    out = (X - lo) / np.where(const, 1.0, span)
    out[:, const] = 0.5
    return out, lo, hi


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix in the unit hypercube plus a response vector."""

    features: np.ndarray
    response: np.ndarray
    feature_names: Optional[tuple] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.response, dtype=np.float64).ravel()
        if X.ndim != 2:
            raise InvalidInput("features must be a 2-d matrix")
        n, p = X.shape
        if n != y.shape[0]:
            raise DimensionMismatch(f"{n} feature rows but {y.shape[0]} responses")
        if n < 2 or p < 1:
            raise InvalidInput(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidInput("features and response must be finite")
        if X.min() < 0.0 or X.max() > 1.0:
            raise InvalidInput("features must lie in [0, 1]; use Dataset.from_raw to scale")
        names = self.feature_names
        if names is not None:
            names = tuple(str(s) for s in names)
            if len(names) != p:
                raise DimensionMismatch(f"{len(names)} feature names for {p} columns")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "feature_names", names)

    @classmethod
    def from_raw(cls, X, y, feature_names=None) -> "Dataset":
        """Build a dataset from unscaled features, min-max scaling each column."""
        scaled, _, _ = scale_unit(X)
        return cls(scaled, y, feature_names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def names(self) -> list[str]:
        if self.feature_names is not None:
            return list(self.feature_names)
        return [f"X{j + 1}" for j in range(self.p)]

    def with_response(self, y) -> "Dataset":
        """Same features (and cached column orderings), different response."""
        return Dataset(self.features, y, self.feature_names, self._cache)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.response[rows], self.feature_names)

    def columns_t(self) -> np.ndarray:
        if "xt" not in self._cache:
            self._cache["xt"] = np.ascontiguousarray(self.features.T)
        return self._cache["xt"]

    def column_order(self) -> np.ndarray:
        if "order" not in self._cache:
            self._cache["order"] = _engine.column_order(self.columns_t())
        return self._cache["order"]


@dataclass(frozen=True)
class ForestParams:
    """Forest hyperparameters.

    ``mtry=None`` resolves to ceil(p/3) over the usable columns. With
    ``bootstrap=False`` every tree sees every row exactly once.
    """

    n_trees: int = 500
    mtry: Optional[int] = None
    min_node_size: int = 5
    max_depth: Optional[int] = None
    bootstrap: bool = True
    bootstrap_fraction: float = 1.0
    replace: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidInput("n_trees must be positive")
        if self.mtry is not None and self.mtry < 1:
            raise InvalidInput("mtry must be positive")
        if self.min_node_size < 1:
            raise InvalidInput("min_node_size must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise InvalidInput("max_depth must be >= 0")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise InvalidInput("bootstrap_fraction must be in (0, 1]")

    def resolve_mtry(self, p: int) -> int:
        if self.mtry is None:
            return max(1, math.ceil(p / 3))
        if self.mtry > p:
            raise InvalidInput(f"mtry={self.mtry} exceeds the {p} usable features")
        return self.mtry

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Leaf:
    prediction: float
    member_count: int


@dataclass(frozen=True)
class Split:
    split_feature: int
    split_value: float
    impurity_decrease: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Split, Leaf]


def _tree_keys(seed: int, n_trees: int) -> np.ndarray:
    if not 0 <= int(seed) < 2**64:
        raise InvalidInput("seed must be an unsigned 64-bit integer")
    return np.random.SeedSequence(int(seed)).generate_state(n_trees, dtype=np.uint64)


class RegressionForest:
    """A fitted forest. Immutable after construction and safe to share across threads.

    Nodes of all trees live in flat arrays; ``offsets[k]`` is the first node of
    tree ``k`` and child links are tree-local. ``inbag[k, i]`` is the number of
    times row ``i`` was drawn for tree ``k``.
    """

    def __init__(self, params, seed, n_features, features_used, arrays, offsets, inbag):
        self.params = params
        self.seed = int(seed)
        self.n_features = int(n_features)
        self.features_used = np.asarray(features_used, dtype=np.int64)
        (self._feat, self._thr, self._left, self._right,
         self._value, self._count, self._decrease) = arrays
        self._offsets = np.asarray(offsets, dtype=np.int64)
        self.inbag = np.asarray(inbag, dtype=np.int32)
        for a in (self._feat, self._thr, self._left, self._right, self._value,
                  self._count, self._decrease, self._offsets, self.inbag):
            a.setflags(write=False)

    @property
    def n_trees(self) -> int:
        return self._offsets.shape[0] - 1

    @property
    def n_train(self) -> int:
        return self.inbag.shape[1]

    def tree_arrays(self, k: int) -> dict:
        a, b = self._offsets[k], self._offsets[k + 1]
        return {
            "feature": self._feat[a:b], "threshold": self._thr[a:b],
            "left": self._left[a:b], "right": self._right[a:b],
            "value": self._value[a:b], "count": self._count[a:b],
            "decrease": self._decrease[a:b],
        }

    def tree(self, k: int) -> TreeNode:
        t = self.tree_arrays(k)

        def build(i):
            if t["feature"][i] < 0:
                return Leaf(float(t["value"][i]), int(t["count"][i]))
            return Split(int(t["feature"][i]), float(t["threshold"][i]),
                         float(t["decrease"][i]),
                         build(t["left"][i]), build(t["right"][i]))

        return build(0)

    @property
    def trees(self) -> list:
        return [self.tree(k) for k in range(self.n_trees)]

    @property
    def bootstrap_indices(self) -> list:
        idx = np.arange(self.n_train)
        return [np.repeat(idx, self.inbag[k]) for k in range(self.n_trees)]

    def apply(self, X, k: int = 0) -> np.ndarray:
        """Tree-local leaf index reached by each row of ``X`` in tree ``k``."""
        return _engine.apply_tree(self._feat, self._thr, self._left, self._right,
                                  self._offsets[k], self._check(X))

    def split_decreases(self) -> tuple:
        """(tree index, feature, impurity decrease) for every internal node."""
        internal = self._feat >= 0
        tree_of = np.repeat(np.arange(self.n_trees), np.diff(self._offsets))
        return tree_of[internal], self._feat[internal].astype(np.int64), self._decrease[internal]

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        return np.ascontiguousarray(X)

    def _arrays(self):
        return self._feat, self._thr, self._left, self._right, self._value, self._offsets

    def predict(self, X) -> np.ndarray:
        """Average of per-tree leaf predictions for each row of ``X``."""
        return _engine.predict_mean(*self._arrays(), self._check(X))

    def predict_trees(self, X) -> np.ndarray:
        return _engine.predict_trees(*self._arrays(), self._check(X))

    def predict_oob(self, X) -> np.ndarray:
        """Out-of-bag predictions for the training rows; NaN where every tree saw the row.

        ``X`` must be row-aligned with the training data (it may be a copy
        with some column permuted, as permutation importance does).
        """
        X = self._check(X)
        if X.shape[0] != self.n_train:
            raise DimensionMismatch("OOB prediction needs the training rows")
        return _engine.predict_oob(*self._arrays(), self.inbag, X)

    def to_dict(self) -> dict:
        return {
            "format": FOREST_FORMAT,
            "version": FOREST_VERSION,
            "params": self.params.to_dict(),
            "seed": self.seed,
            "n_features": self.n_features,
            "features_used": self.features_used.tolist(),
            "n_train": self.n_train,
            "trees": [{k: v.tolist() for k, v in self.tree_arrays(k).items()}
                      for k in range(self.n_trees)],
            "bootstrap_indices": [b.tolist() for b in self.bootstrap_indices],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RegressionForest":
        if doc.get("format") != FOREST_FORMAT:
            raise InvalidInput("not a forest document")
        if doc.get("version") != FOREST_VERSION:
            raise InvalidInput(f"unsupported forest version {doc.get('version')}")
        trees = doc["trees"]
        sizes = [len(t["feature"]) for t in trees]
        offsets = np.concatenate([[0], np.cumsum(sizes)])

        def cat(key, dtype):
            return np.concatenate([np.asarray(t[key], dtype=dtype) for t in trees])

        arrays = (cat("feature", np.int32), cat("threshold", np.float64),
                  cat("left", np.int32), cat("right", np.int32),
                  cat("value", np.float64), cat("count", np.int32),
                  cat("decrease", np.float64))
        inbag = np.zeros((len(trees), doc["n_train"]), dtype=np.int32)
        for k, b in enumerate(doc["bootstrap_indices"]):
            np.add.at(inbag[k], np.asarray(b, dtype=np.int64), 1)
        return cls(ForestParams(**doc["params"]), doc["seed"], doc["n_features"],
                   doc["features_used"], arrays, offsets, inbag)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "RegressionForest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _grow_chunk(xt, y, order, allowed, mtry, params, keys, n, sample_size):
    dtype = np.int16 if n < 2**15 else np.int32
    bufs = np.empty((2, allowed.shape[0], n), dtype=dtype)
    max_depth = -1 if params.max_depth is None else params.max_depth
    out = []
    for key in keys:
        if params.bootstrap:
            counts = _engine.draw_sample_counts(key, n, sample_size, params.replace)
        else:
            counts = np.ones(n, dtype=np.int32)
        arrays = _engine.grow_tree(xt, y, counts, allowed, order, mtry,
                                   params.min_node_size, max_depth,
                                   np.uint64(_engine.mix64(key ^ np.uint64(0x5851F42D4C957F2D))),
                                   bufs)
        out.append((arrays, counts))
    return out


def fit_forest(data: Dataset, params: Optional[ForestParams] = None, seed: int = 0,
               features: Optional[Sequence[int]] = None,
               threads: Optional[int] = None) -> RegressionForest:
    """Grow ``params.n_trees`` CART trees on resamples of ``data``.

    ``features`` restricts splitting to those columns (e.g. all but the
    tested one); predictions still take full-width rows. Each tree draws
    from its own counter-based stream keyed by (seed, tree index), so the
    result is a pure function of (data, params, seed, features).
    """
    params = params or ForestParams()
    n, p = data.n, data.p
    if features is None:
        allowed = np.arange(p, dtype=np.int64)
    else:
        allowed = np.unique(np.asarray(features, dtype=np.int64))
        if allowed.size == 0 or allowed[0] < 0 or allowed[-1] >= p:
            raise InvalidInput("feature subset must be nonempty column indices")
    mtry = params.resolve_mtry(allowed.size)
    sample_size = max(1, int(round(params.bootstrap_fraction * n)))
    keys = _tree_keys(seed, params.n_trees)
    xt = data.columns_t()
    order = data.column_order()
    y = data.response

    workers = max(1, min(threads or _threads, params.n_trees))
    chunks = np.array_split(keys, workers)
    if workers == 1:
        results = _grow_chunk(xt, y, order, allowed, mtry, params, keys, n, sample_size)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(lambda ks: _grow_chunk(xt, y, order, allowed, mtry, params,
                                                    ks, n, sample_size), chunks)
            results = [r for part in parts for r in part]

    sizes = [r[0][0].shape[0] for r in results]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    arrays = tuple(np.concatenate([r[0][i] for r in results]) for i in range(7))
    inbag = np.stack([r[1] for r in results])
    return RegressionForest(params, seed, p, allowed, arrays, offsets, inbag)


def predict(forest: RegressionForest, x) -> np.ndarray:
    return forest.predict(x)


def predict_oob(forest: RegressionForest, data: Dataset) -> np.ndarray:
    return forest.predict_oob(data.features)


def best_split(rows, data: Dataset, candidate_features, min_node_size: int = 1):
    """Best CART split of ``rows`` (a multiset of row indices) over candidate columns.

    Returns ``(feature, value, impurity_decrease)`` where the decrease is the
    parent SSE minus the children's SSE, or ``None`` when no split with
    strictly positive decrease leaves both children with at least
    ``min_node_size`` members.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cand = np.unique(np.asarray(candidate_features, dtype=np.int64))
    if rows.size == 0 or cand.size == 0:
        raise InvalidInput("rows and candidate_features must be nonempty")
    counts = np.bincount(rows, minlength=data.n).astype(np.float64)
    uniq = np.nonzero(counts)[0]
    f, value, dec = _engine.node_best_split(data.columns_t(), data.response, counts,
                                            uniq, cand, min_node_size)
    if f < 0:
        return None
    return int(f), float(value), float(dec)
