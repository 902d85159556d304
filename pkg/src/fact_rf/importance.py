"""Baseline importance measures: MDI, permutation MDA and conditional permutation CPI."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import EmptyOob, InvalidInput, StrataTooSmall
from .forest import Dataset, ForestParams, RegressionForest, fit_forest
from .stats import derive_seed

log = logging.getLogger("fact_rf")

METHODS = ("MDI", "MDA", "CPI")
DEFAULT_REPS = 50
STRATA_MIN_NODE = 30
MAX_OOB_DROP = 0.10


@dataclass
class ImportanceScores:
    method: str
    scores: np.ndarray
    reps: int = 0
    seed: Optional[int] = None

    def rows(self, names) -> list[dict]:
        return [{"feature": nm, "method": self.method, "score": float(s)}
                for nm, s in zip(names, self.scores)]


def write_scores_csv(path, names, results, header: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(header)
        w = csv.DictWriter(fh, fieldnames=["feature", "method", "score"], lineterminator="\n")
        w.writeheader()
        for res in results:
            for row in res.rows(names):
                w.writerow({**row, "score": repr(row["score"])})


def mdi(forest: RegressionForest, p: Optional[int] = None) -> ImportanceScores:
    """Total impurity (SSE) decrease of the splits on each feature, averaged over trees."""
    p = forest.n_features if p is None else p
    _, feats, dec = forest.split_decreases()
    scores = np.bincount(feats, weights=dec, minlength=p)[:p] / forest.n_trees
    return ImportanceScores("MDI", np.maximum(scores, 0.0))


def _oob_base(forest, data):
    if data.n != forest.n_train or data.p != forest.n_features:
        raise InvalidInput("permutation importance needs the forest's training data")
    base = forest.predict_oob(data.features)
    keep = ~np.isnan(base)
    dropped = data.n - int(keep.sum())
    if dropped > MAX_OOB_DROP * data.n:
        raise EmptyOob(f"{dropped} of {data.n} rows have no out-of-bag trees")
    if dropped:
        log.warning("dropping %d rows with no out-of-bag trees", dropped)
    y = data.response[keep]
    return keep, float(np.mean((y - base[keep]) ** 2))


def permute_within(col: np.ndarray, strata: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute ``col`` inside each stratum; strata are visited in sorted label order."""
    out = col.copy()
    for s in np.unique(strata):
        rows = np.nonzero(strata == s)[0]
        out[rows] = col[rows[rng.permutation(rows.size)]]
    return out


def permutation_importance(forest: RegressionForest, data: Dataset, j: int, reps: int,
                           seed: int, strata: Optional[np.ndarray] = None) -> tuple[float, float]:
    """(mean, standard error) over reps of permuted-OOB MSE minus OOB MSE."""
    if reps < 1:
        raise InvalidInput("reps must be >= 1")
    if not 0 <= j < data.p:
        raise InvalidInput(f"feature index {j} out of range")
    if strata is None:
        strata = np.zeros(data.n, dtype=np.int64)
    keep, base_mse = _oob_base(forest, data)
    rng = np.random.Generator(np.random.PCG64(seed))
    X = data.features.copy()
    y = data.response[keep]
    diffs = np.empty(reps)
    for r in range(reps):
        X[:, j] = permute_within(data.features[:, j], strata, rng)
        pred = forest.predict_oob(X)[keep]
        diffs[r] = np.mean((y - pred) ** 2) - base_mse
    se = float(np.std(diffs, ddof=1) / np.sqrt(reps)) if reps > 1 else float("nan")
    return float(diffs.mean()), se


def mda(forest: RegressionForest, data: Dataset, j: int, reps: int = DEFAULT_REPS,
        seed: int = 0) -> float:
    """Permutation importance of column j on out-of-bag predictions."""
    return permutation_importance(forest, data, j, reps, seed)[0]


def _merge_small(strata: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Fold cells with fewer than 2 rows into the cell with the nearest centroid."""
    labels, counts = np.unique(strata, return_counts=True)
    big = labels[counts >= 2]
    if big.size == 0:
        raise StrataTooSmall("no permutation cell has at least 2 rows")
    if big.size == labels.size:
        return strata
    cents = np.stack([X[strata == b].mean(axis=0) for b in big])
    out = strata.copy()
    for lab in labels[counts < 2]:
        rows = np.nonzero(strata == lab)[0]
        c = X[rows].mean(axis=0)
        out[rows] = big[int(np.argmin(((cents - c) ** 2).sum(axis=1)))]
    return out


def tree_strata(data: Dataset, j: int, min_node_size: int = STRATA_MIN_NODE,
                seed: int = 0) -> np.ndarray:
    """Cells from the leaves of one CART tree regressing X_j on X_{-j}."""
    others = [k for k in range(data.p) if k != j]
    if not others:
        return np.zeros(data.n, dtype=np.int64)
    fp = ForestParams(n_trees=1, mtry=len(others), min_node_size=min_node_size, bootstrap=False)
    tree = fit_forest(data.with_response(data.features[:, j]), fp, seed, features=others)
    leaves = tree.apply(data.features)
    return _merge_small(leaves, data.features[:, others])


def cpi(forest: RegressionForest, data: Dataset, j: int,
        strata_builder: Optional[Callable[[Dataset, int], np.ndarray]] = None,
        reps: int = DEFAULT_REPS, seed: int = 0) -> float:
    """Like :func:`mda`, but X_j is only shuffled within cells that approximate X_j | X_{-j}."""
    builder = strata_builder or tree_strata
    strata = np.asarray(builder(data, j))
    if strata.shape != (data.n,):
        raise InvalidInput("strata must label every row")
    labels, counts = np.unique(strata, return_counts=True)
    if counts.min() < 2:
        strata = _merge_small(strata, np.delete(data.features, j, axis=1))
    return permutation_importance(forest, data, j, reps, seed, strata)[0]


def importance_all(method: str, forest: RegressionForest, data: Dataset,
                   reps: int = DEFAULT_REPS, seed: int = 0) -> ImportanceScores:
    """Scores for every feature; permutation methods use one stream per feature."""
    if method == "MDI":
        return mdi(forest, data.p)
    if method not in METHODS:
        raise InvalidInput(f"unknown importance method {method!r}")
    fn = mda if method == "MDA" else (lambda f, d, j, r, s: cpi(f, d, j, reps=r, seed=s))
    scores = np.array([fn(forest, data, j, reps, derive_seed(seed, j)) for j in range(data.p)])
    return ImportanceScores(method, scores, reps, seed)


def example1_generate(n: int, p: int, seed: int = 0, sigma: float = 1.0) -> Dataset:
    """Features that all coincide with X1 when X1 > 0.7; response 1{0.3 <= X1 <= 0.7} + noise."""
    if p < 2:
        raise InvalidInput("p must be >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    x1 = rng.random(n)
    X = 0.7 * rng.random((n, p))
    X[:, 0] = x1
    hi = x1 > 0.7
    X[hi, :] = x1[hi, None]
    y = ((x1 >= 0.3) & (x1 <= 0.7)).astype(np.float64) + sigma * rng.standard_normal(n)
    return Dataset(X, y)
