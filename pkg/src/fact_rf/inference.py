"""Multiple testing, feature-group residualization and rolling-window p-values."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateVariance, InvalidInput
from .forest import Dataset, ForestParams, fit_forest, scale_unit
from .stats import FactConfig, derive_seed, fact_general

log = logging.getLogger("fact_rf")


def bh_fdr(p_values, q: float) -> np.ndarray:
    """Benjamini-Hochberg step-up: sorted indices of the rejected hypotheses."""
    if not 0.0 < q < 1.0:
        raise InvalidInput("q must lie in (0, 1)")
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if p.size == 0:
        return np.array([], dtype=np.int64)
    if np.any(np.isnan(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise InvalidInput("p-values must lie in [0, 1]")
    m = p.size
    ps = np.sort(p)
    ok = np.nonzero(ps <= q * np.arange(1, m + 1) / m)[0]
    if ok.size == 0:
        return np.array([], dtype=np.int64)
    cutoff = ps[ok[-1]]
    return np.nonzero(p <= cutoff)[0]


@dataclass(frozen=True)
class GroupSpec:
    """Disjoint feature groups, each with one selected representative."""

    groups: tuple = ()

    def __post_init__(self):
        gs = tuple((int(s), tuple(int(m) for m in members)) for s, members in self.groups)
        seen = set()
        for s, members in gs:
            if s not in members:
                raise InvalidInput(f"selected feature {s} is not in its group")
            if seen & set(members):
                raise InvalidInput("feature groups overlap")
            seen |= set(members)
        object.__setattr__(self, "groups", gs)

    def check(self, p: int) -> None:
        for s, members in self.groups:
            for m in members:
                if not 0 <= m < p:
                    raise InvalidInput(f"group references missing column {m}")


def residualize_column(data: Dataset, member: int, selected: int,
                       fp: Optional[ForestParams] = None, seed: int = 0) -> np.ndarray:
    """X_member minus its out-of-bag forest prediction from X_selected alone (unscaled)."""
    fp = fp or ForestParams()
    target = data.features[:, member]
    forest = fit_forest(data.with_response(target), replace(fp, mtry=1), seed, features=[selected])
    pred = forest.predict_oob(data.features)
    miss = np.isnan(pred)
    if miss.any():
        pred[miss] = forest.predict(data.features[miss])
    return target - pred


def group_residualize(data: Dataset, spec: GroupSpec, fp: Optional[ForestParams] = None,
                      seed: int = 0) -> Dataset:
    """Replace each non-selected group member by its residual on the selected feature,
    min-max rescaled to [0, 1]."""
    spec.check(data.p)
    X = data.features.copy()
    for s, members in spec.groups:
        for m in members:
            if m == s:
                continue
            r = residualize_column(data, m, s, fp, derive_seed(seed, s, m))
            X[:, m] = scale_unit(r[:, None])[0][:, 0]
    return Dataset(X, data.response, data.feature_names)


@dataclass(frozen=True)
class RollingSpec:
    window_length: int
    step: int
    horizon: int = 1

    def __post_init__(self):
        if self.window_length < 20:
            raise InvalidInput("window_length must be >= 20")
        if self.step < 1:
            raise InvalidInput("step must be >= 1")
        if not 0 <= self.horizon < self.window_length - 2:
            raise InvalidInput("horizon must be >= 0 and leave room in the window")

    def n_windows(self, T: int) -> int:
        if self.window_length > T:
            raise InvalidInput(f"window of {self.window_length} rows exceeds the {T}-row series")
        return (T - self.window_length) // self.step + 1


def window_data(data: Dataset, start: int, spec: RollingSpec) -> Dataset:
    """Rows start..start+w-1 with the response led by ``horizon`` inside the window."""
    end = start + spec.window_length
    h = spec.horizon
    X = data.features[start:end - h]
    y = data.response[start + h:end]
    return Dataset(X, y, data.feature_names)


def rolling_pvalues(data: Dataset, spec: RollingSpec, cfg: Optional[FactConfig] = None,
                    features: Optional[Sequence[int]] = None, labels: Optional[Sequence] = None,
                    fdr: Optional[float] = None) -> list[dict]:
    """General FACT p-values per window and feature, in long format.

    ``cfg.k_n=None`` means one block here. ``labels`` names each row (e.g.
    dates); a window is labeled by its last row. With ``fdr``, a boolean
    ``rejected`` column marks per-window BH rejections among ``features``.
    """
    cfg = cfg or FactConfig(split_mode="oob", k_n=1)
    if cfg.k_n is None:
        cfg = replace(cfg, k_n=1)
    cfg = replace(cfg, variant="general")
    T = data.n
    count = spec.n_windows(T)
    features = list(range(data.p)) if features is None else [int(j) for j in features]
    for j in features:
        if not 0 <= j < data.p:
            raise InvalidInput(f"feature index {j} out of range")
    names = data.names()
    rows = []
    for w in range(count):
        start = w * spec.step
        wd = window_data(data, start, spec)
        wcfg = replace(cfg, seed=derive_seed(cfg.seed, w))
        end_label = labels[start + spec.window_length - 1] if labels is not None else start + spec.window_length - 1
        block = []
        for j in features:
            try:
                rep = fact_general(j, wd, wcfg)
                stat, p = rep.stat, rep.p_value
            except DegenerateVariance as e:
                log.warning("window %d, %s: %s", w, names[j], e)
                stat, p = float("nan"), float("nan")
            block.append({"window": w, "window_end": end_label, "feature": names[j],
                          "stat": stat, "p_value": p})
        if fdr is not None:
            ok = [k for k, r in enumerate(block) if not np.isnan(r["p_value"])]
            rej = set(np.asarray(ok)[bh_fdr([block[k]["p_value"] for k in ok], fdr)].tolist()) if ok else set()
            for k, r in enumerate(block):
                r["rejected"] = k in rej
        rows.extend(block)
    return rows
