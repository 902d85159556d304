"""Friedman-type simulation designs and experiment runners.

Feature labels are 1-based (``X12`` is column 11 of the full design).
Repetition ``r`` of a spec draws its data from ``derive_seed(spec.seed, r)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats as sps

from .errors import InvalidInput
from .forest import Dataset, ForestParams, fit_forest, scale_unit
from .importance import cpi, mda, mdi
from .stats import (FactConfig, derive_seed, fact_test, nuisance_for, report_basic,
                    report_conditioning, report_general, threshold)

log = logging.getLogger("fact_rf")

RELEVANT = (1, 11, 21, 31, 41)
GROUP_WIDTH = 3
MIN_P_FULL = 43
REDUCED_LABELS = (1, 2, 11, 12, 21, 22, 31, 32, 41, 42)
SIZE_POWER_FEATURES = (1, 11, 21, 31, 2, 12, 22, 32)
RMSE_BLOCK = 100


@dataclass(frozen=True)
class SimulationSpec:
    """One experiment cell. ``reduced`` keeps only the ten features of the small design."""

    n: int
    p: int
    lam: float
    sigma: float = 5.0
    reps: int = 100
    seed: int = 0
    case_label: str = ""
    reduced: bool = False

    def __post_init__(self):
        if self.n < 2:
            raise InvalidInput("n must be >= 2")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidInput("lambda must lie in [0, 1]")
        if self.sigma < 0:
            raise InvalidInput("sigma must be >= 0")
        if self.reps < 0:
            raise InvalidInput("reps must be >= 0")
        if self.p < MIN_P_FULL:
            raise InvalidInput(f"p={self.p} is too small for the grouped design (need >= {MIN_P_FULL})")

    @property
    def labels(self) -> tuple:
        return REDUCED_LABELS if self.reduced else tuple(range(1, self.p + 1))

    def column(self, label: int) -> int:
        """Column index of 1-based feature label in the generated dataset."""
        try:
            return self.labels.index(label)
        except ValueError:
            raise InvalidInput(f"X{label} is not part of this design") from None

    def to_dict(self) -> dict:
        return asdict(self)


# Preset designs I-VI; spurious-ranking runs use I-IV.
CASES = {
    "I": SimulationSpec(300, 200, 0.3, case_label="I"),
    "II": SimulationSpec(300, 200, 0.6, case_label="II"),
    "III": SimulationSpec(500, 200, 0.6, case_label="III"),
    "IV": SimulationSpec(500, 1000, 0.6, case_label="IV"),
    "V": SimulationSpec(500, 1000, 0.3, case_label="V"),
    "VI": SimulationSpec(500, 50, 0.6, case_label="VI", reduced=True),
}


def preset(label: str, **overrides) -> SimulationSpec:
    if label not in CASES:
        raise InvalidInput(f"unknown case {label!r}; choose from {sorted(CASES)}")
    return replace(CASES[label], **overrides)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gen_features(n: int, p: int, lam: float, seed=0) -> np.ndarray:
    """Raw (unscaled) features with three-member dependence groups.

    Each group {j, j+1, j+2}, j in {1, 11, 21, 31, 41}, shares a common
    uniform; the affine map keeps mean 1/2 and variance 1/12, so values may
    leave [0, 1] once lam > 0.
    """
    if p < MIN_P_FULL:
        raise InvalidInput(f"p={p} is too small for the grouped design (need >= {MIN_P_FULL})")
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed)
    U = rng.random((n, p))
    shared = rng.random((n, len(RELEVANT)))
    X = U.copy()
    scale = 1.0 / math.sqrt(1.0 - 2.0 * lam + 2.0 * lam * lam)
    for g, j in enumerate(RELEVANT):
        cols = slice(j - 1, j - 1 + GROUP_WIDTH)
        Z = (1.0 - lam) * U[:, cols] + lam * shared[:, [g]]
        X[:, cols] = (Z - 0.5) * scale + 0.5
    return X


def friedman_mean(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 41:
        raise InvalidInput("the regression function needs at least 41 columns")
    return (5 * X[:, 0] + 10 * X[:, 10] + 20 * (X[:, 20] - 0.5) ** 2
            + 10 * np.sin(np.pi * X[:, 30] * X[:, 40]))


def friedman_response(X: np.ndarray, sigma: float, seed=0) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed)
    m = friedman_mean(X)
    if sigma == 0:
        return m
    return m + sigma * rng.standard_normal(m.shape[0])


def generate(spec: SimulationSpec, rep: int) -> Dataset:
    """Dataset for repetition ``rep``: response from raw features, then min-max scaled."""
    rng = _rng(derive_seed(spec.seed, rep))
    X = gen_features(spec.n, spec.p, spec.lam, rng)
    y = friedman_response(X, spec.sigma, rng)
    if spec.reduced:
        X = X[:, [lab - 1 for lab in REDUCED_LABELS]]
    return Dataset(scale_unit(X)[0], y, [f"X{lab}" for lab in spec.labels])


def _check_alphas(alphas):
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise InvalidInput(f"alpha={a} must lie in (0, 1)")


def run_size_power(spec: SimulationSpec, cfg: FactConfig, alphas=(0.1, 0.05, 0.025),
                   features: Sequence[int] = SIZE_POWER_FEATURES) -> list[dict]:
    """Rejection rate of the configured FACT test per (feature, alpha) over repetitions."""
    _check_alphas(alphas)
    if spec.reps < 1:
        raise InvalidInput("reps must be >= 1")
    cols = [spec.column(f) for f in features]
    hits = np.zeros((len(features), len(alphas)), dtype=np.int64)
    for r in range(spec.reps):
        data = generate(spec, r)
        rcfg = replace(cfg, seed=derive_seed(cfg.seed, r))
        for a, j in enumerate(cols):
            rep = fact_test(j, data, rcfg)
            for b, alpha in enumerate(alphas):
                if rep.p_value < alpha:
                    hits[a, b] += 1
    rows = []
    for a, f in enumerate(features):
        for b, alpha in enumerate(alphas):
            rows.append({"case": spec.case_label, "feature": f"X{f}", "alpha": alpha,
                         "rate": hits[a, b] / spec.reps})
    return rows


def _importance_scores(method, forest, data, cols, perm_reps, seed):
    if method == "MDI":
        s = mdi(forest, data.p).scores
        return {j: float(s[j]) for j in cols}
    if method == "MDA":
        return {j: mda(forest, data, j, perm_reps, seed) for j in cols}
    return {j: cpi(forest, data, j, reps=perm_reps, seed=seed) for j in cols}


def run_spurious(spec: SimulationSpec, methods=("MDI", "MDA", "CPI", "FACT"),
                 comparisons=((12, 1), (12, 21)), cfg: Optional[FactConfig] = None,
                 fp: Optional[ForestParams] = None, perm_reps: int = 50) -> list[dict]:
    """Fraction of repetitions in which the null feature outscores a relevant one.

    ``comparisons`` lists (null, relevant) label pairs. FACT scores features
    by their general statistic (a maximum of absolute values).
    """
    if spec.reps < 1:
        raise InvalidInput("reps must be >= 1")
    methods = tuple(methods)
    for m in methods:
        if m not in ("MDI", "MDA", "CPI", "FACT"):
            raise InvalidInput(f"unknown method {m!r}")
    cfg = cfg or FactConfig()
    fp = fp or cfg.forest_params
    labels = sorted({x for pair in comparisons for x in pair})
    cols = {lab: spec.column(lab) for lab in labels}
    wins = {(m, pair): 0 for m in methods for pair in comparisons}
    for r in range(spec.reps):
        data = generate(spec, r)
        rseed = derive_seed(cfg.seed, r)
        scores = {}
        base = [m for m in methods if m != "FACT"]
        if base:
            forest = fit_forest(data, fp, derive_seed(rseed, 0xF0))
            for m in base:
                scores[m] = _importance_scores(m, forest, data, list(cols.values()),
                                               perm_reps, derive_seed(rseed, 0xF1))
        if "FACT" in methods:
            rcfg = replace(cfg, seed=rseed, variant="general")
            scores["FACT"] = {j: fact_test(j, data, rcfg).stat for j in cols.values()}
        for m in methods:
            for pair in comparisons:
                if scores[m][cols[pair[0]]] > scores[m][cols[pair[1]]]:
                    wins[(m, pair)] += 1
    return [{"case": spec.case_label, "method": m,
             "comparison": f"X{pair[0]}>X{pair[1]}", "fraction": wins[(m, pair)] / spec.reps}
            for m in methods for pair in comparisons]


@dataclass
class QQResult:
    statistics: np.ndarray
    theoretical: np.ndarray
    empirical: np.ndarray
    ks_stat: float
    ks_pvalue: float

    def rows(self) -> list[dict]:
        return [{"theoretical": float(t), "empirical": float(e)}
                for t, e in zip(self.theoretical, self.empirical)]


def signed_statistic(j: int, data: Dataset, cfg: FactConfig, l: str = "identity",
                     q: int = 0) -> float:
    """Signed single statistic: the stat itself for one-component variants,
    component (l, q) for general."""
    rep = fact_test(j, data, cfg)
    if cfg.variant == "general":
        return rep.component(l, q)
    if cfg.variant == "ensemble":
        return rep.component(l, 0)
    return rep.stat


def qq_from(stats: np.ndarray) -> QQResult:
    stats = np.asarray(stats, dtype=np.float64)
    if stats.size == 0:
        raise InvalidInput("KS distance is undefined for zero repetitions")
    m = stats.size
    theo = sps.norm.ppf((np.arange(1, m + 1) - 0.5) / m)
    ks = sps.kstest(stats, "norm")
    return QQResult(stats, theo, np.sort(stats), float(ks.statistic), float(ks.pvalue))


def run_qq(spec: SimulationSpec, cfg: FactConfig, j_label: int, l: str = "identity",
           q: int = 0) -> QQResult:
    """One signed statistic per repetition for feature ``X{j_label}`` plus its KS fit to N(0,1)."""
    j = spec.column(j_label)
    out = np.empty(spec.reps)
    for r in range(spec.reps):
        out[r] = signed_statistic(j, generate(spec, r), replace(cfg, seed=derive_seed(cfg.seed, r)),
                                  l, q)
    return qq_from(out)


def run_debias(spec: SimulationSpec, j_label: int, cfg: Optional[FactConfig] = None,
               k_values: Iterable[int] = (3, 7)) -> dict:
    """Signed identity statistics of basic, conditioning (k=1) and general (each k) per repetition.

    All variants of one repetition share the same Yhat and ghat fits, so the
    comparison isolates the centering and the block size.
    """
    cfg = cfg or FactConfig(split_mode="oob")
    k_values = tuple(k_values)
    j = spec.column(j_label)
    keys = ["basic", "conditioning"] + [f"general_k{k}" for k in k_values]
    out = {k: np.empty(spec.reps) for k in keys}
    for r in range(spec.reps):
        data = generate(spec, r)
        rcfg = replace(cfg, seed=derive_seed(cfg.seed, r))
        nu = nuisance_for(j, data, rcfg)
        out["basic"][r] = report_basic(nu, "identity").stat
        out["conditioning"][r] = report_conditioning(nu, "identity").stat
        for k in k_values:
            out[f"general_k{k}"][r] = report_general(nu, k, rcfg.seed).component("identity", 0)
    return out


def rmse_diagnostic(spec: SimulationSpec, fp: Optional[ForestParams] = None,
                    test_points: int = 10000, reps: Optional[int] = None) -> np.ndarray:
    """Per-repetition out-of-sample RMSE of the full forest against the noiseless mean.

    Test points come from the same feature law and are scaled with the
    training columns' min/max. Repetition ``r`` is paired across sample
    sizes: training rows are drawn in fixed blocks, so a larger ``n`` extends
    the smaller sample, and the test points do not depend on ``n``.
    """
    fp = fp or ForestParams()
    reps = spec.reps if reps is None else reps
    out = np.empty(reps)
    for r in range(reps):
        blocks = []
        for b in range(-(-spec.n // RMSE_BLOCK)):
            rng = _rng(derive_seed(spec.seed, r, 0xB1, b))
            Xb = gen_features(RMSE_BLOCK, spec.p, spec.lam, rng)
            blocks.append((Xb, friedman_response(Xb, spec.sigma, rng)))
        X = np.concatenate([b[0] for b in blocks])[:spec.n]
        y = np.concatenate([b[1] for b in blocks])[:spec.n]
        Xt = gen_features(test_points, spec.p, spec.lam, derive_seed(spec.seed, r, 0xB2))
        mt = friedman_mean(Xt)
        if spec.reduced:
            keep = [lab - 1 for lab in REDUCED_LABELS]
            X, Xt = X[:, keep], Xt[:, keep]
        Xs, lo, hi = scale_unit(X)
        forest = fit_forest(Dataset(Xs, y), fp, derive_seed(spec.seed, r, 0xA0))
        pred = forest.predict(scale_unit(Xt, lo, hi)[0])
        out[r] = math.sqrt(float(np.mean((mt - pred) ** 2)))
    return out


def snr(component: str, sigma: float = 5.0, mc: int = 10**6, seed: int = 0) -> float:
    """Var(component)/sigma^2 for one additive term at lam = 0."""
    u = _rng(seed).random((mc, 2))
    terms = {
        "5X1": 5 * u[:, 0],
        "10X11": 10 * u[:, 0],
        "20(X21-0.5)^2": 20 * (u[:, 0] - 0.5) ** 2,
        "10sin(pi X31 X41)": 10 * np.sin(np.pi * u[:, 0] * u[:, 1]),
    }
    if component not in terms:
        raise InvalidInput(f"unknown component {component!r}")
    return float(np.var(terms[component]) / sigma ** 2)
