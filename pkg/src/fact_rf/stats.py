"""FACT feature-significance statistics.

Every variant reduces to products ``d_i = r_i * c_i`` of a response residual
``r_i = Y_i - Yhat(X_{-ij})`` and a centered transformed feature ``c_i``.
The variants differ in how ``c_i`` is centered (sample mean or a forest
estimate of E[g(X_j) | X_{-j}]), in how many transforms and inference blocks
are maximized over, and in the matching Bonferroni-style p-value.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .errors import (DegenerateVariance, DimensionMismatch, EmptyOob, InvalidInput,
                     PartitionTooSmall)
from .forest import Dataset, ForestParams, fit_forest

log = logging.getLogger("fact_rf")

VARIANTS = ("basic", "imbalanced", "conditioning", "ensemble", "general")
SPLIT_MODES = ("oob", "sample_split")
MAX_OOB_DROP = 0.10
REPORT_ALPHAS = (0.1, 0.05, 0.025)

# stream tags for derived seeds
_ROLE_Y = 1
_ROLE_G = 2
_ROLE_SPLIT = 3
_ROLE_PARTITION = 4


def derive_seed(*parts: int) -> int:
    """Deterministic 64-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(x) for x in parts]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Transform:
    """Feature transform g. ``centered_square`` is (x - m)^2 for a supplied center m."""

    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in ("identity", "centered_square"):
            raise InvalidInput(f"unknown transform {self.kind!r}")

    def __call__(self, x: np.ndarray, center: Optional[float] = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "identity":
            return x.copy()
        m = float(np.mean(x)) if center is None else float(center)
        return (x - m) ** 2

    @property
    def name(self) -> str:
        return self.kind


IDENTITY = Transform("identity")
CENTERED_SQUARE = Transform("centered_square")


def _as_transform(t) -> Transform:
    return t if isinstance(t, Transform) else Transform(str(t))


def default_k_n(n: int) -> int:
    """Nearest integer to ln(n)/2, at least 1."""
    return max(1, int(math.floor(math.log(n) / 2 + 0.5)))


def imbalanced_infer_size(total: int) -> int:
    """Inference-sample size round(T / ln T) for a full sample of size T."""
    if total < 3:
        raise InvalidInput("need at least 3 rows for an imbalanced split")
    return int(math.floor(total / math.log(total) + 0.5))


@dataclass(frozen=True)
class FactConfig:
    """Test configuration.

    ``k_n=None`` picks :func:`default_k_n` of the inference size.
    ``n_infer`` overrides the imbalanced inference size. ``train_fraction``
    only applies to ``split_mode="sample_split"``.
    """

    variant: str = "general"
    transforms: tuple = (IDENTITY, CENTERED_SQUARE)
    k_n: Optional[int] = None
    split_mode: str = "oob"
    train_fraction: float = 0.5
    n_infer: Optional[int] = None
    forest_params: ForestParams = field(default_factory=ForestParams)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInput(f"unknown variant {self.variant!r}")
        if self.split_mode not in SPLIT_MODES:
            raise InvalidInput(f"unknown split_mode {self.split_mode!r}")
        ts = tuple(_as_transform(t) for t in self.transforms)
        if not ts:
            raise InvalidInput("at least one transform is required")
        object.__setattr__(self, "transforms", ts)
        if self.k_n is not None and self.k_n < 1:
            raise InvalidInput("k_n must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidInput("train_fraction must be in (0, 1)")
        if self.variant == "imbalanced" and self.split_mode == "oob":
            object.__setattr__(self, "split_mode", "sample_split")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "transforms": [t.name for t in self.transforms],
            "k_n": self.k_n,
            "split_mode": self.split_mode,
            "train_fraction": self.train_fraction,
            "n_infer": self.n_infer,
            "forest_params": self.forest_params.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FactConfig":
        d = dict(d)
        if "forest_params" in d:
            d["forest_params"] = ForestParams(**d["forest_params"])
        if "transforms" in d:
            d["transforms"] = tuple(Transform(t) for t in d["transforms"])
        return cls(**d)


@dataclass
class FactReport:
    feature: int
    variant: str
    stat: float
    p_value: float
    components: list  # [{"l": name, "q": block, "value": float}]
    threshold_at: dict
    sigma_hats: dict
    n_effective: int
    config_echo: dict = field(default_factory=dict)

    def component(self, l: str, q: int = 0) -> float:
        for c in self.components:
            if c["l"] == l and c["q"] == q:
                return c["value"]
        raise KeyError((l, q))

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "variant": self.variant,
            "stat": self.stat,
            "p_value": self.p_value,
            "components": self.components,
            "threshold_at": {str(a): t for a, t in self.threshold_at.items()},
            "sigma_hats": self.sigma_hats,
            "n_effective": self.n_effective,
            "config_echo": self.config_echo,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def threshold(alpha: float, variant: str = "general", n_transforms: int = 2,
              n_blocks: int = 1) -> float:
    """Rejection threshold t with P(max |N(0,1)| over the tested components > t) <= alpha.

    basic, imbalanced and conditioning use -Phi^{-1}(alpha/2); ensemble
    divides alpha by |L| more; general by |L||Q| (4|Q| at |L| = 2).
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidInput("alpha must lie in (0, 1)")
    return float(-norm.ppf(alpha / _multiplicity(variant, n_transforms, n_blocks)))


def _multiplicity(variant, n_transforms, n_blocks) -> int:
    if variant in ("basic", "imbalanced", "conditioning"):
        return 2
    if variant == "ensemble":
        return 2 * n_transforms
    if variant == "general":
        return 2 * n_transforms * n_blocks
    raise InvalidInput(f"unknown variant {variant!r}")


def p_value(stat: float, variant: str = "general", n_transforms: int = 2,
            n_blocks: int = 1) -> float:
    m = _multiplicity(variant, n_transforms, n_blocks)
    return float(min(1.0, m * norm.cdf(-abs(stat))))


def _sigma_hat(d: np.ndarray) -> float:
    return float(np.sqrt(np.mean((d - d.mean()) ** 2)))


def _check_spread(r, c, y_scale, label):
    tol = 1e-12
    if np.max(np.abs(r)) <= tol * max(1.0, y_scale):
        raise DegenerateVariance(f"{label}: response residuals are all zero")
    if np.max(np.abs(c)) <= tol:
        raise DegenerateVariance(f"{label}: centered transformed feature is constant")


def _normalized(d: np.ndarray, label: str) -> tuple[float, float]:
    """(n^{-1/2} sum d / sigma_hat, sigma_hat)."""
    s = _sigma_hat(d)
    if not s > 1e-300 or s <= 1e-13 * float(np.max(np.abs(d))):
        raise DegenerateVariance(f"{label}: zero variance of the residual products")
    return float(d.sum() / (math.sqrt(d.shape[0]) * s)), s


@dataclass
class Nuisance:
    """Residuals and transformed features on the inference rows, ready for any variant.

    ``rows`` indexes the inference rows that survived (OOB drops rows that
    every tree saw). ``gx[l]`` is g^{(l)}(X_j) with inference-sample
    centering and ``ghat[l]`` the forest estimate of E[g^{(l)}(X_j) | X_{-j}]
    (``None`` until requested).
    """

    feature: int
    rows: np.ndarray
    resid: np.ndarray
    y_scale: float
    transforms: tuple
    gx: dict
    ghat: dict
    mode: str

    @property
    def n(self) -> int:
        return self.rows.shape[0]


def _drop_missing(masks, n_total):
    keep = np.logical_and.reduce(masks)
    dropped = n_total - int(keep.sum())
    if dropped:
        frac = dropped / n_total
        log.warning("dropping %d of %d rows with no out-of-bag trees", dropped, n_total)
        if frac > MAX_OOB_DROP:
            raise EmptyOob(f"{dropped} of {n_total} rows have no out-of-bag trees")
    return keep


def nuisance_split(j: int, train: Dataset, infer: Dataset, transforms: Sequence,
                   fp: Optional[ForestParams] = None, seed: int = 0,
                   conditional: bool = True) -> Nuisance:
    """Fit Yhat (and ghat per transform if ``conditional``) on ``train``; evaluate on ``infer``."""
    fp = fp or ForestParams()
    if train.p != infer.p:
        raise DimensionMismatch("train and inference samples differ in feature count")
    _check_feature(j, train.p)
    transforms = tuple(_as_transform(t) for t in transforms)
    others = [k for k in range(train.p) if k != j]
    if not others:
        raise InvalidInput("testing needs at least one other feature")
    f_y = fit_forest(train, fp, derive_seed(seed, j, _ROLE_Y), features=others)
    resid = infer.response - f_y.predict(infer.features)
    xj = infer.features[:, j]
    gx, ghat = {}, {}
    for idx, t in enumerate(transforms):
        gx[t.name] = t(xj)
        if conditional:
            target = t(train.features[:, j])
            f_g = fit_forest(train.with_response(target), fp,
                             derive_seed(seed, j, _ROLE_G, idx), features=others)
            ghat[t.name] = f_g.predict(infer.features)
    return Nuisance(j, np.arange(infer.n), resid, _scale(infer.response), transforms,
                    gx, ghat if conditional else {}, "sample_split")


def nuisance_oob(j: int, data: Dataset, transforms: Sequence,
                 fp: Optional[ForestParams] = None, seed: int = 0,
                 conditional: bool = True) -> Nuisance:
    """Out-of-bag residuals on the full sample; no separate training set."""
    fp = fp or ForestParams()
    _check_feature(j, data.p)
    if not fp.bootstrap:
        raise InvalidInput("out-of-bag mode needs bootstrap resampling")
    transforms = tuple(_as_transform(t) for t in transforms)
    others = [k for k in range(data.p) if k != j]
    if not others:
        raise InvalidInput("testing needs at least one other feature")
    f_y = fit_forest(data, fp, derive_seed(seed, j, _ROLE_Y), features=others)
    yhat = f_y.predict_oob(data.features)
    xj = data.features[:, j]
    raw_g, preds = {}, {}
    for idx, t in enumerate(transforms):
        raw_g[t.name] = t(xj)
        if conditional:
            f_g = fit_forest(data.with_response(raw_g[t.name]), fp,
                             derive_seed(seed, j, _ROLE_G, idx), features=others)
            preds[t.name] = f_g.predict_oob(data.features)
    keep = _drop_missing([~np.isnan(yhat)] + [~np.isnan(v) for v in preds.values()], data.n)
    rows = np.nonzero(keep)[0]
    gx = {t.name: t(xj[rows]) for t in transforms}
    ghat = {k: v[rows] for k, v in preds.items()}
    return Nuisance(j, rows, data.response[rows] - yhat[rows], _scale(data.response[rows]),
                    transforms, gx, ghat, "oob")


def _scale(y) -> float:
    return float(np.max(np.abs(y))) if y.size else 0.0


def _check_feature(j, p):
    if not 0 <= j < p:
        raise InvalidInput(f"feature index {j} out of range for p={p}")


def basic_component(nu: Nuisance, l: str) -> tuple[float, float]:
    c = nu.gx[l] - nu.gx[l].mean()
    _check_spread(nu.resid, c, nu.y_scale, f"feature {nu.feature}, {l}")
    return _normalized(nu.resid * c, f"feature {nu.feature}, {l}")


def conditioning_component(nu: Nuisance, l: str) -> tuple[float, float]:
    if l not in nu.ghat:
        raise InvalidInput("conditioning needs ghat forests")
    c = nu.gx[l] - nu.ghat[l]
    _check_spread(nu.resid, c, nu.y_scale, f"feature {nu.feature}, {l}")
    return _normalized(nu.resid * c, f"feature {nu.feature}, {l}")


def partition(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle 0..n-1 with ``seed`` and cut into k contiguous blocks whose sizes differ by <= 1."""
    if k < 1:
        raise InvalidInput("k must be >= 1")
    if k >= n:
        raise PartitionTooSmall(f"k_n={k} must be below the inference size {n}")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    blocks = np.array_split(perm, k)
    if min(b.size for b in blocks) < 2:
        raise PartitionTooSmall(f"{n} inference rows cannot fill {k} blocks of at least 2")
    return [np.sort(b) for b in blocks]


def general_components(nu: Nuisance, k_n: int, seed: int) -> tuple[list, dict]:
    """Per-(l, q) statistics with sigma_hat over the whole inference sample."""
    blocks = partition(nu.n, k_n, derive_seed(seed, nu.feature, _ROLE_PARTITION))
    comps, sig = [], {}
    for t in nu.transforms:
        l = t.name
        if l not in nu.ghat:
            raise InvalidInput("general FACT needs ghat forests")
        c = nu.gx[l] - nu.ghat[l]
        label = f"feature {nu.feature}, {l}"
        _check_spread(nu.resid, c, nu.y_scale, label)
        d = nu.resid * c
        s = _sigma_hat(d)
        if not s > 1e-300 or s <= 1e-13 * float(np.max(np.abs(d))):
            raise DegenerateVariance(f"{label}: zero variance of the residual products")
        sig[l] = s
        for q, b in enumerate(blocks):
            comps.append({"l": l, "q": q, "value": float(d[b].sum() / (math.sqrt(b.size) * s))})
    return comps, sig


def _thresholds(variant, n_transforms, n_blocks) -> dict:
    return {a: threshold(a, variant, n_transforms, n_blocks) for a in REPORT_ALPHAS}


def _single_report(j, variant, l, stat, sig, n, echo) -> FactReport:
    return FactReport(j, variant, stat, p_value(stat, variant),
                      [{"l": l, "q": 0, "value": stat}], _thresholds(variant, 1, 1),
                      {l: sig}, n, echo)


def report_basic(nu: Nuisance, l: str = "identity", variant: str = "basic", echo=None) -> FactReport:
    stat, sig = basic_component(nu, l)
    return _single_report(nu.feature, variant, l, stat, sig, nu.n, echo or {})


def report_conditioning(nu: Nuisance, l: str = "identity", echo=None) -> FactReport:
    stat, sig = conditioning_component(nu, l)
    return _single_report(nu.feature, "conditioning", l, stat, sig, nu.n, echo or {})


def report_ensemble(nu: Nuisance, echo=None) -> FactReport:
    comps, sig = [], {}
    for t in nu.transforms:
        v, s = basic_component(nu, t.name)
        comps.append({"l": t.name, "q": 0, "value": v})
        sig[t.name] = s
    L = len(nu.transforms)
    stat = max(abs(c["value"]) for c in comps)
    return FactReport(nu.feature, "ensemble", stat, p_value(stat, "ensemble", L), comps,
                      _thresholds("ensemble", L, 1), sig, nu.n, echo or {})


def report_general(nu: Nuisance, k_n: Optional[int] = None, seed: int = 0, echo=None) -> FactReport:
    k = default_k_n(nu.n) if k_n is None else k_n
    comps, sig = general_components(nu, k, seed)
    L = len(nu.transforms)
    stat = max(abs(c["value"]) for c in comps)
    return FactReport(nu.feature, "general", stat, p_value(stat, "general", L, k), comps,
                      _thresholds("general", L, k), sig, nu.n, echo or {})


def fact_basic(j: int, train: Dataset, infer: Dataset, g=IDENTITY,
               fp: Optional[ForestParams] = None, seed: int = 0) -> FactReport:
    """Basic statistic: residuals times the sample-centered g(X_j), self-normalized."""
    g = _as_transform(g)
    nu = nuisance_split(j, train, infer, (g,), fp, seed, conditional=False)
    return report_basic(nu, g.name)


def fact_conditioning(j: int, train: Dataset, infer: Dataset, g=IDENTITY,
                      fp: Optional[ForestParams] = None, seed: int = 0) -> FactReport:
    """Like :func:`fact_basic` but centering g(X_j) by a forest fit of g(X_j) on X_{-j}."""
    g = _as_transform(g)
    nu = nuisance_split(j, train, infer, (g,), fp, seed, conditional=True)
    return report_conditioning(nu, g.name)


def fact_ensemble(j: int, train: Dataset, infer: Dataset, transforms=(IDENTITY, CENTERED_SQUARE),
                  fp: Optional[ForestParams] = None, seed: int = 0) -> FactReport:
    nu = nuisance_split(j, train, infer, transforms, fp, seed, conditional=False)
    return report_ensemble(nu)


def split_sample(n: int, seed: int, train_fraction: float = 0.5,
                 n_infer: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Random (train, inference) row split; ``n_infer`` overrides the fraction."""
    if n_infer is None:
        n_infer = n - int(math.floor(train_fraction * n + 0.5))
    if not 0 < n_infer < n:
        raise InvalidInput(f"cannot split {n} rows into a nonempty train/inference pair")
    perm = np.random.Generator(np.random.PCG64(derive_seed(seed, _ROLE_SPLIT))).permutation(n)
    return np.sort(perm[n_infer:]), np.sort(perm[:n_infer])


def inference_size(n: int, cfg: FactConfig) -> int:
    """Rows the statistic of ``cfg`` is computed on for a full sample of n rows."""
    if cfg.variant == "imbalanced":
        return cfg.n_infer if cfg.n_infer is not None else imbalanced_infer_size(max(n, 3))
    if cfg.split_mode == "oob":
        return n
    return n - int(math.floor(cfg.train_fraction * n + 0.5))


def fact_imbalanced(j: int, full: Dataset, cfg: FactConfig) -> FactReport:
    """Basic statistic on an imbalanced split with a small inference sample."""
    n_inf = cfg.n_infer if cfg.n_infer is not None else imbalanced_infer_size(full.n)
    if n_inf < 10:
        raise PartitionTooSmall(f"imbalanced inference sample has {n_inf} rows; need >= 10")
    tr, inf = split_sample(full.n, cfg.seed, n_infer=n_inf)
    g = cfg.transforms[0]
    nu = nuisance_split(j, full.subset(tr), full.subset(inf), (g,), cfg.forest_params,
                        cfg.seed, conditional=False)
    return report_basic(nu, g.name, "imbalanced", cfg.to_dict())


def nuisance_for(j: int, full: Dataset, cfg: FactConfig, conditional: bool = True) -> Nuisance:
    """Nuisance fits for ``cfg.split_mode`` on a single full sample."""
    if cfg.split_mode == "oob":
        return nuisance_oob(j, full, cfg.transforms, cfg.forest_params, cfg.seed, conditional)
    tr, inf = split_sample(full.n, cfg.seed, cfg.train_fraction)
    return nuisance_split(j, full.subset(tr), full.subset(inf), cfg.transforms,
                          cfg.forest_params, cfg.seed, conditional)


def fact_general(j: int, full: Dataset, cfg: FactConfig) -> FactReport:
    """Max over transforms and inference blocks of conditioned, self-normalized statistics."""
    nu = nuisance_for(j, full, cfg)
    if cfg.k_n is not None and cfg.k_n >= nu.n:
        raise PartitionTooSmall(f"k_n={cfg.k_n} must be below the inference size {nu.n}")
    return report_general(nu, cfg.k_n, cfg.seed, cfg.to_dict())


def fact_test(j: int, full: Dataset, cfg: FactConfig) -> FactReport:
    """Run ``cfg.variant`` on a single sample, splitting or using OOB as configured."""
    echo = cfg.to_dict()
    if cfg.variant == "imbalanced":
        return fact_imbalanced(j, full, cfg)
    if cfg.variant == "general":
        return fact_general(j, full, cfg)
    g = cfg.transforms[0].name
    if cfg.variant == "basic":
        return report_basic(nuisance_for(j, full, cfg, conditional=False), g, echo=echo)
    if cfg.variant == "conditioning":
        return report_conditioning(nuisance_for(j, full, cfg), g, echo=echo)
    return report_ensemble(nuisance_for(j, full, cfg, conditional=False), echo=echo)


@dataclass(frozen=True)
class PopulationKappa:
    kappa_marginal: float
    kappa_conditional: float
    mc_samples: int
    mc_stderr: float


def kappa_oracle(h: Callable[[np.ndarray], np.ndarray], transform=IDENTITY,
                 mc_samples: int = 10**6, seed: int = 0, noise_sd: float = 0.0,
                 n_other: int = 3, other: Optional[Callable] = None) -> PopulationKappa:
    """Monte Carlo kappa for Y = h(X_j) + H(X_{-j}) + eps with iid uniform features.

    For this family E[Y | X_{-j}] = E h(U) + H(X_{-j}) and, by independence,
    E[g(X_j) | X_{-j}] = E g(U), so both kappas are covariances of
    h(X_j) + eps with g(X_j); both are estimated from the same draws. The
    centered square uses the population center E X_j = 1/2.
    """
    if mc_samples < 10**4:
        raise InvalidInput("mc_samples must be at least 1e4")
    t = _as_transform(transform)
    rng = np.random.Generator(np.random.PCG64(seed))
    X = rng.random((mc_samples, 1 + n_other))
    xj = X[:, 0]
    H = other if other is not None else (lambda Z: Z.sum(axis=1))
    eps = noise_sd * rng.standard_normal(mc_samples) if noise_sd > 0 else 0.0

    def g(x):
        return t(x, center=0.5)

    Eh = integrate.quad(lambda u: float(h(np.array([u]))[0]), 0.0, 1.0)[0]
    Eg = integrate.quad(lambda u: float(g(np.array([u]))[0]), 0.0, 1.0)[0]
    # E[H(X_{-j})] is irrelevant: it cancels from Y - E[Y | X_{-j}]
    y = h(xj) + H(X[:, 1:]) + eps
    cond_mean_y = Eh + H(X[:, 1:])
    prod = (y - cond_mean_y) * (g(xj) - Eg)
    k = float(prod.mean())
    stderr = float(np.std(prod, ddof=1) / math.sqrt(mc_samples))
    return PopulationKappa(k, k, mc_samples, max(stderr, np.finfo(float).tiny))
