import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from fact_rf.errors import DegenerateVariance, EmptyOob, InvalidInput, PartitionTooSmall
from fact_rf.forest import Dataset, ForestParams
from fact_rf.stats import (CENTERED_SQUARE, IDENTITY, FactConfig, Transform, default_k_n,
                           fact_basic, fact_conditioning, fact_ensemble, fact_general,
                           fact_imbalanced, fact_test, imbalanced_infer_size, kappa_oracle,
                           p_value, partition, split_sample, threshold)

SMALL = ForestParams(n_trees=60)


def linear_data(n=160, p=4, seed=0, noise=1.0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, p))
    y = 3 * X[:, 0] + np.sin(3 * X[:, 1]) + noise * rng.normal(size=n)
    return Dataset(X, y)


class TestThresholds:
    def test_general_three_blocks(self):
        assert threshold(0.1, "general", 2, 3) == pytest.approx(2.40, abs=0.01)

    @pytest.mark.parametrize("alpha,t", [(0.1, 1.96), (0.05, 2.25), (0.025, 2.50)])
    def test_general_one_block(self, alpha, t):
        assert threshold(alpha, "general", 2, 1) == pytest.approx(t, abs=0.01)

    def test_basic(self):
        assert threshold(0.05, "basic") == pytest.approx(1.95996, abs=1e-5)

    def test_ensemble(self):
        assert threshold(0.1, "ensemble", 2) == pytest.approx(-norm.ppf(0.025))

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 2.0])
    def test_invalid_alpha(self, alpha):
        with pytest.raises(InvalidInput):
            threshold(alpha, "basic")

    def test_rejection_matches_p_value(self):
        for a in (0.1, 0.05, 0.025):
            t = threshold(a, "general", 2, 3)
            assert p_value(t + 1e-6, "general", 2, 3) < a < p_value(t - 1e-6, "general", 2, 3)


class TestPValues:
    def test_zero_statistic(self):
        assert p_value(0.0, "basic") == 1.0
        assert p_value(0.0, "ensemble", 2) == 1.0
        assert p_value(0.0, "general", 2, 3) == 1.0

    @settings(max_examples=200)
    @given(st.floats(0, 40), st.floats(0, 40),
           st.sampled_from(["basic", "imbalanced", "conditioning", "ensemble", "general"]),
           st.integers(1, 3), st.integers(1, 8))
    def test_bounded_and_monotone(self, a, b, variant, L, Q):
        pa, pb = p_value(a, variant, L, Q), p_value(b, variant, L, Q)
        assert 0.0 <= pa <= 1.0
        if a <= b:
            assert pa >= pb


class TestHelpers:
    def test_default_k_n(self):
        assert default_k_n(300) == 3 and default_k_n(500) == 3
        assert default_k_n(2) == 1

    def test_imbalanced_size(self):
        assert imbalanced_infer_size(1000) == 145

    @settings(max_examples=100)
    @given(st.integers(4, 400), st.integers(1, 10), st.integers(0, 2**63))
    def test_partition_sizes(self, n, k, seed):
        if n < 2 * k:
            with pytest.raises(PartitionTooSmall):
                partition(n, k, seed)
            return
        blocks = partition(n, k, seed)
        sizes = [b.size for b in blocks]
        assert max(sizes) - min(sizes) <= 1
        assert np.array_equal(np.sort(np.concatenate(blocks)), np.arange(n))

    def test_split_sample_disjoint(self):
        tr, inf = split_sample(11, 3, 0.5)
        assert set(tr) | set(inf) == set(range(11)) and not set(tr) & set(inf)

    def test_transforms(self):
        x = np.array([0.0, 0.5, 1.0])
        assert np.array_equal(IDENTITY(x), x)
        assert np.allclose(CENTERED_SQUARE(x), [0.25, 0.0, 0.25])
        assert np.all((CENTERED_SQUARE(x) >= 0) & (CENTERED_SQUARE(x) <= 1))
        with pytest.raises(InvalidInput):
            Transform("cube")


class TestBasic:
    def test_perfect_prediction_is_degenerate(self):
        rng = np.random.default_rng(0)
        X = rng.random((60, 3))
        tr = Dataset(X[:30], np.full(30, 4.0))
        inf = Dataset(X[30:], np.full(30, 4.0))
        with pytest.raises(DegenerateVariance):
            fact_basic(0, tr, inf, fp=SMALL)

    def test_constant_feature_is_degenerate(self):
        d = linear_data()
        X = d.features.copy()
        X[:, 2] = 0.5
        full = Dataset(X, d.response)
        with pytest.raises(DegenerateVariance):
            fact_basic(2, full.subset(range(80)), full.subset(range(80, 160)), fp=SMALL)

    def test_formula_against_direct_computation(self):
        from fact_rf.forest import fit_forest
        from fact_rf.stats import derive_seed
        d = linear_data(seed=1)
        tr, inf = d.subset(range(80)), d.subset(range(80, 160))
        rep = fact_basic(0, tr, inf, fp=SMALL, seed=5)
        f = fit_forest(tr, SMALL, derive_seed(5, 0, 1), features=[1, 2, 3])
        r = inf.response - f.predict(inf.features)
        c = inf.features[:, 0] - inf.features[:, 0].mean()
        dd = r * c
        s = math.sqrt(np.mean((dd - dd.mean()) ** 2))
        assert rep.stat == pytest.approx(dd.sum() / (math.sqrt(80) * s), rel=1e-12)
        assert rep.p_value == pytest.approx(2 * norm.cdf(-abs(rep.stat)))

    def test_dimension_mismatch(self):
        d = linear_data()
        with pytest.raises(InvalidInput):
            fact_basic(0, d, Dataset(d.features[:, :3], d.response), fp=SMALL)

    def test_inference_row_permutation_invariance(self):
        d = linear_data(seed=2)
        tr, inf = d.subset(range(80)), d.subset(range(80, 160))
        perm = np.random.default_rng(0).permutation(80)
        inf2 = inf.subset(perm)
        for fn in (fact_basic, fact_conditioning):
            a, b = fn(1, tr, inf, fp=SMALL, seed=3), fn(1, tr, inf2, fp=SMALL, seed=3)
            assert a.stat == pytest.approx(b.stat, abs=1e-10)
        a = fact_ensemble(1, tr, inf, fp=SMALL, seed=3)
        b = fact_ensemble(1, tr, inf2, fp=SMALL, seed=3)
        assert a.stat == pytest.approx(b.stat, abs=1e-10)


class TestVariants:
    def test_ensemble_single_transform_equals_basic(self):
        d = linear_data(seed=3)
        tr, inf = d.subset(range(80)), d.subset(range(80, 160))
        e = fact_ensemble(0, tr, inf, (IDENTITY,), fp=SMALL, seed=1)
        b = fact_basic(0, tr, inf, IDENTITY, fp=SMALL, seed=1)
        assert e.stat == pytest.approx(abs(b.stat), abs=1e-12)
        assert e.p_value == pytest.approx(b.p_value, abs=1e-12)

    def test_general_collapses_to_conditioning(self):
        d = linear_data(seed=4)
        base = FactConfig(transforms=(IDENTITY,), k_n=1, split_mode="sample_split",
                          train_fraction=0.5, forest_params=SMALL, seed=9)
        g = fact_test(0, d, base)
        c = fact_test(0, d, replace(base, variant="conditioning"))
        assert g.stat == pytest.approx(abs(c.stat), abs=1e-12)

    def test_general_max_and_p_value(self):
        d = linear_data(seed=5)
        rep = fact_general(0, d, FactConfig(k_n=3, forest_params=SMALL, seed=2))
        assert len(rep.components) == 6
        assert rep.stat == max(abs(c["value"]) for c in rep.components)
        assert rep.p_value == pytest.approx(min(1.0, 12 * norm.cdf(-rep.stat)))
        assert rep.threshold_at[0.1] == pytest.approx(2.40, abs=0.01)

    def test_general_partition_too_small(self):
        d = linear_data(n=20)
        with pytest.raises(PartitionTooSmall):
            fact_general(0, d, FactConfig(k_n=15, forest_params=SMALL))

    def test_oob_drop_limit(self):
        d = linear_data(n=60)
        with pytest.raises(EmptyOob):
            fact_general(0, d, FactConfig(k_n=1, forest_params=ForestParams(n_trees=2)))

    def test_imbalanced_split_sizes(self):
        rng = np.random.default_rng(0)
        X = rng.random((1000, 3))
        d = Dataset(X, X[:, 0] + rng.normal(size=1000))
        rep = fact_imbalanced(0, d, FactConfig(variant="imbalanced", transforms=(IDENTITY,),
                                               forest_params=SMALL))
        assert rep.n_effective == 145
        assert rep.p_value == pytest.approx(2 * norm.cdf(-abs(rep.stat)))

    def test_imbalanced_rejects_tiny_inference(self):
        with pytest.raises(PartitionTooSmall):
            fact_imbalanced(0, linear_data(n=30), FactConfig(variant="imbalanced",
                                                             forest_params=SMALL))

    def test_swapped_halves_differ(self):
        d = linear_data(seed=6)
        tr, inf = d.subset(range(80)), d.subset(range(80, 160))
        a = fact_basic(1, tr, inf, fp=SMALL, seed=1).stat
        b = fact_basic(1, inf, tr, fp=SMALL, seed=1).stat
        assert a != b

    @pytest.mark.parametrize("variant", ["basic", "imbalanced", "conditioning", "ensemble", "general"])
    @pytest.mark.parametrize("mode", ["oob", "sample_split"])
    def test_affine_response_invariance(self, variant, mode):
        d = linear_data(n=200, seed=7)
        cfg = FactConfig(variant=variant, split_mode=mode, forest_params=SMALL, seed=4)
        a = fact_test(1, d, cfg)
        b = fact_test(1, d.with_response(4.0 * d.response - 11.0), cfg)
        assert b.stat == pytest.approx(a.stat, abs=1e-9)
        for ca, cb in zip(a.components, b.components):
            assert cb["value"] == pytest.approx(ca["value"], abs=1e-9)

    def test_report_json(self):
        d = linear_data(seed=8)
        rep = fact_general(0, d, FactConfig(k_n=2, forest_params=SMALL))
        doc = json.loads(rep.to_json())
        for key in ("feature", "variant", "stat", "p_value", "components", "config_echo"):
            assert key in doc
        assert {"l", "q", "value"} <= set(doc["components"][0])
        assert doc["config_echo"]["k_n"] == 2

    def test_config_round_trip(self):
        cfg = FactConfig(variant="ensemble", k_n=4, forest_params=ForestParams(n_trees=9), seed=3)
        assert FactConfig.from_dict(cfg.to_dict()) == cfg

    def test_invalid_config(self):
        with pytest.raises(InvalidInput):
            FactConfig(variant="nope")
        with pytest.raises(InvalidInput):
            FactConfig(transforms=())
        with pytest.raises(InvalidInput):
            FactConfig(train_fraction=1.0)


class TestKappa:
    @pytest.mark.parametrize("a", [0.0, 0.25, 0.5])
    def test_quadratic_closed_form(self, a):
        k = kappa_oracle(lambda x: (x - a) ** 2, IDENTITY, 10**5, seed=1)
        assert abs(k.kappa_marginal - (1 / 12 - a / 6)) < 3 * k.mc_stderr
        assert k.kappa_conditional == k.kappa_marginal

    def test_two_transforms_lower_bound(self):
        h = lambda x: x + x ** 2
        total = sum(abs(kappa_oracle(h, t, 10**5, seed=2).kappa_marginal)
                    for t in (IDENTITY, CENTERED_SQUARE))
        assert total >= 0.001 * 2

    def test_monotone_h_positive(self):
        for h in (np.exp, lambda x: x ** 3, lambda x: np.log1p(x)):
            assert kappa_oracle(h, IDENTITY, 10**5, seed=3, noise_sd=0.5).kappa_marginal > 0

    def test_stderr_positive_and_sample_floor(self):
        assert kappa_oracle(lambda x: x, IDENTITY, 10**4).mc_stderr > 0
        with pytest.raises(InvalidInput):
            kappa_oracle(lambda x: x, IDENTITY, 100)


NULL_REPS = 500
VARIANTS = ["basic", "imbalanced", "conditioning", "ensemble", "general"]


@pytest.fixture(scope="module")
def null_pvalues():
    # Y independent of X; 500 seeds per variant
    fp = ForestParams(n_trees=100)
    out = {v: [] for v in VARIANTS}
    for s in range(NULL_REPS):
        rng = np.random.default_rng(10_000 + s)
        d = Dataset(rng.random((200, 3)), rng.normal(size=200))
        for v in out:
            mode = "oob" if v == "general" else "sample_split"
            cfg = FactConfig(variant=v, split_mode=mode, k_n=2, forest_params=fp, seed=s)
            out[v].append(fact_test(0, d, cfg).p_value)
    return {v: np.array(p) for v, p in out.items()}


@pytest.mark.slow
@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("alpha", [0.1, 0.05])
def test_null_size_within_binomial_band(null_pvalues, variant, alpha):
    rate = float(np.mean(null_pvalues[variant] < alpha))
    band = 3 * math.sqrt(alpha * (1 - alpha) / NULL_REPS)
    assert abs(rate - alpha) <= band, rate


@pytest.mark.slow
def test_square_transform_adds_power():
    ident, ens = 0, 0
    reps = 40
    for s in range(reps):
        rng = np.random.default_rng(500 + s)
        X = rng.random((500, 5))
        y = 10 * (X[:, 0] - 0.5) ** 2 + X[:, 1] + rng.normal(size=500)
        d = Dataset(X, y)
        tr, inf = d.subset(range(250)), d.subset(range(250, 500))
        fp = ForestParams(n_trees=200)
        ens += fact_ensemble(0, tr, inf, (IDENTITY, CENTERED_SQUARE), fp, s).p_value < 0.05
        ident += fact_basic(0, tr, inf, IDENTITY, fp, s).p_value < 0.05
    assert ens / reps > 0.5
    assert ident / reps <= 0.05 + 3 * math.sqrt(0.05 * 0.95 / reps)
