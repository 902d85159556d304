from dataclasses import replace

import numpy as np
import pytest

from fact_rf.errors import InvalidInput
from fact_rf.forest import ForestParams
from fact_rf.stats import FactConfig
from fact_rf.simulate import (CASES, SimulationSpec, friedman_mean, gen_features, generate,
                              preset, qq_from, rmse_diagnostic, run_debias, run_qq,
                              run_size_power, run_spurious, snr)

FAST = FactConfig(k_n=2, forest_params=ForestParams(n_trees=40))


@pytest.fixture(scope="module")
def X():
    return gen_features(100_000, 50, 0.6, seed=0)


class TestFeatureLaw:
    def test_within_group_correlation(self, X):
        r = np.corrcoef(X[:, 10], X[:, 11])[0, 1]
        assert abs(r - 0.36 / 0.52) < 0.01

    def test_marginal_moments(self, X):
        assert np.allclose(X[:, :45].mean(axis=0), 0.5, atol=0.01)
        assert np.allclose(X[:, :45].var(axis=0), 1 / 12, atol=0.003)

    def test_other_features_independent(self, X):
        C = np.corrcoef(X[:, [0, 3, 10, 13, 44]].T)
        assert np.all(np.abs(C[np.triu_indices(5, 1)]) < 0.02)

    def test_lambda_zero_is_uniform(self):
        X = gen_features(1000, 45, 0.0, seed=1)
        assert X.min() >= 0 and X.max() <= 1

    def test_p_too_small(self):
        with pytest.raises(InvalidInput):
            gen_features(10, 20, 0.3)


class TestFriedman:
    def test_center_value(self):
        assert friedman_mean(np.full((1, 50), 0.5))[0] == pytest.approx(14.5711, abs=1e-4)

    def test_snr(self):
        assert snr("10X11") == pytest.approx(1 / 3, abs=0.002)

    def test_generate_scaled_and_named(self):
        d = generate(SimulationSpec(100, 50, 0.3, reps=1), 0)
        assert d.features.min() == 0.0 and d.features.max() == 1.0
        assert d.names()[11] == "X12"

    def test_reduced_design(self):
        spec = CASES["VI"]
        d = generate(replace(spec, n=50), 0)
        assert d.p == 10 and spec.column(12) == 3

    def test_generate_deterministic(self):
        spec = SimulationSpec(60, 45, 0.6, seed=7)
        a, b = generate(spec, 3), generate(spec, 3)
        assert np.array_equal(a.features, b.features) and np.array_equal(a.response, b.response)
        assert not np.array_equal(a.response, generate(spec, 4).response)


class TestRunners:
    def test_preset_unknown(self):
        with pytest.raises(InvalidInput):
            preset("VII")

    def test_alpha_one_invalid(self):
        with pytest.raises(InvalidInput):
            run_size_power(SimulationSpec(80, 45, 0.3, reps=1), FAST, alphas=(1.0,))

    def test_qq_zero_reps(self):
        with pytest.raises(InvalidInput):
            qq_from(np.array([]))
        with pytest.raises(InvalidInput):
            run_qq(SimulationSpec(80, 45, 0.0, reps=0), FAST, 2)

    def test_qq_rows(self):
        res = qq_from(np.array([0.3, -1.0, 2.0]))
        assert [r["empirical"] for r in res.rows()] == [-1.0, 0.3, 2.0]
        assert res.theoretical[1] == 0.0

    def test_size_power_rows(self):
        spec = SimulationSpec(80, 45, 0.3, reps=2)
        rows = run_size_power(spec, FAST, alphas=(0.1,), features=(11, 12))
        assert [r["feature"] for r in rows] == ["X11", "X12"]
        assert all(r["rate"] in (0.0, 0.5, 1.0) for r in rows)
        assert rows == run_size_power(spec, FAST, alphas=(0.1,), features=(11, 12))

    def test_spurious_rows(self):
        spec = SimulationSpec(80, 45, 0.6, reps=1)
        rows = run_spurious(spec, methods=("MDI", "FACT"), comparisons=((12, 21),), cfg=FAST,
                            perm_reps=2)
        assert {r["comparison"] for r in rows} == {"X12>X21"}
        with pytest.raises(InvalidInput):
            run_spurious(spec, methods=("LIME",), cfg=FAST)

    def test_debias_shares_nuisance(self):
        spec = SimulationSpec(80, 45, 0.6, reps=2)
        out = run_debias(spec, 12, FactConfig(forest_params=ForestParams(n_trees=40)), (2,))
        assert set(out) == {"basic", "conditioning", "general_k2"}
        assert all(v.shape == (2,) and np.all(np.isfinite(v)) for v in out.values())

    def test_rmse_noiseless_smaller(self):
        spec = SimulationSpec(200, 45, 0.0, reps=1)
        fp = ForestParams(n_trees=50)
        noisy = rmse_diagnostic(spec, fp, test_points=500)
        clean = rmse_diagnostic(replace(spec, sigma=0.0), fp, test_points=500)
        assert clean[0] < noisy[0]
