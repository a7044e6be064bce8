import json
import math

import numpy as np
import pytest

from stwcr.core import SmoothingParams
from stwcr.eif import StwcrQuery, StwcrveQuery
from stwcr.errors import EstimationError, HarnessError, InvalidParameterError
from stwcr.simulation import (
    MetricsRow,
    ScenarioSpec,
    SimConfig,
    compute_truths,
    direct_plain_smoothed_risk,
    gamma_truncation_points,
    gen_dataset,
    oracle_estimand,
    query_label,
    run_monte_carlo,
    true_nuisances,
    truth_cache_key,
)

PARAMS = SmoothingParams(t=0.1, epsilon=0.1, h=0.1, h0=0.1, h1=0.1)


@pytest.fixture(scope="module")
def big_I():
    return gen_dataset(ScenarioSpec("I", 100_000, 99))


class TestGenDataset:
    def test_exposure_rate(self, big_I):
        assert abs(big_I.x[:, 0].mean() - 0.30) < 0.005

    def test_baseline_distribution_among_naive(self, big_I):
        naive = big_I.x[:, 0] == 0
        values, probs = (1, 2, 3, 4, 5), (0.2, 0.3, 0.4, 0.05, 0.05)
        for v, p in zip(values, probs):
            frac = np.mean(big_I.b[naive] == v)
            assert abs(frac - p) < 0.006, (v, frac)

    def test_scenario_iii_mass_at_zero(self):
        ds = gen_dataset(ScenarioSpec("III", 100_000, 98))
        naive = ds.x[:, 0] == 0
        assert abs(np.mean(ds.b[naive] == 0) - 0.60) < 0.007

    def test_marker_structural_recovery(self, big_I):
        X = np.column_stack([np.ones(len(big_I)), big_I.b, big_I.a,
                             big_I.x[:, 0], big_I.x[:, 1] ** 2])
        coef, *_ = np.linalg.lstsq(X, big_I.s, rcond=None)
        resid = big_I.s - X @ coef
        sd = math.sqrt(resid @ resid / (len(big_I) - 5))
        for est, target in zip(coef, (4.0, 1.0, 1.0, -0.5, 1.0)):
            assert abs(est - target) < 0.03
        assert abs(sd - 1.0) < 0.01

    def test_treatment_randomized(self, big_I):
        assert abs(big_I.a.mean() - 0.5) < 0.01
        # independence from baseline: mean b equal across arms
        assert abs(big_I.b[big_I.a == 1].mean() - big_I.b[big_I.a == 0].mean()) < 0.03

    def test_scenario_ii_truncated(self):
        ds = gen_dataset(ScenarioSpec("II", 100_000, 97))
        q_naive, q_exposed = gamma_truncation_points()
        naive = ds.x[:, 0] == 0
        assert ds.b[naive].max() <= q_naive
        assert ds.b[~naive].max() <= q_exposed
        # clamping leaves visible mass at the cap
        assert np.mean(ds.b[naive] == q_naive) > 0.001

    def test_deterministic(self):
        a = gen_dataset(ScenarioSpec("I", 500, 123))
        b = gen_dataset(ScenarioSpec("I", 500, 123))
        assert np.array_equal(a.s, b.s) and np.array_equal(a.y, b.y)

    def test_invalid_spec(self):
        with pytest.raises(InvalidParameterError):
            ScenarioSpec("IV", 100, 1)
        with pytest.raises(InvalidParameterError):
            ScenarioSpec("I", 10, 1)


class TestTrueNuisances:
    def test_outcome_value(self):
        nuis = true_nuisances("I")
        r = nuis.outcome.predict_at(1, np.array([8.0]), np.array([2.0]),
                                    np.array([[0.0, 0.5, 0.5]]))[0]
        assert r == pytest.approx(0.389361, abs=1e-6)

    def test_density_mode(self):
        nuis = true_nuisances("I")
        b, x = np.array([3.0]), np.array([[0.0, 0.5, 0.5]])
        mu = nuis.cond_density.mean(1, b, x)
        dens = nuis.cond_density.density_at(1, mu, b, x)[0]
        assert dens == pytest.approx(0.3989423, abs=1e-6)

    def test_propensity_constant(self):
        nuis = true_nuisances("II")
        assert np.all(nuis.propensity.prob(1, np.array([0.0, 5.0]), np.zeros((2, 3))) == 0.5)

    def test_support_covers_marker_means(self):
        nuis = true_nuisances("I")
        assert nuis.support.lo == pytest.approx(4.5 - 6.0)
        assert nuis.support.hi == pytest.approx(11.0 + 6.0)


class TestOracle:
    def test_requires_large_mc(self):
        with pytest.raises(InvalidParameterError):
            oracle_estimand("stwcr", "I", StwcrQuery(1, 7.0), PARAMS, mc_size=1000)

    def test_risk_value_in_unit_interval(self):
        res = oracle_estimand("stwcr", "I", StwcrQuery(1, 7.0), PARAMS,
                              mc_size=100_000, seed=1)
        assert 0.0 < res.ratio < 1.0
        assert res.mc_se > 0

    def test_symmetric_relative_query_gives_zero(self):
        res = oracle_estimand("stwcrve_num_den", "I", StwcrveQuery(1, 1, 7.5, 7.5),
                              PARAMS, mc_size=100_000, seed=2)
        assert res.num == res.den
        assert res.delta == 0.0

    def test_self_consistency_small(self):
        a = oracle_estimand("stwcr", "I", StwcrQuery(1, 7.0), PARAMS, mc_size=300_000, seed=41)
        b = oracle_estimand("stwcr", "I", StwcrQuery(1, 7.0), PARAMS, mc_size=300_000, seed=42)
        assert abs(a.ratio - b.ratio) < 4 * math.hypot(a.mc_se, b.mc_se)

    def test_trim_off_matches_direct_route(self):
        trim_off = SmoothingParams(t=1e-9, epsilon=1e-4, h=0.1)
        orc = oracle_estimand("stwcr", "I", StwcrQuery(1, 8.0), trim_off,
                              mc_size=400_000, seed=31)
        direct, dse = direct_plain_smoothed_risk("I", 1, 8.0, 0.1, mc_size=400_000, seed=77)
        assert abs(orc.ratio - direct) < 3 * math.hypot(orc.mc_se, dse)

    def test_deterministic(self):
        a = oracle_estimand("stwcr", "II", StwcrQuery(1, 8.0), PARAMS, mc_size=100_000, seed=3)
        b = oracle_estimand("stwcr", "II", StwcrQuery(1, 8.0), PARAMS, mc_size=100_000, seed=3)
        assert a == b

    def test_scenario_I_matches_deterministic_enumeration(self):
        # fully deterministic route: enumerate the (B, x1) cells, Gauss-Legendre
        # over x2, x3, and the marker integral; no Monte Carlo anywhere
        from scipy.special import expit, ndtr

        t, eps, h, s, a = 0.1, 0.1, 0.1, 7.0, 1.0
        vals_b = np.array([1.0, 2, 3, 4, 5])
        p_naive = np.array([0.2, 0.3, 0.4, 0.05, 0.05])
        p_exposed = np.array([0.1, 0.15, 0.3, 0.3, 0.15])

        def gl(n, lo, hi):
            x, w = np.polynomial.legendre.leggauss(n)
            return (lo + hi) / 2 + (hi - lo) / 2 * x, (hi - lo) / 2 * w

        x2n, x2w = gl(48, 0, 1)
        x3n, x3w = gl(48, 0, 1)
        sn, sw = gl(96, s - 1.2, s + 1.2)
        ker = sw * np.exp(-0.5 * ((sn - s) / h) ** 2) / (h * math.sqrt(2 * math.pi))

        num = den = 0.0
        for x1, pb, px1 in ((0.0, p_naive, 0.7), (1.0, p_exposed, 0.3)):
            for b, pbv in zip(vals_b, pb):
                mu = b + a - 0.5 * x1 + x2n ** 2 + 4
                pi = np.exp(-0.5 * (sn[None, :] - mu[:, None]) ** 2) / math.sqrt(2 * math.pi)
                phi = ndtr((pi - t) / eps)
                eta = 1.5 + 0.5 * x2n[:, None] - 0.2 * sn[None, :] - a - 0.3 * b
                r_bar = sum(w3 * expit(eta + 2.0 * v3) for v3, w3 in zip(x3n, x3w))
                den += px1 * pbv * float(np.sum(x2w[:, None] * phi * ker[None, :]))
                num += px1 * pbv * float(np.sum(x2w[:, None] * phi * r_bar * ker[None, :]))

        orc = oracle_estimand("stwcr", "I", StwcrQuery(1, 7.0), PARAMS,
                              mc_size=400_000, seed=19)
        assert abs(orc.ratio - num / den) < 4 * orc.mc_se
        assert abs(orc.num - num) < 4 * orc.num_se
        assert abs(orc.den - den) < 4 * orc.den_se


class TestTruthCache:
    def test_cache_roundtrip_and_hit(self, tmp_path, caplog):
        path = tmp_path / "cache.json"
        queries = (StwcrQuery(1, 7.0),)
        first = compute_truths("I", queries, PARAMS, truth_mc_size=100_000,
                               truth_seed=3, cache_path=str(path))
        assert path.exists()
        with caplog.at_level("INFO", logger="stwcr.simulation"):
            second = compute_truths("I", queries, PARAMS, truth_mc_size=100_000,
                                    truth_seed=3, cache_path=str(path))
        assert "truth cache hit" in caplog.text
        assert first == second
        key = truth_cache_key("I", queries[0], PARAMS, 100_000, 3)
        stored = json.loads(path.read_text())
        assert stored[key]["truth"] == first[key]["truth"]

    def test_distinct_params_distinct_keys(self):
        k1 = truth_cache_key("I", StwcrQuery(1, 7.0), PARAMS, 100_000, 3)
        k2 = truth_cache_key("I", StwcrQuery(1, 7.0), PARAMS.with_(t=0.2), 100_000, 3)
        assert k1 != k2


class TestRunMonteCarlo:
    def test_forced_truth_stub(self, tmp_path):
        cfg = SimConfig(scenario="I", n=100, reps=1, queries=(StwcrQuery(1, 7.0),),
                        params=PARAMS, truth_mc_size=100_000, truth_seed=3)
        truths = compute_truths("I", cfg.queries, PARAMS, 100_000, 3)
        truth = next(iter(truths.values()))["truth"]

        def forced(data, q, params, folds, model_specs):
            return truth, truth, truth, 0.0

        rows = run_monte_carlo(cfg, estimate_fn=forced)
        assert rows[0].pct_bias == 0.0
        assert rows[0].coverage == 1.0

    def test_deterministic_rows(self):
        cfg = SimConfig(scenario="I", n=200, reps=3, queries=(StwcrQuery(1, 7.0),),
                        params=PARAMS, master_seed=5, truth_mc_size=100_000, truth_seed=3)
        rows_a = run_monte_carlo(cfg)
        rows_b = run_monte_carlo(cfg)
        assert rows_a == rows_b

    def test_parallel_matches_serial(self):
        base = dict(scenario="I", n=200, reps=4, queries=(StwcrQuery(1, 7.0),),
                    params=PARAMS, master_seed=6, truth_mc_size=100_000, truth_seed=3)
        serial = run_monte_carlo(SimConfig(**base, n_jobs=1))
        parallel = run_monte_carlo(SimConfig(**base, n_jobs=2))
        assert serial == parallel

    def test_failures_counted_and_capped(self):
        cfg = SimConfig(scenario="I", n=100, reps=5, queries=(StwcrQuery(1, 7.0),),
                        params=PARAMS, truth_mc_size=100_000, truth_seed=3)

        def failing(data, q, params, folds, model_specs):
            raise EstimationError("boom")

        with pytest.raises(HarnessError):
            run_monte_carlo(cfg, estimate_fn=failing)

    def test_mixed_queries(self):
        cfg = SimConfig(scenario="I", n=300, reps=2,
                        queries=(StwcrQuery(1, 7.0), StwcrveQuery(1, 0, 8.0, 7.0)),
                        params=PARAMS, master_seed=7, truth_mc_size=100_000, truth_seed=3)
        rows = run_monte_carlo(cfg)
        assert [r.query for r in rows] == ["STWCR(a=1,s=7)", "STWCRVE(a1=1,a0=0,s1=8,s0=7)"]
        assert all(isinstance(r, MetricsRow) for r in rows)
        assert all(r.reps == 2 for r in rows)

    def test_query_labels(self):
        assert query_label(StwcrQuery(1, 7.0)) == "STWCR(a=1,s=7)"
        assert query_label(StwcrveQuery(1, 0, 8.0, 7.0)) == "STWCRVE(a1=1,a0=0,s1=8,s0=7)"
