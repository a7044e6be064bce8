"""Synthetic trial generator, ground-truth oracle, and Monte Carlo harness.

The simulated population has covariates x1 ~ Bernoulli(0.3) (prior
exposure), x2, x3 ~ Uniform[0,1], a baseline marker B whose law is one of
three scenarios (two categorical, one truncated-Gamma), 1:1 randomized
treatment, marker S = B + A - 0.5*x1 + x2^2 + 4 + N(0,1), and a binary
outcome with logit 0.5*x2 + 2*x3 - 0.2*S - A - 0.3*B + 1.5.

Because the generating equations are polynomial in the features, the true
nuisances are exactly representable by the parametric model classes;
``true_nuisances`` returns them with the generating coefficients.

``oracle_estimand`` is the independent ground truth: it averages the
defining kernel-quadrature integrals under the true nuisances over a
large Monte Carlo sample of baseline draws, never touching the influence
machinery. ``direct_plain_smoothed_risk`` is a second, quadrature-free
route (sampling marker values straight from the kernel) used to
cross-check the oracle in the trim-off limit.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import gamma as gamma_dist

from .core import Interval, SmoothingParams, kernel_weight, quad_rule, smooth_indicator
from .eif import StwcrQuery
from .errors import HarnessError, InvalidParameterError, StwcrError
from .estimators import ModelSpecs, estimate_stwcr, estimate_stwcrve, make_folds
from .nuisance import (
    CondDensityModel,
    Dataset,
    FeatureSpec,
    NuisanceTriple,
    OutcomeModel,
    PropensityModel,
    intercept,
    raw,
    square,
)

__all__ = [
    "ScenarioSpec",
    "SimConfig",
    "MetricsRow",
    "OracleResult",
    "gen_dataset",
    "true_nuisances",
    "oracle_estimand",
    "direct_plain_smoothed_risk",
    "compute_truths",
    "truth_cache_key",
    "run_monte_carlo",
    "query_label",
]

logger = logging.getLogger("stwcr.simulation")

COVARIATE_NAMES = ("x1", "x2", "x3")

# marker structural model: S = B + A - 0.5*x1 + x2^2 + 4 + N(0, 1)
MARKER_COEF = (4.0, 1.0, 1.0, -0.5, 1.0)  # over {1, b, a, x1, x2^2}
MARKER_SD = 1.0
# outcome structural model: logit P(Y=1) = 1.5 + 0.5*x2 + 2*x3 - 0.2*s - a - 0.3*b
OUTCOME_COEF = (1.5, 0.5, 2.0, -0.2, -1.0, -0.3)  # over {1, x2, x3, s, a, b}
TREATED_PROB = 0.5

_CATEGORICAL = {
    "I": {"values": (1, 2, 3, 4, 5),
          "p_naive": (0.2, 0.3, 0.4, 0.05, 0.05),
          "p_exposed": (0.1, 0.15, 0.3, 0.3, 0.15)},
    "III": {"values": (0, 1, 2, 3, 4),
            "p_naive": (0.6, 0.2, 0.1, 0.05, 0.05),
            "p_exposed": (0.1, 0.15, 0.3, 0.3, 0.15)},
}
_GAMMA_NAIVE = {"shape": 2.5, "rate": 1.0}
_GAMMA_EXPOSED = {"shape": 3.0, "rate": 0.7}
_GAMMA_TRUNC_Q = 0.995


def gamma_truncation_points() -> tuple[float, float]:
    """Theoretical 99.5th percentiles of the two Gamma baseline laws."""
    q_naive = float(gamma_dist.ppf(_GAMMA_TRUNC_Q, a=_GAMMA_NAIVE["shape"],
                                   scale=1.0 / _GAMMA_NAIVE["rate"]))
    q_exposed = float(gamma_dist.ppf(_GAMMA_TRUNC_Q, a=_GAMMA_EXPOSED["shape"],
                                     scale=1.0 / _GAMMA_EXPOSED["rate"]))
    return q_naive, q_exposed


def baseline_marker_range(scenario: str) -> tuple[float, float]:
    if scenario in _CATEGORICAL:
        vals = _CATEGORICAL[scenario]["values"]
        return float(min(vals)), float(max(vals))
    if scenario == "II":
        return 0.0, max(gamma_truncation_points())
    raise InvalidParameterError(f"unknown scenario {scenario!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    """One synthetic-trial draw: scenario label, sample size, seed."""

    scenario: str
    n: int
    seed: object  # int or numpy SeedSequence

    def __post_init__(self):
        if self.scenario not in ("I", "II", "III"):
            raise InvalidParameterError(f"scenario must be I, II, or III, got {self.scenario!r}")
        if self.n < 50:
            raise InvalidParameterError(f"need n >= 50, got {self.n}")


def _draw_baseline(rng: np.random.Generator, n: int, scenario: str):
    """Draw (b, x1, x2, x3) from the scenario's baseline population."""
    x1 = (rng.random(n) < 0.3).astype(float)
    x2 = rng.random(n)
    x3 = rng.random(n)
    naive = x1 == 0.0
    b = np.empty(n)
    if scenario in _CATEGORICAL:
        cfg = _CATEGORICAL[scenario]
        vals = np.asarray(cfg["values"], dtype=float)
        b[naive] = rng.choice(vals, size=int(naive.sum()), p=cfg["p_naive"])
        b[~naive] = rng.choice(vals, size=int((~naive).sum()), p=cfg["p_exposed"])
    else:
        q_naive, q_exposed = gamma_truncation_points()
        b[naive] = np.minimum(
            rng.gamma(shape=_GAMMA_NAIVE["shape"], scale=1.0 / _GAMMA_NAIVE["rate"],
                      size=int(naive.sum())), q_naive)
        b[~naive] = np.minimum(
            rng.gamma(shape=_GAMMA_EXPOSED["shape"], scale=1.0 / _GAMMA_EXPOSED["rate"],
                      size=int((~naive).sum())), q_exposed)
    return b, x1, x2, x3


def marker_mean(a, b, x1, x2):
    c0, cb, ca, cx1, cx2sq = MARKER_COEF
    return c0 + cb * b + ca * a + cx1 * x1 + cx2sq * x2 ** 2


def outcome_prob(a, s, b, x2, x3):
    c0, cx2, cx3, cs, ca, cb = OUTCOME_COEF
    return expit(c0 + cx2 * x2 + cx3 * x3 + cs * s + ca * a + cb * b)


def gen_dataset(spec: ScenarioSpec) -> Dataset:
    """Generate one synthetic trial; deterministic given the seed."""
    rng = np.random.default_rng(spec.seed)
    b, x1, x2, x3 = _draw_baseline(rng, spec.n, spec.scenario)
    a = (rng.random(spec.n) < TREATED_PROB).astype(int)
    s = marker_mean(a, b, x1, x2) + MARKER_SD * rng.standard_normal(spec.n)
    y = (rng.random(spec.n) < outcome_prob(a, s, b, x2, x3)).astype(float)
    return Dataset(y=y, a=a, s=s, b=b, x=np.column_stack([x1, x2, x3]),
                   covariate_names=COVARIATE_NAMES, outcome_kind="binary")


def true_nuisances(scenario: str) -> NuisanceTriple:
    """The generating-model nuisances, in closed form."""
    b_lo, b_hi = baseline_marker_range(scenario)
    mu_lo = marker_mean(0.0, b_lo, 1.0, 0.0)
    mu_hi = marker_mean(1.0, b_hi, 0.0, 1.0)
    cond = CondDensityModel(
        spec=FeatureSpec([intercept(), raw("b"), raw("a"), raw("x1"), square("x2")]),
        coef=np.asarray(MARKER_COEF), residual_sd=MARKER_SD,
        covariate_names=COVARIATE_NAMES)
    outc = OutcomeModel(
        kind="logistic",
        spec=FeatureSpec([intercept(), raw("x2"), raw("x3"), raw("s"), raw("a"), raw("b")]),
        coef=np.asarray(OUTCOME_COEF), covariate_names=COVARIATE_NAMES)
    prop = PropensityModel(kind="known", prob_treated=TREATED_PROB)
    return NuisanceTriple(propensity=prop, cond_density=cond, outcome=outc,
                          support=Interval(mu_lo - 6.0, mu_hi + 6.0))


@dataclass(frozen=True)
class OracleResult:
    """Ground-truth functional values with Monte Carlo error."""

    kind: str
    scenario: str
    num: float
    den: float
    ratio: float
    mc_se: float  # standard error of the ratio
    num_se: float
    den_se: float
    mc_size: int
    seed: int

    @property
    def delta(self) -> float:
        return 1.0 - self.ratio


_ORACLE_BLOCK = 100_000


def oracle_estimand(kind: str, scenario: str, query, params: SmoothingParams,
                    mc_size: int = 2_000_000, seed: int = 20_260_809) -> OracleResult:
    """Monte Carlo ground truth for a risk or relative-efficacy query.

    Averages the defining kernel-quadrature integrals under the true
    nuisances over ``mc_size`` baseline draws. Independent of the
    influence-value code path.
    """
    if kind not in ("stwcr", "stwcrve_num_den"):
        raise InvalidParameterError(f"unknown oracle kind {kind!r}")
    if mc_size < 100_000:
        raise InvalidParameterError("oracle needs mc_size >= 100000")
    nuis = true_nuisances(scenario)
    t, eps = params.t, params.epsilon
    rng = np.random.default_rng(seed)

    def arm_rules():
        if kind == "stwcr":
            h = params.require_h()
            return ((query.a, query.s, h),)
        h0, h1 = params.require_h0_h1()
        return ((query.a0, query.s0, h0), (query.a1, query.s1, h1))

    rules = []
    for arm, center, h in arm_rules():
        rule = quad_rule(center, h, nuis.support, params)
        if rule is None:
            raise InvalidParameterError("query window lies outside the marker support")
        nodes, weights = rule
        rules.append((arm, nodes, kernel_weight(nodes - center, h) * weights))

    sums = np.zeros(5)  # sum u, sum v, sum u^2, sum v^2, sum u*v
    done = 0
    while done < mc_size:
        m = min(_ORACLE_BLOCK, mc_size - done)
        b, x1, x2, x3 = _draw_baseline(rng, m, scenario)
        x = np.column_stack([x1, x2, x3])
        per_arm = []
        for arm, nodes, wk in rules:
            pi = nuis.cond_density.density_grid(arm, nodes, b, x)
            phi = smooth_indicator(pi, t, eps)
            r = nuis.outcome.predict_grid(arm, nodes, b, x)
            per_arm.append((phi @ wk, (phi * r) @ wk))
        if kind == "stwcr":
            plain, weighted = per_arm[0]
            u, v = weighted, plain
        else:
            (plain0, weighted0), (plain1, weighted1) = per_arm
            u = plain0 * weighted1   # comparator-side plain x investigational-side risk
            v = weighted0 * plain1
        sums += (u.sum(), v.sum(), (u * u).sum(), (v * v).sum(), (u * v).sum())
        done += m

    n = float(mc_size)
    num, den = sums[0] / n, sums[1] / n
    ratio = num / den
    resid_ss = sums[2] - 2.0 * ratio * sums[4] + ratio ** 2 * sums[3]
    mc_se = math.sqrt(max(resid_ss, 0.0) / (n - 1.0) / n) / den
    num_se = math.sqrt(max(sums[2] - n * num ** 2, 0.0) / (n - 1.0) / n)
    den_se = math.sqrt(max(sums[3] - n * den ** 2, 0.0) / (n - 1.0) / n)
    return OracleResult(kind=kind, scenario=scenario, num=float(num), den=float(den),
                        ratio=float(ratio), mc_se=float(mc_se), num_se=float(num_se),
                        den_se=float(den_se), mc_size=int(mc_size), seed=int(seed))


def direct_plain_smoothed_risk(scenario: str, a: int, s: float, h: float,
                               mc_size: int = 2_000_000, seed: int = 7):
    """Kernel-smoothed risk with no trimming, by direct Monte Carlo.

    Samples marker values straight from the kernel located at ``s`` and
    averages the structural outcome probability; uses neither quadrature
    nor the softened trimming weight. Returns (value, mc_se).
    """
    rng = np.random.default_rng(seed)
    total, total_sq, done = 0.0, 0.0, 0
    while done < mc_size:
        m = min(_ORACLE_BLOCK, mc_size - done)
        b, x1, x2, x3 = _draw_baseline(rng, m, scenario)
        s_draw = rng.normal(loc=s, scale=h, size=m)
        vals = outcome_prob(a, s_draw, b, x2, x3)
        total += vals.sum()
        total_sq += (vals * vals).sum()
        done += m
    mean = total / mc_size
    var = max(total_sq - mc_size * mean ** 2, 0.0) / (mc_size - 1)
    return float(mean), float(math.sqrt(var / mc_size))


# --- Monte Carlo harness -----------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Bias/coverage experiment configuration."""

    scenario: str
    n: int
    reps: int
    queries: tuple
    params: SmoothingParams
    k_folds: int = 5
    master_seed: int = 1
    truth_mc_size: int = 2_000_000
    truth_seed: int = 20_260_809
    model_specs: ModelSpecs | None = None
    n_jobs: int = 1

    def __post_init__(self):
        if self.reps < 1:
            raise InvalidParameterError("need reps >= 1")
        if self.truth_mc_size < 100_000:
            raise InvalidParameterError("need truth_mc_size >= 100000")
        object.__setattr__(self, "queries", tuple(self.queries))
        if not self.queries:
            raise InvalidParameterError("need at least one query")


@dataclass(frozen=True)
class MetricsRow:
    """One query's Monte Carlo summary."""

    query: str
    truth: float
    mean_estimate: float
    pct_bias: float
    coverage: float
    mean_se: float
    reps: int
    failed: int = 0


def query_label(q) -> str:
    if isinstance(q, StwcrQuery):
        return f"STWCR(a={q.a},s={q.s:g})"
    return f"STWCRVE(a1={q.a1},a0={q.a0},s1={q.s1:g},s0={q.s0:g})"


def truth_cache_key(scenario: str, q, params: SmoothingParams,
                    mc_size: int, seed: int) -> str:
    if isinstance(q, StwcrQuery):
        qpart = f"stwcr|a={q.a}|s={q.s!r}|h={params.h!r}"
    else:
        qpart = (f"stwcrve|a1={q.a1}|a0={q.a0}|s1={q.s1!r}|s0={q.s0!r}"
                 f"|h0={params.h0!r}|h1={params.h1!r}")
    return (f"{scenario}|{qpart}|t={params.t!r}|eps={params.epsilon!r}"
            f"|nodes={params.quad_nodes}|W={params.window_halfwidth_in_h!r}"
            f"|mc={mc_size}|seed={seed}")


def _load_cache(path):
    if path and os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return {}


def _save_cache(path, cache):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(cache, fh, indent=1, sort_keys=True)


def compute_truths(scenario: str, queries, params: SmoothingParams,
                   truth_mc_size: int = 2_000_000, truth_seed: int = 20_260_809,
                   cache_path=None) -> dict[str, dict]:
    """Oracle truth per query, served from the JSON cache when available."""
    cache = _load_cache(cache_path)
    out = {}
    updated = False
    for q in queries:
        key = truth_cache_key(scenario, q, params, truth_mc_size, truth_seed)
        if key in cache:
            logger.info("truth cache hit: %s", key)
            out[key] = cache[key]
            continue
        kind = "stwcr" if isinstance(q, StwcrQuery) else "stwcrve_num_den"
        res = oracle_estimand(kind, scenario, q, params,
                              mc_size=truth_mc_size, seed=truth_seed)
        truth = res.ratio if kind == "stwcr" else res.delta
        entry = {"truth": truth, "num": res.num, "den": res.den,
                 "mc_se": res.mc_se, "mc_size": res.mc_size, "seed": res.seed}
        cache[key] = entry
        out[key] = entry
        updated = True
    if updated:
        _save_cache(cache_path, cache)
    return out


def _default_estimate_fn(data, q, params, folds, model_specs):
    if isinstance(q, StwcrQuery):
        rep = estimate_stwcr(data, q, params, folds, model_specs=model_specs)
        return rep.tau_hat, rep.ci[0], rep.ci[1], rep.se
    rep = estimate_stwcrve(data, q, params, folds, model_specs=model_specs)
    if rep.log_scale:
        se = rep.rho_hat * math.sqrt(rep.sigma2log_sq_hat / rep.n)
    else:
        se = math.sqrt(rep.sigma2_sq_hat / rep.n)
    return rep.delta_hat, rep.ci_delta[0], rep.ci_delta[1], se


def _rep_seeds(master_seed: int, r: int):
    ss = np.random.SeedSequence(master_seed, spawn_key=(r,))
    data_ss, fold_ss = ss.spawn(2)
    return data_ss, int(fold_ss.generate_state(1)[0])


def _run_one_rep(config: SimConfig, r: int, estimate_fn):
    data_ss, fold_seed = _rep_seeds(config.master_seed, r)
    data = gen_dataset(ScenarioSpec(config.scenario, config.n, data_ss))
    folds = make_folds(config.n, config.k_folds, fold_seed)
    out = []
    for q in config.queries:
        try:
            out.append(estimate_fn(data, q, config.params, folds, config.model_specs))
        except StwcrError as exc:
            out.append(("error", f"{type(exc).__name__}: {exc}"))
    return out


def _run_one_rep_default(args):
    config, r = args
    return _run_one_rep(config, r, _default_estimate_fn)


def run_monte_carlo(config: SimConfig, truth_cache_path=None,
                    estimate_fn=None) -> list[MetricsRow]:
    """Repeated-sampling bias and coverage for each configured query.

    Truths are computed once per query (cached when a cache path is
    given). Replication r draws its seeds from the master seed by
    counter-based splitting, so results are independent of worker count
    and each replication is reproducible in isolation. Raises
    :class:`HarnessError` when more than 5% of replications fail for any
    query.
    """
    truths = compute_truths(config.scenario, config.queries, config.params,
                            config.truth_mc_size, config.truth_seed, truth_cache_path)
    keys = [truth_cache_key(config.scenario, q, config.params,
                            config.truth_mc_size, config.truth_seed)
            for q in config.queries]

    results: list[list] = [None] * config.reps
    if estimate_fn is None and config.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            for r, res in enumerate(pool.map(_run_one_rep_default,
                                             [(config, r) for r in range(config.reps)],
                                             chunksize=max(1, config.reps // (8 * config.n_jobs)))):
                results[r] = res
    else:
        fn = estimate_fn if estimate_fn is not None else _default_estimate_fn
        for r in range(config.reps):
            results[r] = _run_one_rep(config, r, fn)

    rows = []
    errors = []
    for j, q in enumerate(config.queries):
        truth = truths[keys[j]]["truth"]
        estimates, ses, covered, failed = [], [], 0, 0
        for r in range(config.reps):
            res = results[r][j]
            if res[0] == "error":
                failed += 1
                errors.append(f"rep {r}, {query_label(q)}: {res[1]}")
                continue
            est, lo, hi, se = res
            estimates.append(est)
            ses.append(se)
            covered += int(lo <= truth <= hi)
        ok = len(estimates)
        if failed > 0.05 * config.reps:
            raise HarnessError(
                f"{failed}/{config.reps} replications failed for {query_label(q)}; "
                f"first errors: {errors[:3]}")
        mean_est = float(np.mean(estimates)) if ok else float("nan")
        rows.append(MetricsRow(
            query=query_label(q), truth=float(truth), mean_estimate=mean_est,
            pct_bias=float(100.0 * (mean_est - truth) / truth),
            coverage=float(covered / ok) if ok else float("nan"),
            mean_se=float(np.mean(ses)) if ok else float("nan"),
            reps=ok, failed=failed))
    return rows
