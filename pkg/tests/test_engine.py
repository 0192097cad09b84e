import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from csmc.engine import (
    ResamplingPolicy,
    estimate,
    marginal_means,
    run_csmc,
    run_drifted_smc,
    run_rejection,
    run_segmental,
)
from csmc.errors import ConfigurationError, RejectionError, WeightCollapseError
from csmc.model import (
    BootstrapProposal,
    ConstraintSchedule,
    DriftedProposal,
    FixedPoint,
    Observation,
    Prefix,
    Subset,
    gaussian_logpdf,
)
from csmc.models import LinearGaussianModel
from csmc.oracles import LinearGaussianSpec, bridge_log_density, future_log_likelihood, kalman_smooth
from csmc.particles import ParticleEnsemble
from csmc.priority.base import PriorityEstimatorSet, constant_priority, parametric_priority


def bridge_problem(T=8, b=2.0):
    model = LinearGaussianModel(1.0, 1.0)
    sched = ConstraintSchedule.from_mapping(T, {T: FixedPoint(b)})
    est = parametric_priority(sched, lambda t, x: bridge_log_density(t, x[:, 0], T, b, 1.0), log=True)
    return model, sched, est


def observed_problem(seed=3, T=10):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=T + 1)
    y[0] = np.nan
    R = 0.6
    model = LinearGaussianModel(0.9, 1.0)
    cons = {t: Observation.gaussian(y[t], R, strong=(t == T)) for t in range(1, T + 1)}
    sched = ConstraintSchedule.from_mapping(T, cons)
    spec = LinearGaussianSpec(0.9, 1.0, 1.0, 0.0, 0.0)
    prec, info = future_log_likelihood(spec, y, R, 0, T)

    def exact(t, x):
        return -0.5 * prec[t] * x[:, 0] ** 2 + info[t] * x[:, 0]

    est = parametric_priority(sched, exact, log=True)
    return model, sched, est, kalman_smooth(spec, y, R)


# ---------------------------------------------------------------------------
# Proper weighting against exact answers
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "policy",
    [
        ResamplingPolicy.ess(0.5),
        ResamplingPolicy.every(1),
        ResamplingPolicy.every(3),
        ResamplingPolicy.ess(0.5, "weight"),
    ],
)
def test_bridge_means_are_unbiased(policy):
    T, b = 8, 2.0
    model, sched, est = bridge_problem(T, b)
    rep = run_csmc(model, sched, estimators=est, policy=policy, n=4000, rng=1)
    mu, se = marginal_means(rep.ensemble, se="lineage")
    exact = b * np.arange(T + 1) / T
    assert np.all(np.abs(mu - exact) <= 4 * se + 1e-12), np.max(np.abs(mu - exact) / np.maximum(se, 1e-12))
    assert np.all(rep.ensemble.paths[:, T, 0] == b)


def test_observed_chain_matches_kalman():
    model, sched, est, kal = observed_problem()
    rep = run_csmc(model, sched, estimators=est, policy=ResamplingPolicy.ess(0.5), n=5000, rng=2)
    mu, se = marginal_means(rep.ensemble, se="lineage")
    z = (mu - kal.smoothed_mean) / np.where(se > 0, se, np.inf)
    assert np.max(np.abs(z)) < 4.0
    assert rep.resample_times  # the test would be vacuous without resampling


def test_exact_priority_keeps_ess_high():
    # exact future likelihoods keep the scores balanced all the way to the endpoint
    model, sched, est = bridge_problem(12, 3.0)
    rep = run_csmc(model, sched, estimators=est, policy=ResamplingPolicy.every(1), n=2000, rng=0)
    assert np.nanmin(rep.ess[1:12]) > 0.5 * 2000
    naive = run_csmc(model, sched, policy=ResamplingPolicy.every(1, "weight"), n=2000, rng=0)
    assert rep.final_ess > 2 * naive.final_ess


def test_rejection_is_exact_on_subsets():
    T = 4
    model = LinearGaussianModel(1.0, 1.0)
    sched = ConstraintSchedule.from_mapping(T, {T: Subset.below(-1.0)})
    rep = run_rejection(model, sched, max_attempts=200_000, rng=5, batch=30_000)
    p = stats.norm.cdf(-1.0 / np.sqrt(T))
    assert abs(rep.acceptance_rate - p) < 4 * np.sqrt(p * (1 - p) / rep.attempts)
    assert np.all(rep.ensemble.paths[:, T, 0] < -1.0)
    # and the constrained sampler agrees on E[x_T]
    smc = run_csmc(model, sched, policy=ResamplingPolicy.ess(0.5, "weight"), n=20_000, rng=6)
    m_smc, se_s = estimate(smc.ensemble, lambda x: x[:, T, 0], se="lineage")
    m_rej, se_r = estimate(rep.ensemble, lambda x: x[:, T, 0])
    assert abs(m_smc - m_rej) < 4 * np.hypot(se_s, se_r)


def test_rejection_stops_and_fails_loudly():
    model = LinearGaussianModel(1.0, 1.0)
    sched = ConstraintSchedule.from_mapping(3, {3: Subset.below(0.0)})
    rep = run_rejection(model, sched, n_target=50, max_attempts=10_000, rng=0, batch=1000)
    assert rep.accepted == 50 and rep.attempts < 1000
    assert run_rejection(model, sched, n_target=50, max_attempts=10_000, rng=0, batch=1000).attempts == rep.attempts
    impossible = ConstraintSchedule.from_mapping(3, {3: Subset.below(-50.0)})
    with pytest.raises(RejectionError):
        run_rejection(model, impossible, max_attempts=500, rng=0)
    obs = ConstraintSchedule.from_mapping(3, {3: Observation.gaussian(0.0, 1.0, strong=True)})
    with pytest.raises(ConfigurationError):
        run_rejection(model, obs, max_attempts=10)


def test_drifted_smc_is_proper():
    T, b = 6, 3.0
    model = LinearGaussianModel(1.0, 1.0)
    sched = ConstraintSchedule.from_mapping(T, {T: FixedPoint(b)})
    rep = run_drifted_smc(model, sched, DriftedProposal(model, b / T), n=20_000, rng=4)
    assert rep.resample_times == []
    mu, se = marginal_means(rep.ensemble)
    assert np.all(np.abs(mu - b * np.arange(T + 1) / T) <= 4 * se + 1e-12)


# ---------------------------------------------------------------------------
# Weight bookkeeping
# ---------------------------------------------------------------------------


def test_log_weight_identity_without_resampling():
    """w(x_{0:T}) = prod_t p(x_t | x_{t-1}) p(I_t | x_t) / q(x_t | x_{t-1}) exactly."""
    T = 5
    model = LinearGaussianModel(0.8, 1.0)
    cons = {2: Observation.gaussian(0.5, 0.4), 5: Observation.gaussian(-1.0, 0.3, strong=True)}
    sched = ConstraintSchedule.from_mapping(T, cons)
    prop = DriftedProposal(model, 0.4)
    rep = run_csmc(model, sched, prop, policy=ResamplingPolicy.never(), n=64, rng=9)
    x = rep.ensemble.paths
    lw = np.zeros(x.shape[0])
    for t in range(1, T + 1):
        prefix = Prefix(x[:, t - 1])
        lw += model.forward_logpdf(t, prefix, x[:, t]) - prop.logpdf(t, prefix, x[:, t])
        lw += sched.log_likelihood(t, x[:, t])
    got = rep.ensemble.log_weights + rep.ensemble.log_weight_scale
    assert np.allclose(got, lw, atol=1e-10)


def test_resampling_sets_weight_to_w_over_beta():
    # Every(1) with estimator scores: after resampling at t the stored weight is
    # w/beta = 1/p_hat, so the final weights only depend on the last step
    T, b = 4, 1.0
    model, sched, est = bridge_problem(T, b)
    rep = run_csmc(model, sched, estimators=est, policy=ResamplingPolicy.every(1), n=200, rng=3)
    x = rep.ensemble.paths
    inc = gaussian_logpdf(b, x[:, T - 1, 0], 1.0) - bridge_log_density(T - 1, x[:, T - 1, 0], T, b, 1.0)
    got = rep.ensemble.log_weights
    assert np.allclose(got - got[0], inc - inc[0], atol=1e-10)


def test_estimator_floor_is_counted():
    model, sched, _ = bridge_problem(6, 0.0)
    wild = parametric_priority(sched, lambda t, x: np.where(x[:, 0] > 0, 0.0, -500.0), log=True)
    rep = run_csmc(model, sched, estimators=wild, policy=ResamplingPolicy.every(1), n=500, rng=0)
    assert rep.floored > 0 and np.all(np.isfinite(rep.ensemble.log_weights))


def test_misleading_estimator_stays_proper():
    # a tilted estimator changes where particles go, never what is targeted
    T = 6
    model, sched, _ = bridge_problem(T, 0.0)
    tilt = parametric_priority(sched, lambda t, x: 0.8 * x[:, 0], log=True)
    rep = run_csmc(model, sched, estimators=tilt, policy=ResamplingPolicy.every(1), n=20_000, rng=0)
    mu, se = marginal_means(rep.ensemble, se="lineage")
    assert np.all(np.abs(mu) <= 4 * se + 1e-12)


def test_nonfinite_scores_are_zeroed_and_reported():
    model, sched, _ = bridge_problem(4, 0.0)
    bad = PriorityEstimatorSet(sched, lambda t, v: np.where(v.current[:, 0] > 1.5, np.nan, 0.0))
    rep = run_csmc(model, sched, estimators=bad, policy=ResamplingPolicy.every(1), n=400, rng=1)
    assert rep.nonfinite_scores > 0
    assert np.all(rep.ensemble.paths[:, 1:-1, 0].max(axis=0) <= 1.5)
    assert rep.summary()["nonfinite_scores"] == rep.nonfinite_scores


@given(st.integers(0, 2**32), st.integers(9, 40))
@settings(max_examples=15, deadline=None)
def test_sparse_schedule_equals_no_resampling(seed, k):
    model, sched, est = bridge_problem(8, 1.0)
    a = run_csmc(model, sched, estimators=est, policy=ResamplingPolicy.every(k), n=200, rng=seed)
    b = run_csmc(model, sched, estimators=est, policy=ResamplingPolicy.never(), n=200, rng=seed)
    assert _same(a, b) and a.resample_times == b.resample_times == []


@given(st.integers(0, 2**32), st.floats(-30.0, 30.0))
@settings(max_examples=15, deadline=None)
def test_priority_scale_does_not_change_resampling(seed, log_scale):
    model, sched, est = bridge_problem(6, 1.0)
    shifted = est.scaled(float(np.exp(log_scale)))
    pol = ResamplingPolicy.every(1)
    a = run_csmc(model, sched, estimators=est, policy=pol, n=200, rng=seed)
    b = run_csmc(model, sched, estimators=shifted, policy=pol, n=200, rng=seed)
    assert np.array_equal(a.ensemble.paths, b.ensemble.paths)
    assert np.allclose(a.ensemble.normalized_weights(), b.ensemble.normalized_weights(), atol=1e-12)


@given(st.integers(0, 2**32))
@settings(max_examples=10, deadline=None)
def test_rejection_acceptance_is_monotone_in_the_threshold(seed):
    model = LinearGaussianModel(1.0, 1.0)
    counts = []
    for c in np.linspace(-3.0, 1.0, 6):
        sched = ConstraintSchedule.from_mapping(4, {4: Subset.below(float(c))})
        try:
            counts.append(run_rejection(model, sched, max_attempts=2000, rng=seed, keep_paths=False).accepted)
        except RejectionError:
            counts.append(0)
    assert counts == sorted(counts)


# ---------------------------------------------------------------------------
# Reproducibility and segment hand-over
# ---------------------------------------------------------------------------


def _same(a, b):
    return np.array_equal(a.ensemble.paths, b.ensemble.paths) and np.array_equal(
        a.ensemble.log_weights, b.ensemble.log_weights
    )


def test_results_do_not_depend_on_workers():
    model, sched, est, _ = observed_problem()
    runs = [run_csmc(model, sched, estimators=est, n=3000, rng=11, block_size=256, workers=w) for w in (1, 3, 8)]
    assert _same(runs[0], runs[1]) and _same(runs[0], runs[2])
    other = run_csmc(model, sched, estimators=est, n=3000, rng=12, block_size=256)
    assert not _same(runs[0], other)


@given(st.integers(0, 2**32), st.integers(1, 4))
@settings(max_examples=15, deadline=None)
def test_seed_determinism_property(seed, workers):
    model, sched, est = bridge_problem(5, 1.0)
    a = run_csmc(model, sched, estimators=est, n=300, rng=seed, block_size=64)
    b = run_csmc(model, sched, estimators=est, n=300, rng=seed, block_size=64, workers=workers)
    assert _same(a, b)


def test_segmental_matches_single_run():
    T = 9
    model = LinearGaussianModel(1.0, 1.0)
    sched = ConstraintSchedule.from_mapping(T, {3: FixedPoint(1.0), 6: Observation.gaussian(0.0, 0.5, strong=True),
                                               9: FixedPoint(-1.0)})
    est = constant_priority(sched)
    pol = ResamplingPolicy.ess(0.5)
    seen = []
    seg = run_segmental(model, sched, estimators=est, policy=pol, n=500, rng=7,
                        on_segment=lambda s, e: seen.append((s, e.time, e.n)))
    one = run_csmc(model, sched, estimators=est, policy=pol, n=500, rng=7)
    assert _same(seg, one)
    assert [s for s, _, _ in seen] == [(0, 3), (3, 6), (6, 9)]
    assert all(time == s[1] and n == 500 for s, time, n in seen)
    assert seg.resample_times == one.resample_times
    with pytest.raises(ConfigurationError):
        run_segmental(model, ConstraintSchedule.from_mapping(3, {}), n=10)


def test_single_particle_run():
    model, sched, est = bridge_problem(4, 1.0)
    rep = run_csmc(model, sched, estimators=est, n=1, rng=0)
    assert rep.ensemble.n == 1 and rep.ensemble.paths.shape == (1, 5, 1)


# ---------------------------------------------------------------------------
# Errors and validation
# ---------------------------------------------------------------------------


def test_policy_validation():
    for bad in (dict(mode="sometimes"), dict(k=0), dict(fraction=0.0), dict(fraction=1.5), dict(scores="magic")):
        with pytest.raises(ValueError):
            ResamplingPolicy(**bad)
    assert ResamplingPolicy.every(3).scheduled(6) and not ResamplingPolicy.every(3).scheduled(4)
    assert not ResamplingPolicy.every(1).scheduled(0)


def test_missing_estimator_is_a_configuration_error():
    model, sched, _ = bridge_problem(5, 0.0)
    with pytest.raises(ConfigurationError):
        run_csmc(model, sched, policy=ResamplingPolicy.ess(0.5, "estimator"), n=10)
    partial = PriorityEstimatorSet(sched, {t: (lambda t, v: np.zeros(len(v))) for t in (0, 1, 2)})
    with pytest.raises(ConfigurationError, match="t=3"):
        run_csmc(model, sched, estimators=partial, policy=ResamplingPolicy.every(1), n=10)
    # no resampling means no estimate is ever needed
    run_csmc(model, sched, estimators=partial, policy=ResamplingPolicy.every(5), n=10)
    with pytest.raises(ValueError):
        run_csmc(model, sched, n=0)


def test_total_collapse_reports_time():
    model = LinearGaussianModel(1.0, 1.0)
    sched = ConstraintSchedule.from_mapping(4, {2: Observation(0.0, lambda y, x: np.full(len(x), -np.inf))})
    with pytest.raises(WeightCollapseError) as err:
        run_csmc(model, sched, BootstrapProposal(model), n=20, rng=0)
    assert err.value.time == 2


# ---------------------------------------------------------------------------
# Estimation helpers
# ---------------------------------------------------------------------------


def test_standard_errors_on_equal_weights():
    rng = np.random.default_rng(0)
    h = rng.normal(size=500)
    ens = ParticleEnsemble(h.reshape(-1, 1, 1), np.zeros(500))
    mu, se_e = estimate(ens, h)
    _, se_l = estimate(ens, h, se="lineage")
    assert mu == pytest.approx(h.mean())
    assert se_e == pytest.approx(h.std() / np.sqrt(500))
    assert se_l == pytest.approx(se_e)
    with pytest.raises(ValueError):
        estimate(ens, h, se="bootstrap")
    with pytest.raises(ValueError):
        estimate(ens, h[:10])


def test_lineage_se_groups_shared_ancestors():
    h = np.array([1.0, 1.0, -1.0, -1.0])
    ens = ParticleEnsemble(h.reshape(-1, 1, 1), np.zeros(4), origin=np.array([0, 0, 1, 1]))
    _, se = estimate(ens, h, se="lineage")
    # two groups contributing +-0.5 each
    assert se == pytest.approx(np.sqrt(0.5))
    _, se_e = estimate(ens, h)
    assert se_e == pytest.approx(0.5)


def test_vector_functionals_and_marginal_means():
    model, sched, est = bridge_problem(4, 1.0)
    rep = run_csmc(model, sched, estimators=est, n=300, rng=0)
    mu, se = marginal_means(rep.ensemble)
    assert mu.shape == se.shape == (5,)
    mu2, _ = estimate(rep.ensemble, lambda x: x[:, :, 0])
    assert np.allclose(mu, mu2)
    summ = rep.summary()
    assert summ["n"] == 300 and len(summ["ess"]) == 5
