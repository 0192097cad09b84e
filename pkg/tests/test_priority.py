import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from csmc.errors import ConfigurationError, EstimatorDegenerateError
from csmc.model import ConstraintSchedule, FixedPoint, Observation, Trivial
from csmc.models import LinearGaussianModel
from csmc.oracles import LinearGaussianSpec, bridge_log_density, future_log_likelihood
from csmc.priority.backward import (
    ForwardStepKernel,
    IncrementKernel,
    ReflectedDriftKernel,
    backward_pilot_smoothing,
    strong_segments,
)
from csmc.priority.base import (
    HistogramEstimator,
    PriorityEstimatorSet,
    StateView,
    constant_priority,
    equal_width_partition,
    fixed_width_partition,
    heatmap_export,
    histograms_from_csv,
    histograms_to_csv,
    parametric_priority,
    weighted_histogram,
)
from csmc.priority.forward import forward_pilot_smoothing, per_path_estimates
from csmc.priority.peis import peis_optimize

# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------


def test_partitions():
    e = equal_width_partition(np.arange(101.0), cells=4)
    assert np.allclose(e, np.linspace(1, 99, 5))
    e = fixed_width_partition(np.array([0.1, 0.9, 1.3]), 0.25, origin=0.0)
    assert e[0] == 0.0 and e[-1] == 1.5 and np.allclose(np.diff(e), 0.25)
    single = equal_width_partition(np.full(5, 2.0), cells=3)
    assert single[0] < 2.0 < single[-1]
    with pytest.raises(ValueError):
        fixed_width_partition([1.0], 0.0)
    with pytest.raises(ValueError):
        equal_width_partition([np.nan])


def test_histogram_cells_are_left_closed():
    h = HistogramEstimator((np.array([0.0, 1.0, 2.0]),), np.log(np.array([3.0, 5.0])), -np.inf, np.array([1, 1]))
    vals = h.evaluate(np.array([-0.1, 0.0, 0.999, 1.0, 2.0, 2.1]))
    assert np.allclose(vals, [0.0, 3.0, 3.0, 5.0, 5.0, 0.0])
    with pytest.raises(ValueError):
        HistogramEstimator((np.array([0.0, 0.0]),), np.zeros(1), 0.0, np.zeros(1))


def test_weighted_histogram_normalizers():
    coords = np.array([0.1, 0.2, 0.6, 0.7, 0.8, 5.0])
    lw = np.log(np.array([1.0, 3.0, 2.0, 2.0, 2.0, 100.0]))
    edges = [np.array([0.0, 0.5, 1.0])]
    mean = weighted_histogram(coords, lw, edges, "count", empty="min")
    assert np.allclose(mean.coefficients, [2.0, 2.0])
    assert np.array_equal(mean.counts, [2, 3])
    assert mean.log_fallback == pytest.approx(np.log(0.02))
    dens = weighted_histogram(coords, lw, edges, "volume", total=6)
    assert np.allclose(dens.coefficients, [4.0 / (6 * 0.5), 6.0 / (6 * 0.5)])
    assert dens.log_fallback == -np.inf


@given(st.integers(1, 200), st.integers(1, 12), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_volume_histogram_mass(m, cells, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=m)
    edges = [np.linspace(-1, 1, cells + 1)]
    h = weighted_histogram(x, np.zeros(m), edges, "volume", total=m)
    inside = np.sum((x >= -1) & (x <= 1))
    assert np.sum(h.coefficients * h.cell_volumes) == pytest.approx(inside / m)


def test_histogram_csv_round_trip_is_exact():
    rng = np.random.default_rng(0)
    sched = ConstraintSchedule.from_mapping(3, {3: FixedPoint(0.0)})
    per = {}
    for t in range(3):
        x = rng.normal(size=(50, 2))
        edges = [np.linspace(-2, 2, 4) + 1e-3 * rng.random(), np.linspace(-1, 3, 3)]
        per[t] = weighted_histogram(x, rng.normal(size=50), edges, "count", empty="min", argument="summary",
                                    axes=(0, 1), outside=("fallback", "nearest")[t % 2])
    est = PriorityEstimatorSet(sched, per)
    text = histograms_to_csv(est)
    back = histograms_from_csv(text, sched)
    assert histograms_to_csv(back) == text
    for t in range(3):
        for a in range(2):
            assert np.array_equal(back.per_time[t].edges[a], per[t].edges[a])
        assert np.array_equal(back.per_time[t].log_coef, per[t].log_coef)
        assert back.per_time[t].outside == per[t].outside
    far = np.array([[9.0, 9.0]])
    assert back.per_time[1].log_evaluate(far)[0] == per[1].log_coef.flat[-1]
    assert back.per_time[0].log_evaluate(far)[0] == per[0].log_fallback
    with pytest.raises(TypeError):
        histograms_to_csv(constant_priority(sched))


# ---------------------------------------------------------------------------
# Estimator sets
# ---------------------------------------------------------------------------


def test_estimator_set_rules():
    sched = ConstraintSchedule.from_mapping(4, {2: Observation.gaussian(0.0, 1.0, strong=True)})
    view = StateView(np.zeros((3, 1)))
    est = PriorityEstimatorSet(sched, {0: lambda t, v: np.array([0.0, np.nan, np.inf])})
    out = est.log_priority(0, view)
    assert out[0] == 0.0 and np.all(out[1:] == -np.inf) and est.nonfinite == 2
    # no strong constraint ahead: exactly zero without calling anything
    assert np.array_equal(est.log_priority(3, view), np.zeros(3))
    assert est.log_priority(2, view).tolist() == [0, 0, 0]
    with pytest.raises(ConfigurationError):
        est.log_priority(1, view)
    assert est.covers(0) and not est.covers(1) and est.covers(3)
    doubled = constant_priority(sched, 3.0).scaled(2.0)
    assert np.allclose(doubled.priority(0, view), 6.0)
    with pytest.raises(ValueError):
        est.scaled(0.0)
    par = parametric_priority(sched, lambda t, x: x[:, 0] + 1.0)
    assert np.allclose(par.priority(1, StateView(np.array([[0.5], [-1.0]]))), [1.5, 0.0])


def test_heatmap_export_shape():
    sched = ConstraintSchedule.from_mapping(4, {4: FixedPoint(0.0)})
    est = parametric_priority(sched, lambda t, x: stats.norm.pdf(0.0, x[:, 0], np.sqrt(4 - t)))
    grid = np.linspace(-2, 2, 9)
    hm = heatmap_export(est, [0, 2, 4], grid)
    assert hm.shape == (3, 9)
    assert np.allclose(hm[1], stats.norm.pdf(0.0, grid, np.sqrt(2)))
    assert np.allclose(hm[2], 1.0)


# ---------------------------------------------------------------------------
# Pilot estimators against exact future likelihoods
# ---------------------------------------------------------------------------


def test_strong_segments():
    sched = ConstraintSchedule.from_mapping(9, {0: FixedPoint(0.0), 4: FixedPoint(1.0), 9: FixedPoint(2.0)})
    # (first estimated time, segment start, segment end); no estimate is needed at a strong time
    assert strong_segments(sched) == [(1, 0, 4), (5, 4, 9)]


@pytest.mark.parametrize("kernel_cls", [ReflectedDriftKernel, ForwardStepKernel])
def test_backward_pilots_random_walk_bridge(kernel_cls):
    T, b, m = 12, 1.5, 40_000
    model = LinearGaussianModel(1.0, 1.0)
    sched = ConstraintSchedule.from_mapping(T, {T: FixedPoint(b)})
    est = backward_pilot_smoothing(model, sched, m, 3, kernel=kernel_cls(model), partition=0.5)
    for t in (2, 6, 10):
        h = est.per_time[t]
        c = h.centers()
        ok = h.counts >= 1000
        exact = np.exp(bridge_log_density(t, c, T, b, 1.0))
        rel = np.abs(h.coefficients[ok] - exact[ok]) / exact[ok]
        # bin averaging plus counting noise
        assert np.all(rel < 0.05 + 4 / np.sqrt(h.counts[ok])), (t, rel.max())


def test_backward_pilots_with_observations_match_kalman_shape():
    rng = np.random.default_rng(11)
    T = 8
    y = rng.normal(size=T + 1)
    model = LinearGaussianModel(0.9, 1.0)
    cons = {t: Observation.gaussian(y[t], 0.8) for t in range(1, T)}
    cons[T] = Observation.gaussian(y[T], 0.8, strong=True)
    sched = ConstraintSchedule.from_mapping(T, cons)
    est = backward_pilot_smoothing(model, sched, 200_000, 5, partition=0.25, diffuse=(0.0, 4.0))
    yy = y.copy()
    yy[0] = np.nan
    prec, info = future_log_likelihood(LinearGaussianSpec(0.9, 1.0, 1.0, 0.0, 0.0), yy, 0.8, 0, T)
    # sparse tail cells carry heavy-tailed weights, so only the bulk is compared
    for t in (4, 7):
        h = est.per_time[t]
        ok = h.counts >= 3000
        c = h.centers()[ok]
        resid = h.log_coef[ok] - (-0.5 * prec[t] * c**2 + info[t] * c)
        assert ok.sum() >= 8 and np.std(resid) < 0.1, (t, ok.sum(), np.std(resid))


def test_backward_pilots_need_markov_and_fail_loudly():
    from csmc.experiments.garch import GjrGarchDccParams, GjrMarketModel, market_schedule

    p = GjrGarchDccParams(T=5)
    with pytest.raises(ConfigurationError):
        backward_pilot_smoothing(GjrMarketModel(p), market_schedule(p), 10)
    model = LinearGaussianModel(1.0, 1.0)
    dead = Observation(0.0, lambda y, x: np.full(len(x), -np.inf))
    sched = ConstraintSchedule.from_mapping(3, {3: FixedPoint(0.0), 1: dead})
    with pytest.raises(EstimatorDegenerateError):
        backward_pilot_smoothing(model, sched, 50, 0)


def test_increment_kernel_density():
    k = IncrementKernel(lambda n, rng: rng.laplace(size=n), lambda d: -np.abs(d) - np.log(2.0))
    x, lr = k.sample(0, np.zeros((5, 1)), np.random.default_rng(0))
    assert np.allclose(lr, -np.abs(x[:, 0]) - np.log(2.0))


def test_forward_pilots_conditional_mean():
    T, y, R = 6, 2.0, 0.5
    model = LinearGaussianModel(1.0, 1.0, 0.0, 1.0)
    sched = ConstraintSchedule.from_mapping(T, {T: Observation.gaussian(y, R, strong=True)})
    est = forward_pilot_smoothing(model, sched, 100_000, 2, partition=0.25)
    for t in (1, 4):
        h = est.per_time[t]
        ok = h.counts >= 3000
        c = h.centers()[ok]
        exact = stats.norm.pdf(y, c, np.sqrt(R + (T - t)))
        assert np.all(np.abs(h.coefficients[ok] / exact - 1) < 0.06)


def test_per_path_pilots_are_unbiased():
    from csmc.streams import Streams

    T, y, R = 5, 1.0, 0.3
    model = LinearGaussianModel(1.0, 1.0)
    sched = ConstraintSchedule.from_mapping(T, {T: Observation.gaussian(y, R, strong=True)})
    x = np.array([[-1.0], [0.0], [2.0]])
    view = StateView(x, streams=Streams(4))
    got = per_path_estimates(model, sched, 2, view, 40_000)
    exact = stats.norm.pdf(y, x[:, 0], np.sqrt(R + 3))
    assert np.allclose(got, exact, rtol=0.03)


def test_peis_linear_gaussian_is_exact():
    rng = np.random.default_rng(0)
    T = 10
    y = rng.normal(size=T + 1)
    y[0] = np.nan
    model = LinearGaussianModel(0.9, 1.0, 0.0, 1.0)
    sched = ConstraintSchedule([Trivial()] + [Observation.gaussian(v, 0.5, strong=(t == T)) for t, v in
                                              enumerate(y[1:], 1)])
    res = peis_optimize(model, sched, 2000, 1)
    assert all(res.converged.values())
    prec, info = future_log_likelihood(LinearGaussianSpec(0.9, 1.0, 1.0, 0.0, 1.0), y, 0.5, 0, T)
    xs = np.linspace(-3, 3, 40)
    for t in (1, 5, 10):
        resid = res.log_chi(t, xs) - (-0.5 * prec[t - 1] * xs**2 + info[t - 1] * xs)
        assert np.std(resid) < 1e-8
