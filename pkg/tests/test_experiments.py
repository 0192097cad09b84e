import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate

from csmc.engine import ResamplingPolicy, marginal_means, run_csmc
from csmc.errors import ConfigurationError
from csmc.experiments.bridge import BridgeExperimentConfig, bridge_problem, run_bridge
from csmc.experiments.custom import CUSTOM_METHODS, CustomExperimentConfig, run_custom
from csmc.experiments.garch import (
    GarchDccState,
    GjrGarchDccParams,
    LrmesExperimentConfig,
    garch_dcc_step,
    market_variances,
    run_lrmes,
    simulate_firm,
    simulate_joint,
)
from csmc.experiments.trading import (
    TradeKernel,
    TradingExperimentConfig,
    kalman_reference,
    optimal_utility,
    replicate,
    run_trading,
    trading_problem,
    utility,
    viterbi_utility,
)
from csmc.model import BootstrapProposal
from csmc.oracles import LinearGaussianSpec, kalman_smooth

# ---------------------------------------------------------------------------
# GJR-GARCH / DCC
# ---------------------------------------------------------------------------


def test_garch_step_without_shocks():
    p = GjrGarchDccParams()
    s0 = GarchDccState.initial(p, 3)
    s1 = garch_dcc_step(p, s0, np.zeros(3), np.zeros(3))
    assert np.allclose(s1.var_m, p.omega_m + p.beta_m * p.sigma_m1**2, rtol=1e-15)
    assert np.allclose(s1.var_f, p.omega_f + p.beta_f * p.sigma_f1**2, rtol=1e-15)
    assert np.all(s1.x_m == 0) and np.all(s1.x_f == 0)


def test_garch_step_negative_unit_shock():
    p = GjrGarchDccParams()
    s1 = garch_dcc_step(p, GarchDccState.initial(p, 1), np.array([-1.0]), np.array([0.0]))
    s = 0.0113
    expected = 3.35e-6 + (3.35e-6 + 0.152) * s * s + 0.858 * s * s
    assert s1.var_m[0] == pytest.approx(expected, rel=1e-14)
    assert s1.x_m[0] == pytest.approx(-s)
    # positive shock skips the leverage term
    up = garch_dcc_step(p, GarchDccState.initial(p, 1), np.array([1.0]), np.array([0.0]))
    assert up.var_m[0] == pytest.approx(3.35e-6 + 3.35e-6 * s * s + 0.858 * s * s, rel=1e-14)


def test_dcc_without_dynamics_keeps_initial_correlation():
    p = GjrGarchDccParams(alpha_c=0.0, beta_c=0.0)
    rng = np.random.default_rng(0)
    s = GarchDccState.initial(p, 50)
    for _ in range(5):
        s = garch_dcc_step(p, s, rng.normal(size=50), rng.normal(size=50))
        assert np.allclose(s.rho, p.r_f1)


def test_garch_parameter_checks():
    with pytest.raises(ValueError):
        GjrGarchDccParams(alpha_c=0.5, beta_c=0.5)
    with pytest.raises(ValueError):
        GjrGarchDccParams(omega_m=0.0)
    with pytest.warns(RuntimeWarning):
        GjrGarchDccParams(beta_m=0.95)
    with pytest.raises(ConfigurationError):
        LrmesExperimentConfig(n=0)
    cfg = LrmesExperimentConfig(T=7, n=5)
    assert cfg.model_params() == GjrGarchDccParams(T=7)


def test_firm_simulation_reuses_market_shocks():
    p = GjrGarchDccParams(T=6)
    xm, xf = simulate_joint(p, 4, np.random.default_rng(1))
    # re-simulating the firm from the same market path and firm shocks is exact
    rng_a = np.random.default_rng(2)
    a = simulate_firm(p, xm, rng_a)
    b = simulate_firm(p, xm, np.random.default_rng(2))
    assert np.array_equal(a, b)
    var = market_variances(p, xm)
    assert var.shape == (4, 6) and np.allclose(var[:, 0], p.sigma_m1**2)


def test_vacuous_threshold_gives_unconditional_lrmes():
    p = GjrGarchDccParams(c=float("inf"), T=20)
    res = run_lrmes(p, "csmc-parametric", n=20_000, seed=3, resample_every=5)
    xm, xf = simulate_joint(p, 200_000, np.random.default_rng(4))
    ref = 1 - np.exp(xf[:, -1])
    se_ref = ref.std() / np.sqrt(ref.size)
    assert abs(res.estimate - ref.mean()) < 3 * np.hypot(res.se, se_ref)
    rej = run_lrmes(p, "rejection", max_attempts=5_000, seed=3)
    assert rej.acceptance_rate == 1.0


def test_two_stage_matches_joint_sampling_small_horizon():
    p = GjrGarchDccParams(T=5, c=-0.03)
    xm, xf = simulate_joint(p, 400_000, np.random.default_rng(5))
    hit = xm[:, -1] < p.c
    ref = 1 - np.exp(xf[hit, -1])
    se_ref = ref.std() / np.sqrt(ref.size)
    for method in ("csmc-parametric", "drifted-smc"):
        res = run_lrmes(p, method, n=20_000, seed=6, resample_every=1)
        assert abs(res.estimate - ref.mean()) < 3 * np.hypot(res.se, se_ref), method
        assert np.all(res.market_paths[:, -1] < p.c)


def test_lrmes_methods_and_summary():
    p = GjrGarchDccParams(T=10, c=-0.05)
    res = run_lrmes(p, "csmc-forward-pilot", n=500, m=200, seed=0)
    s = res.summary()
    assert s["method"] == "csmc-forward-pilot" and np.isfinite(s["lrmes"]) and "pilot_time" in s
    with pytest.raises(ConfigurationError):
        run_lrmes(p, "bogus")


# ---------------------------------------------------------------------------
# Trading
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("alpha", [0.0, 0.5, 2.0])
def test_trade_kernel_normalizer_and_moments(alpha):
    k = TradeKernel(alpha, 0.25)
    total, _ = integrate.quad(lambda d: np.exp(k.logpdf(d)), -np.inf, np.inf, epsabs=1e-13)
    assert total == pytest.approx(1.0, abs=1e-9)
    m2, _ = integrate.quad(lambda d: d * d * np.exp(k.logpdf(d)), -np.inf, np.inf, epsabs=1e-13)
    assert k.second_moment == pytest.approx(m2, rel=1e-8)
    d = k.sample(200_000, np.random.default_rng(0))
    assert abs(np.mean(d * d) - m2) < 4 * np.std(d * d) / np.sqrt(d.size)
    assert abs(np.mean(d)) < 4 * np.std(d) / np.sqrt(d.size)


def test_zero_alpha_kernel_is_gaussian():
    k = TradeKernel(0.0, 0.25)
    d = np.linspace(-2, 2, 9)
    assert np.allclose(k.logpdf(d), -0.5 * d * d / 0.25 - 0.5 * np.log(2 * np.pi * 0.25))


@pytest.mark.parametrize("alpha", [0.0, 0.5])
def test_trading_weights_recover_utility(alpha):
    """log w + log q = u + const for complete paths (no resampling)."""
    cfg = TradingExperimentConfig(alpha=alpha)
    model, sched = trading_problem(cfg)
    rep = run_csmc(model, sched, BootstrapProposal(model), policy=ResamplingPolicy.never(), n=100, rng=0)
    x = rep.ensemble.paths[:, :, 0]
    # the bootstrap proposal draws t = 1..T-1 from the kernel; t = T is forced
    log_q = model.kernel.logpdf(np.diff(x[:, :-1], axis=1)).sum(axis=1)
    lhs = rep.ensemble.log_weights + rep.ensemble.log_weight_scale + log_q
    diff = lhs - utility(x, cfg)
    assert np.all(x[:, -1] == 0) and np.ptp(diff) < 1e-9


def test_kalman_reference_and_optimal_utility():
    cfg = TradingExperimentConfig()
    mean, var = kalman_reference(cfg)
    assert mean[0] == 0 and abs(mean[-1]) < 1e-12 and var[0] == 0 and abs(var[-1]) < 1e-12
    u_star = optimal_utility(cfg)
    rng = np.random.default_rng(0)
    perturbed = mean + np.concatenate([[0], 0.1 * rng.normal(size=(cfg.T - 1)), [0]])
    assert utility(perturbed[None, :], cfg)[0] < u_star
    with pytest.raises(ConfigurationError):
        kalman_reference(TradingExperimentConfig(alpha=0.5))


def test_viterbi_on_samples_beats_every_sample():
    cfg = TradingExperimentConfig(n=300, m=100)
    res = run_trading(cfg, "csmc-bp", seed=1)
    best_sample = utility(res.report.ensemble.paths[:, :, 0], cfg).max()
    assert best_sample - 1e-9 <= res.viterbi_utility <= optimal_utility(cfg) + 1e-9
    assert utility(res.viterbi_path[None, :], cfg)[0] == pytest.approx(res.viterbi_utility, abs=1e-9)
    u, _ = viterbi_utility(res.report.ensemble, cfg, cap=5)
    assert u <= res.viterbi_utility + 1e-12


def test_trading_replication_is_worker_independent():
    cfg = TradingExperimentConfig(n=200, m=60, L=3)
    a = replicate(cfg, {"smc": 230, "csmc-bp": 200}, seed=2, viterbi=False)
    b = replicate(cfg, {"smc": 230, "csmc-bp": 200}, seed=2, viterbi=False, workers=3)
    for k in a.mse:
        assert np.array_equal(a.mse[k], b.mse[k])
    assert a.mse["smc"].shape == (cfg.T + 1,)
    assert cfg.sizes == {"smc": 2300, "csmc-bp": 2000} or cfg.n != 2000
    assert TradingExperimentConfig().sizes == {"smc": 2300, "csmc-bp": 2000}


def test_trading_config_validation():
    for bad in (dict(T=1), dict(sigma_x2=0.0), dict(alpha=-1.0), dict(n=0), dict(smc_n=0)):
        with pytest.raises(ConfigurationError):
            TradingExperimentConfig(**bad)
    with pytest.raises(ConfigurationError):
        run_trading(TradingExperimentConfig(), "bogus")


# ---------------------------------------------------------------------------
# Bridge
# ---------------------------------------------------------------------------


def bridge_kalman_reference(cfg):
    T = cfg.steps
    y = np.full(T + 1, np.nan)
    R = np.full(T + 1, cfg.sigma**2)
    y[20], y[40], y[T] = 0.5, -0.5, 1.5
    R[T] = 0.0
    return kalman_smooth(LinearGaussianSpec(1.0, cfg.delta, 1.0, 0.0, 0.0), y, R).smoothed_mean


ZERO_BRIDGE = BridgeExperimentConfig(delta=0.1, horizon=6.0, x_end=1.5, obs_times=(2.0, 4.0), obs_values=(0.5, -0.5),
                                     sigma=0.5, drift="zero", n=4000, m=400, hist_time=3.0)


def test_zero_drift_bridge_matches_kalman():
    # the zero fallback outside the pilot range leaves a bias that grows with n; nearest-cell is consistent
    cfg = replace(ZERO_BRIDGE, outside="nearest")
    res = run_bridge(cfg, seed=0)
    mu, se = marginal_means(res.report.ensemble, se="lineage")
    z = np.abs(mu - bridge_kalman_reference(cfg))[1:-1] / se[1:-1]
    assert np.mean(z < 3) > 0.9 and np.max(z) < 5


def test_zero_fallback_bias_grows_with_n_on_bridge():
    ref = bridge_kalman_reference(ZERO_BRIDGE)
    frac = []
    for n in (4000, 32000):
        res = run_bridge(replace(ZERO_BRIDGE, n=n), seed=0)
        assert res.report.floored > 0
        mu, se = marginal_means(res.report.ensemble, se="lineage")
        frac.append(np.mean(np.abs(mu - ref)[1:-1] / se[1:-1] < 3))
    assert frac[1] < frac[0] < 0.95


def test_bridge_config_and_problem():
    cfg = BridgeExperimentConfig()
    model, sched = bridge_problem(cfg)
    assert cfg.steps == 900 and sched.strong_times == (0, 300, 600, 900)
    for bad in (dict(sigma=0.0), dict(delta=0.0), dict(obs_times=(30.05, 60.0)), dict(drift="cos"),
                dict(hist_time=100.0), dict(obs_values=(1.0,))):
        with pytest.raises(ConfigurationError):
            BridgeExperimentConfig(**bad)


def test_bridge_smoke_run():
    cfg = BridgeExperimentConfig(horizon=9.0, obs_times=(3.0, 6.0), n=200, m=100, hist_time=6.0)
    res = run_bridge(cfg, seed=1)
    assert res.report.final_ess > 0
    assert np.isclose(res.hist_weights.sum(), 1.0) and res.hist_counts.sum() == res.report.ensemble.n
    assert np.all(res.report.ensemble.paths[:, -1, 0] == cfg.x_end)
    assert set(res.summary()) >= {"mode_center", "final_ess"}


# ---------------------------------------------------------------------------
# Custom linear-Gaussian experiment
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("method", CUSTOM_METHODS)
@pytest.mark.parametrize("seed", [0, 2])
def test_custom_methods_match_kalman(method, seed):
    cfg = CustomExperimentConfig(T=8, coef=0.9, strong_times=(4, 8), n=4000, m=2000, peis_iters=10,
                                 outside="nearest")
    res = run_custom(cfg, method, seed=seed)
    mu, se = marginal_means(res.report.ensemble, se="lineage")
    z = np.abs(mu - res.exact_means)[1:] / se[1:]
    assert np.mean(z < 3) >= 0.85 and np.max(z) < 5, (method, z)


def test_zero_fallback_biases_pilot_estimators():
    # seed 2 puts posterior mass beyond the pilot range at t = 1; with the zero
    # fallback those particles are floored and practically never selected
    base = CustomExperimentConfig(T=8, coef=1.0, strong_times=(4, 8), n=16_000, m=2000)
    biased = run_custom(base, "csmc-bp", seed=2)
    fixed = run_custom(replace(base, outside="nearest"), "csmc-bp", seed=2)
    mu_b, se_b = marginal_means(biased.report.ensemble, se="lineage")
    mu_f, se_f = marginal_means(fixed.report.ensemble, se="lineage")
    assert biased.report.floored > 0 and fixed.report.floored == 0
    assert abs(mu_b[1] - biased.exact_means[1]) > 10 * se_b[1]
    assert abs(mu_f[1] - fixed.exact_means[1]) < 4 * se_f[1]


def test_custom_end_point_is_exact():
    cfg = CustomExperimentConfig(T=6, end_point=1.0, strong_times=(3,), n=500, m=300)
    res = run_custom(cfg, "csmc-bp", seed=0)
    assert np.all(res.report.ensemble.paths[:, -1, 0] == 1.0) and res.exact_means[-1] == pytest.approx(1.0)


def test_custom_config_validation():
    for bad in (dict(T=0), dict(noise_var=0.0), dict(observations=(1.0,)), dict(strong_times=(11,)), dict(n=0),
                dict(ess_fraction=0.0)):
        with pytest.raises(ConfigurationError):
            CustomExperimentConfig(**bad)
    cfg = CustomExperimentConfig(T=3, observations=(0.5, None, 1.0))
    y = cfg.data(None)
    assert np.isnan(y[0]) and np.isnan(y[2]) and y[3] == 1.0
    with pytest.raises(ConfigurationError):
        run_custom(cfg, "bogus")


def test_no_warnings_from_default_params():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        GjrGarchDccParams()
