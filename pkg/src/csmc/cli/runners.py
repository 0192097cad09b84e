"""Experiment dispatch for the CLI: config in, :class:`OutputBundle` out."""

from __future__ import annotations

import numpy as np

from csmc.cli.config import RunConfig, config_to_dict
from csmc.cli.io import (
    OutputBundle,
    Table,
    heatmap_table,
    histogram_rows,
    marginals_table,
    means_table,
    mse_table,
    paths_table,
    records_table,
)
from csmc.errors import ConfigurationError
from csmc.experiments.bridge import bridge_estimators, bridge_problem, run_bridge
from csmc.experiments.custom import CUSTOM_METHODS, custom_estimators, custom_problem, run_custom
from csmc.experiments.garch import market_schedule, rejection_for
from csmc.experiments.trading import (
    optimal_utility,
    reference_means,
    replicate,
    run_trading,
    trading_estimators,
    trading_problem,
)
from csmc.priority.base import PriorityEstimatorSet, heatmap_export, histograms_from_csv, histograms_to_csv
from csmc.streams import Streams


def _base_summary(config: RunConfig, command: str) -> dict:
    return {"command": command, "config": config_to_dict(config), "seed": config.seed}


def run_experiment(config: RunConfig, workers: int = 1) -> OutputBundle:
    """Execute one experiment and collect its output tables."""
    p, seed = config.params, config.seed
    summary = _base_summary(config, "run")
    tables: dict = {}
    if config.experiment == "lrmes":
        res = p.run(config.method, seed, workers)
        ens = res.report.ensemble
        summary["result"] = res.summary()
        tables["marginals"] = marginals_table(ens, times=[ens.time])
        firm = Table(["particle", "firm_log_return_T"], [[i, v] for i, v in enumerate(res.firm_paths[:, -1])])
        tables["firm"] = firm
    elif config.experiment == "bridge":
        res = run_bridge(p, seed, workers)
        ens = res.report.ensemble
        summary["result"] = res.summary()
        k = res.extra["hist_step"]
        tables["marginals"] = Table(
            ["t", "lower", "upper", "count", "mass"],
            histogram_rows(k, ens.paths[:, k, 0], ens.normalized_weights(), res.hist_edges),
        )
    elif config.experiment == "trading":
        res = run_trading(p, config.method, seed, workers=workers)
        ens = res.report.ensemble
        summary["result"] = {"method": res.method, "viterbi_utility": res.viterbi_utility, **res.extra}
        if res.viterbi_path is not None:
            tables["viterbi"] = Table(["t", "x"], [[t, v] for t, v in enumerate(np.asarray(res.viterbi_path).ravel())])
        tables["marginals"] = marginals_table(ens)
    else:
        res = run_custom(p, config.method, seed, workers)
        ens = res.report.ensemble
        summary["result"] = res.summary()
        tables["marginals"] = marginals_table(ens)
    summary["report"] = res.report.summary()
    exact = getattr(res, "exact_means", None)
    tables["paths"] = paths_table(ens)
    tables["means"] = means_table(ens, exact)
    if exact is not None:
        tables["mse"] = mse_table({config.method: (res.means - exact) ** 2})
    return OutputBundle(tables, summary)


# ---------------------------------------------------------------------------
# Estimator sets on disk
# ---------------------------------------------------------------------------


def _problem(config: RunConfig, seed: int):
    p = config.params
    if config.experiment == "bridge":
        return bridge_problem(p)
    if config.experiment == "trading":
        return trading_problem(p)
    if config.experiment == "custom":
        return custom_problem(p, p.data(Streams(seed).child("custom")))
    return None, market_schedule(p.model_params())


def build_estimators(config: RunConfig) -> PriorityEstimatorSet:
    p, seed = config.params, config.seed
    if config.experiment == "bridge":
        return bridge_estimators(p, seed)
    if config.experiment == "trading":
        if config.method != "csmc-bp":
            raise ConfigurationError("method: pilots are only built for trading method 'csmc-bp'")
        return trading_estimators(p, seed)
    if config.experiment == "custom":
        if config.method not in ("csmc-bp", "csmc-fp"):
            raise ConfigurationError(
                "method: pilots can be written for custom methods 'csmc-bp' and 'csmc-fp' (histogram estimators)"
            )
        return custom_estimators(p, config.method, seed)[1]
    raise ConfigurationError(
        "experiment: lrmes estimators are closed forms or sigma-binned tables and are not serialised; "
        "use bridge, trading or custom"
    )


def pilots_bundle(config: RunConfig) -> OutputBundle:
    est = build_estimators(config)
    summary = _base_summary(config, "pilots")
    summary["times"] = sorted(int(t) for t in est.per_time)
    summary["kind"] = est.kind
    return OutputBundle({}, summary, {"pilots.csv": histograms_to_csv(est)})


def load_estimators(config: RunConfig, text: str) -> PriorityEstimatorSet:
    _, schedule = _problem(config, config.seed)
    try:
        return histograms_from_csv(text, schedule)
    except (ValueError, KeyError) as exc:
        raise ConfigurationError(f"estimators: cannot read estimator file ({exc})") from None


def heatmap_bundle(config: RunConfig, est: PriorityEstimatorSet, times, grid) -> OutputBundle:
    T = len(est.schedule) - 1
    for t in times:
        if not 0 <= t <= T:
            raise ConfigurationError(f"times: {t} is outside 0..{T}")
    with np.errstate(divide="ignore"):
        values = np.log(heatmap_export(est, times, grid))
    summary = _base_summary(config, "heatmap")
    summary["times"] = list(times)
    summary["grid"] = {"lower": float(grid[0]), "upper": float(grid[-1]), "points": int(grid.size)}
    return OutputBundle({"heatmap": heatmap_table(times, grid, values)}, summary)


# ---------------------------------------------------------------------------
# Method comparisons
# ---------------------------------------------------------------------------


def bench(config: RunConfig, workers: int = 1) -> OutputBundle:
    """Compare methods at matched compute.

    lrmes
        Every sequential method at ``n`` particles, then a rejection run
        given the longest of their wall-clock times.
    trading
        ``L`` replications of SMC (``smc_n`` particles) and cSMC-BP (``n``),
        MSE of the posterior means against the reference, and Viterbi
        utilities.
    custom
        Each method once, squared error of the means against the Kalman
        smoother.
    """
    p, seed = config.params, config.seed
    summary = _base_summary(config, "bench")
    tables: dict = {}
    if config.experiment == "lrmes":
        rows, longest = [], 0.0
        for method in ("drifted-smc", "csmc-parametric", "csmc-forward-pilot"):
            res = p.run(method, seed, workers)
            rows.append(res.summary())
            longest = max(longest, res.wall_time)
        rej = rejection_for(p.model_params(), longest, seed)
        rows.append(rej.summary())
        tables["bench"] = records_table(rows)
    elif config.experiment == "trading":
        ref = reference_means(p, Streams(seed).child("reference"), workers)
        rep = replicate(p, p.sizes, seed, reference=ref, workers=workers)
        tables["mse"] = mse_table(rep.mse)
        rows = [
            {"method": m, "n": rep.sizes[m], "median_viterbi_utility": rep.median_utility(m),
             "mean_mse": float(np.mean(rep.mse[m]))}
            for m in rep.sizes
        ]
        tables["bench"] = records_table(rows)
        if p.alpha == 0:
            summary["optimal_utility"] = optimal_utility(p)
    elif config.experiment == "custom":
        curves, rows = {}, []
        for method in CUSTOM_METHODS:
            res = run_custom(p, method, seed, workers)
            curves[method] = (res.means - res.exact_means) ** 2
            rows.append(res.summary())
        tables["mse"] = mse_table(curves)
        tables["bench"] = records_table(rows)
    else:
        raise ConfigurationError("experiment: bench supports lrmes, trading and custom")
    return OutputBundle(tables, summary)
