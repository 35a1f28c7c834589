"""
Reproduction suites.

smoke: oracle, gradient and two-node training checks on tiny networks, each
one an assertion.
desk: a scaled experiment on 32-node networks repeated over several seeds,
writing MAE-vs-t, structure, density and influence-maximization tables and
counting the seeds that meet each target.
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .cascade import DelayModel, derived_seed, generate_dataset, sample_source_sets, substream
from .evaluation import evaluate_network, mae_table
from .graph import DirectedNetwork, generate_network, random_generate, sample_rates
from .influence_max import (
    ImProblem,
    MonteCarloEstimator,
    NmfEstimator,
    brute_force_select,
    evaluate_selection,
    greedy_select,
)
from .nmf_core import estimate_influence, forward
from .oracle import ctmc_marginals, influence, mc_marginals, moment_system_marginals
from .training import TrainConfig, gradient_check, train

logger = logging.getLogger(__name__)

SUITES = ("smoke", "desk")
FLOAT_FORMAT = "%.10g"
CHECK_COLUMNS = ["check", "value", "tolerance", "passed"]

DESK_SEEDS = 5
DESK_REQUIRED = 4
DESK_NODES = 32
DESK_EDGES = 128
DESK_HORIZON = 10
DESK_SOURCES = 200
DESK_PER_SOURCE = 10
DESK_TEST_SOURCES = 20
DESK_MC_SAMPLES = 10000
DESK_IM_BUDGET = 5
DESK_IM_SAMPLES = 2000
DESK_BUDGET_SECONDS = 30 * 60
# network family and delay model of every MAE-vs-t cell
DESK_GRID = (("hier", "exp"), ("hier", "rayleigh"), ("core", "exp"), ("core", "rayleigh"))
DESK_STRUCTURE = ("random", "hier", "core")
# edges per node of the density sweep on hierarchical networks
DESK_DENSITIES = (2, 4, 6, 8)


@dataclass
class SuiteResult:
    """Outcome of a suite: the checks table, whether all checks passed, and the files written."""

    name: str
    checks: pd.DataFrame
    files: list = field(default_factory=list)

    @property
    def passed(self):
        return bool(self.checks["passed"].all()) if len(self.checks) else True


def _check(rows, name, value, tolerance, passed, **extra):
    rows.append({**extra, "check": name, "value": float(value), "tolerance": float(tolerance), "passed": bool(passed)})
    level = logging.INFO if passed else logging.WARNING
    prefix = "".join(f"{k} {v} " for k, v in extra.items())
    logger.log(level, "%s%s: %.6g (tolerance %.3g) %s", prefix, name, value, tolerance, "ok" if passed else "FAILED")


def _write(frame, path, files):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    files.append(str(path))


def _two_node():
    return DirectedNetwork.from_edges(2, [(0, 1, 1.0)])


def _two_node_training(rows, seed, n_jobs):
    net = _two_node()
    cascades = generate_dataset(net, DelayModel("exp"), 200, 10, (1, 1), T=10, seed=derived_seed(seed, 5), n_jobs=n_jobs)
    config = TrainConfig(correction=False, lr=0.01, epochs=100, patience=100, val_fraction=0.0, seed=derived_seed(seed, 6))
    params, _ = train(cascades, config)
    rate = params.implied_rates()[1, 0]
    _check(rows, "two_node_mean_field_rate", abs(rate - 1.0), 0.15, abs(rate - 1.0) <= 0.15)

    config = TrainConfig(
        hidden=(16, 16, 16), lr=0.005, epochs=150, patience=150, val_fraction=0.0, seed=derived_seed(seed, 7),
    )
    params, _ = train(cascades, config)
    exact = influence(ctmc_marginals(net, [0], np.arange(1, 11)))
    err = float(np.abs(estimate_influence(params, [0], 10) - exact).max())
    _check(rows, "two_node_nmf_influence", err, 0.05, err <= 0.05)


def run_smoke(out_dir, seed=0, n_jobs=1):
    rows = []
    exp = DelayModel("exp")
    closed = 1.0 - np.exp(-1.0)

    x = ctmc_marginals(_two_node(), [0], [1.0])
    _check(rows, "two_node_ctmc", abs(x[0, 1] - closed), 1e-6, abs(x[0, 1] - closed) <= 1e-6)

    mean, _ = mc_marginals(_two_node(), exp, [0], [1.0], 100000, seed=derived_seed(seed, 1), n_jobs=n_jobs)
    _check(rows, "two_node_mc", abs(mean[0, 1] - closed), 5e-3, abs(mean[0, 1] - closed) <= 5e-3)

    rng = substream(seed, 2)
    worst = 0.0
    for k in range(5):
        n = int(rng.integers(3, 7))
        net = sample_rates(random_generate(n, int(rng.integers(n, n * (n - 1) + 1)), rng), 0.1, 1.0, rng)
        times = np.arange(1, 6)
        worst = max(worst, float(np.abs(ctmc_marginals(net, [0], times) - moment_system_marginals(net, [0], times)).max()))
    _check(rows, "moment_vs_ctmc", worst, 1e-4, worst <= 1e-4)

    net = sample_rates(random_generate(8, 20, rng), 0.1, 1.0, rng)
    times = np.arange(1, 6)
    exact = ctmc_marginals(net, [0, 1], times)
    mean, se = mc_marginals(net, exp, [0, 1], times, 20000, seed=derived_seed(seed, 3), n_jobs=n_jobs)
    inside = float(np.mean(np.abs(mean - exact) <= 3.0 * se + 1e-6))
    _check(rows, "mc_vs_ctmc_within_3se", inside, 0.95, inside >= 0.95)
    mae = float(np.abs(mean - exact).mean())
    _check(rows, "mc_vs_ctmc_mae", mae, 0.01, mae < 0.01)

    worst, _ = gradient_check(seed=seed, num_instances=20)
    _check(rows, "gradcheck_max_rel_error", worst, 1e-4, worst < 1e-4)

    ratio = np.inf
    for k in range(5):
        net = sample_rates(random_generate(8, 16, rng), 0.1, 1.0, rng)
        estimator = MonteCarloEstimator(net, exp, 2.0, num_samples=500, seed=derived_seed(seed, 4, k))
        problem = ImProblem(estimator, 2.0, 2)
        ratio = min(ratio, greedy_select(problem).influence / brute_force_select(problem).influence)
    bound = 1.0 - 1.0 / np.e
    _check(rows, "greedy_vs_brute_force", ratio, bound, ratio >= bound)

    _two_node_training(rows, seed, n_jobs)

    checks = pd.DataFrame(rows, columns=CHECK_COLUMNS)
    files = []
    _write(checks, Path(out_dir) / "smoke_checks.csv", files)
    return SuiteResult("smoke", checks, files)


@dataclass
class DeskCell:
    """One simulated setting of the desk suite: network, delays, training cascades."""

    network: str
    delay: str
    net: DirectedNetwork
    model: DelayModel
    cascades: list
    seed: int

    @classmethod
    def simulate(cls, network, delay, edges, seed, n_jobs=1):
        net = generate_network(network, DESK_NODES, edges, 0.1, 1.0, seed=derived_seed(seed, 0))
        model = DelayModel(delay)
        cascades = generate_dataset(
            net, model, DESK_SOURCES, DESK_PER_SOURCE, T=DESK_HORIZON, seed=derived_seed(seed, 1), n_jobs=n_jobs,
        )
        return cls(network, delay, net, model, cascades, seed)

    def fit(self, correction=True, n_jobs=1):
        config = TrainConfig(horizon=DESK_HORIZON, seed=derived_seed(self.seed, 2), correction=correction, n_jobs=n_jobs)
        params, log = train(self.cascades, config)
        logger.info(
            "%s/%s: %s model trained for %d epochs", self.network, self.delay,
            "NMF" if correction else "mean-field", len(log),
        )
        return params

    def mae(self, models, n_jobs=1):
        """MAE-vs-t table of each model against a Monte Carlo reference on held-out source sets"""
        test_sources = sample_source_sets(DESK_NODES, DESK_TEST_SOURCES, (1, 10), substream(self.seed, 3))
        grid = np.arange(1, DESK_HORIZON + 1)
        oracle = MonteCarloEstimator(
            self.net, self.model, DESK_HORIZON, DESK_MC_SAMPLES, derived_seed(self.seed, 4), n_jobs,
        )
        reference = np.stack([oracle.marginals(s, grid) for s in test_sources])
        tables = []
        for method, params in models.items():
            predicted = forward(params, test_sources, DESK_HORIZON, keep_cache=False).x[1:].transpose(1, 0, 2)
            table = mae_table(grid, predicted, reference)
            table.insert(0, "method", method)
            tables.append(table)
        return pd.concat(tables, ignore_index=True)


def _structure_row(cell, params, run):
    report = evaluate_network(params.A * params.support(), cell.net)
    return {
        "seed": run, "network": cell.network, "method": "NMF", "prc": report.precision,
        "rcl": report.recall, "acc": report.accuracy, "cor": report.correlation,
    }


def _influence_rows(cell, params, run, seed, n_jobs):
    rows = []
    estimators = {
        "NMF": NmfEstimator(params, DESK_HORIZON),
        "MC": MonteCarloEstimator(cell.net, cell.model, DESK_HORIZON, DESK_IM_SAMPLES, derived_seed(seed, 0), n_jobs),
    }
    for method, estimator in estimators.items():
        picks = greedy_select(ImProblem(estimator, DESK_HORIZON, DESK_IM_BUDGET), lazy=True, n_jobs=n_jobs).nodes
        for budget in range(1, DESK_IM_BUDGET + 1):
            value, se = evaluate_selection(
                cell.net, cell.model, picks[:budget], DESK_HORIZON, DESK_MC_SAMPLES,
                derived_seed(seed, 1, budget), n_jobs,
            )
            rows.append({
                "seed": run, "budget": budget, "method": method, "influence": value, "se": se,
                "nodes": ";".join(str(v) for v in picks[:budget]),
            })
    return rows


def run_desk_seed(run, seed, n_jobs=1):
    """
    One repetition of the desk experiment.

    Returns the MAE, structure, density and influence rows plus the
    per-seed checks of the learning, structure and influence targets.
    """
    checks, structure, density = [], [], []
    cells, models, mae = {}, {}, []
    for k, (network, delay) in enumerate(DESK_GRID):
        cell = DeskCell.simulate(network, delay, DESK_EDGES, derived_seed(seed, 20, k), n_jobs)
        fitted = {"NMF": cell.fit(True, n_jobs), "MF": cell.fit(False, n_jobs)}
        table = cell.mae(fitted, n_jobs)
        table.insert(0, "delay", delay)
        table.insert(0, "network", network)
        table.insert(0, "seed", run)
        mae.append(table)
        cells[network, delay], models[network, delay] = cell, fitted
    mae = pd.concat(mae, ignore_index=True)

    base = mae[(mae["network"] == "hier") & (mae["delay"] == "exp")]
    nmf = base[base["method"] == "NMF"]["prob_mae"].mean()
    mf = base[base["method"] == "MF"]["prob_mae"].mean()
    _check(checks, "nmf_prob_mae", nmf, 0.10, nmf <= 0.10, seed=run)
    _check(checks, "nmf_beats_mean_field", mf - nmf, 0.0, nmf < mf, seed=run)

    for k, network in enumerate(DESK_STRUCTURE):
        if (network, "rayleigh") in cells:
            cell, params = cells[network, "rayleigh"], models[network, "rayleigh"]["NMF"]
        else:
            cell = DeskCell.simulate(network, "rayleigh", DESK_EDGES, derived_seed(seed, 21, k), n_jobs)
            params = cell.fit(True, n_jobs)
        structure.append(_structure_row(cell, params, run))
    hier = next(row for row in structure if row["network"] == "hier")
    cor, acc = hier["cor"] or 0.0, hier["acc"] or 0.0
    _check(checks, "hier_cor", cor, 0.80, cor >= 0.80, seed=run)
    _check(checks, "hier_acc", acc, 0.70, acc >= 0.70, seed=run)

    for k, per_node in enumerate(DESK_DENSITIES):
        edges = per_node * DESK_NODES
        if edges == DESK_EDGES:
            table = base[base["method"] == "NMF"]
        else:
            cell = DeskCell.simulate("hier", "exp", edges, derived_seed(seed, 22, k), n_jobs)
            table = cell.mae({"NMF": cell.fit(True, n_jobs)}, n_jobs)
        density.append({
            "seed": run, "edges_per_node": per_node, "edges": edges,
            "prob_mae": table["prob_mae"].mean(), "influence_mae": table["influence_mae"].mean(),
        })

    im = _influence_rows(cells["hier", "exp"], models["hier", "exp"]["NMF"], run, derived_seed(seed, 23), n_jobs)
    nmf_im = np.array([r["influence"] for r in im if r["method"] == "NMF"])
    mc_im = np.array([r["influence"] for r in im if r["method"] == "MC"])
    ratio = float((nmf_im / mc_im).min())
    _check(checks, "nmf_greedy_vs_oracle_greedy", ratio, 0.90, ratio >= 0.90, seed=run)
    return mae, structure, density, im, checks


# targets counted over seeds: name -> per-seed checks that must all pass
DESK_TARGETS = {
    "learning": ("nmf_prob_mae", "nmf_beats_mean_field"),
    "structure": ("hier_cor", "hier_acc"),
    "influence_max": ("nmf_greedy_vs_oracle_greedy",),
}


def summarize_seeds(seed_checks, required=DESK_REQUIRED):
    """one row per target: the number of seeds meeting it against the required count"""
    rows = []
    for target, names in DESK_TARGETS.items():
        part = seed_checks[seed_checks["check"].isin(names)]
        met = int(part.groupby("seed")["passed"].all().sum())
        _check(rows, target, met, required, met >= required)
    return pd.DataFrame(rows, columns=CHECK_COLUMNS)


def run_desk(out_dir, seed=0, n_jobs=1, seeds=DESK_SEEDS):
    start = time.perf_counter()
    out_dir = Path(out_dir)
    mae, structure, density, im, seed_checks = [], [], [], [], []
    for run in range(seeds):
        logger.info("Desk repetition %d of %d", run + 1, seeds)
        results = run_desk_seed(run, derived_seed(seed, 30, run), n_jobs)
        mae.append(results[0])
        structure += results[1]
        density += results[2]
        im += results[3]
        seed_checks += results[4]

    files = []
    _write(pd.concat(mae, ignore_index=True), out_dir / "mae_vs_t.csv", files)
    _write(
        pd.DataFrame(structure, columns=["seed", "network", "method", "prc", "rcl", "acc", "cor"]),
        out_dir / "structure_metrics.csv", files,
    )
    _write(
        pd.DataFrame(density, columns=["seed", "edges_per_node", "edges", "prob_mae", "influence_mae"]),
        out_dir / "mae_vs_density.csv", files,
    )
    _write(
        pd.DataFrame(im, columns=["seed", "budget", "method", "influence", "se", "nodes"]),
        out_dir / "influence_max.csv", files,
    )
    seed_checks = pd.DataFrame(seed_checks, columns=["seed"] + CHECK_COLUMNS)
    _write(seed_checks, out_dir / "desk_seed_checks.csv", files)
    checks = summarize_seeds(seed_checks, min(DESK_REQUIRED, seeds))
    _write(checks, out_dir / "desk_checks.csv", files)

    elapsed = time.perf_counter() - start
    if elapsed > DESK_BUDGET_SECONDS:
        logger.warning("Desk suite took %.0f s, over the %d s budget", elapsed, DESK_BUDGET_SECONDS)
    logger.info("Desk suite finished in %.0f s", elapsed)
    return SuiteResult("desk", checks, files)


def reproduce(suite, out_dir, seed=0, n_jobs=1):
    """run a suite, writing its tables into out_dir"""
    if suite not in SUITES:
        raise ValueError(f"Unknown suite {suite!r}; choose from {SUITES}.")
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    runner = run_smoke if suite == "smoke" else run_desk
    result = runner(out_dir, seed, n_jobs)
    logger.info("Suite %s %s; wrote %s", suite, "passed" if result.passed else "FAILED", ", ".join(result.files))
    return result
