"""Command-line entry point: `nmf <subcommand> [options]`."""
import argparse
import json
import logging
import sys

import numpy as np
import pandas as pd

from .cascade import (
    SHAPE_STREAM,
    DatasetFormatError,
    DelayModel,
    derived_seed,
    generate_dataset,
    load_dataset,
    substream,
)
from .config import ConfigError, ExperimentConfig, write_run_record
from .evaluation import DEFAULT_EDGE_THRESHOLD, evaluate_network, mae_table
from .graph import NETWORK_MODELS, NetworkFormatError, generate_network, load_network, save_network
from .influence_max import (
    CtmcEstimator,
    EstimatorError,
    ImProblem,
    MonteCarloEstimator,
    NmfEstimator,
    evaluate_selection,
    greedy_select,
)
from .model import NeuralMeanField
from .oracle import ctmc_marginals, marginals_frame, mc_marginals, moment_system_marginals
from .reproduce import FLOAT_FORMAT, SUITES, reproduce
from .training import CLAMP_GRADIENTS, gradient_check
from .version import describe

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s |%(levelname)s: %(message)s"
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    """Bad command line or missing required option."""


class SuiteFailure(RuntimeError):
    """An assertion suite reported failed checks."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def node_list(value):
    """'0,3,7' or a list of ids -> tuple of ints"""
    if value is None:
        return None
    if isinstance(value, str):
        parts = [p for p in value.replace(";", ",").split(",") if p.strip()]
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            raise ValueError(f"Cannot parse node list {value!r}.") from None
    return tuple(int(v) for v in value)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _delay_model(args, net):
    if args.model == "weibull":
        return DelayModel.weibull_sampled(net, substream(args.seed, SHAPE_STREAM), args.shape_low, args.shape_high)
    return DelayModel(args.model)


def _read_sources(path):
    with open(path, encoding="utf-8") as f:
        return [node_list(line.strip()) for line in f if line.strip() and not line.startswith("#")]


def _emit(frame, out, float_format=None):
    if out is None:
        sys.stdout.write(frame.to_csv(index=False, float_format=float_format))
    else:
        frame.to_csv(out, index=False, float_format=float_format)


def _emit_json(doc, out):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)


def cmd_gen_net(args):
    _require(args, "out")
    net = generate_network(args.model, args.nodes, args.edges, args.rate_low, args.rate_high, args.seed)
    save_network(net, args.out)


def cmd_simulate(args):
    _require(args, "net", "out")
    net = load_network(args.net)
    generate_dataset(
        net, _delay_model(args, net), args.sources, args.per_source, (args.size_lo, args.size_hi),
        args.horizon, args.seed, args.out, n_jobs=args.threads, progress=args.verbose,
    )


def cmd_oracle(args):
    _require(args, "net")
    if (args.source is None) == (args.sources is None):
        raise UsageError("oracle needs exactly one of --source and --sources")
    net = load_network(args.net)
    sources = [node_list(args.source)] if args.source is not None else _read_sources(args.sources)
    times = np.arange(1, args.grid_T + 1, dtype=float)
    model = _delay_model(args, net)
    frames = []
    for k, source in enumerate(sources):
        se = None
        if args.method == "ctmc":
            marginals = ctmc_marginals(net, source, times, args.step, model)
        elif args.method == "moment":
            marginals = moment_system_marginals(net, source, times, args.step, model)
        else:
            marginals, se = mc_marginals(
                net, model, source, times, args.samples, derived_seed(args.seed, k), args.threads,
            )
        frames.append(marginals_frame(times, marginals, source if len(sources) > 1 else None, se))
    _emit(pd.concat(frames, ignore_index=True), args.out)


def cmd_train(args):
    _require(args, "data", "out")
    mask = None
    if args.net_mask is not None:
        mask = load_network(args.net_mask).matrix() != 0
    model = NeuralMeanField(
        mask=mask, variant=args.variant, tau=args.tau, kernel_terms=args.kernel_terms,
        hidden=node_list(args.hidden) or (), correction=not args.no_correction, lr=args.lr,
        batch_size=args.batch, epochs=args.epochs, patience=args.patience, seed=args.seed,
        horizon=args.horizon, val_fraction=args.val_fraction, clamp_grad=args.clamp_grad, n_jobs=args.threads,
    )
    model.fit(load_dataset(args.data, args.horizon))
    model.save(args.out)
    if args.log is not None:
        model.log_.to_csv(args.log, index=False, float_format=FLOAT_FORMAT)


def cmd_gradcheck(args):
    worst, frame = gradient_check(args.seed, args.instances)
    print(f"{worst:.6e}")
    if args.out is not None:
        frame.to_csv(args.out, index=False, float_format=FLOAT_FORMAT)
    if not worst < GRADCHECK_TOLERANCE:
        raise SuiteFailure(f"max relative error {worst:.3g} exceeds {GRADCHECK_TOLERANCE:g}")


def cmd_estimate(args):
    _require(args, "ckpt", "source")
    model = NeuralMeanField.load(args.ckpt)
    source = node_list(args.source)
    frame = model.predict_frame(source, args.T)
    for t, sigma in enumerate(model.influence(source, args.T), start=1):
        logger.info("sigma(%d) = %.6g", t, sigma)
    _emit(frame, args.out)


def cmd_eval_net(args):
    _require(args, "ckpt", "truth_net")
    model = NeuralMeanField.load(args.ckpt)
    report = evaluate_network(model.rate_matrix, load_network(args.truth_net), args.eps)
    _emit_json(report.to_dict(), args.out)


def cmd_eval_prob(args):
    _require(args, "ckpt", "oracle", "sources")
    model = NeuralMeanField.load(args.ckpt)
    oracle = pd.read_csv(args.oracle, dtype={"source": str})
    sources = _read_sources(args.sources)
    if "source" not in oracle.columns and len(sources) != 1:
        raise ValueError("Oracle table has no source column, so the sources file must list exactly one set.")
    predicted, reference, times = [], [], None
    for source in sources:
        rows = oracle
        if "source" in oracle.columns:
            rows = oracle[oracle["source"] == ";".join(str(v) for v in sorted(source))]
            if rows.empty:
                raise ValueError(f"Oracle table has no rows for source set {list(source)}.")
        table = rows.pivot(index="t", columns="node", values="prob").sort_index()
        steps = table.index.to_numpy(dtype=float)
        if times is not None and not np.array_equal(times, steps):
            raise ValueError("Oracle rows use different time grids for different source sets.")
        times = steps
        if np.any(steps < 1) or np.any(steps != np.round(steps)):
            raise ValueError("Oracle times must be positive integers to compare with NMF steps.")
        prediction = model.predict(source, int(steps.max()))
        predicted.append(prediction[steps.astype(int) - 1])
        reference.append(table.to_numpy())
    frame = mae_table(times, np.stack(predicted), np.stack(reference))
    logger.info("Mean probability MAE %.6g over %d source sets", frame["prob_mae"].mean(), len(sources))
    _emit(frame, args.out, FLOAT_FORMAT)


def cmd_maximize(args):
    _require(args, "t", "budget")
    if (args.ckpt is None) == (args.oracle_net is None):
        raise UsageError("maximize needs exactly one of --ckpt and --oracle-net")
    truth_path = args.eval_net or args.oracle_net
    truth = load_network(truth_path) if truth_path is not None else None
    if args.ckpt is not None:
        model = NeuralMeanField.load(args.ckpt)
        estimator = NmfEstimator(model.params, model.meta_.get("horizon"))
    elif args.estimator == "ctmc":
        estimator = CtmcEstimator(truth)
    else:
        estimator = MonteCarloEstimator(
            truth, _delay_model(args, truth), args.t, args.oracle_samples, derived_seed(args.seed, 0), args.threads,
        )
    selection = greedy_select(ImProblem(estimator, args.t, args.budget), lazy=args.lazy, n_jobs=args.threads)
    doc = {
        "t": args.t,
        "budget": args.budget,
        "picks": [int(v) for v in selection.nodes],
        "gains": [float(g) for g in selection.gains],
        "estimated_influence": float(selection.influence),
        "influence": None,
        "se": None,
    }
    if truth is not None:
        doc["influence"], doc["se"] = evaluate_selection(
            truth, _delay_model(args, truth), selection.nodes, args.t, args.samples,
            derived_seed(args.seed, 1), args.threads,
        )
        logger.info("Validated influence %.6g +- %.3g", doc["influence"], doc["se"])
    _emit_json(doc, args.out)


def cmd_reproduce(args):
    out = args.out if args.out is not None else "results"
    result = reproduce(args.suite, out, args.seed, args.threads)
    if not result.passed:
        failed = result.checks.loc[~result.checks["passed"], "check"].tolist()
        raise SuiteFailure(f"suite {args.suite} failed checks: {', '.join(failed)}")


def build_parser():
    """the `nmf` argument parser and its subcommand parsers by name"""
    parser = _Parser(prog="nmf", description="Neural mean-field diffusion networks.")
    parser.add_argument("--version", action="version", version=describe())
    parser.add_argument("--config", help="YAML experiment file with per-subcommand sections.")
    parser.add_argument("--threads", type=int, default=None, help="Worker count (default: all cores).")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    commands = {}

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        commands[name] = p
        return p

    def seeded(p):
        p.add_argument("--seed", type=int, default=None, help="Master seed (default: config seed or 0).")

    def delays(p):
        p.add_argument("--model", choices=("exp", "exponential", "rayleigh", "weibull"), default="exp")
        p.add_argument("--shape-low", type=float, default=1.0, help="Lower bound of Weibull shapes.")
        p.add_argument("--shape-high", type=float, default=10.0, help="Upper bound of Weibull shapes.")

    p = add("gen-net", cmd_gen_net, "Generate a Kronecker or random network.")
    p.add_argument("--model", choices=NETWORK_MODELS, default="hier")
    p.add_argument("--nodes", type=int, default=32)
    p.add_argument("--edges", type=int, default=128)
    p.add_argument("--rate-low", type=float, default=0.1)
    p.add_argument("--rate-high", type=float, default=1.0)
    seeded(p)
    p.add_argument("--out")

    p = add("simulate", cmd_simulate, "Simulate a cascade dataset on a network.")
    p.add_argument("--net")
    delays(p)
    p.add_argument("--sources", type=int, default=1000, help="Number of source sets.")
    p.add_argument("--per-source", type=int, default=10, help="Cascades per source set.")
    p.add_argument("--size-lo", type=int, default=1)
    p.add_argument("--size-hi", type=int, default=10)
    p.add_argument("--horizon", type=float, default=10.0)
    seeded(p)
    p.add_argument("--out")

    p = add("oracle", cmd_oracle, "Ground-truth infection probabilities.")
    p.add_argument("--net")
    p.add_argument("--source", help="Source set, e.g. '0,3,7'.")
    p.add_argument("--sources", help="File with one source set per line.")
    p.add_argument("--method", choices=("ctmc", "moment", "mc"), default="ctmc")
    delays(p)
    p.add_argument("--grid-T", type=int, default=10)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--step", type=float, default=1e-2, help="Runge-Kutta step of the exact oracles.")
    seeded(p)
    p.add_argument("--out")

    p = add("train", cmd_train, "Learn NMF parameters from cascades.")
    p.add_argument("--data")
    p.add_argument("--net-mask", help="Network file whose edges are the known support of A.")
    p.add_argument("--variant", choices=("exp", "window"), default="exp")
    p.add_argument("--tau", type=int, default=3)
    p.add_argument("--kernel-terms", type=int, default=1)
    p.add_argument("--hidden", default="64,64,64")
    p.add_argument("--no-correction", action="store_true", help="Mean-field dynamics only.")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument(
        "--clamp-grad", choices=CLAMP_GRADIENTS, default="inward",
        help="Gradient through clamped states: none (exact) or where it points back inside (inward).",
    )
    seeded(p)
    p.add_argument("--out")
    p.add_argument("--log", help="Per-epoch training log CSV.")

    p = add("gradcheck", cmd_gradcheck, "Check co-state gradients against finite differences.")
    p.add_argument("--instances", type=int, default=20)
    seeded(p)
    p.add_argument("--out")

    p = add("estimate", cmd_estimate, "Predict infection probabilities with a trained model.")
    p.add_argument("--ckpt")
    p.add_argument("--source")
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--out")

    p = add("eval-net", cmd_eval_net, "Structure metrics of a learned network.")
    p.add_argument("--ckpt")
    p.add_argument("--truth-net")
    p.add_argument("--eps", type=float, default=DEFAULT_EDGE_THRESHOLD)
    p.add_argument("--out")

    p = add("eval-prob", cmd_eval_prob, "Infection-probability errors against an oracle table.")
    p.add_argument("--ckpt")
    p.add_argument("--oracle")
    p.add_argument("--sources")
    p.add_argument("--out")

    p = add("maximize", cmd_maximize, "Greedy influence maximization.")
    p.add_argument("--ckpt")
    p.add_argument("--oracle-net")
    p.add_argument("--eval-net", help="Network for Monte Carlo validation of the picks.")
    p.add_argument("--estimator", choices=("mc", "ctmc"), default="mc")
    delays(p)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--lazy", action="store_true")
    p.add_argument("--samples", type=int, default=10000, help="Monte Carlo cascades validating the picks.")
    p.add_argument("--oracle-samples", type=int, default=1000, help="Delay realisations of the MC estimator.")
    seeded(p)
    p.add_argument("--out")

    p = add("reproduce", cmd_reproduce, "Run a reproduction suite.")
    p.add_argument("--suite", choices=SUITES, default="smoke")
    seeded(p)
    p.add_argument("--out", help="Results directory (default: results).")

    add("pipeline", None, "Run the config file's pipeline steps in order.")
    return parser, commands


def _options(commands):
    return {
        name: {a.dest for a in p._actions if a.dest not in ("help", "handler")}
        for name, p in commands.items()
    }


def _finish(args, config):
    if getattr(args, "seed", 0) is None:
        args.seed = config.seed if config.seed is not None else 0
    if args.threads is None:
        args.threads = config.threads if config.threads is not None else -1
    return args


def _execute(args, config):
    args.handler(_finish(args, config))
    out = getattr(args, "out", None)
    if out is not None:
        write_run_record(out, args.command, {k: v for k, v in vars(args).items() if k != "handler"})


def run(argv=None):
    """run the CLI; returns the process exit code"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = build_parser()
    stage = "nmf"
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            format=LOG_FORMAT,
            level=logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO,
            force=True,
        )
        config = ExperimentConfig()
        if args.config is not None:
            config = ExperimentConfig.load(args.config)
            config.check(_options(commands))
            for name in config.sections:
                commands[name].set_defaults(**config.section(name))
            args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        stage = args.command
        if args.command == "pipeline":
            if not config.pipeline:
                raise UsageError("pipeline needs a config file with a non-empty 'pipeline' list")
            for step in config.pipeline:
                stage = f"pipeline step {step}"
                step_args = parser.parse_args(_global_flags(args) + [step])
                logger.info("running %s", stage)
                _execute(step_args, config)
        else:
            _execute(args, config)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    except UsageError as exc:
        logger.error("%s: usage error: %s", stage, exc)
        return 1
    except (NetworkFormatError, DatasetFormatError) as exc:
        logger.error("%s: format error: %s", stage, exc)
        return 2
    except (ConfigError, ValueError, TypeError) as exc:
        logger.error("%s: invalid input: %s", stage, exc)
        return 1
    except (OSError, ArithmeticError, EstimatorError, SuiteFailure) as exc:
        logger.error("%s failed: %s", stage, exc)
        return 2
    return 0


def _global_flags(args):
    flags = []
    if args.threads is not None:
        flags += ["--threads", str(args.threads)]
    return flags


def main():
    sys.exit(run())
