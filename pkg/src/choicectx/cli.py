"""``choicectx`` command-line interface.

Every subcommand writes a self-describing JSON report (schema name and
version, tool version, the exact flags used, seed, timing, payload) to
``--out`` or stdout.  Exit codes: 0 success, 1 usage error, 2 data or
numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DatasetError,
    apply_standardizer,
    fit_standardizer,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .em import EMLimits, MStepConfig, em_fit
from .identify import lcl_identifiable
from .models import (
    DLCLParams,
    LCLParams,
    MixedLogitParams,
    MNLParams,
    ModelError,
    ModelKind,
    negative_log_likelihood,
    params_from_json,
    params_to_json,
)
from .network import (
    EdgeFormatError,
    extract_closures,
    generate_synthetic,
    ingest_edges,
    synthetic_lcl_config,
    synthetic_mnl_config,
    write_closure_log,
    write_edges,
)
from .optimize import (
    GridSearchSpec,
    RegPathConfig,
    TrainConfig,
    TrainingError,
    fit_constrained_lcl,
    fit_mle,
    grid_search,
    l1_path,
)
from .stats import binned_mnl, likelihood_ratio_test, mean_relative_rank, wilcoxon_signed_rank

SCHEMA_VERSION = 1
MODEL_CHOICES = ("mnl", "lcl", "mixed", "dlcl")


class UsageError(Exception):
    pass


class ReportError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _csv_floats(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _uint(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text!r}")
    return value


def _entry(text):
    try:
        p, q = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected p,q, got {text!r}") from None
    return p, q


def _add_train_flags(p, epochs=500):
    p.add_argument("--lr", type=float, default=0.01, help="learning rate")
    p.add_argument("--wd", type=float, default=0.001, help="coupled L2 weight decay")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--time-limit", type=float, default=3600.0, help="wall-clock limit in seconds")


def _add_data_flags(p, split=True):
    p.add_argument("--data", required=True, help="choice dataset (JSONL)")
    p.add_argument("--standardize", choices=("train", "all", "off"), default="train",
                   help="standardization statistics from the training split, the whole file, or none")
    if split:
        p.add_argument("--split", choices=("random", "temporal"), default=None,
                       help="hold out 20%% validation and 20%% test data")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="choicectx", description="Feature context effect choice models.")
    parser.add_argument("--version", action="version", version=f"choicectx {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--out", default=None, help="report path (default: stdout)")
        p.add_argument("--seed", type=_uint, default=0)
        return p

    p = add("fit", "fit a model by maximum likelihood")
    p.add_argument("--model", choices=MODEL_CHOICES, required=True)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--components", type=int, default=None, help="mixed logit components (default d)")
    p.add_argument("--log", default=None, help="write the per-epoch training log (JSONL) here")

    p = add("eval", "NLL and mean relative rank of a fitted model")
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("random", "temporal"), default=None,
                   help="evaluate on the test part of this split")
    p.add_argument("--part", choices=("train", "validation", "test"), default="test")
    p.add_argument("--ranks-out", default=None, help="write per-observation relative ranks (JSON)")

    p = add("lrt", "likelihood-ratio (or Wilcoxon) comparison of two fitted models")
    p.add_argument("--null", required=True)
    p.add_argument("--full", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dof", type=int, default=None)
    p.add_argument("--wilcoxon", action="store_true",
                   help="compare per-observation relative ranks with a signed-rank test instead")

    p = add("constrained-lrt", "LCL with a single free context effect vs MNL")
    _add_data_flags(p, split=False)
    _add_train_flags(p)
    p.add_argument("--entry", type=_entry, default=None, help="p,q (default: every entry)")

    p = add("identify", "LCL identifiability diagnostics")
    _add_data_flags(p, split=False)
    p.add_argument("--dedup-decimals", type=int, default=None)

    p = add("l1path", "L1 regularization path of the context matrix")
    _add_data_flags(p, split=False)
    _add_train_flags(p)
    p.add_argument("--lambdas", type=_csv_floats, required=True)

    p = add("binned", "per-bin MNL coefficients against choice-set means")
    _add_data_flags(p, split=False)
    _add_train_flags(p, epochs=100)
    p.add_argument("--feature-q", type=int, required=True, help="context feature (binned)")
    p.add_argument("--feature-p", type=int, required=True, help="target coefficient")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--min-count", type=int, default=50)
    p.add_argument("--binning", choices=("width", "quantile"), default="width")
    p.add_argument("--weights", choices=("count", "sqrt"), default="count")
    p.add_argument("--csv", default=None)

    p = add("net-extract", "triadic-closure choices from a temporal edge list")
    p.add_argument("--edges", required=True)
    p.add_argument("--dataset-out", default=None)
    p.add_argument("--closures-out", default=None)

    p = add("net-generate", "grow a synthetic MNL or LCL network")
    p.add_argument("--model", choices=("mnl", "lcl"), required=True)
    p.add_argument("--nodes", type=int, default=1000)
    p.add_argument("--closures", type=int, default=50000)
    p.add_argument("--closure-prob", type=float, default=0.1)
    p.add_argument("--rate", type=float, default=5.0)
    p.add_argument("--edges", default=None, help="write the edge list (TSV) here")
    p.add_argument("--dataset-out", default=None)
    p.add_argument("--closures-out", default=None)

    p = add("em-fit", "fit a DLCL by expectation-maximization")
    _add_data_flags(p, split=False)
    p.add_argument("--lr", type=float, default=0.005, help="M-step learning rate")
    p.add_argument("--inner", type=int, default=50, help="M-step iterations")
    p.add_argument("--iterations", type=int, default=500, help="outer iteration cap")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--time-limit", type=float, default=3600.0)
    p.add_argument("--trace", default=None, help="write the EM trace (JSONL) here")

    p = add("grid-search", "learning-rate / weight-decay grid search on a validation split")
    p.add_argument("--model", choices=MODEL_CHOICES, required=True)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--lrs", type=_csv_floats, default=None)
    p.add_argument("--wds", type=_csv_floats, default=None)
    p.add_argument("--components", type=int, default=None)
    return parser


# --------------------------------------------------------------------------
# reports


def write_report(report: dict, path=None) -> None:
    text = json.dumps(report, indent=2, sort_keys=False) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    target = Path(path)
    if target.is_dir():
        raise ReportError(f"{path} is a directory")
    directory = target.parent if str(target.parent) else Path(".")
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{target.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except OSError as exc:
        raise ReportError(f"cannot write report to {path}: {exc}") from exc


def _report(command, args, payload, elapsed, argv):
    flags = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()}
    return {
        "schema": f"choicectx.{command}",
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "invocation": list(argv),
        "flags": flags,
        "seed": args.seed,
        "timing": {"elapsed_s": elapsed},
        "payload": payload,
    }


# --------------------------------------------------------------------------
# helpers


def _train_config(args, **kw) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, weight_decay=args.wd, batch_size=args.batch,
                       epochs=args.epochs, wall_clock_limit_seconds=args.time_limit, seed=args.seed, **kw)


def _prepare(args, split: str | None = None):
    """Load, optionally split, and standardize; returns ``(parts, standardizer, dropped)``."""
    data, dropped = read_dataset(args.data)
    parts = {"all": data}
    if split is not None:
        sp = split_dataset(data, split, seed=args.seed)
        parts = {"train": sp.train, "validation": sp.validation, "test": sp.test}
    std = None
    if args.standardize != "off":
        basis = parts.get("train", data) if args.standardize == "train" else data
        std = fit_standardizer(basis)
        parts = {k: apply_standardizer(std, v) for k, v in parts.items()}
    return parts, std, dropped


def _load_model(path):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if "payload" in obj and "model" in obj["payload"]:
        obj = obj["payload"]["model"]
    return params_from_json(obj)


def _data_for_model(path, std):
    data, _ = read_dataset(path)
    return apply_standardizer(std, data) if std is not None else data


def _n_free(params) -> int:
    if isinstance(params, MixedLogitParams):
        return params.thetas.size + params.pi_logits.size - 1
    if isinstance(params, DLCLParams):
        return params.A.size + params.B.size + params.pi_logits.size - 1
    return sum(a.size for a in params.arrays().values())


def _default_dof(null, full) -> int:
    d = full.d
    pairs = {(MNLParams, LCLParams), (MixedLogitParams, DLCLParams)}
    if (type(null), type(full)) in pairs:
        return d * d
    diff = _n_free(full) - _n_free(null)
    if diff < 1:
        logging.getLogger(__name__).warning(
            "full model has no extra parameters over the null; using dof=1 (pass --dof to override)")
        return 1
    return diff


# --------------------------------------------------------------------------
# subcommands


def cmd_fit(args):
    kind = ModelKind.parse(args.model)
    parts, std, dropped = _prepare(args, args.split)
    train = parts.get("train", parts.get("all"))
    fit = fit_mle(kind, train, _train_config(args), validation=parts.get("validation"),
                  n_components=args.components)
    if args.log:
        fit.write_log(args.log)
    payload = {
        "model": params_to_json(fit.params, std),
        "train_nll": fit.train_nll,
        "n_train": train.n,
        "dropped_singletons": dropped,
        "stop_reason": fit.stop_reason,
        "epochs_run": len(fit.log),
    }
    if "validation" in parts:
        payload["validation_nll"] = fit.log[-1].val_nll
        payload["test_nll"] = negative_log_likelihood(fit.params, parts["test"])
    return payload


def cmd_eval(args):
    params, std = _load_model(args.params)
    data, _ = read_dataset(args.data)
    if args.split:
        sp = split_dataset(data, args.split, seed=args.seed)
        data = getattr(sp, args.part)
    if std is not None:
        data = apply_standardizer(std, data)
    mrr, ranks = mean_relative_rank(params, data)
    if args.ranks_out:
        Path(args.ranks_out).write_text(json.dumps(ranks.tolist()) + "\n", encoding="utf-8")
    return {"kind": params.kind.value, "n": data.n, "nll": negative_log_likelihood(params, data),
            "mean_relative_rank": mrr, "relative_rank_std": float(ranks.std())}


def cmd_lrt(args):
    null, std_null = _load_model(args.null)
    full, std_full = _load_model(args.full)
    data_null = _data_for_model(args.data, std_null)
    data_full = _data_for_model(args.data, std_full)
    if args.wilcoxon:
        _, r_null = mean_relative_rank(null, data_null)
        _, r_full = mean_relative_rank(full, data_full)
        res = wilcoxon_signed_rank(r_full - r_null)
        return {"test": "wilcoxon", "mean_relative_rank_null": float(r_null.mean()),
                "mean_relative_rank_full": float(r_full.mean()), **res.to_json()}
    nll_null = negative_log_likelihood(null, data_null)
    nll_full = negative_log_likelihood(full, data_full)
    dof = args.dof if args.dof is not None else _default_dof(null, full)
    res = likelihood_ratio_test(nll_null, nll_full, dof)
    return {"test": "likelihood_ratio", "nll_null": nll_null, "nll_full": nll_full, **res.to_json()}


def cmd_constrained_lrt(args):
    parts, std, _ = _prepare(args)
    data = parts["all"]
    cfg = _train_config(args)
    mnl = fit_mle(ModelKind.MNL, data, cfg)
    mnl_nll = negative_log_likelihood(mnl.params, data)
    entries = [args.entry] if args.entry else [(p, q) for p in range(data.d) for q in range(data.d)]
    rows = []
    for entry in entries:
        fit = fit_constrained_lcl(data, entry, cfg)
        lrt = likelihood_ratio_test(mnl_nll, fit.nll, 1)
        rows.append({"entry": list(entry), "value": fit.value, "theta": fit.theta.tolist(),
                     "nll": fit.nll, **lrt.to_json()})
    return {"mnl_nll": mnl_nll, "entries": rows,
            "standardizer": std.to_json() if std is not None else None}


def cmd_identify(args):
    parts, _, _ = _prepare(args)
    return lcl_identifiable(parts["all"], decimals=args.dedup_decimals).to_json()


def cmd_l1path(args):
    parts, std, _ = _prepare(args)
    data = parts["all"]
    path = l1_path(data, RegPathConfig(args.lambdas, _train_config(args)))
    return {"path": [e.to_json() for e in path], "standardizer": std.to_json() if std is not None else None}


def cmd_binned(args):
    parts, _, _ = _prepare(args)
    res = binned_mnl(parts["all"], args.feature_q, args.feature_p, args.bins, _train_config(args),
                     min_count=args.min_count, binning=args.binning, weighting=args.weights)
    if args.csv:
        res.write_csv(args.csv)
    return res.to_json()


def _network_outputs(args, dataset, log):
    if args.dataset_out and dataset is not None:
        write_dataset(dataset, args.dataset_out)
    if args.closures_out:
        write_closure_log(log, args.closures_out)


def cmd_net_extract(args):
    edges, loops = ingest_edges(args.edges)
    res = extract_closures(edges, seed=args.seed)
    _network_outputs(args, res.dataset, res.log)
    return {"edges": len(edges), "self_loops_dropped": loops, "observations": len(res.log),
            "skipped_small_sets": res.skipped_small, "repeat_edges": res.repeat_edges}


def cmd_net_generate(args):
    make = synthetic_mnl_config if args.model == "mnl" else synthetic_lcl_config
    cfg = make(n_nodes=args.nodes, target_closures=args.closures, closure_prob=args.closure_prob,
               poisson_rate=args.rate, seed=args.seed)
    res = generate_synthetic(cfg)
    if args.edges:
        write_edges(res.edges, args.edges)
    _network_outputs(args, res.dataset, res.log)
    return {"model": params_to_json(cfg.model), "nodes": cfg.n_nodes, "edges": len(res.edges),
            "steps": res.steps, "closures": res.closures, "forced_closures": res.forced_closures,
            "observations": len(res.log)}


def cmd_em_fit(args):
    parts, std, _ = _prepare(args)
    data = parts["all"]
    res = em_fit(data, MStepConfig(args.inner, args.lr),
                 EMLimits(args.iterations, args.tol, args.time_limit, args.seed))
    if args.trace:
        res.write_trace(args.trace)
    return {"model": params_to_json(res.params, std), "nll": res.nll, "iterations": len(res.trace) - 1,
            "stop_reason": res.stop_reason, "final_grad_norm": res.trace[-1].grad_norm}


def cmd_grid_search(args):
    kind = ModelKind.parse(args.model)
    parts, std, _ = _prepare(args, args.split or "random")
    spec = GridSearchSpec(*(x for x in (args.lrs or GridSearchSpec().learning_rates,
                                        args.wds or GridSearchSpec().weight_decays)))
    workers = max(1, int(os.environ.get("CHOICECTX_THREADS", "1") or 1))
    res = grid_search(kind, parts["train"], parts["validation"], spec, _train_config(args),
                      n_components=args.components, workers=workers)
    return {"model": params_to_json(res.params, std), "learning_rate": res.learning_rate,
            "weight_decay": res.weight_decay, "grid": res.table,
            "test_nll": negative_log_likelihood(res.params, parts["test"])}


COMMANDS = {
    "fit": cmd_fit,
    "eval": cmd_eval,
    "lrt": cmd_lrt,
    "constrained-lrt": cmd_constrained_lrt,
    "identify": cmd_identify,
    "l1path": cmd_l1path,
    "binned": cmd_binned,
    "net-extract": cmd_net_extract,
    "net-generate": cmd_net_generate,
    "em-fit": cmd_em_fit,
    "grid-search": cmd_grid_search,
}

DATA_ERRORS = (DatasetError, ModelError, TrainingError, EdgeFormatError, ValueError, KeyError,
               IndexError, OSError, ReportError, json.JSONDecodeError)


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    start = time.perf_counter()
    try:
        payload = COMMANDS[args.command](args)
        report = _report(args.command, args, _jsonable(payload), time.perf_counter() - start, argv)
        write_report(report, args.out)
    except DATA_ERRORS as exc:
        print(f"choicectx {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
