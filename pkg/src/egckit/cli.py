"""Command-line front door: graph conversion, inference, training, gradient
checking and benchmarking.

Exit codes: 0 success, 1 validation or I/O error, 2 numerical failure
(training divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import bench as bench_mod
from .formats import (
    load_graph,
    read_checkpoint,
    read_edge_list_text,
    read_features,
    write_checkpoint,
    write_features,
    write_graph_binary,
)
from .grads import GRADCHECK_LAYERS, gradient_check
from .kernels import AggregatorKind, set_worker_count
from .layers import DenseLayer, EgcParams
from .training import TrainConfig, make_toy_task, train_loop

__all__ = ["main", "run_stack"]


class CliError(ValueError):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _parse_aggs(text: str) -> tuple[AggregatorKind, ...]:
    return tuple(AggregatorKind.parse(part) for part in text.split(","))


def _build_parser() -> _Parser:
    parser = _Parser(prog="egckit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="text edge list -> binary CSR graph")
    p.add_argument("--graph", required=True, help="input text edge list")
    p.add_argument("--out", required=True, help="output binary graph path")

    p = sub.add_parser("infer", help="forward pass through a checkpointed stack")
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("train", help="train a layer stack on a toy task")
    p.add_argument("--task", default="community_classification",
                   choices=["community_classification", "homophily_regression"])
    p.add_argument("--nodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--bases", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--aggs", default="sym_norm", help="comma-separated aggregator names")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--layer", default="all", choices=("all",) + GRADCHECK_LAYERS)
    p.add_argument("--aggs", default=None,
                   help="aggregators for egc_m; default sweeps each one")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("bench", help="run a benchmark sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--threads", type=int, default=None,
                   help="override the config's worker count")
    return parser


def run_stack(stack, g, x: np.ndarray) -> np.ndarray:
    """Apply checkpoint records in order; rectifier after every layer that is
    followed by another record, none after the last."""
    from .layers import egc_m_forward

    h = np.asarray(x, dtype=np.float64)
    for idx, rec in enumerate(stack):
        if isinstance(rec, EgcParams):
            if h.shape[1] != rec.in_dim:
                raise CliError(
                    f"record {idx} expects {rec.in_dim} input columns, got {h.shape[1]}"
                )
            h = egc_m_forward(g, h, rec)
        elif isinstance(rec, DenseLayer):
            if h.shape[1] != rec.weight.shape[1]:
                raise CliError(
                    f"record {idx} expects {rec.weight.shape[1]} input columns, got {h.shape[1]}"
                )
            h = rec(h)
        else:
            raise CliError(f"record {idx} has unsupported type {type(rec).__name__}")
        if isinstance(rec, EgcParams) and idx + 1 < len(stack):
            h = np.maximum(h, 0.0)
    return h


def _cmd_convert(args) -> int:
    g = read_edge_list_text(args.graph)
    write_graph_binary(args.out, g)
    print(f"n={g.num_nodes} e={g.num_edges}")
    return 0


def _cmd_infer(args) -> int:
    set_worker_count(args.threads)
    g = load_graph(args.graph)
    stack = read_checkpoint(args.checkpoint)
    if not stack:
        raise CliError(f"checkpoint {args.checkpoint} holds no records")
    x = read_features(args.features)
    if x.shape[0] != g.num_nodes:
        raise CliError(
            f"features {args.features} have {x.shape[0]} rows, "
            f"graph {args.graph} has {g.num_nodes} nodes"
        )
    egc_layers = [rec for rec in stack if isinstance(rec, EgcParams)]
    if egc_layers and x.shape[1] != egc_layers[0].in_dim:
        raise CliError(
            f"features {args.features} have {x.shape[1]} columns, "
            f"checkpoint {args.checkpoint} expects {egc_layers[0].in_dim}"
        )
    from .training import prepare_graph

    needed = set()
    for rec in egc_layers:
        needed.update(rec.aggs)
    g = prepare_graph(g, tuple(needed) or (AggregatorKind.SUM,))
    y = run_stack(stack, g, x)
    write_features(args.out, y)
    print(f"wrote {args.out}: n={y.shape[0]} F={y.shape[1]}")
    return 0


def _cmd_train(args) -> int:
    set_worker_count(args.threads)
    task = make_toy_task(args.task, args.nodes, seed=args.seed)
    cfg = TrainConfig(hidden=args.hidden, heads=args.heads, bases=args.bases,
                      aggs=_parse_aggs(args.aggs), num_layers=args.layers)
    result = train_loop(task, cfg, steps=args.steps, lr=args.lr, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("step,loss,accuracy\n")
        for rec in result.history:
            fh.write(f"{rec.step},{rec.loss:.8f},{rec.accuracy:.6f}\n")
    write_checkpoint(args.checkpoint, list(result.network.layers) + [result.network.readout])
    if result.diverged:
        last = result.history[-1].step if result.history else -1
        raise NumericalFailure(f"training diverged; last finite step was {last}")
    if result.history:
        final = result.final
        print(f"steps={len(result.history)} final_loss={final.loss:.6f} "
              f"final_accuracy={final.accuracy:.4f}")
    else:
        print("steps=0 checkpoint equals initialization")
    return 0


def _cmd_gradcheck(args) -> int:
    layers = GRADCHECK_LAYERS if args.layer == "all" else (args.layer,)
    failures = 0
    for layer in layers:
        if layer == "egc_m" and args.aggs is None:
            agg_sets = [(a,) for a in AggregatorKind]
        elif layer == "egc_m":
            agg_sets = [_parse_aggs(args.aggs)]
        else:
            agg_sets = [(AggregatorKind.SYM_NORM,)]
        for aggs in agg_sets:
            report = gradient_check(layer, aggs, seed=args.seed,
                                    _corrupt=args.inject_fault)
            label = "+".join(a.short_name for a in report.aggs)
            errs = " ".join(f"{k}={v:.2e}" for k, v in report.max_rel_err.items())
            status = "PASS" if report.passed else "FAIL"
            print(f"{status} {layer}[{label}] max rel err: {errs}")
            failures += 0 if report.passed else 1
    if failures:
        raise NumericalFailure(f"{failures} gradient check(s) failed")
    return 0


def _cmd_bench(args) -> int:
    config = bench_mod.load_config(args.config)
    if args.threads is not None:
        config = dict(config)
        config["threads"] = args.threads
    reports = bench_mod.bench_suite(config)
    bench_mod.write_reports_csv(reports, args.out)
    for line in bench_mod.summarize_ratios(reports):
        print(line)
    print(f"wrote {args.out}: {len(reports)} rows")
    return 0


_COMMANDS = {
    "convert": _cmd_convert,
    "infer": _cmd_infer,
    "train": _cmd_train,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
