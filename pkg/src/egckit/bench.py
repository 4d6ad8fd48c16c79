"""Microbenchmark harness for the sparse kernels.

Times each strategy on identical inputs with a monotonic clock around the
kernel invocation only; input generation, validation and the correctness
spot-check stay outside the timed region. Reports carry the analytic peak
transient element count alongside the latency statistics.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .graph import CsrGraph, add_self_loops, generate_graph, sym_norm_coeffs
from .kernels import (
    AggregatorKind,
    FusionStrategy,
    _fused_impl,
    _spmm_impl,
    get_worker_count,
    set_worker_count,
    transient_elements,
)

__all__ = [
    "PLAIN_SPMM",
    "STRATEGY_NAMES",
    "BenchReport",
    "bench_kernel",
    "bench_suite",
    "write_reports_csv",
    "summarize_ratios",
    "validate_config",
]

PLAIN_SPMM = "plain_spmm"
STRATEGY_NAMES = (PLAIN_SPMM,) + tuple(s.value for s in FusionStrategy)

_MIN_STABLE_ITER_S = 1e-3
_TARGET_TOTAL_S = 0.05
_MAX_RAISED_REPEATS = 1000
_SPOT_TOL = 1e-5


@dataclass(frozen=True)
class BenchReport:
    strategy: str
    graph_kind: str
    num_nodes: int
    num_edges: int
    graph_seed: int
    feat_dim: int
    aggs: tuple[AggregatorKind, ...]
    repeats: int
    warmup: int
    threads: int
    mean_s: float
    std_s: float
    peak_elems: int

    @property
    def aggs_label(self) -> str:
        return "+".join(a.short_name for a in self.aggs)


def _parse_strategy(strategy) -> str:
    if isinstance(strategy, FusionStrategy):
        return strategy.value
    name = str(strategy).strip().lower()
    if name not in STRATEGY_NAMES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGY_NAMES}")
    return name


def _make_inputs(g: CsrGraph, feat_dim: int, n_aggs: int, seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((g.num_nodes, feat_dim)).astype(np.float32)
    w = rng.standard_normal((g.num_nodes, n_aggs)).astype(np.float32)
    return x, w


def _plain_reference(g: CsrGraph, x: np.ndarray) -> np.ndarray:
    """Plain SpMM expressed through the Sequential strategy for spot-checks."""
    agg = AggregatorKind.SUM if g.coeff is None else AggregatorKind.SYM_NORM
    ones = np.ones((g.num_nodes, 1), dtype=x.dtype)
    return _fused_impl(g, x, (agg,), ones, FusionStrategy.SEQUENTIAL)


def bench_kernel(g: CsrGraph, feat_dim: int, strategy, aggs, repeats: int = 10,
                 warmup: int = 3, seed: int = 0, *, x: np.ndarray | None = None,
                 w: np.ndarray | None = None, reference: np.ndarray | None = None,
                 graph_kind: str = "custom", graph_seed: int = 0,
                 check_rows: int = 32) -> BenchReport:
    """Wall-clock statistics for one strategy on one graph.

    Every strategy's output is spot-checked on a sampled row set against the
    Sequential strategy (for plain SpMM, against its Sequential-expressed
    equivalent) before the report is returned.
    """
    if repeats < 5:
        raise ValueError(f"repeats must be >= 5, got {repeats}")
    if warmup < 2:
        raise ValueError(f"warmup must be >= 2, got {warmup}")
    name = _parse_strategy(strategy)
    aggs = tuple(AggregatorKind(a) for a in aggs)
    if not g.has_self_loops:
        raise ValueError("bench graphs must carry self-loops")
    if x is None or w is None:
        gx, gw = _make_inputs(g, feat_dim, len(aggs), seed)
        x = gx if x is None else x
        w = gw if w is None else w
    if x.shape != (g.num_nodes, feat_dim):
        raise ValueError(f"x must be ({g.num_nodes}, {feat_dim}), got {x.shape}")

    if name == PLAIN_SPMM:
        run = lambda: _spmm_impl(g, x)
    else:
        fs = FusionStrategy(name)
        run = lambda: _fused_impl(g, x, aggs, w, fs)

    warm_times = []
    out = None
    for _ in range(warmup):
        t0 = time.perf_counter()
        out = run()
        warm_times.append(time.perf_counter() - t0)
    est = min(warm_times)
    if est < _MIN_STABLE_ITER_S:
        raised = min(int(np.ceil(_TARGET_TOTAL_S / max(est, 1e-7))), _MAX_RAISED_REPEATS)
        if raised > repeats:
            warnings.warn(
                f"iteration time {est * 1e3:.3f} ms < 1 ms; raising repeats "
                f"{repeats} -> {raised} for stable statistics"
            )
            repeats = raised

    times = np.empty(repeats)
    for r in range(repeats):
        t0 = time.perf_counter()
        out = run()
        times[r] = time.perf_counter() - t0

    if reference is None:
        if name == PLAIN_SPMM:
            reference = _plain_reference(g, x)
        else:
            reference = _fused_impl(g, x, aggs, w, FusionStrategy.SEQUENTIAL)
    elif name == PLAIN_SPMM:
        reference = _plain_reference(g, x)
    rows = np.random.default_rng(seed + 1).choice(
        g.num_nodes, size=min(check_rows, g.num_nodes), replace=False)
    diff = float(np.abs(out[rows] - reference[rows]).max())
    if diff > _SPOT_TOL:
        raise RuntimeError(
            f"strategy {name} disagrees with sequential reference by {diff:.3e} (> {_SPOT_TOL})"
        )

    return BenchReport(
        strategy=name, graph_kind=graph_kind, num_nodes=g.num_nodes,
        num_edges=g.num_edges, graph_seed=graph_seed, feat_dim=feat_dim,
        aggs=aggs, repeats=repeats, warmup=warmup, threads=get_worker_count(),
        mean_s=float(times.mean()), std_s=float(times.std()),
        peak_elems=transient_elements(name if name == PLAIN_SPMM else FusionStrategy(name),
                                      g.num_nodes, feat_dim, aggs,
                                      workers=get_worker_count()),
    )


# ----------------------------------------------------------------------
# Config-driven sweeps
# ----------------------------------------------------------------------

_GRAPH_KINDS = ("erdos_renyi", "grid", "star")


def validate_config(config: dict) -> dict:
    """Schema check with field names in every error message."""
    if not isinstance(config, dict):
        raise ValueError("config must be a JSON object")
    out = dict(config)
    known = {"graphs", "strategies", "feature_dims", "aggs", "repeats",
             "warmup", "threads", "seed"}
    for key in config:
        if key not in known:
            raise ValueError(f"config field {key!r} is not recognized")
    graphs = config.get("graphs")
    if not isinstance(graphs, list) or not graphs:
        raise ValueError("config field 'graphs' must be a nonempty list")
    for i, spec in enumerate(graphs):
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ValueError(f"config field 'graphs[{i}]' must be an object with 'kind'")
        if spec["kind"] not in _GRAPH_KINDS:
            raise ValueError(f"config field 'graphs[{i}].kind' must be one of {_GRAPH_KINDS}")
    strategies = config.get("strategies")
    if not isinstance(strategies, list) or not strategies:
        raise ValueError("config field 'strategies' must be a nonempty list")
    out["strategies"] = [_parse_strategy(s) for s in strategies]
    dims = config.get("feature_dims")
    if not isinstance(dims, list) or not dims or any(int(d) < 1 for d in dims):
        raise ValueError("config field 'feature_dims' must be a nonempty list of positive ints")
    out["feature_dims"] = [int(d) for d in dims]
    out["aggs"] = tuple(AggregatorKind.parse(a) if isinstance(a, str) else AggregatorKind(a)
                        for a in config.get("aggs", ["sum", "max", "min"]))
    if not out["aggs"]:
        raise ValueError("config field 'aggs' must be nonempty")
    for key, lo, default in (("repeats", 5, 10), ("warmup", 2, 3), ("threads", 1, 1), ("seed", None, 0)):
        val = config.get(key, default)
        if not isinstance(val, int):
            raise ValueError(f"config field {key!r} must be an integer")
        if lo is not None and val < lo:
            raise ValueError(f"config field {key!r} must be >= {lo}")
        out[key] = val
    return out


def _build_bench_graph(spec: dict, seed: int, aggs) -> tuple[CsrGraph, str, int]:
    kind = spec["kind"]
    params = {k: v for k, v in spec.items() if k not in ("kind", "seed")}
    gseed = int(spec.get("seed", seed))
    g = add_self_loops(generate_graph(kind, seed=gseed, **params))
    if AggregatorKind.SYM_NORM in aggs:
        g = sym_norm_coeffs(g)
    return g, kind, gseed


def bench_suite(config: dict) -> list[BenchReport]:
    """Cartesian sweep of graphs x feature dims x strategies."""
    cfg = validate_config(config)
    set_worker_count(cfg["threads"])
    reports = []
    for gi, spec in enumerate(cfg["graphs"]):
        g, kind, gseed = _build_bench_graph(spec, cfg["seed"] + gi, cfg["aggs"])
        for feat_dim in cfg["feature_dims"]:
            x, w = _make_inputs(g, feat_dim, len(cfg["aggs"]), cfg["seed"] + 1000 + gi)
            reference = _fused_impl(g, x, cfg["aggs"], w, FusionStrategy.SEQUENTIAL)
            for name in cfg["strategies"]:
                reports.append(bench_kernel(
                    g, feat_dim, name, cfg["aggs"], repeats=cfg["repeats"],
                    warmup=cfg["warmup"], seed=cfg["seed"], x=x, w=w,
                    reference=reference, graph_kind=kind, graph_seed=gseed,
                ))
    return reports


def write_reports_csv(reports, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["graph", "n", "e", "F", "strategy", "aggs",
                         "mean_s", "std_s", "peak_elems", "threads"])
        for r in reports:
            writer.writerow([r.graph_kind, r.num_nodes, r.num_edges, r.feat_dim,
                             r.strategy, r.aggs_label, f"{r.mean_s:.6e}",
                             f"{r.std_s:.6e}", r.peak_elems, r.threads])


def summarize_ratios(reports) -> list[str]:
    """Human-readable fused/plain and naive/plain ratios per sweep cell."""
    cells: dict[tuple, dict[str, float]] = {}
    for r in reports:
        key = (r.graph_kind, r.num_nodes, r.num_edges, r.feat_dim)
        cells.setdefault(key, {})[r.strategy] = r.mean_s
    lines = []
    for (kind, n, e, feat), means in cells.items():
        plain = means.get(PLAIN_SPMM)
        if plain is None or plain <= 0:
            continue
        parts = [f"{kind} n={n} e={e} F={feat}:"]
        if FusionStrategy.FUSED_WEIGHTED_STORE.value in means:
            parts.append(f"fused/plain={means[FusionStrategy.FUSED_WEIGHTED_STORE.value] / plain:.2f}")
        if FusionStrategy.SEQUENTIAL.value in means:
            parts.append(f"naive/plain={means[FusionStrategy.SEQUENTIAL.value] / plain:.2f}")
        lines.append(" ".join(parts))
    return lines


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc}") from None
