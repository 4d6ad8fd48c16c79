"""Sparse compute core: plain CSR SpMM and the aggregator-fused variants.

Three fusion strategies produce the same weighted combination of
per-neighborhood aggregations but differ in what they materialize:

* ``SEQUENTIAL`` runs one full CSR traversal per aggregator, storing each
  result in its own n x f buffer before combining.
* ``FUSED_ORDERED`` runs a single traversal, updating every aggregator per
  fetched neighbor row, but still stores all per-aggregator buffers and
  combines afterwards.
* ``FUSED_WEIGHTED_STORE`` runs the single traversal and keeps only per-row
  temporaries, writing nothing but the weighted combination.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np
import numba

from . import _jit
from .graph import CsrGraph

__all__ = [
    "AggregatorKind",
    "FusionStrategy",
    "STD_EPS",
    "spmm",
    "fused_spmm",
    "aggregate_neighbors",
    "aggregate_row",
    "accumulator_slots",
    "transient_elements",
    "set_worker_count",
    "get_worker_count",
]

STD_EPS = _jit.STD_EPS


class AggregatorKind(enum.IntEnum):
    """Permutation-invariant reductions over a node's stored neighborhood."""

    SYM_NORM = 0
    SUM = 1
    MEAN = 2
    MAX = 3
    MIN = 4
    STD = 5
    VAR = 6

    @property
    def short_name(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "AggregatorKind":
        key = name.strip().lower()
        table = {a.short_name: a for a in cls}
        table["symnorm"] = cls.SYM_NORM
        if key not in table:
            raise ValueError(f"unknown aggregator {name!r}; expected one of {sorted(table)}")
        return table[key]


class FusionStrategy(enum.Enum):
    SEQUENTIAL = "sequential"
    FUSED_ORDERED = "fused_ordered"
    FUSED_WEIGHTED_STORE = "fused_weighted_store"

    @classmethod
    def parse(cls, name: "str | FusionStrategy") -> "FusionStrategy":
        if isinstance(name, cls):
            return name
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown fusion strategy {name!r}; expected one of {[s.value for s in cls]}"
            ) from None


def set_worker_count(k: int) -> None:
    """Set the kernel worker count. Results do not depend on it."""
    limit = numba.config.NUMBA_NUM_THREADS
    if not 1 <= k <= limit:
        raise ValueError(f"worker count must be in [1, {limit}], got {k}")
    numba.set_num_threads(k)


def get_worker_count() -> int:
    return numba.get_num_threads()


def _check_features(x: np.ndarray, num_nodes: int, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if x.shape[0] != num_nodes:
        raise ValueError(f"{name} has {x.shape[0]} rows, graph has {num_nodes} nodes")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(x)


def _edge_weights(g: CsrGraph, dtype) -> tuple[np.ndarray, bool]:
    if g.coeff is None:
        return np.zeros(0, dtype=dtype), False
    return np.ascontiguousarray(g.coeff.astype(dtype, copy=False)), True


def spmm(g: CsrGraph, x: np.ndarray) -> np.ndarray:
    """out[i, :] = sum over stored entries (i, j) of coeff(i, j) * x[j, :].

    Missing coefficients mean unit edge weights (plain neighborhood sum).
    """
    x = _check_features(x, g.num_nodes)
    return _spmm_impl(g, x)


def _spmm_impl(g: CsrGraph, x: np.ndarray) -> np.ndarray:
    coeff, has_coeff = _edge_weights(g, x.dtype)
    out = np.empty((g.num_nodes, x.shape[1]), dtype=x.dtype)
    _jit.spmm(g.row_ptr, g.col_idx, coeff, has_coeff, x, out)
    return out


def _check_aggs(aggs: Sequence[AggregatorKind], g: CsrGraph) -> tuple[AggregatorKind, ...]:
    aggs = tuple(AggregatorKind(a) for a in aggs)
    if not aggs:
        raise ValueError("at least one aggregator is required")
    if len(set(aggs)) != len(aggs):
        raise ValueError("duplicate aggregator tags")
    if AggregatorKind.SYM_NORM in aggs and g.coeff is None:
        raise ValueError("SYM_NORM requires per-edge coefficients on the graph")
    if not g.has_self_loops:
        raise ValueError("fused aggregation runs over the self-looped neighborhood; add self-loops first")
    return aggs


_SLOT_NEEDS = {
    AggregatorKind.SYM_NORM: ("ws",),
    AggregatorKind.SUM: ("sum",),
    AggregatorKind.MEAN: ("sum",),
    AggregatorKind.MAX: ("max",),
    AggregatorKind.MIN: ("min",),
    AggregatorKind.VAR: ("sum", "sq"),
    AggregatorKind.STD: ("sum", "sq"),
}


def _slots(aggs: Sequence[AggregatorKind]):
    """Assign accumulator slots; returns (n_acc, s_ws, s_sum, s_sq, s_max, s_min, pattern)."""
    index = {"ws": -1, "sum": -1, "sq": -1, "max": -1, "min": -1}
    count = 0
    for a in aggs:
        for need in _SLOT_NEEDS[AggregatorKind(a)]:
            if index[need] < 0:
                index[need] = count
                count += 1
    active = frozenset(k for k, v in index.items() if v >= 0)
    if active == {"sum", "max", "min"}:
        pattern = _jit.PAT_TRIO
    elif active == {"sum"}:
        pattern = _jit.PAT_SUM
    elif active == {"ws"}:
        pattern = _jit.PAT_WS
    else:
        pattern = _jit.PAT_GENERIC
    return (count, index["ws"], index["sum"], index["sq"], index["max"], index["min"], pattern)


def accumulator_slots(aggs: Sequence[AggregatorKind]) -> int:
    """Number of length-f row accumulators the fused kernels use."""
    return _slots(tuple(AggregatorKind(a) for a in aggs))[0]


def _codes(aggs: Sequence[AggregatorKind]) -> np.ndarray:
    return np.array([int(a) for a in aggs], dtype=np.int64)


def aggregate_neighbors(g: CsrGraph, x: np.ndarray, aggs: Sequence[AggregatorKind]) -> np.ndarray:
    """All requested aggregations in one traversal; shape (|aggs|, n, f)."""
    aggs = _check_aggs(aggs, g)
    x = _check_features(x, g.num_nodes)
    return _aggregate_impl(g, x, aggs)


def _aggregate_impl(g: CsrGraph, x: np.ndarray, aggs: tuple[AggregatorKind, ...],
                    outs: np.ndarray | None = None) -> np.ndarray:
    coeff, _ = _edge_weights(g, x.dtype)
    if outs is None:
        outs = np.empty((len(aggs), g.num_nodes, x.shape[1]), dtype=x.dtype)
    _jit.aggregate(g.row_ptr, g.col_idx, coeff, _codes(aggs), x, outs, *_slots(aggs))
    return outs


def fused_spmm(g: CsrGraph, x: np.ndarray, aggs: Sequence[AggregatorKind],
               w: np.ndarray, strategy: FusionStrategy = FusionStrategy.FUSED_WEIGHTED_STORE,
               ) -> np.ndarray:
    """out[i, :] = sum over aggregators of w[i, agg] * (agg over row i of x).

    All strategies agree within floating-point tolerance; they differ in
    transient memory and traversal count (see the module docstring).
    """
    strategy = FusionStrategy.parse(strategy)
    aggs = _check_aggs(aggs, g)
    x = _check_features(x, g.num_nodes)
    w = _check_features(w, g.num_nodes, name="w").astype(x.dtype, copy=False)
    if w.shape[1] != len(aggs):
        raise ValueError(f"w must have one column per aggregator, got {w.shape[1]} for {len(aggs)}")
    return _fused_impl(g, x, aggs, w, strategy)


def _fused_impl(g: CsrGraph, x: np.ndarray, aggs: tuple[AggregatorKind, ...],
                w: np.ndarray, strategy: FusionStrategy) -> np.ndarray:
    coeff, _ = _edge_weights(g, x.dtype)
    if strategy is FusionStrategy.FUSED_WEIGHTED_STORE:
        out = np.empty((g.num_nodes, x.shape[1]), dtype=x.dtype)
        _jit.fused_weighted(g.row_ptr, g.col_idx, coeff, _codes(aggs), x, w, out, *_slots(aggs))
        return out
    outs = np.empty((len(aggs), g.num_nodes, x.shape[1]), dtype=x.dtype)
    if strategy is FusionStrategy.FUSED_ORDERED:
        _aggregate_impl(g, x, aggs, outs=outs)
    else:  # SEQUENTIAL: one traversal per aggregator
        for k, agg in enumerate(aggs):
            _aggregate_impl(g, x, (agg,), outs=outs[k : k + 1])
    return np.einsum("anf,na->nf", outs, w)


def aggregate_row(g: CsrGraph, x: np.ndarray, i: int, agg: AggregatorKind) -> np.ndarray:
    """Single-row aggregation; the reference semantics of each tag."""
    agg = AggregatorKind(agg)
    x = _check_features(x, g.num_nodes)
    if not 0 <= i < g.num_nodes:
        raise ValueError(f"node index {i} out of range")
    start, end = g.row_ptr[i], g.row_ptr[i + 1]
    if start == end:
        raise ValueError(f"row {i} is empty; aggregation needs the self-looped neighborhood")
    nb = x[g.col_idx[start:end]]
    if agg is AggregatorKind.SUM:
        return nb.sum(axis=0)
    if agg is AggregatorKind.SYM_NORM:
        if g.coeff is None:
            raise ValueError("SYM_NORM requires per-edge coefficients on the graph")
        return g.coeff[start:end].astype(x.dtype) @ nb
    if agg is AggregatorKind.MEAN:
        return nb.mean(axis=0)
    if agg is AggregatorKind.MAX:
        return nb.max(axis=0)
    if agg is AggregatorKind.MIN:
        return nb.min(axis=0)
    mean_sq = (nb * nb).mean(axis=0)
    var = np.maximum(mean_sq - nb.mean(axis=0) ** 2, 0.0)
    if agg is AggregatorKind.VAR:
        return var
    return np.sqrt(var + STD_EPS)


def transient_elements(strategy: "FusionStrategy | str", num_nodes: int, feat_dim: int,
                       aggs: Sequence[AggregatorKind], workers: int = 1) -> int:
    """Peak transient element count of a strategy, excluding inputs and output.

    ``FUSED_WEIGHTED_STORE`` allocates only per-row accumulators, so its count
    is independent of the edge count; the buffer-storing strategies add one
    full n x f block per aggregator.
    """
    aggs = tuple(AggregatorKind(a) for a in aggs)
    row_temps = accumulator_slots(aggs) * feat_dim * workers
    if isinstance(strategy, str) and strategy == "plain_spmm":
        return 0
    strategy = FusionStrategy.parse(strategy)
    if strategy is FusionStrategy.FUSED_WEIGHTED_STORE:
        return row_temps
    stored = len(aggs) * num_nodes * feat_dim
    if strategy is FusionStrategy.FUSED_ORDERED:
        return stored + row_temps
    per_pass = max(accumulator_slots((a,)) for a in aggs) * feat_dim * workers
    return stored + per_pass
