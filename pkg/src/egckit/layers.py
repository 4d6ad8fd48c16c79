"""Graph convolution layer family with per-node basis combinations.

A layer holds B shared basis matrices of shape (out_dim/heads, in_dim).
Each node mixes the basis-filtered aggregations with its own combination
weights w = phi @ x + bias, indexed (head, aggregator, basis); heads are
concatenated to form the output. Isotropic baselines (plain graph
convolution and the sum-aggregation layer with explicit self-weighting)
and the relation-typed variant share the same kernels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import CsrGraph, NodeTypedGraph, in_degrees
from .kernels import (
    AggregatorKind,
    accumulator_slots,
    aggregate_neighbors,
    spmm,
)

__all__ = [
    "WeightActivation",
    "EgcParams",
    "ReggcParams",
    "DenseLayer",
    "init_egc_params",
    "init_reggc_params",
    "combination_weights",
    "egc_s_forward",
    "egc_m_forward",
    "gcn_forward",
    "gin_forward",
    "r_egc_forward",
    "param_count",
    "MemoryCounters",
    "memory_probe",
]


class WeightActivation(enum.Enum):
    """Optional activation of the combination weights; identity by default
    (activations shrink the reachable per-node weight space)."""

    IDENTITY = "identity"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    HARDTANH = "hardtanh"

    @classmethod
    def parse(cls, name: "str | WeightActivation") -> "WeightActivation":
        if isinstance(name, cls):
            return name
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown activation {name!r}") from None


@dataclass
class EgcParams:
    in_dim: int
    out_dim: int
    heads: int
    bases: int
    aggs: tuple[AggregatorKind, ...]
    theta: np.ndarray  # (bases, out_dim // heads, in_dim)
    phi: np.ndarray    # (heads * |aggs| * bases, in_dim)
    bias: np.ndarray   # (heads * |aggs| * bases,)
    w_activation: WeightActivation = WeightActivation.IDENTITY

    def __post_init__(self):
        self.aggs = tuple(AggregatorKind(a) for a in self.aggs)
        if self.heads < 1 or self.bases < 1 or not self.aggs:
            raise ValueError("heads, bases and aggregator count must be positive")
        if self.out_dim % self.heads:
            raise ValueError(f"out_dim {self.out_dim} not divisible by heads {self.heads}")
        comb = self.heads * len(self.aggs) * self.bases
        g = self.out_dim // self.heads
        if self.theta.shape != (self.bases, g, self.in_dim):
            raise ValueError(f"theta must be {(self.bases, g, self.in_dim)}, got {self.theta.shape}")
        if self.phi.shape != (comb, self.in_dim):
            raise ValueError(f"phi must be {(comb, self.in_dim)}, got {self.phi.shape}")
        if self.bias.shape != (comb,):
            raise ValueError(f"bias must be {(comb,)}, got {self.bias.shape}")
        for name in ("theta", "phi", "bias"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def head_dim(self) -> int:
        return self.out_dim // self.heads


@dataclass
class ReggcParams:
    """Relation-typed variant: one shared basis set, separate weighting
    parameters per node type (self term) and per relation (neighbor terms)."""

    in_dim: int
    out_dim: int
    heads: int
    bases: int
    num_node_types: int
    num_relations: int
    theta: np.ndarray      # (bases, out_dim // heads, in_dim)
    phi_node: np.ndarray   # (num_node_types, heads * bases, in_dim)
    bias_node: np.ndarray  # (num_node_types, heads * bases)
    phi_rel: np.ndarray    # (num_relations, heads * bases, in_dim)
    bias_rel: np.ndarray   # (num_relations, heads * bases)

    def __post_init__(self):
        if self.out_dim % self.heads:
            raise ValueError(f"out_dim {self.out_dim} not divisible by heads {self.heads}")
        g = self.out_dim // self.heads
        hb = self.heads * self.bases
        expect = {
            "theta": (self.bases, g, self.in_dim),
            "phi_node": (self.num_node_types, hb, self.in_dim),
            "bias_node": (self.num_node_types, hb),
            "phi_rel": (self.num_relations, hb, self.in_dim),
            "bias_rel": (self.num_relations, hb),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must be {shape}, got {getattr(self, name).shape}")

    @property
    def head_dim(self) -> int:
        return self.out_dim // self.heads


@dataclass
class DenseLayer:
    """Plain affine map, used as the readout of layer stacks."""

    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray    # (out_dim,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_egc_params(in_dim: int, out_dim: int, heads: int, bases: int,
                    aggs, rng: np.random.Generator,
                    w_activation: WeightActivation = WeightActivation.IDENTITY,
                    dtype=np.float64) -> EgcParams:
    aggs = tuple(AggregatorKind(a) for a in aggs)
    comb = heads * len(aggs) * bases
    if out_dim % heads:
        raise ValueError(f"out_dim {out_dim} not divisible by heads {heads}")
    return EgcParams(
        in_dim, out_dim, heads, bases, aggs,
        theta=_uniform(rng, (bases, out_dim // heads, in_dim), in_dim, dtype),
        phi=_uniform(rng, (comb, in_dim), in_dim, dtype),
        bias=np.zeros(comb, dtype=dtype),
        w_activation=WeightActivation.parse(w_activation),
    )


def init_reggc_params(in_dim: int, out_dim: int, heads: int, bases: int,
                      num_node_types: int, num_relations: int,
                      rng: np.random.Generator, dtype=np.float64) -> ReggcParams:
    hb = heads * bases
    return ReggcParams(
        in_dim, out_dim, heads, bases, num_node_types, num_relations,
        theta=_uniform(rng, (bases, out_dim // heads, in_dim), in_dim, dtype),
        phi_node=_uniform(rng, (num_node_types, hb, in_dim), in_dim, dtype),
        bias_node=np.zeros((num_node_types, hb), dtype=dtype),
        phi_rel=_uniform(rng, (num_relations, hb, in_dim), in_dim, dtype),
        bias_rel=np.zeros((num_relations, hb), dtype=dtype),
    )


def _apply_activation(pre: np.ndarray, p: EgcParams) -> np.ndarray:
    act = p.w_activation
    if act is WeightActivation.IDENTITY:
        return pre
    if act is WeightActivation.SIGMOID:
        return 1.0 / (1.0 + np.exp(-pre))
    if act is WeightActivation.HARDTANH:
        return np.clip(pre, -1.0, 1.0)
    # softmax normalizes across the basis axis within each (head, aggregator) group
    shaped = pre.reshape(pre.shape[0], p.heads, len(p.aggs), p.bases)
    shifted = shaped - shaped.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(pre.shape)


def combination_weights(x: np.ndarray, p: EgcParams) -> np.ndarray:
    """Per-node weighting coefficients, shape (n, heads * |aggs| * bases).

    The flattened index runs (head, aggregator, basis), slowest first.
    """
    if x.shape[1] != p.in_dim:
        raise ValueError(f"x has {x.shape[1]} columns, layer expects {p.in_dim}")
    return _apply_activation(x @ p.phi.T + p.bias, p)


def _check_forward_inputs(g: CsrGraph, x: np.ndarray, p) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != g.num_nodes:
        raise ValueError(f"x must be ({g.num_nodes}, {p.in_dim}), got {x.shape}")
    if x.shape[1] != p.in_dim:
        raise ValueError(f"x has {x.shape[1]} columns, layer expects {p.in_dim}")
    return x


def egc_s_forward(g: CsrGraph, x: np.ndarray, p: EgcParams,
                  propagate_first: bool = False) -> np.ndarray:
    """Single-aggregator layer over symmetric-normalized neighborhoods.

    Runs one SpMM per basis over the transformed features; with
    ``propagate_first`` the factorized order (one SpMM on raw features, then
    per-basis transforms) is used instead. Both compute the same function.
    """
    if p.aggs != (AggregatorKind.SYM_NORM,):
        raise ValueError("this layer uses exactly the SYM_NORM aggregator")
    if not g.has_self_loops or g.coeff is None:
        raise ValueError("graph must carry self-loops and symmetric-normalization coefficients")
    x = _check_forward_inputs(g, x, p)
    n = g.num_nodes
    if propagate_first:
        px = spmm(g, x)
        basis_out = np.einsum("nf,bgf->bng", px, p.theta)
    else:
        basis_out = np.stack([spmm(g, x @ p.theta[b].T) for b in range(p.bases)])
    w = combination_weights(x, p).reshape(n, p.heads, p.bases)
    return np.einsum("nhb,bng->nhg", w, basis_out).reshape(n, p.out_dim)


def egc_m_forward(g: CsrGraph, x: np.ndarray, p: EgcParams) -> np.ndarray:
    """Multi-aggregator layer: one fused traversal over all basis blocks."""
    if AggregatorKind.SYM_NORM in p.aggs and g.coeff is None:
        raise ValueError("SYM_NORM requires per-edge coefficients on the graph")
    if not g.has_self_loops:
        raise ValueError("aggregation runs over the self-looped neighborhood")
    x = _check_forward_inputs(g, x, p)
    n, gdim = g.num_nodes, p.head_dim
    transformed = np.einsum("nf,bgf->nbg", x, p.theta).reshape(n, p.bases * gdim)
    agg = aggregate_neighbors(g, transformed, p.aggs)
    agg = agg.reshape(len(p.aggs), n, p.bases, gdim)
    w = combination_weights(x, p).reshape(n, p.heads, len(p.aggs), p.bases)
    return np.einsum("nhab,anbg->nhg", w.astype(agg.dtype, copy=False), agg).reshape(n, p.out_dim)


def gcn_forward(g: CsrGraph, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Plain graph convolution: symmetric-normalized propagation, one weight."""
    if not g.has_self_loops or g.coeff is None:
        raise ValueError("graph must carry self-loops and symmetric-normalization coefficients")
    if x.shape[1] != theta.shape[1]:
        raise ValueError(f"x has {x.shape[1]} columns, theta expects {theta.shape[1]}")
    return spmm(g, x) @ theta.T


def gin_forward(g: CsrGraph, x: np.ndarray, eps: float,
                weight: np.ndarray | None = None,
                bias: np.ndarray | None = None) -> np.ndarray:
    """y_i = f((1 + eps) x_i + sum of neighbor features); f affine or identity.

    The self term is explicit, so the graph must not carry self-loops.
    """
    if g.has_self_loops:
        raise ValueError("this layer adds the self term explicitly; pass the graph without self-loops")
    plain = g if g.coeff is None else replace(g, coeff=None)
    h = (1.0 + eps) * x + spmm(plain, x)
    if weight is None:
        return h if bias is None else h + bias
    out = h @ weight.T
    return out if bias is None else out + bias


def _mean_graph(g: CsrGraph) -> CsrGraph:
    """Unit coefficients scaled to 1/deg per row; empty rows contribute zero."""
    deg = in_degrees(g).astype(np.float64)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / deg[nz]
    return replace(g, coeff=np.repeat(inv, np.diff(g.row_ptr)))


def r_egc_forward(tg: NodeTypedGraph, x: np.ndarray, p: ReggcParams) -> np.ndarray:
    """Relation-typed layer: node-type-weighted self term plus, per relation,
    the mean over that relation's in-neighbors with relation-specific
    weighting. Nodes without neighbors in a relation contribute zero there."""
    n = tg.num_nodes
    x = np.asarray(x)
    if x.shape != (n, p.in_dim):
        raise ValueError(f"x must be ({n}, {p.in_dim}), got {x.shape}")
    gdim = p.head_dim
    transformed = np.einsum("nf,bgf->nbg", x, p.theta)

    w_node = np.empty((n, p.heads * p.bases), dtype=x.dtype)
    for t in range(p.num_node_types):
        mask = tg.node_type == t
        if mask.any():
            w_node[mask] = x[mask] @ p.phi_node[t].T + p.bias_node[t]
    y = np.einsum("nhb,nbg->nhg", w_node.reshape(n, p.heads, p.bases), transformed)

    flat = transformed.reshape(n, p.bases * gdim)
    for r, rel in enumerate(tg.relations):
        mean_t = spmm(_mean_graph(rel), flat).reshape(n, p.bases, gdim)
        w_rel = (x @ p.phi_rel[r].T + p.bias_rel[r]).reshape(n, p.heads, p.bases)
        y = y + np.einsum("nhb,nbg->nhg", w_rel, mean_t)
    return y.reshape(n, p.out_dim)


def param_count(p: EgcParams) -> int:
    """Exact learnable parameter count of one layer."""
    expected = (p.bases * p.head_dim * p.in_dim
                + p.heads * len(p.aggs) * p.bases * (p.in_dim + 1))
    actual = p.theta.size + p.phi.size + p.bias.size
    assert actual == expected
    return expected


@dataclass(frozen=True)
class MemoryCounters:
    """Peak transient element counts of a forward pass, by category."""

    transformed_elems: int = 0
    row_temp_elems: int = 0
    message_elems: int = 0

    @property
    def peak_transient_elems(self) -> int:
        return self.transformed_elems + self.row_temp_elems + self.message_elems


def memory_probe(layer_kind: str, g: CsrGraph, feat_dim: int, *,
                 bases: int = 1, aggs=(AggregatorKind.SUM,), workers: int = 1,
                 ) -> MemoryCounters:
    """Accounting model of transient memory.

    ``egc`` counts the basis-transformed feature blocks (n * feat * bases)
    plus the kernels' per-row accumulators; nothing scales with the edge
    count. ``materialized_messages`` is the analytical model of layers whose
    messages depend on both endpoints and must be stored per edge.
    """
    if layer_kind == "egc":
        return MemoryCounters(
            transformed_elems=g.num_nodes * feat_dim * bases,
            row_temp_elems=accumulator_slots(aggs) * feat_dim * workers,
        )
    if layer_kind == "materialized_messages":
        return MemoryCounters(message_elems=g.num_edges * feat_dim)
    raise ValueError(f"unknown layer kind {layer_kind!r}")
