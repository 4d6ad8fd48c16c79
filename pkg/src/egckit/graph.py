"""CSR graph containers, preprocessing and synthetic generators.

Convention: an entry (i, j) of the CSR structure means "j is an in-neighbor
of i", i.e. the row of node i lists the nodes whose features it aggregates.
An input edge pair ``(src, dst)`` therefore produces the entry (dst, src).
All containers are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CsrGraph",
    "NodeTypedGraph",
    "build_csr",
    "add_self_loops",
    "in_degrees",
    "sym_norm_coeffs",
    "transpose",
    "to_edge_list",
    "erdos_renyi",
    "grid",
    "star",
    "generate_graph",
]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CsrGraph:
    """Compressed-sparse-row adjacency with optional per-edge coefficients.

    Canonical form: within each row the column indices are strictly
    increasing, so there are no duplicate edges.
    """

    num_nodes: int
    row_ptr: np.ndarray  # int64, shape (num_nodes + 1,)
    col_idx: np.ndarray  # int32, shape (num_edges,)
    coeff: np.ndarray | None = None  # float64, shape (num_edges,)
    has_self_loops: bool = False

    def __post_init__(self):
        n = self.num_nodes
        if n < 0:
            raise ValueError("num_nodes must be nonnegative")
        rp = np.ascontiguousarray(np.asarray(self.row_ptr, dtype=np.int64))
        ci = np.ascontiguousarray(np.asarray(self.col_idx, dtype=np.int32))
        if rp.shape != (n + 1,):
            raise ValueError(f"row_ptr must have length num_nodes+1, got {rp.shape}")
        if rp[0] != 0 or rp[-1] != ci.shape[0]:
            raise ValueError("row_ptr must start at 0 and end at num_edges")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be nondecreasing")
        if ci.size and (ci.min() < 0 or ci.max() >= n):
            raise ValueError("col_idx entries must be in [0, num_nodes)")
        if ci.size > 1:
            nondecr = ci[1:] <= ci[:-1]
            # decreases are legal only at row boundaries
            bad = np.flatnonzero(nondecr) + 1
            if bad.size and not np.isin(bad, rp[1:-1]).all():
                raise ValueError("col_idx must be strictly increasing within each row")
        object.__setattr__(self, "row_ptr", _freeze(rp))
        object.__setattr__(self, "col_idx", _freeze(ci))
        if self.coeff is not None:
            cf = np.ascontiguousarray(np.asarray(self.coeff, dtype=np.float64))
            if cf.shape != (ci.shape[0],):
                raise ValueError("coeff length must equal num_edges")
            if not np.isfinite(cf).all():
                raise ValueError("coeff entries must be finite")
            object.__setattr__(self, "coeff", _freeze(cf))
        if self.has_self_loops and not _all_rows_have_loop(rp, ci, n):
            raise ValueError("has_self_loops set but some row lacks its diagonal entry")

    @property
    def num_edges(self) -> int:
        return int(self.col_idx.shape[0])

    def row(self, i: int) -> np.ndarray:
        """Column indices of row i (the in-neighbors of node i)."""
        return self.col_idx[self.row_ptr[i] : self.row_ptr[i + 1]]


@dataclass(frozen=True)
class NodeTypedGraph:
    """One CSR graph per relation type plus a node-type labeling."""

    relations: tuple[CsrGraph, ...]
    node_type: np.ndarray  # int64, shape (num_nodes,)
    num_node_types: int
    num_relations: int

    def __post_init__(self):
        nt = np.ascontiguousarray(np.asarray(self.node_type, dtype=np.int64))
        if self.num_relations != len(self.relations):
            raise ValueError("num_relations must match the relation list")
        n = nt.shape[0]
        for r, g in enumerate(self.relations):
            if g.num_nodes != n:
                raise ValueError(f"relation {r} has {g.num_nodes} nodes, expected {n}")
        if nt.size and (nt.min() < 0 or nt.max() >= self.num_node_types):
            raise ValueError("node_type entries must be in [0, num_node_types)")
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "node_type", _freeze(nt))

    @property
    def num_nodes(self) -> int:
        return int(self.node_type.shape[0])


def _all_rows_have_loop(row_ptr: np.ndarray, col_idx: np.ndarray, n: int) -> bool:
    if n == 0:
        return True
    row_of = np.repeat(np.arange(n, dtype=np.int64), np.diff(row_ptr))
    diag = col_idx == row_of
    return bool(np.bincount(row_of[diag], minlength=n).all())


def _from_entries(rows: np.ndarray, cols: np.ndarray, n: int, coeff: np.ndarray | None = None) -> CsrGraph:
    """Canonicalize (row, col) entries: sort, merge duplicates, build CSR."""
    if rows.size:
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        if coeff is not None:
            coeff = coeff[order]
        keep = np.ones(rows.shape[0], dtype=bool)
        keep[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        rows, cols = rows[keep], cols[keep]
        if coeff is not None:
            coeff = coeff[keep]
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=row_ptr[1:])
    g = CsrGraph(n, row_ptr, cols.astype(np.int32), coeff=coeff)
    if _all_rows_have_loop(g.row_ptr, g.col_idx, n):
        g = replace(g, has_self_loops=True)
    return g


def build_csr(edges: Iterable[tuple[int, int]] | np.ndarray, num_nodes: int) -> CsrGraph:
    """Build a canonical CSR graph from (src, dst) pairs.

    Duplicate edges are merged. The pair (src, dst) makes src an
    in-neighbor of dst.
    """
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("edges must be pairs (src, dst)")
    if num_nodes == 0 and arr.shape[0] > 0:
        raise ValueError("num_nodes is 0 but the edge list is nonempty")
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise ValueError("edge endpoint out of range")
    return _from_entries(arr[:, 1].copy(), arr[:, 0].copy(), num_nodes)


def to_edge_list(g: CsrGraph) -> np.ndarray:
    """Expand back to (src, dst) pairs; inverts the build_csr convention."""
    rows = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(g.row_ptr))
    return np.stack([g.col_idx.astype(np.int64), rows], axis=1)


def add_self_loops(g: CsrGraph) -> CsrGraph:
    """Return a graph where every row contains its diagonal entry.

    Idempotent. When new entries are added, existing per-edge coefficients
    are dropped: they were computed for the original edge set.
    """
    if g.has_self_loops:
        return g
    loops = np.arange(g.num_nodes, dtype=np.int64)
    rows = np.concatenate([np.repeat(loops, np.diff(g.row_ptr)), loops])
    cols = np.concatenate([g.col_idx.astype(np.int64), loops])
    return _from_entries(rows, cols, g.num_nodes)


def in_degrees(g: CsrGraph) -> np.ndarray:
    """Row lengths: the number of in-neighbors stored for each node."""
    return np.diff(g.row_ptr)


def sym_norm_coeffs(g: CsrGraph) -> CsrGraph:
    """Fill coeff[e] = 1/sqrt(deg(i) * deg(j)) for the entry (i, j).

    Degrees are the row lengths of the self-looped graph, so the graph must
    already carry self-loops (which also rules out zero-degree rows).
    """
    if not g.has_self_loops:
        raise ValueError("symmetric normalization is defined on the self-looped graph")
    deg = in_degrees(g).astype(np.float64)
    deg_row = np.repeat(deg, np.diff(g.row_ptr))
    deg_col = deg[g.col_idx]
    return replace(g, coeff=1.0 / np.sqrt(deg_row * deg_col))


def transpose(g: CsrGraph) -> CsrGraph:
    """Reverse every entry; coefficients follow their entries."""
    rows = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(g.row_ptr))
    cols = g.col_idx.astype(np.int64)
    coeff = None if g.coeff is None else g.coeff.copy()
    return _from_entries(cols, rows, g.num_nodes, coeff=coeff)


# ----------------------------------------------------------------------
# Synthetic generators (bench and test inputs). All undirected graphs are
# emitted as symmetric edge sets in canonical CSR form.
# ----------------------------------------------------------------------


def _decode_triangular(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map codes in [0, n*(n-1)/2) to unordered pairs (i, j), i > j."""
    i = np.floor((1.0 + np.sqrt(1.0 + 8.0 * codes.astype(np.float64))) / 2.0).astype(np.int64)
    tri = i * (i - 1) // 2
    i[tri > codes] -= 1
    tri = i * (i - 1) // 2
    too_low = codes >= tri + i
    i[too_low] += 1
    tri = i * (i - 1) // 2
    j = codes - tri
    return i, j


def erdos_renyi(n: int, p: float, seed: int = 0) -> CsrGraph:
    """G(n, p) with symmetric edges, sampled without materializing n^2 pairs."""
    if n <= 0:
        raise ValueError("erdos_renyi needs at least one node")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    n_pairs = n * (n - 1) // 2
    m = int(rng.binomial(n_pairs, p)) if n_pairs else 0
    pool = np.empty(0, dtype=np.int64)
    while pool.size < m:
        draw = rng.integers(0, n_pairs, size=max(m - pool.size, 1024) + 64)
        pool = np.unique(np.concatenate([pool, draw]))
    codes = pool[rng.permutation(pool.size)[:m]]
    i, j = _decode_triangular(codes)
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    return _from_entries(rows, cols, n)


def grid(rows: int, cols: int) -> CsrGraph:
    """4-neighbor lattice of rows x cols nodes."""
    if rows <= 0 or cols <= 0:
        raise ValueError("grid dimensions must be positive")
    ids = np.arange(rows * cols, dtype=np.int64).reshape(rows, cols)
    right = np.stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()], axis=1)
    down = np.stack([ids[:-1, :].ravel(), ids[1:, :].ravel()], axis=1)
    und = np.concatenate([right, down], axis=0)
    src = np.concatenate([und[:, 0], und[:, 1]])
    dst = np.concatenate([und[:, 1], und[:, 0]])
    return _from_entries(dst, src, rows * cols)


def star(n: int) -> CsrGraph:
    """Node 0 connected to all n-1 leaves."""
    if n <= 0:
        raise ValueError("star needs at least one node")
    leaves = np.arange(1, n, dtype=np.int64)
    center = np.zeros(n - 1, dtype=np.int64)
    rows = np.concatenate([leaves, center])
    cols = np.concatenate([center, leaves])
    return _from_entries(rows, cols, n)


def generate_graph(kind: str, seed: int = 0, **params) -> CsrGraph:
    """Dispatch by kind; used by the bench config and CLI."""
    if kind == "erdos_renyi":
        n = int(params["n"])
        if "p" in params:
            p = float(params["p"])
        elif "avg_degree" in params:
            p = float(params["avg_degree"]) / max(n - 1, 1)
        else:
            raise ValueError("erdos_renyi needs 'p' or 'avg_degree'")
        return erdos_renyi(n, p, seed=seed)
    if kind == "grid":
        return grid(int(params["rows"]), int(params["cols"]))
    if kind == "star":
        return star(int(params["n"]))
    raise ValueError(f"unknown graph kind {kind!r}")
