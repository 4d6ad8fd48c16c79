"""File formats: one little-endian, versioned binary convention for all
artifacts (graphs, checkpoints, feature matrices) plus the text edge-list
format. Every binary format is required to round-trip byte-identically
through write -> read -> write.
"""

from __future__ import annotations

import io
from typing import Sequence

import numpy as np

from .graph import CsrGraph, _all_rows_have_loop, build_csr, to_edge_list
from .kernels import AggregatorKind
from .layers import DenseLayer, EgcParams, WeightActivation

__all__ = [
    "FormatError",
    "GRAPH_MAGIC",
    "CHECKPOINT_MAGIC",
    "FEATURES_MAGIC",
    "read_edge_list_text",
    "write_edge_list_text",
    "read_graph_binary",
    "write_graph_binary",
    "load_graph",
    "read_checkpoint",
    "write_checkpoint",
    "read_features",
    "write_features",
]

GRAPH_MAGIC = b"EGCG"
CHECKPOINT_MAGIC = b"EGCP"
FEATURES_MAGIC = b"EGCF"
FORMAT_VERSION = 1

_RECORD_EGC = 1
_RECORD_DENSE = 2

_ACTIVATION_CODES = {
    WeightActivation.IDENTITY: 0,
    WeightActivation.SOFTMAX: 1,
    WeightActivation.SIGMOID: 2,
    WeightActivation.HARDTANH: 3,
}
_ACTIVATION_BY_CODE = {v: k for k, v in _ACTIVATION_CODES.items()}


class FormatError(ValueError):
    pass


# ----------------------------------------------------------------------
# Text edge lists: `n <N>` header, one `src dst` pair per line, `#` comments
# ----------------------------------------------------------------------


def read_edge_list_text(path: str) -> CsrGraph:
    num_nodes = None
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if num_nodes is None:
                if len(parts) != 2 or parts[0] != "n":
                    raise FormatError(f"{path}:{lineno}: expected header 'n <count>', got {line!r}")
                try:
                    num_nodes = int(parts[1])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: node count {parts[1]!r} is not an integer") from None
                continue
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'src dst', got {line!r}")
            try:
                src, dst = int(parts[0]), int(parts[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: endpoints must be integers, got {line!r}") from None
            if not (0 <= src < num_nodes and 0 <= dst < num_nodes):
                raise FormatError(f"{path}:{lineno}: endpoint out of range [0, {num_nodes})")
            edges.append((src, dst))
    if num_nodes is None:
        raise FormatError(f"{path}: missing 'n <count>' header")
    return build_csr(edges, num_nodes)


def write_edge_list_text(path: str, g: CsrGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"n {g.num_nodes}\n")
        for src, dst in to_edge_list(g):
            fh.write(f"{src} {dst}\n")


# ----------------------------------------------------------------------
# Binary helpers
# ----------------------------------------------------------------------


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _read_scalar(fh, dtype: str, what: str) -> int:
    return int(np.frombuffer(_read_exact(fh, np.dtype(dtype).itemsize, what), dtype=dtype)[0])


def _read_array(fh, dtype: str, count: int, what: str) -> np.ndarray:
    raw = _read_exact(fh, np.dtype(dtype).itemsize * count, what)
    return np.frombuffer(raw, dtype=dtype, count=count).copy()


def _scalar_bytes(value: int, dtype: str) -> bytes:
    return np.array(value, dtype=dtype).tobytes()


def _check_magic(fh, magic: bytes, path: str) -> None:
    got = _read_exact(fh, 4, "magic bytes")
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    version = _read_scalar(fh, "<u4", "format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")


# ----------------------------------------------------------------------
# Binary CSR graphs
# ----------------------------------------------------------------------


def write_graph_binary(path: str, g: CsrGraph) -> None:
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(_scalar_bytes(FORMAT_VERSION, "<u4"))
        fh.write(_scalar_bytes(g.num_nodes, "<u8"))
        fh.write(_scalar_bytes(g.num_edges, "<u8"))
        fh.write(g.row_ptr.astype("<u8").tobytes())
        fh.write(g.col_idx.astype("<u4").tobytes())
        if g.coeff is None:
            fh.write(_scalar_bytes(0, "u1"))
        else:
            fh.write(_scalar_bytes(1, "u1"))
            fh.write(g.coeff.astype("<f4").tobytes())


def read_graph_binary(path: str) -> CsrGraph:
    with open(path, "rb") as fh:
        _check_magic(fh, GRAPH_MAGIC, path)
        n = _read_scalar(fh, "<u8", "node count")
        e = _read_scalar(fh, "<u8", "edge count")
        row_ptr = _read_array(fh, "<u8", n + 1, "row pointers").astype(np.int64)
        col_idx = _read_array(fh, "<u4", e, "column indices").astype(np.int32)
        has_coeff = _read_scalar(fh, "u1", "coefficient flag")
        coeff = None
        if has_coeff:
            coeff = _read_array(fh, "<f4", e, "coefficients").astype(np.float64)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after graph payload")
    g = CsrGraph(n, row_ptr, col_idx, coeff=coeff)
    if _all_rows_have_loop(g.row_ptr, g.col_idx, n):
        from dataclasses import replace

        g = replace(g, has_self_loops=True)
    return g


def load_graph(path: str) -> CsrGraph:
    """Binary or text edge-list graph, sniffed by magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == GRAPH_MAGIC:
        return read_graph_binary(path)
    return read_edge_list_text(path)


# ----------------------------------------------------------------------
# Checkpoints: a stack of layer records
# ----------------------------------------------------------------------


def _write_egc_record(fh, p: EgcParams) -> None:
    fh.write(_scalar_bytes(_RECORD_EGC, "u1"))
    for dim in (p.in_dim, p.out_dim, p.heads, p.bases, len(p.aggs)):
        fh.write(_scalar_bytes(dim, "<u4"))
    fh.write(bytes(int(a) for a in p.aggs))
    fh.write(_scalar_bytes(_ACTIVATION_CODES[p.w_activation], "u1"))
    fh.write(p.theta.astype("<f4").tobytes())
    fh.write(p.phi.astype("<f4").tobytes())
    fh.write(p.bias.astype("<f4").tobytes())


def _read_egc_record(fh, path: str) -> EgcParams:
    in_dim = _read_scalar(fh, "<u4", "layer in_dim")
    out_dim = _read_scalar(fh, "<u4", "layer out_dim")
    heads = _read_scalar(fh, "<u4", "layer heads")
    bases = _read_scalar(fh, "<u4", "layer bases")
    n_aggs = _read_scalar(fh, "<u4", "aggregator count")
    tags = _read_exact(fh, n_aggs, "aggregator tags")
    try:
        aggs = tuple(AggregatorKind(t) for t in tags)
    except ValueError:
        raise FormatError(f"{path}: invalid aggregator tag in checkpoint") from None
    act_code = _read_scalar(fh, "u1", "activation code")
    if act_code not in _ACTIVATION_BY_CODE:
        raise FormatError(f"{path}: invalid activation code {act_code}")
    gdim = out_dim // heads
    comb = heads * n_aggs * bases
    theta = _read_array(fh, "<f4", bases * gdim * in_dim, "theta").astype(np.float64)
    phi = _read_array(fh, "<f4", comb * in_dim, "phi").astype(np.float64)
    bias = _read_array(fh, "<f4", comb, "bias").astype(np.float64)
    return EgcParams(in_dim, out_dim, heads, bases, aggs,
                     theta.reshape(bases, gdim, in_dim), phi.reshape(comb, in_dim),
                     bias, _ACTIVATION_BY_CODE[act_code])


def _write_dense_record(fh, layer: DenseLayer) -> None:
    fh.write(_scalar_bytes(_RECORD_DENSE, "u1"))
    out_dim, in_dim = layer.weight.shape
    fh.write(_scalar_bytes(in_dim, "<u4"))
    fh.write(_scalar_bytes(out_dim, "<u4"))
    fh.write(layer.weight.astype("<f4").tobytes())
    fh.write(layer.bias.astype("<f4").tobytes())


def _read_dense_record(fh) -> DenseLayer:
    in_dim = _read_scalar(fh, "<u4", "dense in_dim")
    out_dim = _read_scalar(fh, "<u4", "dense out_dim")
    weight = _read_array(fh, "<f4", out_dim * in_dim, "dense weight").astype(np.float64)
    bias = _read_array(fh, "<f4", out_dim, "dense bias").astype(np.float64)
    return DenseLayer(weight.reshape(out_dim, in_dim), bias)


def write_checkpoint(path: str, stack: Sequence["EgcParams | DenseLayer"]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_scalar_bytes(FORMAT_VERSION, "<u4"))
        fh.write(_scalar_bytes(len(stack), "<u4"))
        for rec in stack:
            if isinstance(rec, EgcParams):
                _write_egc_record(fh, rec)
            elif isinstance(rec, DenseLayer):
                _write_dense_record(fh, rec)
            else:
                raise FormatError(f"cannot serialize record of type {type(rec).__name__}")


def read_checkpoint(path: str) -> list["EgcParams | DenseLayer"]:
    stack: list[EgcParams | DenseLayer] = []
    with open(path, "rb") as fh:
        _check_magic(fh, CHECKPOINT_MAGIC, path)
        count = _read_scalar(fh, "<u4", "record count")
        for _ in range(count):
            kind = _read_scalar(fh, "u1", "record kind")
            if kind == _RECORD_EGC:
                stack.append(_read_egc_record(fh, path))
            elif kind == _RECORD_DENSE:
                stack.append(_read_dense_record(fh))
            else:
                raise FormatError(f"{path}: unknown record kind {kind}")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    return stack


# ----------------------------------------------------------------------
# Feature matrices
# ----------------------------------------------------------------------


def write_features(path: str, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.ndim != 2:
        raise FormatError(f"features must be 2-D, got shape {x.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURES_MAGIC)
        fh.write(_scalar_bytes(FORMAT_VERSION, "<u4"))
        fh.write(_scalar_bytes(x.shape[0], "<u8"))
        fh.write(_scalar_bytes(x.shape[1], "<u4"))
        fh.write(np.ascontiguousarray(x).astype("<f4").tobytes())


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_magic(fh, FEATURES_MAGIC, path)
        n = _read_scalar(fh, "<u8", "row count")
        f = _read_scalar(fh, "<u4", "column count")
        data = _read_array(fh, "<f4", n * f, "feature data")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after feature payload")
    return data.astype(np.float64).reshape(n, f)
