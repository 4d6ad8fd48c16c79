"""Compiled CSR kernels.

All kernels parallelize over output rows: inputs are shared read-only and
each row is written by exactly one chunk iteration, so results are
bit-identical for any worker count. Within a row the reduction order is
fixed: the first entry seeds the accumulators, the remaining entries are
consumed in pairs (and one trailing single). Every aggregation strategy
funnels through the same accumulation routine so that their per-row sums
are float-identical.

Accumulator slots (at most five): coefficient-weighted sum, plain sum, sum
of squares, running max, running min. A slot index of -1 means the slot is
not needed for the requested aggregator set.
"""

import numpy as np
from numba import njit, prange

# aggregator codes, must match kernels.AggregatorKind
SYM_NORM = 0
SUM = 1
MEAN = 2
MAX = 3
MIN = 4
STD = 5
VAR = 6

STD_EPS = 1e-5

# row-body specializations picked by slot pattern
PAT_GENERIC = 0
PAT_TRIO = 1  # sum + max + min, the common multi-aggregator set
PAT_SUM = 2
PAT_WS = 3

# fixed chunk count keeps results independent of the worker count while
# letting each chunk reuse one set of row temporaries
N_CHUNKS = 64


@njit(cache=True, parallel=True)
def spmm(row_ptr, col_idx, coeff, has_coeff, x, out):
    n = row_ptr.shape[0] - 1
    f = x.shape[1]
    for i in prange(n):
        start = row_ptr[i]
        end = row_ptr[i + 1]
        for t in range(f):
            out[i, t] = 0.0
        for e in range(start, end):
            j = col_idx[e]
            if has_coeff:
                c = coeff[e]
                for t in range(f):
                    out[i, t] += c * x[j, t]
            else:
                for t in range(f):
                    out[i, t] += x[j, t]


@njit(inline="always")
def _acc_row(row_ptr, col_idx, coeff, i, x, acc, s_ws, s_sum, s_sq, s_max, s_min, pattern):
    """Reduce row i of the CSR structure into the accumulator slots."""
    f = x.shape[1]
    start = row_ptr[i]
    end = row_ptr[i + 1]
    j0 = col_idx[start]
    if pattern == PAT_TRIO:
        su = acc[s_sum]
        mx = acc[s_max]
        mn = acc[s_min]
        for t in range(f):
            v = x[j0, t]
            su[t] = v
            mx[t] = v
            mn[t] = v
        e = start + 1
        while e + 1 < end:
            ja = col_idx[e]
            jb = col_idx[e + 1]
            for t in range(f):
                va = x[ja, t]
                vb = x[jb, t]
                su[t] += va + vb
                m0 = mx[t]
                m0 = va if va > m0 else m0
                mx[t] = vb if vb > m0 else m0
                m1 = mn[t]
                m1 = va if va < m1 else m1
                mn[t] = vb if vb < m1 else m1
            e += 2
        if e < end:
            j = col_idx[e]
            for t in range(f):
                v = x[j, t]
                su[t] += v
                m0 = mx[t]
                m1 = mn[t]
                mx[t] = v if v > m0 else m0
                mn[t] = v if v < m1 else m1
    elif pattern == PAT_SUM:
        su = acc[s_sum]
        for t in range(f):
            su[t] = x[j0, t]
        e = start + 1
        while e + 1 < end:
            ja = col_idx[e]
            jb = col_idx[e + 1]
            for t in range(f):
                su[t] += x[ja, t] + x[jb, t]
            e += 2
        if e < end:
            j = col_idx[e]
            for t in range(f):
                su[t] += x[j, t]
    elif pattern == PAT_WS:
        ws = acc[s_ws]
        c0 = coeff[start]
        for t in range(f):
            ws[t] = c0 * x[j0, t]
        e = start + 1
        while e + 1 < end:
            ja = col_idx[e]
            jb = col_idx[e + 1]
            ca = coeff[e]
            cb = coeff[e + 1]
            for t in range(f):
                ws[t] += ca * x[ja, t] + cb * x[jb, t]
            e += 2
        if e < end:
            j = col_idx[e]
            ce = coeff[e]
            for t in range(f):
                ws[t] += ce * x[j, t]
    else:
        # generic: one pairwise stream per active slot; after the first
        # slot's pass the row data is cache-resident
        if s_ws >= 0:
            ws = acc[s_ws]
            c0 = coeff[start]
            for t in range(f):
                ws[t] = c0 * x[j0, t]
            e = start + 1
            while e + 1 < end:
                ja = col_idx[e]
                jb = col_idx[e + 1]
                ca = coeff[e]
                cb = coeff[e + 1]
                for t in range(f):
                    ws[t] += ca * x[ja, t] + cb * x[jb, t]
                e += 2
            if e < end:
                j = col_idx[e]
                ce = coeff[e]
                for t in range(f):
                    ws[t] += ce * x[j, t]
        if s_sum >= 0:
            su = acc[s_sum]
            for t in range(f):
                su[t] = x[j0, t]
            e = start + 1
            while e + 1 < end:
                ja = col_idx[e]
                jb = col_idx[e + 1]
                for t in range(f):
                    su[t] += x[ja, t] + x[jb, t]
                e += 2
            if e < end:
                j = col_idx[e]
                for t in range(f):
                    su[t] += x[j, t]
        if s_sq >= 0:
            sq = acc[s_sq]
            for t in range(f):
                v = x[j0, t]
                sq[t] = v * v
            e = start + 1
            while e + 1 < end:
                ja = col_idx[e]
                jb = col_idx[e + 1]
                for t in range(f):
                    va = x[ja, t]
                    vb = x[jb, t]
                    sq[t] += va * va + vb * vb
                e += 2
            if e < end:
                j = col_idx[e]
                for t in range(f):
                    v = x[j, t]
                    sq[t] += v * v
        if s_max >= 0:
            mx = acc[s_max]
            for t in range(f):
                mx[t] = x[j0, t]
            for e in range(start + 1, end):
                j = col_idx[e]
                for t in range(f):
                    v = x[j, t]
                    m = mx[t]
                    mx[t] = v if v > m else m
        if s_min >= 0:
            mn = acc[s_min]
            for t in range(f):
                mn[t] = x[j0, t]
            for e in range(start + 1, end):
                j = col_idx[e]
                for t in range(f):
                    v = x[j, t]
                    m = mn[t]
                    mn[t] = v if v < m else m


@njit(cache=True, parallel=True)
def aggregate(row_ptr, col_idx, coeff, codes, x, outs,
              n_acc, s_ws, s_sum, s_sq, s_max, s_min, pattern):
    """Finalized per-aggregator results into outs, shape (|codes|, n, f)."""
    n = row_ptr.shape[0] - 1
    f = x.shape[1]
    a = codes.shape[0]
    n_chunks = min(n, N_CHUNKS)
    if n_chunks == 0:
        return
    step = (n + n_chunks - 1) // n_chunks
    for c in prange(n_chunks):
        lo = c * step
        hi = min(lo + step, n)
        acc = np.empty((n_acc, f), dtype=x.dtype)
        for i in range(lo, hi):
            cnt = row_ptr[i + 1] - row_ptr[i]
            if cnt == 0:
                for k in range(a):
                    for t in range(f):
                        outs[k, i, t] = 0.0
                continue
            _acc_row(row_ptr, col_idx, coeff, i, x, acc,
                     s_ws, s_sum, s_sq, s_max, s_min, pattern)
            inv = 1.0 / cnt
            for k in range(a):
                code = codes[k]
                if code == SUM:
                    for t in range(f):
                        outs[k, i, t] = acc[s_sum, t]
                elif code == SYM_NORM:
                    for t in range(f):
                        outs[k, i, t] = acc[s_ws, t]
                elif code == MEAN:
                    for t in range(f):
                        outs[k, i, t] = acc[s_sum, t] * inv
                elif code == MAX:
                    for t in range(f):
                        outs[k, i, t] = acc[s_max, t]
                elif code == MIN:
                    for t in range(f):
                        outs[k, i, t] = acc[s_min, t]
                elif code == VAR:
                    for t in range(f):
                        m1 = acc[s_sum, t] * inv
                        v = acc[s_sq, t] * inv - m1 * m1
                        if v < 0.0:
                            v = 0.0
                        outs[k, i, t] = v
                else:
                    for t in range(f):
                        m1 = acc[s_sum, t] * inv
                        v = acc[s_sq, t] * inv - m1 * m1
                        if v < 0.0:
                            v = 0.0
                        outs[k, i, t] = np.sqrt(v + STD_EPS)


@njit(cache=True, parallel=True)
def fused_weighted(row_ptr, col_idx, coeff, codes, x, w, out,
                   n_acc, s_ws, s_sum, s_sq, s_max, s_min, pattern):
    """Store only the weighted combination per row; no stored aggregations."""
    n = row_ptr.shape[0] - 1
    f = x.shape[1]
    a = codes.shape[0]
    n_chunks = min(n, N_CHUNKS)
    if n_chunks == 0:
        return
    step = (n + n_chunks - 1) // n_chunks
    for c in prange(n_chunks):
        lo = c * step
        hi = min(lo + step, n)
        acc = np.empty((n_acc, f), dtype=x.dtype)
        for i in range(lo, hi):
            cnt = row_ptr[i + 1] - row_ptr[i]
            if cnt == 0:
                for t in range(f):
                    out[i, t] = 0.0
                continue
            _acc_row(row_ptr, col_idx, coeff, i, x, acc,
                     s_ws, s_sum, s_sq, s_max, s_min, pattern)
            inv = 1.0 / cnt
            if pattern == PAT_TRIO:
                # all requested aggregators are linear in the slots: fold the
                # per-node weights into per-slot scalars, combine in one pass
                g_s = 0.0
                g_mx = 0.0
                g_mn = 0.0
                for k in range(a):
                    code = codes[k]
                    wk = w[i, k]
                    if code == SUM:
                        g_s += wk
                    elif code == MEAN:
                        g_s += wk * inv
                    elif code == MAX:
                        g_mx += wk
                    else:
                        g_mn += wk
                su = acc[s_sum]
                mx = acc[s_max]
                mn = acc[s_min]
                for t in range(f):
                    out[i, t] = g_s * su[t] + g_mx * mx[t] + g_mn * mn[t]
            else:
                for t in range(f):
                    out[i, t] = 0.0
                for k in range(a):
                    code = codes[k]
                    wk = w[i, k]
                    if code == SUM:
                        for t in range(f):
                            out[i, t] += wk * acc[s_sum, t]
                    elif code == SYM_NORM:
                        for t in range(f):
                            out[i, t] += wk * acc[s_ws, t]
                    elif code == MEAN:
                        for t in range(f):
                            out[i, t] += wk * acc[s_sum, t] * inv
                    elif code == MAX:
                        for t in range(f):
                            out[i, t] += wk * acc[s_max, t]
                    elif code == MIN:
                        for t in range(f):
                            out[i, t] += wk * acc[s_min, t]
                    elif code == VAR:
                        for t in range(f):
                            m1 = acc[s_sum, t] * inv
                            v = acc[s_sq, t] * inv - m1 * m1
                            if v < 0.0:
                                v = 0.0
                            out[i, t] += wk * v
                    else:
                        for t in range(f):
                            m1 = acc[s_sum, t] * inv
                            v = acc[s_sq, t] * inv - m1 * m1
                            if v < 0.0:
                                v = 0.0
                            out[i, t] += wk * np.sqrt(v + STD_EPS)
