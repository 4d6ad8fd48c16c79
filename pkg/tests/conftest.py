import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from egckit.graph import add_self_loops, build_csr, erdos_renyi, sym_norm_coeffs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_loop_graph(rng, n, p=0.2, coeff=False):
    """Random self-looped graph, optionally with symmetric-normalization
    coefficients."""
    g = add_self_loops(erdos_renyi(n, p, seed=int(rng.integers(1 << 31))))
    return sym_norm_coeffs(g) if coeff else g


def two_node_loop_graph(coeff=True):
    """The 2-node undirected pair with self-loops; all sym-norm coeffs 0.5."""
    g = add_self_loops(build_csr([(0, 1), (1, 0)], 2))
    return sym_norm_coeffs(g) if coeff else g


def path3_loop_graph(coeff=True):
    """Path 0-1-2 with self-loops; degrees [2, 3, 2]."""
    g = add_self_loops(build_csr([(0, 1), (1, 0), (1, 2), (2, 1)], 3))
    return sym_norm_coeffs(g) if coeff else g
