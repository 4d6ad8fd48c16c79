import itertools

import numpy as np
import numpy.testing as npt
import pytest

from egckit.graph import add_self_loops, build_csr, erdos_renyi, sym_norm_coeffs
from egckit.kernels import (
    STD_EPS,
    AggregatorKind,
    FusionStrategy,
    accumulator_slots,
    aggregate_neighbors,
    aggregate_row,
    fused_spmm,
    set_worker_count,
    spmm,
    transient_elements,
)

from conftest import random_loop_graph, two_node_loop_graph, path3_loop_graph
from oracles import oracle_aggregate, oracle_fused, oracle_spmm, permute_graph

A = AggregatorKind
ALL_AGGS = tuple(A)
STRATEGIES = tuple(FusionStrategy)


def identity_graph(n):
    return add_self_loops(build_csr([], n))


class TestSpmm:
    def test_identity_graph_is_identity(self, rng):
        g = sym_norm_coeffs(identity_graph(4))
        x = rng.standard_normal((4, 3))
        npt.assert_allclose(spmm(g, x), x, atol=1e-12)

    def test_two_node_example(self):
        out = spmm(two_node_loop_graph(), np.array([[1.0], [3.0]]))
        npt.assert_allclose(out, [[2.0], [2.0]], atol=1e-12)

    def test_path_example(self):
        out = spmm(path3_loop_graph(), np.array([[1.0], [2.0], [3.0]]))
        # 0.5 * 1 + (1/sqrt(6)) * 2
        npt.assert_allclose(out[0, 0], 1.3164965809, rtol=1e-9)

    def test_unit_weights_when_coeff_absent(self):
        g = add_self_loops(build_csr([(0, 1), (1, 0)], 2))
        out = spmm(g, np.array([[1.0], [3.0]]))
        npt.assert_allclose(out, [[4.0], [4.0]])

    def test_empty_rows_give_zero(self):
        g = build_csr([(0, 1)], 3)  # only row 1 nonempty
        out = spmm(g, np.ones((3, 2)))
        npt.assert_array_equal(out[0], 0)
        npt.assert_array_equal(out[2], 0)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_matches_dense_oracle(self, rng, dtype):
        for _ in range(10):
            g = random_loop_graph(rng, int(rng.integers(2, 60)), 0.25, coeff=True)
            x = rng.standard_normal((g.num_nodes, int(rng.integers(1, 9)))).astype(dtype)
            npt.assert_allclose(spmm(g, x), oracle_spmm(g, x), atol=1e-5)

    def test_errors(self, rng):
        g = two_node_loop_graph()
        with pytest.raises(ValueError):
            spmm(g, np.ones((3, 2)))
        with pytest.raises(ValueError):
            spmm(g, np.array([[np.nan], [1.0]]))


class TestAggregateRow:
    def test_mean_example(self):
        g = two_node_loop_graph(coeff=False)
        npt.assert_allclose(aggregate_row(g, np.array([[1.0], [3.0]]), 0, A.MEAN), [2.0])

    def test_var_example(self):
        g = two_node_loop_graph(coeff=False)
        npt.assert_allclose(aggregate_row(g, np.array([[1.0], [3.0]]), 0, A.VAR), [1.0])

    def test_max_singleton(self):
        g = identity_graph(1)
        npt.assert_allclose(aggregate_row(g, np.array([[7.0]]), 0, A.MAX), [7.0])

    def test_std_neighborhood(self):
        g = two_node_loop_graph(coeff=False)
        out = aggregate_row(g, np.array([[1.0], [3.0]]), 0, A.STD)
        npt.assert_allclose(out, np.sqrt(1.0 + STD_EPS), rtol=1e-12)

    def test_matches_brute_force(self, rng):
        g = random_loop_graph(rng, 25, 0.3, coeff=True)
        x = rng.standard_normal((25, 5))
        for agg in ALL_AGGS:
            ref = oracle_aggregate(g, x, agg)
            for i in (0, 7, 24):
                npt.assert_allclose(aggregate_row(g, x, i, agg), ref[i], atol=1e-10)

    def test_empty_row_errors(self):
        g = build_csr([(0, 1)], 3)
        with pytest.raises(ValueError):
            aggregate_row(g, np.ones((3, 1)), 0, A.SUM)


class TestFusedSpmm:
    def test_sum_with_unit_weights(self):
        g = two_node_loop_graph(coeff=False)
        out = fused_spmm(g, np.array([[1.0], [3.0]]), [A.SUM], np.ones((2, 1)))
        npt.assert_allclose(out, [[4.0], [4.0]])

    def test_max_min_selector_weights(self):
        g = two_node_loop_graph(coeff=False)
        w = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = fused_spmm(g, np.array([[1.0], [3.0]]), [A.MAX, A.MIN], w)
        npt.assert_allclose(out, [[3.0], [1.0]])

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_er_matches_sequential_oracle(self, rng, strategy):
        g = random_loop_graph(rng, 50, 0.1)
        x = rng.standard_normal((50, 6))
        w = rng.standard_normal((50, 3))
        aggs = (A.SUM, A.MAX, A.MIN)
        ref = fused_spmm(g, x, aggs, w, FusionStrategy.SEQUENTIAL)
        npt.assert_allclose(fused_spmm(g, x, aggs, w, strategy), ref, atol=1e-5)

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_matches_brute_force_all_aggregators(self, rng, strategy):
        g = random_loop_graph(rng, 30, 0.25, coeff=True)
        x = rng.standard_normal((30, 4))
        w = rng.standard_normal((30, len(ALL_AGGS)))
        out = fused_spmm(g, x, ALL_AGGS, w, strategy)
        npt.assert_allclose(out, oracle_fused(g, x, ALL_AGGS, w), atol=1e-8)

    def test_strategy_equivalence_small_sweep(self, rng):
        # full subset sweep lives in the acceptance suite
        g = random_loop_graph(rng, 20, 0.3, coeff=True)
        x = rng.standard_normal((20, 3))
        for aggs in [(A.SYM_NORM,), (A.STD, A.VAR), (A.MEAN, A.MAX, A.STD)]:
            w = rng.standard_normal((20, len(aggs)))
            outs = [fused_spmm(g, x, aggs, w, s) for s in STRATEGIES]
            npt.assert_allclose(outs[0], outs[1], atol=1e-5)
            npt.assert_allclose(outs[0], outs[2], atol=1e-5)

    def test_errors(self, rng):
        g_plain = two_node_loop_graph(coeff=False)
        x = np.ones((2, 1))
        with pytest.raises(ValueError):
            fused_spmm(g_plain, x, [A.SYM_NORM], np.ones((2, 1)))
        with pytest.raises(ValueError):
            fused_spmm(g_plain, x, [], np.ones((2, 0)))
        with pytest.raises(ValueError):
            fused_spmm(g_plain, x, [A.SUM, A.SUM], np.ones((2, 2)))
        with pytest.raises(ValueError):
            fused_spmm(g_plain, x, [A.SUM], np.ones((2, 2)))
        no_loops = build_csr([(0, 1), (1, 0)], 2)
        with pytest.raises(ValueError):
            fused_spmm(no_loops, x, [A.SUM], np.ones((2, 1)))

    def test_permutation_equivariance(self, rng):
        n = 24
        g = random_loop_graph(rng, n, 0.25)
        x = rng.standard_normal((n, 4))
        w = rng.standard_normal((n, 3))
        aggs = (A.SUM, A.MAX, A.STD)
        perm = rng.permutation(n)
        gp = add_self_loops(permute_graph(g, perm))
        out = fused_spmm(g, x, aggs, w)
        xp = np.empty_like(x)
        wp = np.empty_like(w)
        xp[perm] = x
        wp[perm] = w
        out_p = fused_spmm(gp, xp, aggs, wp)
        npt.assert_allclose(out_p[perm], out, atol=1e-10)

    def test_deterministic_across_worker_counts(self, rng):
        g = random_loop_graph(rng, 300, 0.05, coeff=True)
        x = rng.standard_normal((300, 8)).astype(np.float32)
        w = rng.standard_normal((300, 3)).astype(np.float32)
        aggs = (A.SYM_NORM, A.MAX, A.VAR)
        results = {}
        for workers in (1, 2):
            set_worker_count(workers)
            results[workers] = [
                fused_spmm(g, x, aggs, w, s) for s in STRATEGIES
            ] + [spmm(g, x)]
        set_worker_count(1)
        for a, b in zip(results[1], results[2]):
            npt.assert_array_equal(a, b)


class TestTransientAccounting:
    def test_weighted_store_independent_of_edges(self):
        aggs = (A.SUM, A.MAX, A.MIN)
        sparse = add_self_loops(erdos_renyi(1000, 0.005, seed=1))
        dense = add_self_loops(erdos_renyi(1000, 0.01, seed=1))
        assert dense.num_edges > sparse.num_edges
        t1 = transient_elements(FusionStrategy.FUSED_WEIGHTED_STORE, sparse.num_nodes, 16, aggs)
        t2 = transient_elements(FusionStrategy.FUSED_WEIGHTED_STORE, dense.num_nodes, 16, aggs)
        assert t1 == t2 == accumulator_slots(aggs) * 16

    def test_sequential_scales_with_nodes(self):
        aggs = (A.SUM, A.MAX, A.MIN)
        t = transient_elements(FusionStrategy.SEQUENTIAL, 100, 8, aggs)
        assert t >= len(aggs) * 100 * 8
        t2 = transient_elements(FusionStrategy.SEQUENTIAL, 200, 8, aggs)
        assert t2 - t == len(aggs) * 100 * 8

    def test_ordered_between(self):
        aggs = (A.SUM, A.VAR)
        fws = transient_elements(FusionStrategy.FUSED_WEIGHTED_STORE, 50, 4, aggs)
        feo = transient_elements(FusionStrategy.FUSED_ORDERED, 50, 4, aggs)
        seq = transient_elements(FusionStrategy.SEQUENTIAL, 50, 4, aggs)
        assert fws < feo and fws < seq
        assert transient_elements("plain_spmm", 50, 4, aggs) == 0

    def test_slot_sharing(self):
        assert accumulator_slots((A.SUM, A.MEAN)) == 1
        assert accumulator_slots((A.VAR, A.STD)) == 2
        assert accumulator_slots(ALL_AGGS) == 5


class TestAggregateNeighbors:
    def test_matches_per_aggregator_oracle(self, rng):
        g = random_loop_graph(rng, 40, 0.2, coeff=True)
        x = rng.standard_normal((40, 5))
        outs = aggregate_neighbors(g, x, ALL_AGGS)
        for k, agg in enumerate(ALL_AGGS):
            npt.assert_allclose(outs[k], oracle_aggregate(g, x, agg), atol=1e-8,
                                err_msg=str(agg))

    def test_std_of_zeros_is_sqrt_eps(self):
        g = two_node_loop_graph(coeff=False)
        outs = aggregate_neighbors(g, np.zeros((2, 3)), (A.STD,))
        npt.assert_allclose(outs[0], np.sqrt(STD_EPS), rtol=1e-7)
