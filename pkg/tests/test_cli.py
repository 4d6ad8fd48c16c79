import json

import numpy as np
import numpy.testing as npt
import pytest

from egckit.cli import main
from egckit.formats import (
    read_checkpoint,
    read_features,
    read_graph_binary,
    write_checkpoint,
    write_features,
    write_graph_binary,
)
from egckit.graph import add_self_loops, build_csr, erdos_renyi, sym_norm_coeffs, to_edge_list
from egckit.kernels import AggregatorKind
from egckit.layers import DenseLayer, gcn_forward
from egckit.training import TrainConfig, build_network, make_toy_task

from oracles import edge_set
from test_layers import make_params

A = AggregatorKind


def run(args, capsys=None):
    code = main(args)
    return code


class TestConvert:
    def test_round_trip_and_report(self, tmp_path, capsys):
        src = tmp_path / "g.txt"
        src.write_text("n 2\n0 1\n1 0\n")
        out = tmp_path / "g.egcg"
        assert main(["convert", "--graph", str(src), "--out", str(out)]) == 0
        assert "n=2 e=2" in capsys.readouterr().out
        g = read_graph_binary(str(out))
        assert edge_set(g) == {(0, 1), (1, 0)}

    def test_malformed_line_names_line_number(self, tmp_path, capsys):
        src = tmp_path / "bad.txt"
        src.write_text("n 3\n0 1\noops here\n")
        out = tmp_path / "bad.egcg"
        assert main(["convert", "--graph", str(src), "--out", str(out)]) == 1
        assert ":3:" in capsys.readouterr().err

    def test_convert_load_reemit_preserves_edge_set(self, tmp_path):
        g = erdos_renyi(15, 0.2, seed=2)
        src = tmp_path / "g.txt"
        lines = ["n 15"] + [f"{s} {d}" for s, d in to_edge_list(g)]
        src.write_text("\n".join(lines) + "\n")
        out = tmp_path / "g.egcg"
        assert main(["convert", "--graph", str(src), "--out", str(out)]) == 0
        assert edge_set(read_graph_binary(str(out))) == edge_set(g)


class TestInfer:
    def _setup(self, tmp_path, rng, n=12):
        base = erdos_renyi(n, 0.3, seed=4)
        gpath = tmp_path / "g.egcg"
        write_graph_binary(str(gpath), base)
        x = rng.standard_normal((n, 3))
        xpath = tmp_path / "x.egcf"
        write_features(str(xpath), x)
        return base, gpath, x, xpath

    def test_single_layer_matches_gcn_reference(self, tmp_path, rng):
        base, gpath, x, xpath = self._setup(tmp_path, rng)
        theta = rng.standard_normal((4, 3))
        p = make_params(in_dim=3, out_dim=4, theta=theta[None],
                        phi=np.zeros((1, 3)), bias=np.ones(1))
        ckpt = tmp_path / "m.egcp"
        write_checkpoint(str(ckpt), [p])
        out = tmp_path / "y.egcf"
        assert main(["infer", "--graph", str(gpath), "--checkpoint", str(ckpt),
                     "--features", str(xpath), "--out", str(out)]) == 0
        got = read_features(str(out))
        g = sym_norm_coeffs(add_self_loops(base))
        ref = gcn_forward(g, read_features(str(xpath)),
                          np.asarray(theta, np.float32).astype(np.float64))
        npt.assert_allclose(got, ref, atol=1e-5)

    def test_zero_features_linear_stack_zero_output(self, tmp_path, rng):
        base, gpath, _, _ = self._setup(tmp_path, rng)
        xpath = tmp_path / "z.egcf"
        write_features(str(xpath), np.zeros((12, 3)))
        p = make_params(in_dim=3, out_dim=4, theta=np.ones((1, 4, 3)),
                        phi=np.zeros((1, 3)), bias=np.ones(1), aggs=(A.SUM,))
        ckpt = tmp_path / "m.egcp"
        write_checkpoint(str(ckpt), [p])
        out = tmp_path / "y.egcf"
        assert main(["infer", "--graph", str(gpath), "--checkpoint", str(ckpt),
                     "--features", str(xpath), "--out", str(out)]) == 0
        npt.assert_array_equal(read_features(str(out)), 0.0)

    def test_same_inputs_byte_identical_outputs(self, tmp_path, rng):
        base, gpath, x, xpath = self._setup(tmp_path, rng)
        p = make_params(in_dim=3, out_dim=4, theta=rng.standard_normal((1, 4, 3)),
                        phi=np.zeros((1, 3)), bias=np.ones(1))
        ckpt = tmp_path / "m.egcp"
        write_checkpoint(str(ckpt), [p])
        out1, out2 = tmp_path / "y1.egcf", tmp_path / "y2.egcf"
        for out in (out1, out2):
            assert main(["infer", "--graph", str(gpath), "--checkpoint", str(ckpt),
                         "--features", str(xpath), "--out", str(out)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_dimension_mismatch_names_artifact(self, tmp_path, rng, capsys):
        base, gpath, _, _ = self._setup(tmp_path, rng)
        xpath = tmp_path / "wide.egcf"
        write_features(str(xpath), np.zeros((12, 7)))
        p = make_params(in_dim=3, out_dim=4, theta=np.ones((1, 4, 3)),
                        phi=np.zeros((1, 3)), bias=np.ones(1))
        ckpt = tmp_path / "m.egcp"
        write_checkpoint(str(ckpt), [p])
        out = tmp_path / "y.egcf"
        assert main(["infer", "--graph", str(gpath), "--checkpoint", str(ckpt),
                     "--features", str(xpath), "--out", str(out)]) == 1
        err = capsys.readouterr().err
        assert "wide.egcf" in err and "m.egcp" in err


class TestTrain:
    def test_zero_steps_checkpoint_equals_initialization(self, tmp_path):
        metrics = tmp_path / "m.csv"
        ckpt = tmp_path / "net.egcp"
        assert main(["train", "--task", "community_classification", "--nodes", "40",
                     "--seed", "5", "--steps", "0", "--hidden", "8", "--heads", "2",
                     "--bases", "2", "--out", str(metrics), "--checkpoint", str(ckpt)]) == 0
        task = make_toy_task("community_classification", 40, seed=5)
        rng = np.random.default_rng(5)
        expected = build_network(task.features.shape[1], 2,
                                 TrainConfig(hidden=8, heads=2, bases=2), rng)
        stack = read_checkpoint(str(ckpt))
        npt.assert_array_equal(stack[0].theta,
                               expected.layers[0].theta.astype(np.float32))
        npt.assert_array_equal(stack[-1].weight,
                               expected.readout.weight.astype(np.float32))
        assert metrics.read_text() == "step,loss,accuracy\n"

    def test_fixed_seed_reproduces_metrics(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            metrics = tmp_path / f"{name}.csv"
            ckpt = tmp_path / f"{name}.egcp"
            assert main(["train", "--nodes", "60", "--seed", "3", "--steps", "40",
                         "--hidden", "8", "--heads", "4", "--bases", "2",
                         "--out", str(metrics), "--checkpoint", str(ckpt)]) == 0
            outs.append(metrics.read_text())
        assert outs[0] == outs[1]

    def test_loss_halves_on_community_task(self, tmp_path, capsys):
        metrics = tmp_path / "m.csv"
        ckpt = tmp_path / "net.egcp"
        assert main(["train", "--nodes", "100", "--seed", "0", "--steps", "200",
                     "--out", str(metrics), "--checkpoint", str(ckpt)]) == 0
        rows = metrics.read_text().strip().splitlines()[1:]
        first = float(rows[0].split(",")[1])
        last = float(rows[-1].split(",")[1])
        assert last <= 0.5 * first

    def test_multi_aggregator_flag(self, tmp_path):
        metrics = tmp_path / "m.csv"
        ckpt = tmp_path / "net.egcp"
        assert main(["train", "--nodes", "50", "--steps", "10", "--hidden", "8",
                     "--heads", "4", "--bases", "2", "--aggs", "sum,max,min",
                     "--out", str(metrics), "--checkpoint", str(ckpt)]) == 0
        stack = read_checkpoint(str(ckpt))
        assert stack[0].aggs == (A.SUM, A.MAX, A.MIN)


class TestGradcheckCommand:
    def test_default_passes(self, capsys):
        assert main(["gradcheck", "--layer", "egc_s"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("PASS")
        assert "max rel err" in out

    def test_aggregator_sweep_prints_seven_lines(self, capsys):
        assert main(["gradcheck", "--layer", "egc_m"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l]
        assert len(lines) == 7
        assert all(l.startswith("PASS egc_m[") for l in lines)

    def test_injected_fault_fails_with_exit_2(self, capsys):
        assert main(["gradcheck", "--layer", "gcn", "--inject-fault"]) == 2
        assert "FAIL" in capsys.readouterr().out


class TestBenchCommand:
    def test_tiny_sweep(self, tmp_path, capsys):
        cfg = {
            "graphs": [{"kind": "star", "n": 300}],
            "strategies": ["plain_spmm", "sequential", "fused_weighted_store"],
            "feature_dims": [4],
            "aggs": ["sum", "max"],
            "repeats": 5,
            "warmup": 2,
            "threads": 1,
            "seed": 1,
        }
        cpath = tmp_path / "c.json"
        cpath.write_text(json.dumps(cfg))
        out = tmp_path / "r.csv"
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert main(["bench", "--config", str(cpath), "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "fused/plain=" in stdout and "naive/plain=" in stdout
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 4

    def test_empty_strategies_is_config_error(self, tmp_path, capsys):
        cpath = tmp_path / "c.json"
        cpath.write_text(json.dumps({"graphs": [{"kind": "star", "n": 10}],
                                     "strategies": [], "feature_dims": [2]}))
        assert main(["bench", "--config", str(cpath), "--out", str(tmp_path / "r.csv")]) == 1
        assert "strategies" in capsys.readouterr().err


class TestArgumentErrors:
    def test_unknown_command_exits_1(self, capsys):
        assert main(["launch"]) == 1

    def test_missing_required_flag_exits_1(self, capsys):
        assert main(["convert", "--graph", "x.txt"]) == 1
