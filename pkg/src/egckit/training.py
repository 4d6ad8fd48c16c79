"""End-to-end training at desk scale: optimizer, toy tasks, layer stacks.

Parameters live in flat name -> array dicts so the optimizer and the
finite-difference oracle share one representation. Networks are two or
three graph-convolution layers with a rectifier between them and a dense
readout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import CsrGraph, add_self_loops, erdos_renyi, sym_norm_coeffs
from .grads import egc_m_backward, egc_s_backward
from .kernels import AggregatorKind, aggregate_neighbors
from .layers import (
    DenseLayer,
    EgcParams,
    WeightActivation,
    egc_m_forward,
    egc_s_forward,
    init_egc_params,
)

__all__ = [
    "AdamState",
    "init_adam",
    "adam_step",
    "ToyTask",
    "make_toy_task",
    "TrainConfig",
    "EgcNetwork",
    "build_network",
    "network_forward",
    "network_backward",
    "softmax_cross_entropy",
    "mse_loss",
    "StepMetrics",
    "TrainResult",
    "train_loop",
]


# ----------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(a) for k, a in params.items()},
        v={k: np.zeros_like(a) for k, a in params.items()},
    )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Standard update with bias correction; params are updated in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ----------------------------------------------------------------------
# Toy tasks
# ----------------------------------------------------------------------


@dataclass
class ToyTask:
    kind: str
    graph: CsrGraph  # without self-loops; the model preprocesses as needed
    features: np.ndarray
    targets: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    num_classes: int | None = None


def _split_masks(n: int, rng: np.random.Generator, train_frac: float = 0.8):
    perm = rng.permutation(n)
    cut = int(round(train_frac * n))
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    train[perm[:cut]] = True
    val[perm[cut:]] = True
    return train, val


def make_toy_task(kind: str, n: int, seed: int = 0, **overrides) -> ToyTask:
    """Deterministic planted tasks that isotropic aggregation can solve.

    ``homophily_regression``: the target of each node is the self-inclusive
    neighborhood mean of a hidden per-node signal that is exposed (noisily)
    in the features. ``community_classification``: two planted communities
    with dense intra-community edges and class-shifted noisy features, so
    neighborhood averaging removes most of the node-level noise.
    """
    if n < 10:
        raise ValueError(f"toy tasks need n >= 10, got {n}")
    rng = np.random.default_rng(seed)
    if kind == "homophily_regression":
        avg_degree = float(overrides.pop("avg_degree", 8.0))
        feat_dim = int(overrides.pop("feat_dim", 4))
        hidden = overrides.pop("hidden_signal", None)
        if overrides:
            raise ValueError(f"unknown options {sorted(overrides)}")
        g = erdos_renyi(n, avg_degree / (n - 1), seed=seed)
        h = rng.standard_normal(n) if hidden is None else np.asarray(hidden, dtype=np.float64)
        looped = add_self_loops(g)
        targets = aggregate_neighbors(looped, h[:, None], (AggregatorKind.MEAN,))[0][:, 0]
        x = rng.standard_normal((n, feat_dim)) * 0.5
        x[:, 0] = h
        train, val = _split_masks(n, rng)
        return ToyTask(kind, g, x, targets, train, val)
    if kind == "community_classification":
        intra_p = float(overrides.pop("intra_p", 0.1))
        inter_p = float(overrides.pop("inter_p", 0.01))
        feat_dim = int(overrides.pop("feat_dim", 8))
        mean_scale = float(overrides.pop("mean_scale", 0.3))
        if overrides:
            raise ValueError(f"unknown options {sorted(overrides)}")
        labels = np.zeros(n, dtype=np.int64)
        labels[n // 2 :] = 1
        prob = np.where(labels[:, None] == labels[None, :], intra_p, inter_p)
        upper = np.triu(rng.random((n, n)) < prob, k=1)
        src, dst = np.nonzero(upper)
        edges = np.concatenate([np.stack([src, dst], axis=1),
                                np.stack([dst, src], axis=1)])
        from .graph import build_csr

        g = build_csr(edges, n)
        mu = np.where(labels[:, None] == 0, mean_scale, -mean_scale)
        x = mu + rng.standard_normal((n, feat_dim))
        train, val = _split_masks(n, rng)
        return ToyTask(kind, g, x, labels, train, val, num_classes=2)
    raise ValueError(f"unknown task kind {kind!r}")


# ----------------------------------------------------------------------
# Layer stacks
# ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    hidden: int = 16
    heads: int = 8
    bases: int = 4
    aggs: tuple[AggregatorKind, ...] = (AggregatorKind.SYM_NORM,)
    num_layers: int = 2
    w_activation: WeightActivation = WeightActivation.IDENTITY

    def __post_init__(self):
        self.aggs = tuple(AggregatorKind(a) for a in self.aggs)
        self.w_activation = WeightActivation.parse(self.w_activation)
        if not 2 <= self.num_layers <= 3:
            raise ValueError("stacks are 2 or 3 layers deep")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")


@dataclass
class EgcNetwork:
    layers: list[EgcParams]
    readout: DenseLayer

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for k, p in enumerate(self.layers):
            out[f"layer{k}.theta"] = p.theta
            out[f"layer{k}.phi"] = p.phi
            out[f"layer{k}.bias"] = p.bias
        out["readout.weight"] = self.readout.weight
        out["readout.bias"] = self.readout.bias
        return out


def build_network(in_dim: int, out_dim: int, cfg: TrainConfig,
                  rng: np.random.Generator) -> EgcNetwork:
    layers = []
    d = in_dim
    for _ in range(cfg.num_layers):
        layers.append(init_egc_params(d, cfg.hidden, cfg.heads, cfg.bases,
                                      cfg.aggs, rng, w_activation=cfg.w_activation))
        d = cfg.hidden
    bound = 1.0 / math.sqrt(d)
    readout = DenseLayer(
        weight=rng.uniform(-bound, bound, size=(out_dim, d)),
        bias=np.zeros(out_dim),
    )
    return EgcNetwork(layers, readout)


def _layer_forward(g: CsrGraph, x: np.ndarray, p: EgcParams) -> np.ndarray:
    if p.aggs == (AggregatorKind.SYM_NORM,):
        return egc_s_forward(g, x, p)
    return egc_m_forward(g, x, p)


def _layer_backward(g, x, p, upstream):
    if p.aggs == (AggregatorKind.SYM_NORM,):
        return egc_s_backward(g, x, p, upstream)
    return egc_m_backward(g, x, p, upstream)


def prepare_graph(g: CsrGraph, aggs) -> CsrGraph:
    """Self-loops always; symmetric-normalization coefficients when needed."""
    g = add_self_loops(g)
    if AggregatorKind.SYM_NORM in tuple(aggs):
        g = sym_norm_coeffs(g)
    return g


def network_forward(net: EgcNetwork, g: CsrGraph, x: np.ndarray):
    """Returns (prediction, cache) with the per-layer inputs and pre-activations."""
    inputs = []
    pre_relu = []
    h = x
    for p in net.layers:
        inputs.append(h)
        y = _layer_forward(g, h, p)
        pre_relu.append(y)
        h = np.maximum(y, 0.0)
    pred = net.readout(h)
    return pred, (inputs, pre_relu, h)


def network_backward(net: EgcNetwork, g: CsrGraph, cache, d_pred: np.ndarray,
                     ) -> dict[str, np.ndarray]:
    inputs, pre_relu, h_last = cache
    grads = {
        "readout.weight": d_pred.T @ h_last,
        "readout.bias": d_pred.sum(axis=0),
    }
    d_h = d_pred @ net.readout.weight
    for k in reversed(range(len(net.layers))):
        d_y = d_h * (pre_relu[k] > 0.0)
        bundle = _layer_backward(g, inputs[k], net.layers[k], d_y)
        grads[f"layer{k}.theta"] = bundle.d_theta
        grads[f"layer{k}.phi"] = bundle.d_phi
        grads[f"layer{k}.bias"] = bundle.d_bias
        d_h = bundle.d_x
    return grads


# ----------------------------------------------------------------------
# Losses and the loop
# ----------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    """Mean cross-entropy over masked rows; returns (loss, d_logits, accuracy)."""
    m = int(mask.sum())
    if m == 0:
        raise ValueError("empty mask")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.flatnonzero(mask)
    loss = -logp[rows, labels[rows]].mean()
    d = np.zeros_like(logits)
    d[rows] = np.exp(logp[rows])
    d[rows, labels[rows]] -= 1.0
    d /= m
    acc = float((logits[rows].argmax(axis=1) == labels[rows]).mean())
    return float(loss), d, acc


def mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean squared error over masked rows; returns (loss, d_pred)."""
    m = int(mask.sum())
    if m == 0:
        raise ValueError("empty mask")
    rows = np.flatnonzero(mask)
    diff = pred[rows, 0] - target[rows]
    d = np.zeros_like(pred)
    d[rows, 0] = 2.0 * diff / m
    return float((diff * diff).mean()), d


@dataclass
class StepMetrics:
    step: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    history: list[StepMetrics]
    diverged: bool
    network: EgcNetwork

    @property
    def final(self) -> StepMetrics:
        return self.history[-1]


def train_loop(task: ToyTask, cfg: TrainConfig, steps: int, lr: float,
               seed: int = 0) -> TrainResult:
    """Full-batch Adam training; deterministic given the seed.

    A non-finite loss stops the loop and is reported via ``diverged``
    instead of raising.
    """
    rng = np.random.default_rng(seed)
    classify = task.num_classes is not None
    out_dim = task.num_classes if classify else 1
    net = build_network(task.features.shape[1], out_dim, cfg, rng)
    g = prepare_graph(task.graph, cfg.aggs)
    params = net.params()
    state = init_adam(params)

    history: list[StepMetrics] = []
    diverged = False
    for step in range(steps):
        pred, cache = network_forward(net, g, task.features)
        if classify:
            loss, d_pred, acc = softmax_cross_entropy(pred, task.targets, task.train_mask)
        else:
            loss, d_pred = mse_loss(pred, task.targets, task.train_mask)
            acc = float("nan")
        if not np.isfinite(loss):
            diverged = True
            break
        history.append(StepMetrics(step, loss, acc))
        grads = network_backward(net, g, cache, d_pred)
        if not all(np.isfinite(a).all() for a in grads.values()):
            diverged = True
            break
        adam_step(params, grads, state, lr=lr)
    return TrainResult(history, diverged, net)
