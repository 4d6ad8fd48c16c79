"""CPU compute engine for the efficient graph convolution layer family.

The core is an aggregator-fused CSR SpMM kernel that keeps transient memory
proportional to the node count, with training-grade gradients, isotropic
baselines and a benchmark harness on top.
"""

from .graph import (
    CsrGraph,
    NodeTypedGraph,
    add_self_loops,
    build_csr,
    erdos_renyi,
    generate_graph,
    grid,
    in_degrees,
    star,
    sym_norm_coeffs,
    to_edge_list,
    transpose,
)
from .kernels import (
    STD_EPS,
    AggregatorKind,
    FusionStrategy,
    aggregate_neighbors,
    aggregate_row,
    fused_spmm,
    get_worker_count,
    set_worker_count,
    spmm,
    transient_elements,
)
from .layers import (
    DenseLayer,
    EgcParams,
    MemoryCounters,
    ReggcParams,
    WeightActivation,
    combination_weights,
    egc_m_forward,
    egc_s_forward,
    gcn_forward,
    gin_forward,
    init_egc_params,
    init_reggc_params,
    memory_probe,
    param_count,
    r_egc_forward,
)
from .grads import (
    GradBundle,
    egc_m_backward,
    egc_s_backward,
    finite_diff_grad,
    gcn_backward,
    gin_backward,
    gradient_check,
    r_egc_backward,
)
from .training import (
    AdamState,
    TrainConfig,
    ToyTask,
    adam_step,
    init_adam,
    make_toy_task,
    train_loop,
)

__version__ = "0.1.0"
