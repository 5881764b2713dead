"""Cell-based search space: supernet, discretization, and evaluation network."""
from .genotype import Genotype, cell_edges, discretize, edge_softmax
from .network import (
    CellSpec,
    EvalNet,
    NetworkSpec,
    SuperNet,
    build_eval_network,
    build_supernet,
    cell_forward,
    mixed_op_forward,
)

__all__ = [
    "CellSpec",
    "EvalNet",
    "Genotype",
    "NetworkSpec",
    "SuperNet",
    "build_eval_network",
    "build_supernet",
    "cell_edges",
    "cell_forward",
    "discretize",
    "edge_softmax",
    "mixed_op_forward",
]
