"""Graph pooling with learned grouping matrices (GMPool and NGMPool).

A DMPNN encoder scores every node pair, the resulting symmetric grouping
matrix is factored into a pooling operator, and message passing continues on
the coarsened graph.  The number of clusters is never an input: it follows
from the spectrum of the grouping matrix.
"""

from .autodiff import Tensor, backward, constant, tensor
from .graph_data import Dataset, Graph, SyntheticSpec, generate_synthetic, kfold_split, load_jsonl, save_jsonl
from .linalg import EigBackwardConfig, SymEig, sym_eig, sym_eig_backward, sqrt_clamped
from .model import GMPoolModel, ModelConfig
from .pooling import (
    effective_clusters,
    gmpool_coarsen,
    gmpool_decompose,
    grouping_matrix,
    iterative_decompose,
    ngmpool_coarsen,
    pairwise_input,
)
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "backward",
    "Graph",
    "Dataset",
    "SyntheticSpec",
    "generate_synthetic",
    "kfold_split",
    "load_jsonl",
    "save_jsonl",
    "SymEig",
    "EigBackwardConfig",
    "sym_eig",
    "sym_eig_backward",
    "sqrt_clamped",
    "pairwise_input",
    "grouping_matrix",
    "gmpool_decompose",
    "gmpool_coarsen",
    "ngmpool_coarsen",
    "iterative_decompose",
    "effective_clusters",
    "ModelConfig",
    "GMPoolModel",
    "TrainConfig",
    "train",
]
