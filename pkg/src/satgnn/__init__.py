"""Partition-parallel GCN training with predicted out-of-subgraph embeddings."""
from .graph import Graph, load_graph, normalize, partition
from .kernels import BACKEND
from .trainer import TrainConfig, Trainer, run

__all__ = ["BACKEND", "Graph", "TrainConfig", "Trainer", "load_graph", "normalize", "partition", "run"]
__version__ = "0.1.0"
