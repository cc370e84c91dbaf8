"""Stochastic block model graphs for node classification benchmarks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import ConfigError, Graph, build_graph


@dataclass(frozen=True)
class SbmSpec:
    n: int = 2000
    k: int = 8
    p_in: float = 0.02
    p_out: float = 0.002
    dim: int = 16
    noise: float = 2.0
    seed: int = 0
    split: str = "train=0.6,val=0.2,test=0.2,seed=0"

    def __post_init__(self):
        if not 0 <= self.p_out <= self.p_in <= 1:
            raise ConfigError("need 0 <= p_out <= p_in <= 1")
        if self.k < 1 or self.n < self.k:
            raise ConfigError("need 1 <= k <= n")


def block_of(n: int, k: int) -> np.ndarray:
    """Contiguous, near-equal blocks."""
    return (np.arange(n) * k) // n


def sbm_edges(n: int, blocks: np.ndarray, p_in: float, p_out: float, rng) -> np.ndarray:
    iu, ju = np.triu_indices(n, k=1)
    same = blocks[iu] == blocks[ju]
    prob = np.where(same, p_in, p_out)
    keep = rng.random(len(iu)) < prob
    return np.stack([iu[keep], ju[keep]], axis=1)


def generate(spec: SbmSpec) -> Graph:
    """Labels are block ids; features are a per-block centroid plus Gaussian noise."""
    rng = np.random.default_rng(spec.seed)
    blocks = block_of(spec.n, spec.k)
    edges = sbm_edges(spec.n, blocks, spec.p_in, spec.p_out, rng)
    centroids = rng.standard_normal((spec.k, spec.dim))
    X = centroids[blocks] + spec.noise * rng.standard_normal((spec.n, spec.dim))
    return build_graph(edges, X, blocks, spec.split)
