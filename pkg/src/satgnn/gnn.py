"""L-layer GCN with hand-written gradients, full-graph and partitioned.

A layer computes ``Z = (P H) W`` and ``H' = act(Z)``; the last layer emits
logits. In the partitioned form the aggregation is split into
``P_in H_in + P_out H_out`` where ``H_out`` holds out-of-subgraph embeddings
supplied by the caller and treated as constants during backward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import CSR
from .tensor import ShapeError


class ContractError(ValueError):
    pass


ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, h: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z, h: 1.0 - h * h),
}


@dataclass
class GcnParams:
    W: list
    activation: str = "relu"

    @property
    def L(self) -> int:
        return len(self.W)

    @property
    def dims(self) -> list:
        return [self.W[0].shape[0]] + [w.shape[1] for w in self.W]

    def copy(self) -> "GcnParams":
        return GcnParams([w.copy() for w in self.W], self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.W])

    def num_elements(self) -> int:
        return sum(w.size for w in self.W)


def init_params(dims, seed=0, activation="relu") -> GcnParams:
    """Glorot-uniform weights, one matrix per layer."""
    if activation not in ACTIVATIONS:
        raise ContractError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    W = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        W.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
    return GcnParams(W, activation)


@dataclass
class ForwardTrace:
    H: list                 # H[0] = inputs ... H[L] = logits (in-subgraph rows)
    Z: list                 # Z[l] for l = 1..L (Z[0] is None)
    H_out: list             # out-of-subgraph inputs per layer l = 0..L-1 (empty in full mode)
    agg: list               # P_in H[l] + P_out H_out[l], l = 0..L-1

    @property
    def logits(self) -> np.ndarray:
        return self.H[-1]


@dataclass
class Gradients:
    G_W: list
    G_H: list = field(default_factory=list)   # G_H[l] = dLoss/dH[l], l = 1..L
    D: list = field(default_factory=list)     # D[l] = G_H[l] * act'(Z[l])


def _check_chain(params: GcnParams, d0: int):
    if params.W[0].shape[0] != d0:
        raise ContractError(f"input width {d0} != W[0] rows {params.W[0].shape[0]}")
    for a, b in zip(params.W[:-1], params.W[1:]):
        if a.shape[1] != b.shape[0]:
            raise ContractError("weight shapes do not chain")


def forward_full(P: CSR, X: np.ndarray, params: GcnParams) -> ForwardTrace:
    if P.shape[1] != X.shape[0]:
        raise ContractError(f"P is {P.shape} but X has {X.shape[0]} rows")
    _check_chain(params, X.shape[1])
    act = ACTIVATIONS[params.activation][0]
    H, Z, agg = [np.asarray(X, dtype=np.float64)], [None], []
    for l, W in enumerate(params.W):
        a = P @ H[l]
        z = a @ W
        agg.append(a)
        Z.append(z)
        H.append(z if l == params.L - 1 else act(z))
    return ForwardTrace(H, Z, [], agg)


def forward_partition(P_in: CSR, P_out: CSR, X_in: np.ndarray, H_out_layers, params: GcnParams) -> ForwardTrace:
    """Forward pass on one partition with externally supplied halo embeddings.

    ``H_out_layers[l]`` is the ``|halo| x d_l`` input for layer ``l``; entry 0
    is the halo nodes' raw features.
    """
    if len(H_out_layers) < params.L:
        raise ContractError(f"need {params.L} halo layers, got {len(H_out_layers)}")
    _check_chain(params, X_in.shape[1])
    act = ACTIVATIONS[params.activation][0]
    H, Z, agg, outs = [np.asarray(X_in, dtype=np.float64)], [None], [], []
    for l, W in enumerate(params.W):
        h_out = np.asarray(H_out_layers[l], dtype=np.float64)
        if h_out.shape != (P_out.shape[1], W.shape[0]):
            raise ContractError(f"layer {l}: halo input {h_out.shape}, expected {(P_out.shape[1], W.shape[0])}")
        a = P_in @ H[l]
        if P_out.nnz:
            a = a + P_out @ h_out
        z = a @ W
        outs.append(h_out)
        agg.append(a)
        Z.append(z)
        H.append(z if l == params.L - 1 else act(z))
    return ForwardTrace(H, Z, outs, agg)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def local_loss(logits, labels, mask) -> float:
    """Mean softmax cross-entropy over the masked rows."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("loss over an empty mask is undefined")
    logp = _log_softmax(np.asarray(logits)[mask])
    return float(-logp[np.arange(count), np.asarray(labels)[mask]].sum() / count)


def global_loss(local_losses, w) -> float:
    w = np.asarray(w, dtype=np.float64)
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ContractError(f"weights must be non-negative and sum to 1 (sum={w.sum()!r})")
    if len(w) != len(local_losses):
        raise ShapeError("one weight per local loss")
    return float(np.dot(w, np.asarray(local_losses, dtype=np.float64)))


def backward_partition(trace: ForwardTrace, labels, mask, P_in: CSR, P_out: CSR | None,
                       params: GcnParams) -> Gradients:
    """Gradients of :func:`local_loss` w.r.t. every weight matrix.

    Halo inputs only appear through the cached aggregation, so no adjoint
    flows into them. ``P_out`` is accepted for symmetry with the forward call.
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("gradient over an empty mask is undefined")
    deriv = ACTIVATIONS[params.activation][1]
    logits = trace.logits
    probs = np.exp(_log_softmax(logits))
    g = np.zeros_like(logits)
    rows = np.flatnonzero(mask)
    g[rows] = probs[rows]
    g[rows, np.asarray(labels)[rows]] -= 1.0
    g /= count
    L = params.L
    G_W = [None] * L
    G_H = [None] * (L + 1)
    D = [None] * (L + 1)
    G_H[L] = g
    for l in range(L, 0, -1):
        D[l] = G_H[l] if l == L else G_H[l] * deriv(trace.Z[l], trace.H[l])
        G_W[l - 1] = trace.agg[l - 1].T @ D[l]
        if l > 1:
            G_H[l - 1] = P_in.T @ (D[l] @ params.W[l - 1].T)
    return Gradients(G_W, G_H, D)


def backward_full(trace: ForwardTrace, labels, mask, P: CSR, params: GcnParams) -> Gradients:
    return backward_partition(trace, labels, mask, P, None, params)


def accuracy(logits, labels, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan")
    return float((np.argmax(logits[mask], axis=1) == np.asarray(labels)[mask]).mean())
