"""Online embedding predictor for out-of-subgraph (halo) embeddings.

For each partition the halo subgraph is annotated with the last ``tau``
committed epochs of per-layer embeddings. A GRU runs over the per-node
sequence of epoch-to-epoch changes, one graph-convolution step mixes the
final hidden states over the halo subgraph, and the result is added as a
correction to the newest snapshot:

    h      = GRU(x_1 .. x_k),  x_j = S_j - S_{j-1}  (x_1 = 0)
    Ĥ      = S_k + tanh(h R + (Â h) A)

Only the halo rows of ``Ĥ`` are emitted. Layer 0 (raw features) is never
predicted, so parameters exist for GNN layers 1 .. L-1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import HaloSubgraph
from .store import EmbeddingStore, staleness
from .tensor import ShapeError

GATE_NAMES = ("Wxz", "Whz", "bz", "Wxr", "Whr", "br", "Wxn", "Whn", "bn")
PARAM_NAMES = GATE_NAMES + ("R", "A")


class EmptyWindowError(ValueError):
    """No committed history is available yet."""


@dataclass
class TemporalGraph:
    sub: HaloSubgraph
    epochs: list                       # increasing, at most tau of them
    slices: dict = field(default_factory=dict)   # epoch -> {layer: |V̄| x d_l}

    @property
    def m(self) -> int:
        return self.sub.m

    @property
    def empty(self) -> bool:
        return not self.epochs

    def layers(self) -> list:
        return sorted(self.slices[self.epochs[0]]) if self.epochs else []

    def sequence(self, layer: int) -> list:
        return [self.slices[e][layer] for e in self.epochs]

    def num_elements(self) -> int:
        return sum(s.size for per_epoch in self.slices.values() for s in per_epoch.values())


def build_temporal_graph(store: EmbeddingStore, sub: HaloSubgraph, t: int, tau: int,
                         layers, channel: str | None = None) -> TemporalGraph:
    """Snapshots of epochs ``max(1, t - tau) .. t - 1`` for every node of ``sub``.

    An empty window (``t == 1`` or nothing committed) is signalled by
    ``tg.empty``; callers fall back to plain historical pulls.
    """
    last = min(t - 1, store.committed_through)
    epochs = list(range(max(1, t - tau), last + 1))
    slices = {e: {l: store.get(e, l, sub.nodes, channel=channel) for l in layers} for e in epochs}
    return TemporalGraph(sub, epochs, slices)


class PredictorParams:
    """Per-layer GRU + graph-convolution weights (the predictor's ω)."""

    def __init__(self, layers: dict):
        self.layers = layers  # layer -> {name: array}

    @classmethod
    def init(cls, dims, seed=0, identity=False):
        """``dims`` are the GCN widths; layers 1..L-1 get a predictor.

        Weights are Glorot-uniform and GRU biases zero. With ``identity`` the
        candidate input weight and root weight start at the identity so the
        untrained predictor extrapolates along the most recent change.
        """
        rng = np.random.default_rng(seed)
        layers = {}
        for l in range(1, len(dims) - 1):
            d = dims[l]
            bound = math.sqrt(6.0 / (2 * d))
            p = {}
            for name in PARAM_NAMES:
                if name.startswith("b"):
                    p[name] = np.zeros((1, d))
                else:
                    p[name] = rng.uniform(-bound, bound, size=(d, d))
            if identity:
                p["Wxn"] = np.eye(d)
                p["R"] = np.eye(d)
                p["A"] = np.zeros((d, d))
            layers[l] = p
        return cls(layers)

    def copy(self) -> "PredictorParams":
        return PredictorParams({l: {k: v.copy() for k, v in p.items()} for l, p in self.layers.items()})

    def items(self):
        for l in sorted(self.layers):
            for name in PARAM_NAMES:
                yield (l, name), self.layers[l][name]

    def num_elements(self) -> int:
        return sum(v.size for _, v in self.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for _, v in self.items()]) if self.layers else np.zeros(0)


def gru_cell(x, h, p):
    """One GRU step on Vars or arrays (arrays are lifted onto ``x``'s tape)."""
    z = T.sigmoid(x @ p["Wxz"] + h @ p["Whz"] + p["bz"])
    r = T.sigmoid(x @ p["Wxr"] + h @ p["Whr"] + p["br"])
    n = T.tanh(x @ p["Wxn"] + (r * h) @ p["Whn"] + p["bn"])
    return (1.0 - z) * n + z * h


def _layer_forward(tape, p, sub: HaloSubgraph, seq):
    """Correction-added prediction for every node of the halo subgraph."""
    n, d = seq[0].shape
    # the first step sees zero input and zero state, identical for every
    # node, so it runs on a single broadcast row
    h = tape.const(np.zeros((1, d)))
    x = tape.const(np.zeros((1, d)))
    for j in range(len(seq)):
        if j:
            x = tape.const(seq[j] - seq[j - 1])
        h = gru_cell(x, h, p)
    if h.shape[0] != n:
        h = T.add(h, np.zeros((n, d)))
    prop = sub.prop
    mixed = T.linear_map(h, lambda v: prop @ v, lambda g: prop.T @ g)
    corr = T.tanh(h @ p["R"] + mixed @ p["A"])
    return T.add(seq[-1], corr)


def _lift_params(tape, omega: PredictorParams, as_leaves: bool):
    lifted, leaves = {}, {}
    for l, p in omega.layers.items():
        lifted[l] = {}
        for name, v in p.items():
            var = tape.leaf(v, name=f"{l}.{name}") if as_leaves else tape.const(v)
            lifted[l][name] = var
            leaves[(l, name)] = var
    return lifted, leaves


def predict(omega: PredictorParams, tg: TemporalGraph) -> dict:
    """Predicted halo embeddings per layer (``|halo| x d_l``)."""
    if tg.empty:
        raise EmptyWindowError(f"partition {tg.m}: no history to predict from")
    tape = T.Tape()
    lifted, _ = _lift_params(tape, omega, as_leaves=False)
    out = {}
    for l in tg.layers():
        full = _layer_forward(tape, lifted[l], tg.sub, tg.sequence(l))
        out[l] = full.value[tg.sub.n_inner:]
    return out


def _partition_term(tape, lifted, tg, target, rows):
    """Σ_l ||pred_l[rows] - target_l[rows]||_F / (|rows| Σ_l d_l) as a Var."""
    halo0 = tg.sub.n_inner
    terms, denom = [], 0
    for l in tg.layers():
        tgt = np.asarray(target[l], dtype=np.float64)
        if tgt.shape != (tg.sub.n_halo, tg.slices[tg.epochs[0]][l].shape[1]):
            raise ShapeError(f"layer {l}: target {tgt.shape} does not match halo")
        full = _layer_forward(tape, lifted[l], tg.sub, tg.sequence(l))
        pred = T.take_rows(full, halo0 + rows)
        terms.append(T.frobenius_norm(T.sub(pred, tgt[rows])))
        denom += len(rows) * tgt.shape[1]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return T.scale(total, 1.0 / denom)


def _loss_on_tape(tape, lifted, tgs, targets, batches=None):
    M = len(tgs)
    parts = []
    for i, (tg, target) in enumerate(zip(tgs, targets)):
        if tg.empty or tg.sub.n_halo == 0:
            continue
        rows = np.arange(tg.sub.n_halo) if batches is None else np.asarray(batches[i], dtype=np.int64)
        if len(rows) == 0:
            continue
        parts.append(_partition_term(tape, lifted, tg, target, rows))
    if not parts:
        return None
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return T.scale(total, 1.0 / M)


def predictor_loss(omega: PredictorParams, tgs, targets, batches=None) -> float:
    """Multi-task regression loss averaged over partitions.

    ``targets[m][l]`` are the committed halo embeddings of the epoch being
    predicted. Partitions without halo nodes contribute zero.
    """
    if len(tgs) != len(targets):
        raise ShapeError("one target set per temporal graph")
    tape = T.Tape()
    lifted, _ = _lift_params(tape, omega, as_leaves=False)
    root = _loss_on_tape(tape, lifted, tgs, targets, batches)
    return 0.0 if root is None else float(root.value.item())


def predictor_grad(omega: PredictorParams, tgs, targets, batches=None):
    """(loss, {(layer, name): gradient}) via the reverse-mode tape."""
    tape = T.Tape()
    lifted, leaves = _lift_params(tape, omega, as_leaves=True)
    root = _loss_on_tape(tape, lifted, tgs, targets, batches)
    if root is None:
        return 0.0, {k: np.zeros_like(v.value) for k, v in leaves.items()}
    adj = tape.grad(root)
    return float(root.value.item()), {k: adj[v] for k, v in leaves.items()}


@dataclass
class PredictorOptState:
    lr: float = 1e-3
    K: int = 5
    batch_frac: float = 0.5
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    updates: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("early-stop budget K must be >= 1")
        if not 0 < self.batch_frac <= 1:
            raise ValueError("batch_frac must be in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def sample_batches(tgs, batch_frac: float, rng, pools=None) -> list:
    """Node-level mini-batches of ⌈batch_frac·|pool|⌉ halo rows per partition."""
    batches = []
    for i, tg in enumerate(tgs):
        pool = np.arange(tg.sub.n_halo) if pools is None else np.asarray(pools[i])
        size = int(math.ceil(batch_frac * len(pool)))
        batches.append(np.sort(rng.choice(pool, size=size, replace=False)) if size else pool[:0])
    return batches


def _apply(omega: PredictorParams, grads: dict, lr: float, state: PredictorOptState) -> PredictorParams:
    new = omega.copy()
    if state.optimizer == "sgd":
        for (l, name), g in grads.items():
            new.layers[l][name] -= lr * g
        return new
    t = state.steps
    for (l, name), g in grads.items():
        m, v = state.moments.get((l, name), (np.zeros_like(g), np.zeros_like(g)))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.moments[(l, name)] = (m, v)
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        new.layers[l][name] -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return new


def train_predictor(omega: PredictorParams, tgs, targets, state: PredictorOptState, rng,
                    pools=None) -> tuple[PredictorParams, float]:
    """K early-stopped optimizer steps on sampled halo mini-batches.

    Returns the updated parameters and the full-batch loss after the last
    step. A step that produces non-finite parameters or loss is rolled back
    and the step size halved for the rest of this call.
    """
    lr = state.lr
    prev = None   # (omega, moments, steps) before the last applied step
    done = 0
    while done < state.K:
        batches = sample_batches(tgs, state.batch_frac, rng, pools)
        loss, grads = predictor_grad(omega, tgs, targets, batches)
        if not np.isfinite(loss) and prev is not None:
            omega, state.moments, state.steps = prev
            prev = None
            lr *= 0.5
            continue
        done += 1
        if lr == 0.0:
            continue
        prev = (omega, {k: mv for k, mv in state.moments.items()}, state.steps)
        state.steps += 1
        omega = _apply(omega, grads, lr, state)
    final = predictor_loss(omega, tgs, targets)
    if (not np.isfinite(final) or not np.all(np.isfinite(omega.flat()))) and prev is not None:
        omega, state.moments, state.steps = prev
        final = predictor_loss(omega, tgs, targets)
    state.updates += 1
    return omega, final


@dataclass
class GateDecision:
    use_predicted: bool
    predicted_staleness: float
    historical_staleness: float


def gated_predictions(omega: PredictorParams, tgs, raw_historical, holdout_targets, holdout_rows=None,
                      predictions=None) -> list:
    """Per partition, keep the prediction only if it beats raw history on the holdout rows.

    ``raw_historical[m][l]`` and ``holdout_targets[m][l]`` are full halo
    matrices; ``holdout_rows[m]`` selects the validation subset (all rows if
    omitted). ``predictions[m]`` may carry an already computed prediction (or
None). Ties go to the historical embeddings.
    """
    decisions = []
    for i, tg in enumerate(tgs):
        if tg.empty or tg.sub.n_halo == 0:
            decisions.append(GateDecision(False, float("nan"), float("nan")))
            continue
        pred = predictions[i] if predictions is not None and predictions[i] is not None else predict(omega, tg)
        rows = np.arange(tg.sub.n_halo) if holdout_rows is None else np.asarray(holdout_rows[i])
        dp = dh = 0.0
        for l in pred:
            tgt = holdout_targets[i][l][rows]
            dp += staleness(pred[l][rows], tgt) ** 2
            dh += staleness(raw_historical[i][l][rows], tgt) ** 2
        dp, dh = math.sqrt(dp), math.sqrt(dh)
        decisions.append(GateDecision(dp < dh, dp, dh))
    return decisions
