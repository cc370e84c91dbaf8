"""Partition-parallel GCN training with historical or predicted halo embeddings.

One epoch: every partition pulls halo embeddings, runs its local forward,
pushes its own embeddings, and takes a local SGD step; the store commits the
epoch at a barrier and the partition models are averaged. In ``sat`` mode the
embedding predictor is fine-tuned every ``delta_t`` epochs and a holdout
gate decides per partition whether predicted or plain historical embeddings
are used in the next epoch.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import gnn
from .codec import PolylineCodec
from .graph import ConfigError, Graph, halo_subgraph, normalize, partition
from .predictor import (
    PredictorOptState,
    PredictorParams,
    build_temporal_graph,
    gated_predictions,
    predict,
    train_predictor,
)
from .store import EmbeddingStore, staleness

log = logging.getLogger(__name__)

MODES = ("vanilla-historical", "sat", "full-graph-oracle")
MODE_ALIASES = {"vanilla": "vanilla-historical", "oracle": "full-graph-oracle", "full": "full-graph-oracle"}
WEIGHT_POLICIES = ("train", "nodes", "uniform")


class NumericalAbort(RuntimeError):
    def __init__(self, msg, logs):
        super().__init__(msg)
        self.logs = logs


@dataclass
class TrainConfig:
    M: int = 4
    L: int = 2
    hidden: int = 64
    epochs: int = 200
    lr: float = 0.5
    pred_lr: float = 1e-3
    delta_t: int = 10
    tau: int = 2
    weights: str = "train"
    seed: int = 0
    compression: bool = False
    precision: int = 4
    gating: bool = True
    mode: str = "sat"
    probe_every: int = 0
    activation: str = "relu"
    pred_steps: int = 5
    batch_frac: float = 0.5
    pred_optimizer: str = "sgd"
    pred_init: str = "uniform"
    holdout_frac: float = 0.3
    workers: int = 1
    record_timing: bool = False
    partition_slack: float = -1.0   # negative: default 0.05 * n / M

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.epochs < 0 or self.delta_t < 1 or self.tau < 1 or self.L < 1 or self.M < 1:
            raise ConfigError("need epochs >= 0, delta_t >= 1, tau >= 1, L >= 1, M >= 1")
        if self.weights not in WEIGHT_POLICIES:
            raise ConfigError(f"unknown weight policy {self.weights!r}")
        if self.pred_init not in ("uniform", "identity"):
            raise ConfigError(f"unknown predictor init {self.pred_init!r}")
        if not 1 <= self.precision <= 9:
            raise ConfigError("precision must be in 1..9")

    def dims(self, graph: Graph) -> list:
        return [graph.X.shape[1]] + [self.hidden] * (self.L - 1) + [graph.num_classes]

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StalenessRecord:
    partition: int
    layer: int
    raw: float
    used: float


@dataclass
class EpochLog:
    epoch: int
    global_loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    micro_f1: float
    pred_loss: float
    comm_param_elems: int
    comm_pull_elems: int
    comm_push_elems: int
    comm_bytes: int
    ms_forward: float
    ms_backward: float
    ms_predictor: float
    formula_param_elems: int = 0
    formula_pull_elems: int = 0
    formula_push_elems: int = 0
    comm_bytes_raw: int = 0
    pred_phase_elems: int = 0
    grad_norm_sq: float = 0.0
    gate: list = field(default_factory=list)
    staleness: list = field(default_factory=list)


METRIC_COLUMNS = ["epoch", "global_loss", "train_acc", "val_acc", "test_acc", "micro_f1", "pred_loss",
                  "comm_param_elems", "comm_pull_elems", "comm_push_elems", "comm_bytes",
                  "ms_forward", "ms_backward", "ms_predictor"]
STALENESS_COLUMNS = ["epoch", "partition", "layer", "raw_staleness", "used_staleness"]
COMM_COLUMNS = ["epoch", "formula_param_elems", "formula_pull_elems", "formula_push_elems",
                "measured_param_elems", "measured_pull_elems", "measured_push_elems",
                "pred_phase_elems", "bytes_raw", "bytes_sent"]


def aggregate(thetas, w):
    """Weighted parameter average; every input must share the same shapes."""
    w = np.asarray(w, dtype=np.float64)
    if len(thetas) != len(w) or not thetas:
        raise ConfigError("one weight per parameter set")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError(f"aggregation weights sum to {w.sum()!r}")
    shapes = [tuple(x.shape for x in th.W) for th in thetas]
    if len(set(shapes)) != 1:
        raise gnn.ContractError("parameter shapes differ across partitions")
    out = []
    for l in range(len(thetas[0].W)):
        acc = np.zeros_like(thetas[0].W[l])
        for wm, th in zip(w, thetas):
            acc += wm * th.W[l]
        out.append(acc)
    return gnn.GcnParams(out, thetas[0].activation)


def partition_weights(graph: Graph, parts, policy: str) -> np.ndarray:
    if policy == "uniform":
        return np.full(len(parts), 1.0 / len(parts))
    if policy == "nodes":
        sizes = np.array([len(p) for p in parts], dtype=np.float64)
    else:
        sizes = np.array([graph.train_mask[p].sum() for p in parts], dtype=np.float64)
        if sizes.sum() == 0:
            raise ConfigError("no training nodes")
    return sizes / sizes.sum()


def communication_cost(dims, parts, halos, M):
    """Exact per-epoch element counts of the three communication terms."""
    hidden = sum(dims[1:-1])
    params = 2 * M * sum(a * b for a, b in zip(dims[:-1], dims[1:]))
    pulls = sum(len(h) for h in halos) * hidden
    pushes = sum(len(p) for p in parts) * hidden
    return {"params": params, "pulls": pulls, "pushes": pushes}


class _Timer:
    def __init__(self, enabled):
        self.enabled = enabled
        self.total = {}

    def add(self, key, start):
        if self.enabled:
            self.total[key] = self.total.get(key, 0.0) + (time.perf_counter() - start) * 1e3

    def get(self, key):
        return round(self.total.get(key, 0.0), 3) if self.enabled else 0.0


class Trainer:
    """Stateful driver for one run; :func:`run` is the usual entry point."""

    def __init__(self, config: TrainConfig, graph: Graph, predictor_override=None, partitioning=None):
        self.cfg = config
        self.g = graph
        self.P = normalize(graph)
        slack = None if config.partition_slack < 0 else config.partition_slack
        self.part = partitioning or partition(graph, config.M, seed=config.seed, slack=slack, P=self.P)
        self.M = self.part.M
        self.dims = config.dims(graph)
        self.theta = gnn.init_params(self.dims, seed=config.seed, activation=config.activation)
        self.w = partition_weights(graph, self.part.parts, config.weights)
        codec = PolylineCodec(config.precision) if config.compression else None
        self.store = EmbeddingStore(graph.n, window=config.tau, features=graph.X, codec=codec)
        self.subs = [halo_subgraph(graph, self.part, m) for m in range(self.M)]
        self.hidden_layers = list(range(1, config.L))
        self.override = predictor_override
        rng = np.random.default_rng(config.seed + 7919)
        self.rng = rng
        self.omega = PredictorParams.init(self.dims, seed=config.seed + 1, identity=config.pred_init == "identity")
        self.opt = PredictorOptState(lr=config.pred_lr, K=config.pred_steps, batch_frac=config.batch_frac,
                                     optimizer=config.pred_optimizer)
        self.holdout, self.pools = [], []
        for sub in self.subs:
            k = sub.n_halo
            n_hold = min(k, max(1, int(round(config.holdout_frac * k)))) if k else 0
            perm = rng.permutation(k)
            hold = np.sort(perm[:n_hold])
            rest = np.sort(perm[n_hold:])
            self.holdout.append(hold)
            self.pools.append(rest if len(rest) else hold)
        self.gate = [False] * self.M
        self.formula = communication_cost(self.dims, self.part.parts, self.part.halos, self.M)
        self.logs: list[EpochLog] = []
        self._pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    # -- one partition ------------------------------------------------------
    def _worker(self, m, t, theta, exact, tg):
        cfg, g = self.cfg, self.g
        nodes, halo = self.part.parts[m], self.part.halos[m]
        t0 = time.perf_counter()
        hist = [g.X[halo]] + [self.store.pull_out(t, l, halo, dim=self.dims[l]) for l in self.hidden_layers]
        used, pred = hist, None
        if cfg.mode == "full-graph-oracle":
            used = [g.X[halo]] + [exact.H[l][halo] for l in self.hidden_layers]
        elif cfg.mode == "sat" and len(halo):
            if self.override is not None:
                used = [g.X[halo]] + list(self.override(t, m, halo, exact))
            elif self.gate[m] and tg is not None and not tg.empty:
                pred = predict(self.omega, tg)
                used = [g.X[halo]] + [pred[l] for l in self.hidden_layers]
        trace = gnn.forward_partition(self.part.P_in[m], self.part.P_out[m], g.X[nodes], used, theta)
        for l in self.hidden_layers:
            self.store.push(t, l, nodes, trace.H[l])
        t1 = time.perf_counter()
        mask = g.train_mask[nodes]
        if mask.any():
            loss = gnn.local_loss(trace.logits, g.y[nodes], mask)
            grads = gnn.backward_partition(trace, g.y[nodes], mask, self.part.P_in[m], self.part.P_out[m], theta)
            G = grads.G_W
        else:
            loss, G = 0.0, [np.zeros_like(w) for w in theta.W]
        theta_m = gnn.GcnParams([w - cfg.lr * gw for w, gw in zip(theta.W, G)], theta.activation)
        t2 = time.perf_counter()
        return loss, G, theta_m, hist, used, (t0, t1, t2), pred

    # -- epoch --------------------------------------------------------------
    def step(self, t: int) -> EpochLog:
        cfg, g = self.cfg, self.g
        timer = _Timer(cfg.record_timing)
        probe = cfg.probe_every > 0 and t % cfg.probe_every == 0
        exact = None
        if cfg.mode == "full-graph-oracle" or probe or (cfg.mode == "sat" and self.override is not None):
            exact = gnn.forward_full(self.P, g.X, self.theta)
        tgs = [None] * self.M
        if cfg.mode == "sat" and self.hidden_layers:
            start = time.perf_counter()
            tgs = [build_temporal_graph(self.store, sub, t, cfg.tau, self.hidden_layers) for sub in self.subs]
            timer.add("predictor", start)
        theta = self.theta
        args = [(m, t, theta, exact, tgs[m]) for m in range(self.M)]
        if self._pool is not None:
            results = list(self._pool.map(lambda a: self._worker(*a), args))
        else:
            results = [self._worker(*a) for a in args]
        for *_, (t0, t1, t2), _ in results:
            if cfg.record_timing:
                timer.total["forward"] = timer.total.get("forward", 0.0) + (t1 - t0) * 1e3
                timer.total["backward"] = timer.total.get("backward", 0.0) + (t2 - t1) * 1e3
        self.store.commit(t)

        losses = [r[0] for r in results]
        gl = gnn.global_loss(losses, self.w)
        if not math.isfinite(gl):
            raise NumericalAbort(f"non-finite global loss at epoch {t}", self.logs)
        self.theta = aggregate([r[2] for r in results], self.w)
        agg_grad = [sum(wm * r[1][l] for wm, r in zip(self.w, results)) for l in range(len(theta.W))]
        grad_norm_sq = float(sum(np.sum(gw * gw) for gw in agg_grad))

        pred_loss = float("nan")
        pred_elems = 0
        gate_log = []
        has_halo = any(sub.n_halo for sub in self.subs)
        if cfg.mode == "sat" and self.override is None and has_halo and self.hidden_layers:
            start = time.perf_counter()
            ready = [tg for tg in tgs if not tg.empty]
            targets = None
            retrained = False
            if ready and t % cfg.delta_t == 0:
                targets = [{l: self.store.get(t, l, self.part.halos[m], channel="predictor")
                            for l in self.hidden_layers} for m in range(self.M)]
                window_elems = sum(tg.num_elements() for tg in tgs)
                self.store.traffic["predictor"].add(window_elems, 8 * window_elems)
                self.omega, pred_loss = train_predictor(self.omega, tgs, targets, self.opt, self.rng,
                                                        pools=self.pools)
                retrained = True
                self.store.traffic["predictor"].add(self.omega.num_elements(), 8 * self.omega.num_elements())
            if ready:
                if cfg.gating:
                    if targets is None:
                        targets = [{l: self.store.get(t, l, self.part.halos[m]) for l in self.hidden_layers}
                                   for m in range(self.M)]
                    raw = [{l: r[3][l] for l in self.hidden_layers} for r in results]
                    # the pull-phase predictions are still valid unless omega just changed
                    reuse = None if retrained else [r[6] for r in results]
                    decisions = gated_predictions(self.omega, tgs, raw, targets, self.holdout, reuse)
                    self.gate = [d.use_predicted for d in decisions]
                    gate_log = [(d.use_predicted, d.predicted_staleness, d.historical_staleness) for d in decisions]
                else:
                    self.gate = [not tg.empty for tg in tgs]
            timer.add("predictor", start)
            pred_elems = self.store.traffic["predictor"].elements
        self.store.evict(t)

        stale = []
        if probe:
            for m, r in enumerate(results):
                halo = self.part.halos[m]
                for l in self.hidden_layers:
                    ex = exact.H[l][halo]
                    stale.append(StalenessRecord(m, l, staleness(r[3][l], ex), staleness(r[4][l], ex)))

        traffic = self.store.reset_traffic()
        pull, push = traffic.get("pull"), traffic.get("push")
        pull_e = pull.elements if pull else 0
        push_e = push.elements if push else 0
        param_e = 2 * self.M * self.theta.num_elements()
        sent = 8 * param_e + (pull.bytes_sent if pull else 0) + (push.bytes_sent if push else 0)
        raw_b = 8 * (param_e + pull_e + push_e)

        final = gnn.forward_full(self.P, g.X, self.theta).logits
        test_acc = gnn.accuracy(final, g.y, g.test_mask)
        entry = EpochLog(
            epoch=t, global_loss=gl,
            train_acc=gnn.accuracy(final, g.y, g.train_mask),
            val_acc=gnn.accuracy(final, g.y, g.val_mask),
            test_acc=test_acc, micro_f1=test_acc, pred_loss=pred_loss,
            comm_param_elems=param_e, comm_pull_elems=pull_e, comm_push_elems=push_e, comm_bytes=sent,
            ms_forward=timer.get("forward"), ms_backward=timer.get("backward"), ms_predictor=timer.get("predictor"),
            formula_param_elems=self.formula["params"], formula_pull_elems=self.formula["pulls"],
            formula_push_elems=self.formula["pushes"], comm_bytes_raw=raw_b, pred_phase_elems=pred_elems,
            grad_norm_sq=grad_norm_sq, gate=gate_log, staleness=stale,
        )
        self.logs.append(entry)
        return entry

    def run(self) -> list:
        try:
            for t in range(1, self.cfg.epochs + 1):
                entry = self.step(t)
                log.debug("epoch %d loss %.6f test %.4f", t, entry.global_loss, entry.test_acc)
        finally:
            if self._pool is not None:
                self._pool.shutdown()
        return self.logs

    def staleness_probe(self, t: int):
        """Per-partition (raw, used) staleness for the *next* pull at epoch ``t``.

        Runs a metrics-only full-graph forward with the current parameters.
        """
        exact = gnn.forward_full(self.P, self.g.X, self.theta)
        out = []
        for m in range(self.M):
            halo = self.part.halos[m]
            for l in self.hidden_layers:
                hist = self.store.get(t - 1, l, halo)
                used = hist
                if self.cfg.mode == "full-graph-oracle":
                    used = exact.H[l][halo]
                elif self.cfg.mode == "sat" and self.gate[m]:
                    tg = build_temporal_graph(self.store, self.subs[m], t, self.cfg.tau, self.hidden_layers)
                    if not tg.empty:
                        used = predict(self.omega, tg)[l]
                ex = exact.H[l][halo]
                out.append(StalenessRecord(m, l, staleness(hist, ex), staleness(used, ex)))
        return out


def run(config: TrainConfig, graph: Graph, predictor_override=None, partitioning=None) -> list:
    return Trainer(config, graph, predictor_override, partitioning).run()
