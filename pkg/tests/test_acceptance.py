"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The benchmark-scale criteria (staleness reduction, accuracy, convergence
trend) share one session fixture that trains vanilla, sat and oracle on ten
seeded copies of the default SBM benchmark.
"""
import dataclasses
import time

import numpy as np
import pytest

from conftest import random_graph
from oracles import polyline_decode, polyline_round, reference_full_batch
from satgnn import cli, gnn
from satgnn.codec import PolylineCodec, decode_polyline, encode_polyline
from satgnn.graph import build_partitioning, normalize, partition
from satgnn.sbm import SbmSpec, generate
from satgnn.trainer import TrainConfig, Trainer, run
from test_gnn import check_partition_gradient
from test_predictor import predictor_fd_worst

SEEDS = range(10)
# the predictor is trained with Adam here; plain SGD at its default step size
# does not move the predictor far enough in 200 epochs for the gate to pick it
BENCH = dict(epochs=200, probe_every=5, pred_optimizer="adam", pred_lr=0.01)


def report(record_property, criterion, detail):
    record_property("criterion", criterion)
    record_property("detail", detail)


@pytest.fixture(scope="session")
def benchmark_runs():
    runs = []
    for s in SEEDS:
        g = generate(SbmSpec(seed=s))
        part = partition(g, 4, seed=s, P=normalize(g))
        out = {}
        for mode in ("vanilla-historical", "sat", "full-graph-oracle"):
            t0 = time.perf_counter()
            logs = Trainer(TrainConfig(mode=mode, seed=s, **BENCH), g, partitioning=part).run()
            out[mode] = (logs, time.perf_counter() - t0)
        runs.append(out)
    return runs


def test_criterion_1_oracle_equivalence(record_property):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        n = 60 + 14 * seed
        g, _ = random_graph(n, 6.0 / n, 5, 3, seed)
        params = gnn.init_params([5, 16, 8, 3], seed=seed)
        P = normalize(g)
        full = gnn.forward_full(P, g.X, params)
        for M in (1, 2, 4, 8):
            p = partition(g, M, seed=seed, P=P)
            for m in range(M):
                halo_in = [full.H[l][p.halos[m]] for l in range(params.L)]
                tr = gnn.forward_partition(p.P_in[m], p.P_out[m], g.X[p.parts[m]], halo_in, params)
                worst = max(worst, np.abs(tr.logits - full.logits[p.parts[m]]).max())
    elapsed = time.perf_counter() - start
    report(record_property, 1, f"max-abs {worst:.2e} (tol 1e-10), {elapsed:.2f}s (limit 5s)")
    assert worst <= 1e-10
    assert elapsed < 5


def test_criterion_2_gradients(record_property):
    start = time.perf_counter()
    gcn = max(check_partition_gradient(seed) for seed in range(5))
    pred = max(predictor_fd_worst(seed) for seed in range(5))
    elapsed = time.perf_counter() - start
    report(record_property, 2, f"GCN rel-err {gcn:.2e}, predictor rel-err {pred:.2e} (tol 1e-4), {elapsed:.1f}s")
    assert gcn < 1e-4 and pred < 1e-4
    assert elapsed < 30


def test_criterion_3_codec(record_property):
    v = np.random.default_rng(7).uniform(-50, 50, size=10_000)
    exact = True
    worst = 0.0
    for p in (1, 4, 6):
        enc = encode_polyline(v, p)
        dec = decode_polyline(enc, p)
        exact &= dec.tolist() == [polyline_round(x, p) for x in v] == polyline_decode(enc.decode(), p)
        worst = max(worst, np.abs(dec - v).max() / (0.5 * 10.0 ** -p))
    vectors = encode_polyline([38.5], 5) == b"_p~iF" and encode_polyline([-120.2], 5) == b"~ps|U"
    # hidden embeddings from a short run on the benchmark graph
    g = generate(SbmSpec())
    tr = Trainer(TrainConfig(mode="vanilla", epochs=20), g)
    tr.run()
    H = gnn.forward_full(tr.P, g.X, tr.theta).H[1]
    ratio = H.size * 8 / PolylineCodec(4).encode_rows(H).nbytes
    report(record_property, 3, f"round-trip exact={exact}, max err/bound {worst:.3f}, "
                               f"reference vectors={vectors}, ratio {ratio:.2f}x (need 2x)")
    assert exact and vectors
    assert worst <= 1 + 1e-9
    assert ratio >= 2


def _late_mean(logs, key):
    return float(np.mean([getattr(r, key) for e in logs if e.epoch > 50 for r in e.staleness]))


def test_criterion_4_staleness_reduction(benchmark_runs, record_property):
    reductions = []
    violations = 0
    runtime = 0.0
    for out in benchmark_runs:
        van, sat = out["vanilla-historical"][0], out["sat"][0]
        reductions.append(1 - _late_mean(sat, "used") / _late_mean(van, "raw"))
        violations += sum(r.used > r.raw for e in sat for r in e.staleness)
        runtime += out["vanilla-historical"][1] + out["sat"][1]
    wins = sum(r >= 0.20 for r in reductions)
    report(record_property, 4, f"{wins}/10 seeds >= 20% (reductions {min(reductions):.1%}..{max(reductions):.1%}), "
                               f"{violations} probes with used > raw, vanilla+sat {runtime:.0f}s (limit 300s)")
    assert wins >= 8
    assert violations == 0
    assert runtime < 300


def test_criterion_5_accuracy_and_convergence(benchmark_runs, record_property):
    acc_wins = reach_wins = bound_wins = 0
    for out in benchmark_runs:
        van, sat, ora = (out[m][0] for m in ("vanilla-historical", "sat", "full-graph-oracle"))
        acc_wins += sat[-1].test_acc >= van[-1].test_acc
        thr = cli.THRESHOLD * ora[-1].test_acc
        ev, es = cli.epochs_to(van, thr), cli.epochs_to(sat, thr)
        reach_wins += es is not None and (ev is None or es <= ev)
        bound_wins += ora[-1].test_acc >= max(sat[-1].test_acc, van[-1].test_acc)
    report(record_property, 5, f"final acc sat>=vanilla {acc_wins}/10, epochs-to-95% sat<=vanilla {reach_wins}/10, "
                               f"oracle upper bound {bound_wins}/10 (need 8 each)")
    assert acc_wins >= 8 and reach_wins >= 8 and bound_wins >= 8


def test_criterion_6_single_partition_identity(record_property):
    g = generate(SbmSpec(n=300, k=4, p_in=0.06, p_out=0.01, seed=1))
    base = TrainConfig(M=1, hidden=16, epochs=40, seed=2)
    curves = {m: np.array([e.global_loss for e in run(dataclasses.replace(base, mode=m), g)])
              for m in ("vanilla-historical", "sat", "full-graph-oracle")}
    spread = max(np.abs(curves["sat"] - curves["vanilla-historical"]).max(),
                 np.abs(curves["full-graph-oracle"] - curves["vanilla-historical"]).max())
    W0 = gnn.init_params(base.dims(g), seed=base.seed).W
    ref = reference_full_batch(normalize(g).toarray(), g.X, g.y, g.train_mask, W0, base.lr, base.epochs)
    gap = np.abs(curves["full-graph-oracle"] - ref).max()
    report(record_property, 6, f"mode spread {spread:.1e} (tol 1e-12), oracle vs reference {gap:.1e} (tol 1e-8)")
    assert spread <= 1e-12
    assert gap < 1e-8


def _counts_match(logs):
    return all((e.comm_param_elems, e.comm_pull_elems, e.comm_push_elems)
               == (e.formula_param_elems, e.formula_pull_elems, e.formula_push_elems) for e in logs)


def test_criterion_7_communication(triangle, record_property):
    tri = build_partitioning(triangle, [0, 1, 2], 3)
    ok = all(_counts_match(Trainer(TrainConfig(M=3, hidden=2, epochs=5, mode=m, delta_t=2), triangle,
                                   partitioning=tri).run())
             for m in ("vanilla", "sat", "oracle"))
    g = generate(SbmSpec())
    ok &= all(_counts_match(run(TrainConfig(mode=m, epochs=10, delta_t=2), g)) for m in ("vanilla", "sat", "oracle"))
    base = TrainConfig(mode="sat", epochs=60, hidden=16)
    small = generate(SbmSpec(n=400, k=4, p_in=0.05, p_out=0.005, seed=0))
    every = sum(e.pred_phase_elems for e in run(dataclasses.replace(base, delta_t=1), small))
    tenth = sum(e.pred_phase_elems for e in run(dataclasses.replace(base, delta_t=10), small))
    ratio = every / tenth
    report(record_property, 7, f"measured == formula every epoch: {ok}; predictor traffic ratio {ratio:.2f} "
                               f"for dT=10 (want 10 +- 10%)")
    assert ok
    assert ratio == pytest.approx(10, rel=0.1)


def test_criterion_8_gradient_norm_trend(benchmark_runs, record_property):
    window = 20
    ok = 0
    for out in benchmark_runs:
        g = np.array([e.grad_norm_sq for e in out["sat"][0]])
        half = g[len(g) // 2:]
        means = np.convolve(half, np.ones(window) / window, mode="valid")
        ok += bool(np.all(np.diff(means) <= 0))
    report(record_property, 8, f"windowed (w={window}) mean of squared gradient norm non-increasing "
                               f"over epochs 101-200 in {ok}/10 seeds (need 9)")
    assert ok >= 9


def test_criterion_9_determinism(tmp_path, record_property):
    text = "sbm_seed = 3\nepochs = 30\ndelta_t = 5\nprobe_every = 5\npred_optimizer = adam\npred_lr = 0.01\n"
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(text)
    for out in ("a", "b"):
        assert cli.main(["train", "--quiet", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
    same = (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    g = generate(SbmSpec(seed=3))
    c = TrainConfig(epochs=30, delta_t=5, pred_optimizer="adam", pred_lr=0.01)
    one, many = run(c, g), run(dataclasses.replace(c, workers=4), g)
    gap = max(abs(a.global_loss - b.global_loss) for a, b in zip(one, many))
    report(record_property, 9, f"metrics.csv bit-identical: {same}; workers=4 loss gap {gap:.1e} (tol 1e-12)")
    assert same
    assert gap <= 1e-12
