"""satgnn command line: ``gen-sbm``, ``train`` and ``compare``.

Experiment configs are flat ``key = value`` files with ``#`` comments. Keys
are the :class:`~satgnn.trainer.TrainConfig` fields plus the dataset keys
below; anything else is rejected.

Dataset keys:
    edges, features, labels   paths in the formats written by ``gen-sbm``
    split                     e.g. ``train=0.6,val=0.2,test=0.2,seed=0``
    sbm_n, sbm_k, sbm_p_in, sbm_p_out, sbm_dim, sbm_noise, sbm_seed
                              generate an SBM graph in memory instead of
                              loading files (used when ``edges`` is unset)
    out_dir                   where reports go (``--out`` overrides)

Outputs of ``train`` (columns fixed):
    config.txt      resolved config, reloadable with ``--config``
    metrics.csv     epoch, global_loss, train_acc, val_acc, test_acc, micro_f1,
                    pred_loss, comm_param_elems, comm_pull_elems,
                    comm_push_elems, comm_bytes, ms_forward, ms_backward,
                    ms_predictor
    staleness.csv   epoch, partition, layer, raw_staleness, used_staleness
    comm.csv        per-epoch formula vs measured element counts and bytes
    final_model.txt parameter shapes, norms and final accuracies

``compare`` writes one such directory per mode plus ``compare.csv`` (per
epoch: loss, test accuracy and mean used staleness for each mode) and
``summary.csv``.

Exit codes: 0 ok, 2 configuration or input error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys

import numpy as np

from .graph import ConfigError, IngestionError, load_graph, normalize, partition, write_graph
from .sbm import SbmSpec, generate
from .trainer import (
    COMM_COLUMNS,
    METRIC_COLUMNS,
    MODES,
    STALENESS_COLUMNS,
    NumericalAbort,
    TrainConfig,
    Trainer,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

SBM_KEYS = {"sbm_n": "n", "sbm_k": "k", "sbm_p_in": "p_in", "sbm_p_out": "p_out",
            "sbm_dim": "dim", "sbm_noise": "noise", "sbm_seed": "seed"}
DATA_KEYS = ("edges", "features", "labels", "split", "out_dir")
COMPARE_COLUMNS = ["epoch"] + [f"{m}_{c}" for m in MODES for c in ("loss", "test_acc", "staleness")]
THRESHOLD = 0.95  # fraction of the oracle's final test accuracy


# -- config files -----------------------------------------------------------

def _coerce(raw: str, kind, key: str):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _field_types() -> dict:
    types = {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}
    spec = SbmSpec()
    for key, attr in SBM_KEYS.items():
        types[key] = type(getattr(spec, attr))
    for key in DATA_KEYS:
        types[key] = str
    return types


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines into typed values; unknown keys are errors."""
    types = _field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        # split specs contain '=' themselves, so only the first one separates
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, types[key], key)
    return out


def read_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def format_config(values: dict) -> str:
    lines = [f"{k} = {'true' if v is True else 'false' if v is False else v}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


def resolve(values: dict, args) -> tuple[TrainConfig, dict]:
    """Apply command-line overrides and split into (TrainConfig, dataset keys)."""
    values = dict(values)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        values["mode"] = args.mode
    if getattr(args, "probe_every", None) is not None:
        values["probe_every"] = args.probe_every
    if getattr(args, "out", None) is not None:
        values["out_dir"] = args.out
    train_keys = set(TrainConfig.keys())
    cfg = TrainConfig(**{k: v for k, v in values.items() if k in train_keys})
    data = {k: v for k, v in values.items() if k not in train_keys}
    data.setdefault("out_dir", "run")
    return cfg, data


def load_dataset(data: dict):
    split = data.get("split", "train=0.6,val=0.2,test=0.2,seed=0")
    if "edges" in data:
        missing = [k for k in ("features", "labels") if k not in data]
        if missing:
            raise ConfigError(f"edges given without {', '.join(missing)}")
        return load_graph(data["edges"], data["features"], data["labels"], split)
    kwargs = {attr: data[key] for key, attr in SBM_KEYS.items() if key in data}
    return generate(SbmSpec(split=split, **kwargs))


# -- reports ----------------------------------------------------------------

def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def write_reports(out_dir, cfg: TrainConfig, data: dict, logs, trainer: Trainer | None):
    os.makedirs(out_dir, exist_ok=True)
    echoed = {**cfg.to_dict(), **data}
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(echoed))
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for e in logs:
            w.writerow([_fmt(getattr(e, c)) for c in METRIC_COLUMNS])
    with open(os.path.join(out_dir, "staleness.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STALENESS_COLUMNS)
        for e in logs:
            for r in e.staleness:
                w.writerow([e.epoch, r.partition, r.layer, _fmt(r.raw), _fmt(r.used)])
    with open(os.path.join(out_dir, "comm.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMM_COLUMNS)
        for e in logs:
            w.writerow([e.epoch, e.formula_param_elems, e.formula_pull_elems, e.formula_push_elems,
                        e.comm_param_elems, e.comm_pull_elems, e.comm_push_elems,
                        e.pred_phase_elems, e.comm_bytes_raw, e.comm_bytes])
    if trainer is not None:
        with open(os.path.join(out_dir, "final_model.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"mode = {cfg.mode}\n")
            fh.write(f"dims = {','.join(map(str, trainer.dims))}\n")
            fh.write(f"activation = {trainer.theta.activation}\n")
            fh.write(f"partitions = {trainer.M}\n")
            fh.write(f"partition_sizes = {','.join(map(str, trainer.part.sizes()))}\n")
            fh.write(f"halo_sizes = {','.join(str(len(h)) for h in trainer.part.halos)}\n")
            for l, W in enumerate(trainer.theta.W):
                fh.write(f"W{l} = {W.shape[0]}x{W.shape[1]} fro={float(np.linalg.norm(W))!r}\n")
            if logs:
                last = logs[-1]
                fh.write(f"epochs = {last.epoch}\n")
                for key in ("global_loss", "train_acc", "val_acc", "test_acc"):
                    fh.write(f"final_{key} = {getattr(last, key)!r}\n")


def _progress(quiet: bool, msg: str):
    if not quiet:
        print(msg, file=sys.stderr)


def _train_one(cfg, data, graph, out_dir, quiet, partitioning=None):
    trainer = Trainer(cfg, graph, partitioning=partitioning)
    try:
        for t in range(1, cfg.epochs + 1):
            e = trainer.step(t)
            if not quiet and (t == cfg.epochs or t % 10 == 0):
                _progress(quiet, f"[{cfg.mode}] epoch {t:4d} loss {e.global_loss:.4f} test {e.test_acc:.4f}")
    except (NumericalAbort, FloatingPointError):
        write_reports(out_dir, cfg, data, trainer.logs, trainer)
        raise
    write_reports(out_dir, cfg, data, trainer.logs, trainer)
    return trainer


# -- subcommands ------------------------------------------------------------

def cmd_gen_sbm(args) -> int:
    spec = SbmSpec(n=args.n, k=args.k, p_in=args.p_in, p_out=args.p_out, dim=args.dim,
                   noise=args.noise, seed=args.seed if args.seed is not None else 0, split=args.split)
    g = generate(spec)
    paths = write_graph(g, args.out)
    _progress(args.quiet, f"wrote {g.n} nodes, {g.num_edges} edges: {', '.join(paths)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, data = resolve(read_config(args.config) if args.config else {}, args)
    graph = load_dataset(data)
    _train_one(cfg, data, graph, data["out_dir"], args.quiet)
    return EXIT_OK


def _mean_used(e):
    return float(np.mean([r.used for r in e.staleness])) if e.staleness else float("nan")


def _mean_raw(e):
    return float(np.mean([r.raw for r in e.staleness])) if e.staleness else float("nan")


def epochs_to(logs, threshold):
    """First epoch whose test accuracy reaches ``threshold`` (None if never)."""
    return next((e.epoch for e in logs if e.test_acc >= threshold), None)


def compare_summary(runs: dict) -> dict:
    """Summary deltas between the three modes' logs (keyed by mode name)."""
    van, sat, ora = runs["vanilla-historical"], runs["sat"], runs["full-graph-oracle"]
    raw = [s for e in van for s in [_mean_raw(e)] if not math.isnan(s)]
    used = [s for e in sat for s in [_mean_used(e)] if not math.isnan(s)]
    reduction = 100.0 * (1.0 - np.mean(used) / np.mean(raw)) if raw and used and np.mean(raw) > 0 else float("nan")
    thr = THRESHOLD * ora[-1].test_acc if ora else float("nan")
    ev, es = epochs_to(van, thr), epochs_to(sat, thr)
    return {
        "staleness_reduction_pct": reduction,
        "final_acc_vanilla": van[-1].test_acc if van else float("nan"),
        "final_acc_sat": sat[-1].test_acc if sat else float("nan"),
        "final_acc_oracle": ora[-1].test_acc if ora else float("nan"),
        "final_acc_delta_sat_minus_vanilla": (sat[-1].test_acc - van[-1].test_acc) if van else float("nan"),
        "accuracy_threshold": thr,
        "epochs_to_threshold_vanilla": "" if ev is None else ev,
        "epochs_to_threshold_sat": "" if es is None else es,
        "epochs_to_threshold_delta": "" if ev is None or es is None else es - ev,
    }


def cmd_compare(args) -> int:
    cfg, data = resolve(read_config(args.config) if args.config else {}, args)
    if cfg.probe_every <= 0:
        cfg = dataclasses.replace(cfg, probe_every=5)
    graph = load_dataset(data)
    slack = None if cfg.partition_slack < 0 else cfg.partition_slack
    part = partition(graph, cfg.M, seed=cfg.seed, slack=slack, P=normalize(graph))
    out = data["out_dir"]
    runs = {}
    for mode in MODES:
        mcfg = dataclasses.replace(cfg, mode=mode)
        runs[mode] = _train_one(mcfg, data, graph, os.path.join(out, mode), args.quiet, part).logs
    with open(os.path.join(out, "compare.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for i in range(cfg.epochs):
            row = [i + 1]
            for mode in MODES:
                e = runs[mode][i]
                st = _mean_used(e)
                row += [repr(e.global_loss), repr(e.test_acc), "" if math.isnan(st) else repr(st)]
            w.writerow(row)
    summary = compare_summary(runs)
    with open(os.path.join(out, "summary.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, _fmt(v)])
    for k, v in summary.items():
        _progress(args.quiet, f"{k}: {v}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satgnn", description=__doc__.split("\n", 1)[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("--quiet", action="store_true", help="no progress output")

    gen = sub.add_parser("gen-sbm", parents=[common], help="write a stochastic block model dataset")
    d = SbmSpec()
    gen.add_argument("--n", type=int, default=d.n)
    gen.add_argument("--k", type=int, default=d.k)
    gen.add_argument("--p-in", type=float, default=d.p_in)
    gen.add_argument("--p-out", type=float, default=d.p_out)
    gen.add_argument("--dim", type=int, default=d.dim)
    gen.add_argument("--noise", type=float, default=d.noise)
    gen.add_argument("--split", default=d.split)
    gen.set_defaults(func=cmd_gen_sbm, out="data")

    for name, func, helptext in (("train", cmd_train, "train one configuration"),
                                 ("compare", cmd_compare, "run vanilla, sat and oracle side by side")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--config", help="key = value experiment file")
        p.add_argument("--mode", help="override the training mode")
        p.add_argument("--probe-every", type=int, dest="probe_every", help="staleness probe period")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (NumericalAbort, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, IngestionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
