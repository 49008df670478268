"""Command-line entry point: ``polrep <subcommand> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import cfquad, evalkit
from .config import ConfigError, RunConfig
from .dataio import generate_dataset, load_dataset, save_dataset
from .steer import SteeringQuery, steer
from .trainer import load_bundle, save_bundle, train, write_training_log

log = logging.getLogger("polrep")


class UsageError(Exception):
    pass


class Outputs:
    """Tracks written artifacts so a failed command can remove them."""

    def __init__(self, root):
        self.root = Path(root)
        self.written = []

    def path(self, name):
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.root / name
        self.written.append(p)
        return p

    def discard(self):
        for p in self.written:
            p.unlink(missing_ok=True)


def _method_name(cfg):
    flags = [n for n in ("vae_only", "unconstrained_projector", "mean_pool_encoder", "deterministic_ae")
             if getattr(cfg, n)]
    return "+".join(flags) or "full"


def _dataset(args, cfg: RunConfig):
    if args.data:
        return load_dataset(args.data)
    return generate_dataset(cfg.env, cfg.data.n_knobs, cfg.data.traj_per_knob, cfg.data.heldout_every)


def cmd_gen_data(args, cfg, out):
    ds = generate_dataset(cfg.env, cfg.data.n_knobs, cfg.data.traj_per_knob, cfg.data.heldout_every)
    save_dataset(out.path("dataset.prep"), ds)
    log.info("wrote %d trajectories", ds.n_traj)


def cmd_train(args, cfg, out):
    ds = _dataset(args, cfg)
    progress = (lambda e, p: log.info("epoch %d total %.4f", e, p.total)) if args.verbose else None
    bundle, log1, log2 = train(ds, cfg.train, progress=progress)
    save_bundle(out.path("model.pbnd"), bundle)
    write_training_log(out.path("train_log.csv"), log1, ds.K)
    with open(out.path("phase2_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + [f"value_mse_{k}" for k in range(ds.K)])
        for e, row in enumerate(log2):
            w.writerow([e] + [repr(float(v)) for v in row])


def cmd_probe(args, cfg, out):
    if not args.checkpoint:
        raise UsageError("probe needs at least one --checkpoint")
    ds = _dataset(args, cfg)
    probe_rows, order_rows = [], []
    for path in args.checkpoint:
        b = load_bundle(path)
        name = _method_name(b.config)
        train_mse, test_mse = evalkit.probe_bundle(b, ds, seed=cfg.train.seed)
        for k in range(ds.K):
            probe_rows.append([name, path, k, repr(float(train_mse[k])), repr(float(test_mse[k]))])
        rep = evalkit.ordering_metrics(evalkit.project_all(b, b.bank.h), b.bank.returns,
                                       cfg.eval.n_triplets, np.random.default_rng([cfg.train.seed, 20]))
        pc1 = evalkit.pc1_knob_spearman(b.bank.h, b.bank.knobs)
        for k in range(ds.K):
            order_rows.append([name, k, repr(rep.violation_rate[k]), repr(rep.spearman[k]),
                               rep.n_triplets[k], repr(pc1)])
    with open(out.path("probe.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "checkpoint", "task", "train_mse", "test_mse"])
        w.writerows(probe_rows)
    with open(out.path("ordering.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "task", "violation_rate", "spearman", "n_triplets", "pc1_knob_spearman"])
        w.writerows(order_rows)


def _one_checkpoint(args):
    if not args.checkpoint or len(args.checkpoint) != 1:
        raise UsageError(f"{args.command} needs exactly one --checkpoint")
    return load_bundle(args.checkpoint[0])


def cmd_eval_imitation(args, cfg, out):
    b = _one_checkpoint(args)
    ds = _dataset(args, cfg)
    with open(out.path("imitation.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "traj", "knob"] + [f"rel_diff_{k}" for k in range(ds.K)])
        medians = []
        for split, idx in (("train", ds.train_idx), ("test", ds.test_idx)):
            diffs = evalkit.imitation_eval(b, ds, idx, cfg.env, cfg.eval.n_eval, cfg.train.seed)
            for i, row in zip(idx, diffs):
                w.writerow([split, int(i), repr(float(ds.knobs[i]))] + [repr(float(v)) for v in row])
            medians.append((split, float(np.median(diffs))))
        for split, med in medians:
            w.writerow([f"median_{split}", "", "", repr(med)])


def cmd_steer(args, cfg, out):
    b = _one_checkpoint(args)
    sc = cfg.steer
    target = sc.target if args.target is None else args.target
    cons = sc.parsed_constraints() if args.constraint is None else \
        RunConfig.from_text(f"[steer]\nconstraints = {args.constraint}\n").steer.parsed_constraints()
    rng = np.random.default_rng([cfg.train.seed, 30])
    h0 = b.bank.h[sc.init_index if sc.init_index >= 0 else rng.integers(len(b.bank))].copy()
    query = SteeringQuery(target, cons, h0=h0, **sc.query_kwargs())
    trace, result = steer(query, b.model, b.bank, b.stats, cfg.env, cfg.eval.n_eval, rng)
    trace.write_csv(out.path("trace.csv"), b.stats)
    result.write_json(out.path("result.json"), query)


def cmd_bench_steer(args, cfg, out):
    b = _one_checkpoint(args)
    rep = evalkit.steering_benchmark(b, cfg.env, cfg.eval.n_queries, cfg.train.seed,
                                     cfg.eval.n_eval, **cfg.steer.query_kwargs())
    rep.write_csv(out.path("bench_steer.csv"))
    if args.ablation:
        gap = evalkit.projection_ablation(b, cfg.env, cfg.eval.ablation_runs, cfg.train.seed,
                                          cfg.eval.n_eval, **cfg.steer.query_kwargs())
        with open(out.path("path_gap.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "projected_gap", "naive_gap"])
            for i, (p, n) in enumerate(gap.per_run):
                w.writerow([i, repr(p), repr(n)])
            w.writerow(["mean", repr(gap.projected_gap), repr(gap.naive_gap)])


def cmd_cf_rate(args, cfg, out):
    res = cfquad.rate_experiment(n_grid=cfg.eval.grid(), trials=cfg.eval.cf_trials,
                                 target=cfquad.SteinTarget(reg=cfg.eval.cf_reg), seed=cfg.env.seed)
    res.write_csv(out.path("cf_rate.csv"))


def cmd_plot(args, cfg, out):
    b = _one_checkpoint(args)
    coords = evalkit.pca2d(b.bank.h)
    evalkit.write_plot_csv(out.path("pca.csv"), coords, b.bank.returns, b.bank.knobs)
    if args.svg:
        evalkit.write_plot_svg(out.path("pca_R1.svg"), coords, b.bank.returns[:, 0], title="R1")
        evalkit.write_plot_svg(out.path("pca_R2.svg"), coords, b.bank.returns[:, 1], title="R2")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "probe": cmd_probe,
    "eval-imitation": cmd_eval_imitation, "steer": cmd_steer, "bench-steer": cmd_bench_steer,
    "cf-rate": cmd_cf_rate, "plot": cmd_plot,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="polrep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default="default", help="run config file, or 'default'")
        p.add_argument("--seed", type=int, default=None, help="overrides env and train seeds")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "probe", "eval-imitation"):
            p.add_argument("--data", help="dataset file; generated from the config when omitted")
        if name in ("probe", "eval-imitation", "steer", "bench-steer", "plot"):
            p.add_argument("--checkpoint", action="append", help="checkpoint bundle (repeatable for probe)")
        if name == "steer":
            p.add_argument("--target", type=float, help="objective-0 target return (raw units)")
            p.add_argument("--constraint", help="lower bounds as task:bound[,task:bound]")
        if name == "bench-steer":
            p.add_argument("--ablation", action="store_true", help="also run projected-vs-naive paths")
        if name == "plot":
            p.add_argument("--svg", action="store_true", help="also write SVG scatter plots")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except (ConfigError, OSError) as exc:
        print(f"polrep: usage error: {exc}", file=sys.stderr)
        return 2
    out = Outputs(args.out)
    try:
        out.path("config.ini").write_text(cfg.to_text())
        COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigError) as exc:
        out.discard()
        print(f"polrep: usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit 1
        out.discard()
        module = getattr(exc, "__module__", None) or type(exc).__module__
        origin = _failing_module(exc) or module
        print(f"{origin}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def _failing_module(exc):
    tb = exc.__traceback__
    name = None
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("polrep."):
            name = mod
        tb = tb.tb_next
    return name


if __name__ == "__main__":
    sys.exit(main())
