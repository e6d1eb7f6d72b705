"""Command-line surface: dataset generation, training, single-shot
estimation, and the NMSE benchmark sweep.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import json
import sys

import numpy as np

from . import __version__
from . import bench as bench_mod
from . import rng as streams
from .baselines import lmmse_estimate, lmmse_fit, rls_estimate
from .channels import (ChannelConfig, angular_to_real, build_dataset,
                       load_dataset, regenerate_sample, save_dataset,
                       training_matrix)
from .diffusion import (EnergyModel, NetConfig, TrainConfig, linear_schedule,
                        load_checkpoint, save_checkpoint, train)
from .errors import EmdmError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser():
    p = _Parser(prog="emdm", description=__doc__)
    p.add_argument("--version", action="version", version=f"emdm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic channel dataset")
    g.add_argument("--config", required=True, help="JSON channel/dataset config")
    g.add_argument("--out", required=True, help="output dataset path")

    t = sub.add_parser("train", help="train the energy-based diffusion model")
    t.add_argument("--data", required=True, help="dataset path")
    t.add_argument("--config", required=True, help="JSON training config")
    t.add_argument("--out", required=True, help="output checkpoint path")

    e = sub.add_parser("estimate", help="estimate one channel instance")
    e.add_argument("--ckpt", help="trained checkpoint (required for dm estimators)")
    e.add_argument("--data", help="dataset path (alternative config source)")
    e.add_argument("--snr-db", type=float, required=True)
    e.add_argument("--np", dest="n_p", type=int, required=True)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--estimator", default="dm-mh",
                   choices=list(bench_mod.ESTIMATORS))
    e.add_argument("--no-mh", action="store_true",
                   help="shortcut for --estimator dm-unadjusted")
    e.add_argument("--grad-scale", type=float, default=1.0)
    e.add_argument("--num-chains", type=int, default=1)
    e.add_argument("--temper", type=float, default=1.0)

    b = sub.add_parser("benchmark", help="run an NMSE sweep to CSV")
    b.add_argument("--config", required=True, help="JSON experiment config")
    b.add_argument("--out", required=True, help="output CSV path")
    return p


def _cmd_gen_data(args):
    with open(args.config) as fh:
        raw = json.load(fh)
    counts = {k: int(raw.pop(k, 0)) for k in ("n_train", "n_val", "n_test")}
    cfg = ChannelConfig(**raw)
    ds = build_dataset(cfg, counts["n_train"], counts["n_val"], counts["n_test"])
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} samples ({ds.n_train}/{ds.n_val}/{ds.n_test} "
          f"train/val/test) to {args.out}")
    return 0


def _cmd_train(args):
    with open(args.config) as fh:
        raw = json.load(fh)
    ds = load_dataset(args.data)
    net = NetConfig(n_rx=ds.config.n_rx, n_tx=ds.config.n_tx,
                    width=int(raw.get("width", 16)),
                    kernel=int(raw.get("kernel", 3)),
                    time_dim=int(raw.get("time_dim", 32)))
    schedule = linear_schedule(int(raw.get("t_max", 100)),
                               float(raw.get("beta_start", 1e-3)),
                               float(raw.get("beta_end", 0.2)))
    tc = TrainConfig(epochs=int(raw["epochs"]), batch_size=int(raw["batch_size"]),
                     lr=float(raw.get("lr", 1e-4)), seed=int(raw.get("seed", 0)),
                     checkpoint_every=int(raw.get("checkpoint_every", 50)),
                     checkpoint_path=args.out)
    model = EnergyModel(net, schedule, seed=tc.seed)
    meta = {
        "channel_config": ds.config.to_dict(),
        "normalization_scale": ds.normalization_scale,
        "n_train": ds.n_train, "n_val": ds.n_val, "n_test": ds.n_test,
    }
    model, history = train(model, training_matrix(ds), tc, meta=meta)
    save_checkpoint(args.out, model, train_config=tc, epoch=tc.epochs,
                    loss_history=history, meta=meta)
    print(f"trained {tc.epochs} epochs; final loss {history[-1]:.6g}; "
          f"checkpoint at {args.out}")
    return 0


def _estimate_sources(args):
    """(channel source meta, model) from --ckpt and/or --data."""
    if args.ckpt:
        model, _, meta = load_checkpoint(args.ckpt)
        cfg = ChannelConfig.from_dict(meta["channel_config"])
        return meta, cfg, model
    if args.data:
        ds = load_dataset(args.data)
        meta = {"normalization_scale": ds.normalization_scale,
                "n_train": ds.n_train, "n_val": ds.n_val, "n_test": ds.n_test}
        return meta, ds.config, None
    raise EmdmError("estimate requires --ckpt or --data")


def _cmd_estimate(args):
    estimator = "dm-unadjusted" if args.no_mh else args.estimator
    meta, ccfg, model = _estimate_sources(args)
    if estimator.startswith("dm-") and model is None:
        raise EmdmError("dm estimators need --ckpt")
    n_test = meta["n_test"]
    if n_test < 1:
        raise EmdmError("no test split recorded; cannot select a channel")
    idx = meta["n_train"] + meta["n_val"] + (args.seed % n_test)
    sample = regenerate_sample(ccfg, meta["normalization_scale"], idx)
    h_true = angular_to_real(sample.h_angular)
    problem = bench_mod.build_problem(args.seed, args.snr_db, args.n_p,
                                      h_true, ccfg.n_tx, ccfg.n_rx)
    if estimator == "rls":
        h_hat = rls_estimate(problem)
    elif estimator == "lmmse":
        if not args.data:
            raise EmdmError("lmmse needs --data for the training covariance")
        ds = load_dataset(args.data)
        h_hat = lmmse_estimate(lmmse_fit(training_matrix(ds)), problem)
    else:
        h_hat = bench_mod.dm_estimate(
            model, problem, streams.derive_seed(args.seed, streams.SAMPLER),
            mh_enabled=(estimator == "dm-mh"), grad_scale_s=args.grad_scale,
            num_chains=args.num_chains, temper=args.temper)
    ratio = bench_mod.nmse(h_hat, h_true)
    print(f"estimator={estimator} snr_db={args.snr_db:g} n_p={args.n_p} "
          f"seed={args.seed} nmse={ratio:.17g} nmse_db={bench_mod.nmse_db(ratio):.6g}")
    return 0


def _cmd_benchmark(args):
    cfg = bench_mod.ExperimentConfig.from_json(args.config)
    ds = load_dataset(cfg.dataset)
    model = None
    if any(e.startswith("dm-") for e in cfg.estimators):
        if not cfg.checkpoint:
            raise EmdmError("config must name a checkpoint for DM estimators")
        model, _, _ = load_checkpoint(cfg.checkpoint,
                                      expect_shape=(ds.config.n_rx, ds.config.n_tx))
    rows = bench_mod.run_benchmark(cfg, ds, model=model, out_path=args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    for key, db in sorted(bench_mod.aggregate_nmse_db(rows).items()):
        est, snr, npil = key
        print(f"  {est:14s} snr={snr:6.1f} dB  n_p={npil:3d}  "
              f"mean NMSE = {db:8.3f} dB")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "estimate": _cmd_estimate,
    "benchmark": _cmd_benchmark,
}


def cli_main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (EmdmError, OSError, json.JSONDecodeError) as exc:
        print(f"emdm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
