"""NMSE benchmark harness: SNR / pilot-density sweeps over the estimator
suite, with every row re-derivable from the seeds it records.

Row seeds are constructed so that (seed mod n_test) selects the row's test
channel; together with the checkpoint metadata that makes a single scalar
seed sufficient to rebuild the pilot matrix, the noise draw, the channel
and the sampler stream of any row in isolation.
"""

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng as streams
from .baselines import lmmse_estimate, lmmse_fit, rls_estimate
from .channels import angular_to_real, training_matrix
from .errors import ConfigError, MissingCheckpoint, ZeroReference
from .measurement import build_operator, gen_pilots, sigma2_from_snr, synthesize
from .sampler import SamplerConfig, sample_posterior

CSV_HEADER = "estimator,snr_db,n_p,alpha,trial,seed,nmse,wall_time_ms"
ESTIMATORS = ("rls", "lmmse", "dm-unadjusted", "dm-mh")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    snr_db: tuple
    n_p: tuple
    estimators: tuple = ("rls", "lmmse")
    checkpoint: str = None
    trials: int = 100
    grad_scale_s: float = 1.0
    seed: int = 0
    num_chains: int = 1
    temper: float = 1.0
    fixed_pilots: bool = False
    deterministic_timing: bool = False
    ddpm_std_sqrt: bool = True
    score_at_prev_t: bool = True

    def __post_init__(self):
        if not self.snr_db or not self.n_p:
            raise ConfigError("snr_db and n_p grids must be nonempty")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.num_chains < 1:
            raise ConfigError("num_chains must be >= 1")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or not self.estimators:
            raise ConfigError(f"unknown estimators {sorted(bad)}; "
                              f"choose from {list(ESTIMATORS)}")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("snr_db", "n_p", "estimators"):
            if key in raw:
                raw[key] = tuple(raw[key])
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class ResultRow:
    estimator: str
    snr_db: float
    n_p: int
    alpha: float
    trial: int
    seed: int
    nmse: float
    wall_time_ms: float

    def csv_line(self):
        return (f"{self.estimator},{self.snr_db:.17g},{self.n_p},"
                f"{self.alpha:.17g},{self.trial},{self.seed},"
                f"{self.nmse:.17g},{self.wall_time_ms:.17g}")


def nmse(h_hat, h_true):
    """||h_hat - h_true||^2 / ||h_true||^2 (a ratio; convert to dB after
    averaging ratios across trials)."""
    h_hat = np.asarray(h_hat)
    h_true = np.asarray(h_true)
    if h_hat.shape != h_true.shape:
        raise ZeroReference(f"length mismatch {h_hat.shape} vs {h_true.shape}")
    denom = float(h_true @ h_true)
    if denom == 0.0:
        raise ZeroReference("reference vector has zero norm")
    diff = h_hat - h_true
    return float(diff @ diff) / denom


def nmse_db(ratio):
    return 10.0 * np.log10(ratio)


def row_seed(base_seed, snr_idx, np_idx, trial, n_test):
    """Scalar row seed; constructed so seed % n_test == trial % n_test
    (the round-robin test-channel index survives in the seed itself)."""
    s0 = streams.derive_seed(base_seed, streams.ROW, snr_idx, np_idx, trial)
    return s0 - (s0 % n_test) + (trial % n_test)


def build_problem(seed, snr_db, n_p, channel_real, n_t, n_r,
                  pilot_seed=None):
    """Measurement problem for one row, fully derived from the row seed."""
    pilots = gen_pilots(n_t, n_p, seed if pilot_seed is None else pilot_seed)
    a = build_operator(pilots, n_r)
    sigma2 = sigma2_from_snr(snr_db, n_t)
    noise = streams.derive_rng(seed, streams.NOISE)
    return synthesize(channel_real, a, sigma2, noise, n_p, n_t, n_r)


def dm_estimate(model, problem, seed, mh_enabled, grad_scale_s=1.0,
                num_chains=1, temper=1.0, ddpm_std_sqrt=True,
                score_at_prev_t=True):
    """Posterior-sampling estimate; chains average when num_chains > 1."""
    outs = []
    for chain in range(num_chains):
        cfg = SamplerConfig(grad_scale_s=grad_scale_s, mh_enabled=mh_enabled,
                            seed=streams.derive_seed(seed, streams.CHAIN, chain),
                            temper=temper, ddpm_std_sqrt=ddpm_std_sqrt,
                            score_at_prev_t=score_at_prev_t)
        h, _ = sample_posterior(model, problem, cfg)
        outs.append(h)
    return np.mean(outs, axis=0)


def _estimate_one(est, problem, seed, model, lmmse_model, cfg):
    if est == "rls":
        return rls_estimate(problem)
    if est == "lmmse":
        return lmmse_estimate(lmmse_model, problem)
    return dm_estimate(model, problem,
                       streams.derive_seed(seed, streams.SAMPLER),
                       mh_enabled=(est == "dm-mh"),
                       grad_scale_s=cfg.grad_scale_s,
                       num_chains=cfg.num_chains,
                       temper=cfg.temper,
                       ddpm_std_sqrt=cfg.ddpm_std_sqrt,
                       score_at_prev_t=cfg.score_at_prev_t)


def run_benchmark(cfg, dataset, model=None, out_path=None):
    """Execute the grid; returns the rows and optionally streams them to CSV.

    Rows appear in deterministic grid order (snr, n_p, trial, estimator);
    grid points run on a worker pool capped by EMDM_THREADS. Each row's
    problem is derived from its seed only, so results are independent of
    the execution schedule.
    """
    needs_model = any(e.startswith("dm-") for e in cfg.estimators)
    if needs_model and model is None:
        raise MissingCheckpoint("a trained checkpoint is required for DM estimators")
    if model is not None and model.state_dim != 2 * dataset.config.n_rx * dataset.config.n_tx:
        raise ConfigError("checkpoint architecture does not match the dataset")
    n_test = dataset.n_test
    if n_test < 1:
        raise ConfigError("dataset has no test split")
    lmmse_model = lmmse_fit(training_matrix(dataset)) if "lmmse" in cfg.estimators else None
    n_t, n_r = dataset.config.n_tx, dataset.config.n_rx
    test = dataset.test_samples()

    def task(args):
        snr_idx, np_idx, trial = args
        snr = cfg.snr_db[snr_idx]
        npil = cfg.n_p[np_idx]
        seed = row_seed(cfg.seed, snr_idx, np_idx, trial, n_test)
        h_true = angular_to_real(test[seed % n_test].h_angular)
        pilot_seed = (streams.derive_seed(cfg.seed, streams.PILOT, np_idx)
                      if cfg.fixed_pilots else None)
        problem = build_problem(seed, snr, npil, h_true, n_t, n_r, pilot_seed)
        rows = []
        for est in cfg.estimators:
            t0 = time.perf_counter()
            h_hat = _estimate_one(est, problem, seed, model, lmmse_model, cfg)
            elapsed = 0.0 if cfg.deterministic_timing else (time.perf_counter() - t0) * 1e3
            rows.append(ResultRow(estimator=est, snr_db=float(snr), n_p=int(npil),
                                  alpha=npil / n_t, trial=trial, seed=seed,
                                  nmse=nmse(h_hat, h_true), wall_time_ms=elapsed))
        return rows

    grid = [(si, pi, k)
            for si in range(len(cfg.snr_db))
            for pi in range(len(cfg.n_p))
            for k in range(cfg.trials)]
    workers = int(os.environ.get("EMDM_THREADS", "0") or 0) or (os.cpu_count() or 1)
    out = []
    writer = open(out_path, "w", newline="\n") if out_path else None
    try:
        if writer:
            writer.write(CSV_HEADER + "\n")
            writer.flush()
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(task, grid):
                for row in rows:
                    out.append(row)
                    if writer:
                        writer.write(row.csv_line() + "\n")
                        writer.flush()
    finally:
        if writer:
            writer.close()
    return out


def aggregate_nmse_db(rows):
    """Mean NMSE ratio per (estimator, snr_db, n_p), converted to dB."""
    acc = {}
    for r in rows:
        acc.setdefault((r.estimator, r.snr_db, r.n_p), []).append(r.nmse)
    return {key: nmse_db(float(np.mean(vals))) for key, vals in acc.items()}
