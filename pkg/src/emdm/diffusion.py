"""Energy-based diffusion model: noise schedule, denoiser CNN, the scalar
energy f(h, t) = -0.5 ||h - d(h, t)||^2, its input gradient, the denoising
score-matching loss whose parameter gradient goes through that input
gradient, the training loop, and checkpoint persistence.
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng as streams
from .errors import (ArchitectureMismatch, EmptyBatch, FormatError,
                     IndexOutOfRange, InvalidRange, ShapeMismatch,
                     TrainingDiverged, TruncatedFile, VersionMismatch)

_MAGIC = b"EMCK"
_CKPT_VERSION = 1


# --- noise schedule -----------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed 1..T; index 0 is the t=0 sentinel (alpha_bar[0] = 1)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @property
    def t_max(self):
        return len(self.beta) - 1


def schedule_from_betas(betas):
    betas = np.asarray(betas, dtype=np.float64)
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise InvalidRange("betas must lie strictly inside (0, 1)")
    if np.any(np.diff(betas) <= 0) and len(betas) > 1:
        raise InvalidRange("betas must be strictly increasing")
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    beta_tilde = np.zeros_like(beta)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         beta_tilde=beta_tilde)


def linear_schedule(t_max=100, beta_start=1e-3, beta_end=0.2):
    """Linearly spaced betas, inclusive of both endpoints."""
    if t_max < 1:
        raise InvalidRange("t_max must be >= 1")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise InvalidRange("need 0 < beta_start < beta_end < 1")
    return schedule_from_betas(np.linspace(beta_start, beta_end, t_max))


def forward_diffuse(h0, t, eps, schedule):
    """h_t = sqrt(abar_t) h0 + sqrt(1 - abar_t) eps."""
    if not 1 <= t <= schedule.t_max:
        raise IndexOutOfRange(f"t={t} outside 1..{schedule.t_max}")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * h0 + np.sqrt(1.0 - ab) * eps


# --- denoiser network ----------------------------------------------------------


@dataclass(frozen=True)
class NetConfig:
    n_rx: int
    n_tx: int
    width: int = 16
    kernel: int = 3
    time_dim: int = 32

    def __post_init__(self):
        if self.width < 1 or self.n_rx < 1 or self.n_tx < 1:
            raise InvalidRange("network dimensions must be >= 1")
        if self.kernel % 2 != 1:
            raise InvalidRange("kernel size must be odd")

    @property
    def state_dim(self):
        return 2 * self.n_rx * self.n_tx

    def to_dict(self):
        return {"n_rx": self.n_rx, "n_tx": self.n_tx, "width": self.width,
                "kernel": self.kernel, "time_dim": self.time_dim}


def param_shapes(cfg):
    c, k, d = cfg.width, cfg.kernel, cfg.time_dim
    return {
        "temb_w": (d, c), "temb_b": (c,),
        "conv1_k": (c, 2, k, k), "conv1_b": (c,),
        "conv2_k": (c, c, k, k), "conv2_b": (c,),
        "conv3_k": (2, c, k, k), "conv3_b": (2,),
    }


def init_params(cfg, seed):
    """Uniform(-1/sqrt(fan_in)) kernels; the last conv starts at 1/10 scale
    so the initial denoiser output is small and the initial input-gradient
    of the energy is close to -h."""
    rng = streams.derive_rng(seed, streams.PARAM_INIT)
    k = cfg.kernel
    fan = {"temb_w": cfg.time_dim, "conv1_k": 2 * k * k,
           "conv2_k": cfg.width * k * k, "conv3_k": cfg.width * k * k}
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            a = 1.0 / math.sqrt(fan[name])
            if name == "conv3_k":
                a *= 0.1
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def vec_to_field(v, n_rx, n_tx):
    """Real state vector(s) [Re; Im] -> network field (..., 2, n_rx, n_tx).

    The angular vector is column-stacked, so each half reshapes through
    (n_tx, n_rx) and transposes.
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[None, :]
    b = v.shape[0]
    halves = v.reshape(b, 2, n_tx, n_rx).transpose(0, 1, 3, 2)
    out = np.ascontiguousarray(halves)
    return out[0] if single else out


def field_to_vec(f):
    """Inverse of vec_to_field."""
    f = np.asarray(f)
    single = f.ndim == 3
    if single:
        f = f[None]
    b = f.shape[0]
    v = f.transpose(0, 1, 3, 2).reshape(b, -1)
    out = np.ascontiguousarray(v)
    return out[0] if single else out


def _build_denoiser(g, cfg, h, t, p):
    emb = g.time_embed(t, cfg.time_dim)
    e1 = g.silu(g.add_bias(g.matmul(emb, p["temb_w"]), p["temb_b"]))
    c1 = g.add_bias(g.add_bias(g.conv2d(h, p["conv1_k"]), p["conv1_b"]), e1)
    a1 = g.silu(c1)
    a2 = g.silu(g.add_bias(g.conv2d(a1, p["conv2_k"]), p["conv2_b"]))
    return g.add_bias(g.conv2d(a2, p["conv3_k"]), p["conv3_b"])


def build_energy_graph(cfg, batch):
    """Graph computing the summed-over-batch energy f = -0.5 ||h - d||^2.

    Items are independent, so the gradient of the batch sum with respect to
    the batched input recovers the per-item input gradients.
    """
    g = ad.Graph()
    h = g.input((batch, 2, cfg.n_rx, cfg.n_tx), "h")
    t = g.input((batch, 1), "t")
    pnodes = {name: g.input(shape, name) for name, shape in param_shapes(cfg).items()}
    d = _build_denoiser(g, cfg, h, t, pnodes)
    f = g.smul(g.sum_all(g.square(g.sub(h, d))), -0.5)
    return g, f, h, t, pnodes


class EnergyModel:
    """Denoiser network plus schedule; exposes the scalar energy and its
    exact input gradient (both via the autodiff graph, including the
    Jacobian-transpose term of the denoiser).

    Graphs take the parameters as inputs, so the compiled graphs are reused
    across training steps and across models of identical architecture.
    """

    def __init__(self, net_config, schedule, params=None, seed=0):
        self.net_config = net_config
        self.schedule = schedule
        self.params = params if params is not None else init_params(net_config, seed)
        self._cache = {}

    @property
    def state_dim(self):
        return self.net_config.state_dim

    def _fe(self, batch):
        key = ("fe", batch)
        if key not in self._cache:
            g, f, h, t, _ = build_energy_graph(self.net_config, batch)
            g2, (eps,) = ad.gradient(g, f, [h])
            self._cache[key] = (g2, f, eps)
        return self._cache[key]

    def _loss(self, batch):
        key = ("loss", batch)
        if key not in self._cache:
            cfg = self.net_config
            g, f, h, t, pnodes = build_energy_graph(cfg, batch)
            target = g.input((batch, 2, cfg.n_rx, cfg.n_tx), "eps_target")
            g2, (eps,) = ad.gradient(g, f, [h])
            diff = g2.sub(target, eps)
            loss = g2.smul(g2.sum_all(g2.square(diff)), 1.0 / batch)
            g3, grad_ids = ad.gradient(g2, loss, [pnodes[n] for n in sorted(pnodes)])
            self._cache[key] = (g3, loss, sorted(pnodes), grad_ids)
        return self._cache[key]

    def _bindings(self, h_batch, t_batch):
        cfg = self.net_config
        b = {"h": vec_to_field(h_batch, cfg.n_rx, cfg.n_tx),
             "t": (np.asarray(t_batch, dtype=np.float64) / self.schedule.t_max).reshape(-1, 1)}
        b.update(self.params)
        return b

    def energy(self, h, t):
        """f(h, t) for a single state vector h of length 2*n_rx*n_tx."""
        if h.shape != (self.state_dim,):
            raise ShapeMismatch(f"state length {h.shape} != {self.state_dim}")
        g2, f, _ = self._fe(1)
        return float(ad.evaluate(g2, self._bindings(h[None, :], [t]), [f])[0])

    def epsilon(self, h, t):
        """Exact gradient of the energy with respect to h."""
        if h.shape != (self.state_dim,):
            raise ShapeMismatch(f"state length {h.shape} != {self.state_dim}")
        g2, _, eps = self._fe(1)
        out = ad.evaluate(g2, self._bindings(h[None, :], [t]), [eps])[0]
        return field_to_vec(out[0])

    def energy_and_epsilon(self, h, t):
        g2, f, eps = self._fe(1)
        fv, ev = ad.evaluate(g2, self._bindings(h[None, :], [t]), [f, eps])
        return float(fv), field_to_vec(ev[0])


def loss_ebm(model, h0_batch, rng):
    """Denoising score-matching loss through the energy's input gradient.

    Per item: t ~ Uniform{1..T}, eps ~ N(0, I), h_t by forward diffusion,
    contribution ||eps - grad_h f(h_t, t)||^2; returns the batch mean and
    the parameter gradients obtained by differentiating through grad_h f.
    """
    h0_batch = np.atleast_2d(np.asarray(h0_batch, dtype=np.float64))
    b = h0_batch.shape[0]
    if b == 0:
        raise EmptyBatch("empty training batch")
    sched = model.schedule
    t_idx = rng.integers(1, sched.t_max + 1, size=b)
    eps = rng.standard_normal(h0_batch.shape)
    ab = sched.alpha_bar[t_idx][:, None]
    h_t = np.sqrt(ab) * h0_batch + np.sqrt(1.0 - ab) * eps
    g3, loss_id, names, grad_ids = model._loss(b)
    cfg = model.net_config
    bindings = model._bindings(h_t, t_idx)
    bindings["eps_target"] = vec_to_field(eps, cfg.n_rx, cfg.n_tx)
    vals = ad.evaluate(g3, bindings, [loss_id] + list(grad_ids))
    loss = float(vals[0])
    grads = dict(zip(names, vals[1:]))
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float = 1e-4
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 50
    checkpoint_path: str = None

    def to_dict(self):
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "lr": self.lr, "seed": self.seed, "betas": list(self.betas),
                "adam_eps": self.adam_eps,
                "checkpoint_every": self.checkpoint_every}


def train(model, data, config, meta=None, state=None, start_epoch=0, history=None):
    """Train on data of shape (K, state_dim); returns (model, loss_history).

    Deterministic given config.seed: shuffling and the per-batch noise
    streams derive from (seed, epoch). Writes a checkpoint every
    checkpoint_every epochs and at the end when checkpoint_path is set.
    NaN loss aborts with the epoch/batch recorded in the exception.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise EmptyBatch("training data must be a nonempty (K, N) array")
    if data.shape[1] != model.state_dim:
        raise ShapeMismatch(f"data dim {data.shape[1]} != state {model.state_dim}")
    history = list(history) if history else []
    state = state if state is not None else ad.adam_init(model.params)
    step = start_epoch * math.ceil(data.shape[0] / config.batch_size)
    for epoch in range(start_epoch, config.epochs):
        order = streams.derive_rng(config.seed, streams.SHUFFLE, epoch).permutation(data.shape[0])
        noise_rng = streams.derive_rng(config.seed, streams.LOSS, epoch)
        for lo in range(0, data.shape[0], config.batch_size):
            batch = data[order[lo:lo + config.batch_size]]
            loss, grads = loss_ebm(model, batch, noise_rng)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch} offset {lo}")
            step += 1
            model.params, state = ad.adam_step(
                model.params, grads, state, lr=config.lr, betas=config.betas,
                eps=config.adam_eps, step=step)
            history.append(loss)
        done = epoch + 1
        if config.checkpoint_path and (done % config.checkpoint_every == 0
                                       or done == config.epochs):
            save_checkpoint(config.checkpoint_path, model, state=state,
                            train_config=config, epoch=done,
                            loss_history=history, meta=meta)
    return model, history


# --- checkpoint persistence -----------------------------------------------------
#
# Little-endian binary: magic "EMCK", version u32, length-prefixed JSON
# metadata (architecture, schedule betas digest, training config, channel
# config, epoch, loss history), then named f64 tensors
# (u32 name length, name, u32 ndim, u64 dims..., payload).


def _write_tensors(fh, tensors):
    fh.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        nb = name.encode()
        fh.write(struct.pack("<I", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(arr.astype("<f8").tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFile(f"file ended while reading {what}")
    return data


def _read_tensors(fh):
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
        name = _read_exact(fh, nlen, "tensor name").decode()
        (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
        shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, "tensor dim"))[0]
                      for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        payload = _read_exact(fh, 8 * size, f"tensor {name}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out


def config_digest(d):
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, model, state=None, train_config=None, epoch=0,
                    loss_history=(), meta=None):
    meta_blob = {
        "net": model.net_config.to_dict(),
        "t_max": model.schedule.t_max,
        "epoch": epoch,
        "loss_history": [float(x) for x in loss_history],
        "train_config": train_config.to_dict() if train_config else None,
    }
    if meta:
        meta_blob.update(meta)
    if "channel_config" in meta_blob and meta_blob["channel_config"]:
        meta_blob["channel_config_digest"] = config_digest(meta_blob["channel_config"])
    tensors = {f"param.{k}": v for k, v in model.params.items()}
    tensors["schedule.beta"] = model.schedule.beta[1:]
    if state is not None:
        tensors.update({f"adam.m.{k}": v for k, v in state.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in state.v.items()})
    blob = json.dumps(meta_blob, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_tensors(fh, tensors)


def load_checkpoint(path, expect_shape=None):
    """Load (model, adam_state, meta). expect_shape, when given as
    (n_rx, n_tx), must match the stored architecture."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise FormatError("bad magic; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _CKPT_VERSION:
            raise VersionMismatch(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        meta = json.loads(_read_exact(fh, blob_len, "metadata"))
        tensors = _read_tensors(fh)
    cfg = NetConfig(**meta["net"])
    if expect_shape is not None and (cfg.n_rx, cfg.n_tx) != tuple(expect_shape):
        raise ArchitectureMismatch(
            f"checkpoint is for (n_rx, n_tx)=({cfg.n_rx}, {cfg.n_tx}), "
            f"expected {tuple(expect_shape)}")
    params = {}
    for name, shape in param_shapes(cfg).items():
        key = f"param.{name}"
        if key not in tensors or tensors[key].shape != shape:
            raise ArchitectureMismatch(f"tensor {name} missing or misshaped")
        params[name] = tensors[key]
    schedule = schedule_from_betas(tensors["schedule.beta"])
    if schedule.t_max != meta["t_max"]:
        raise ArchitectureMismatch("schedule length disagrees with metadata")
    model = EnergyModel(cfg, schedule, params=params)
    state = None
    if any(k.startswith("adam.m.") for k in tensors):
        state = ad.AdamState(
            m={k: tensors[f"adam.m.{k}"] for k in params},
            v={k: tensors[f"adam.v.{k}"] for k in params})
    return model, state, meta
