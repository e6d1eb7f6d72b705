"""Synthetic clustered geometric MIMO channels and the angular-domain map.

Channels are sums of plane-wave paths over half-wavelength uniform linear
arrays; cluster centers are uniform on [-pi/3, pi/3] and rays scatter
around them with a Gaussian angle spread. The per-path scaling keeps
E|h_ij|^2 = 1 before the dataset-level normalization.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import rng as streams
from .errors import DimensionMismatch, FormatError, InvalidRange, TruncatedFile
from .linalg import dft_matrix, unvec, vec

_MAGIC = b"EMDM"
_VERSION = 1


@dataclass(frozen=True)
class ChannelConfig:
    n_tx: int
    n_rx: int
    n_clusters: int = 3
    rays_per_cluster: int = 10
    angle_spread_deg: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for field in ("n_tx", "n_rx", "n_clusters", "rays_per_cluster"):
            if getattr(self, field) < 1:
                raise InvalidRange(f"{field} must be >= 1")
        if not 0.0 < self.angle_spread_deg <= 30.0:
            raise InvalidRange("angle_spread_deg must lie in (0, 30]")

    def to_dict(self):
        return {
            "n_tx": self.n_tx, "n_rx": self.n_rx,
            "n_clusters": self.n_clusters,
            "rays_per_cluster": self.rays_per_cluster,
            "angle_spread_deg": self.angle_spread_deg,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in (
            "n_tx", "n_rx", "n_clusters", "rays_per_cluster",
            "angle_spread_deg", "seed")})


@dataclass(frozen=True)
class ChannelSample:
    h_spatial: np.ndarray   # complex (n_rx, n_tx)
    h_angular: np.ndarray   # complex (n_rx * n_tx,)


@dataclass(frozen=True)
class ChannelDataset:
    config: ChannelConfig
    samples: list
    normalization_scale: float
    n_train: int
    n_val: int
    n_test: int

    def train_samples(self):
        return self.samples[:self.n_train]

    def val_samples(self):
        return self.samples[self.n_train:self.n_train + self.n_val]

    def test_samples(self):
        return self.samples[self.n_train + self.n_val:]


def steering_vector(n, angle_rad):
    """ULA response exp(j*pi*k*sin(angle)), k = 0..n-1 (||.||^2 = n)."""
    if n < 1:
        raise InvalidRange("steering_vector requires n >= 1")
    return np.exp(1j * np.pi * np.arange(n) * np.sin(angle_rad))


def to_angular(h_spatial, f_t, f_r):
    """Angular-domain vector h_ad with vec(H) = (F_T^H kron F_R) h_ad.

    Computed as h_ad = (F_T kron F_R^H) vec(H) via the Kronecker-vec
    identity, without forming the Kronecker product.
    """
    n_r, n_t = h_spatial.shape
    if f_t.shape != (n_t, n_t) or f_r.shape != (n_r, n_r):
        raise DimensionMismatch("DFT matrix dimensions do not match the channel")
    return vec(f_r.conj().T @ h_spatial @ f_t.T)


def from_angular(h_angular, f_t, f_r):
    """Spatial channel H with vec(H) = (F_T^H kron F_R) h_angular."""
    n_t, n_r = f_t.shape[0], f_r.shape[0]
    if h_angular.shape != (n_r * n_t,):
        raise DimensionMismatch("angular vector length does not match DFT sizes")
    x = unvec(h_angular, n_r, n_t)
    return f_r @ x @ f_t.conj()


def angular_to_real(h_angular):
    """Fixed real embedding [Re; Im] of the angular channel (length N)."""
    return np.concatenate([h_angular.real, h_angular.imag])


def real_to_angular(v):
    n = v.shape[0] // 2
    return v[:n] + 1j * v[n:]


def generate_channel(cfg, rng, f_t=None, f_r=None):
    """One channel draw from the clustered geometric model.

    Paths are generated as H = (1/sqrt(L)) * sum_p g_p a_rx(phi_p) a_tx(theta_p)^H
    with g_p ~ CN(0,1), so E|h_ij|^2 = 1. Deterministic given the stream.
    """
    if f_t is None:
        f_t = dft_matrix(cfg.n_tx)
    if f_r is None:
        f_r = dft_matrix(cfg.n_rx)
    spread = np.deg2rad(cfg.angle_spread_deg)
    centers = rng.uniform(-np.pi / 3, np.pi / 3, size=(cfg.n_clusters, 2))
    offsets = rng.normal(0.0, spread, size=(cfg.n_clusters, cfg.rays_per_cluster, 2))
    gre = rng.standard_normal((cfg.n_clusters, cfg.rays_per_cluster))
    gim = rng.standard_normal((cfg.n_clusters, cfg.rays_per_cluster))
    gains = (gre + 1j * gim) / np.sqrt(2.0)
    h = np.zeros((cfg.n_rx, cfg.n_tx), dtype=np.complex128)
    for c in range(cfg.n_clusters):
        for r in range(cfg.rays_per_cluster):
            aoa = centers[c, 0] + offsets[c, r, 0]
            aod = centers[c, 1] + offsets[c, r, 1]
            h += gains[c, r] * np.outer(steering_vector(cfg.n_rx, aoa),
                                        steering_vector(cfg.n_tx, aod).conj())
    h /= np.sqrt(cfg.n_clusters * cfg.rays_per_cluster)
    h_ad = to_angular(h, f_t, f_r)
    # canonicalize the spatial part through the angular map so that a
    # save/load round trip reproduces the sample bit-exactly
    return ChannelSample(h_spatial=from_angular(h_ad, f_t, f_r), h_angular=h_ad)


def build_dataset(cfg, n_train, n_val=0, n_test=0):
    """Generate train/val/test splits with one global normalization scale.

    Per-sample streams derive from (cfg.seed, sample index); the scale is
    the rms entry magnitude over the training split only and is applied to
    every split, so E|h_ij|^2 over the training split is exactly 1.
    """
    if n_train < 1:
        raise InvalidRange("n_train must be >= 1")
    f_t = dft_matrix(cfg.n_tx)
    f_r = dft_matrix(cfg.n_rx)
    total = n_train + n_val + n_test
    raw = [generate_channel(cfg, streams.derive_rng(cfg.seed, streams.SAMPLE, i), f_t, f_r)
           for i in range(total)]
    power = np.mean([np.mean(np.abs(s.h_angular) ** 2) for s in raw[:n_train]])
    scale = float(np.sqrt(power))
    # normalize the angular vector and rebuild the spatial part from it, the
    # same order of operations load_dataset uses, so round trips are bit-exact
    samples = [ChannelSample(h_spatial=from_angular(s.h_angular / scale, f_t, f_r),
                             h_angular=s.h_angular / scale)
               for s in raw]
    return ChannelDataset(config=cfg, samples=samples, normalization_scale=scale,
                          n_train=n_train, n_val=n_val, n_test=n_test)


def regenerate_sample(cfg, normalization_scale, index):
    """Re-create dataset sample `index` from config metadata alone."""
    f_t = dft_matrix(cfg.n_tx)
    f_r = dft_matrix(cfg.n_rx)
    s = generate_channel(cfg, streams.derive_rng(cfg.seed, streams.SAMPLE, index), f_t, f_r)
    h_ad = s.h_angular / normalization_scale
    return ChannelSample(h_spatial=from_angular(h_ad, f_t, f_r), h_angular=h_ad)


def training_matrix(dataset):
    """Training split stacked as real vectors, shape (K, 2*n_rx*n_tx)."""
    return np.stack([angular_to_real(s.h_angular) for s in dataset.train_samples()])


# --- persistence -------------------------------------------------------------
#
# Little-endian binary. Header: magic "EMDM", version u32, n_rx u32,
# n_tx u32, sample count u64, float width u8 (8), normalization_scale f64,
# length-prefixed JSON config blob. Body: per sample, the angular-domain
# vector as interleaved (re, im) f64 in column order.


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFile(f"file ended while reading {what}")
    return data


def save_dataset(ds, path):
    cfg_blob = json.dumps({
        "config": ds.config.to_dict(),
        "n_train": ds.n_train, "n_val": ds.n_val, "n_test": ds.n_test,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIQB", _VERSION, ds.config.n_rx, ds.config.n_tx,
                             len(ds.samples), 8))
        fh.write(struct.pack("<d", ds.normalization_scale))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        for s in ds.samples:
            inter = np.empty(2 * s.h_angular.size)
            inter[0::2] = s.h_angular.real
            inter[1::2] = s.h_angular.imag
            fh.write(inter.astype("<f8").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise FormatError("bad magic; not a channel dataset file")
        version, n_rx, n_tx, count, width = struct.unpack(
            "<IIIQB", _read_exact(fh, 21, "header"))
        if version != _VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        if width != 8:
            raise FormatError(f"unsupported float width {width}")
        (scale,) = struct.unpack("<d", _read_exact(fh, 8, "scale"))
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        meta = json.loads(_read_exact(fh, blob_len, "config blob"))
        cfg = ChannelConfig.from_dict(meta["config"])
        if cfg.n_rx != n_rx or cfg.n_tx != n_tx:
            raise FormatError("header dimensions disagree with config blob")
        f_t = dft_matrix(n_tx)
        f_r = dft_matrix(n_rx)
        per = 2 * n_rx * n_tx * 8
        samples = []
        for i in range(count):
            inter = np.frombuffer(_read_exact(fh, per, f"sample {i}"), dtype="<f8")
            h_ad = inter[0::2] + 1j * inter[1::2]
            samples.append(ChannelSample(h_spatial=from_angular(h_ad, f_t, f_r),
                                         h_angular=h_ad))
    return ChannelDataset(config=cfg, samples=samples, normalization_scale=scale,
                          n_train=meta["n_train"], n_val=meta["n_val"],
                          n_test=meta["n_test"])
