"""Tanh-MLP beta-VAE with hand-written backpropagation and Adam.

Weights are stored input-major: a layer computes ``h @ W + b`` with ``W`` of
shape (fan_in, fan_out).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as _rng
from .generative import MixingModel, ground_truth_posterior
from .linalg_stats import GaussianMoments, kl_diag_rows
from .linear_bvae import signed_permutations

LOG_2PI = float(np.log(2.0 * np.pi))
HIDDEN = (256, 200, 200)
MAGIC = b"BVAE"
FORMAT_VERSION = 1


class Divergence(FloatingPointError):
    pass


Layer = tuple  # (W, b)


def _glorot(g: np.random.Generator, fan_in: int, fan_out: int) -> Layer:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    W = lim * (2.0 * _rng.uniform_open(g, (fan_in, fan_out)) - 1.0)
    return W, np.zeros(fan_out)


@dataclass
class MlpVae:
    encoder: list          # hidden (W, b) layers, tanh
    mu_head: Layer
    logvar_head: Layer
    decoder: list          # hidden layers then a linear output layer

    def __post_init__(self):
        if len(self.decoder) != len(self.encoder) + 1:
            raise ValueError("decoder must have one more layer than the encoder trunk")
        dims_in = self.n_in
        for W, b in self.encoder:
            _check_layer(W, b, dims_in)
            dims_in = W.shape[1]
        for W, b in (self.mu_head, self.logvar_head):
            _check_layer(W, b, dims_in)
        if self.mu_head[0].shape != self.logvar_head[0].shape:
            raise ValueError("mean and log-variance heads must have the same shape")
        dims_in = self.k
        for W, b in self.decoder:
            _check_layer(W, b, dims_in)
            dims_in = W.shape[1]
        if dims_in != self.n_in:
            raise ValueError(f"decoder output {dims_in} != input dimension {self.n_in}")

    @property
    def n_in(self) -> int:
        return self.encoder[0][0].shape[0] if self.encoder else self.mu_head[0].shape[0]

    @property
    def k(self) -> int:
        return self.mu_head[0].shape[1]

    @classmethod
    def init(cls, n_in: int, k: int, seed: int, hidden=HIDDEN) -> "MlpVae":
        g = _rng.stream(seed, "mlp_init", n_in, k, tuple(hidden))
        sizes = [n_in, *hidden]
        enc = [_glorot(g, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        mu = _glorot(g, sizes[-1], k)
        lv = _glorot(g, sizes[-1], k)
        dsizes = [k, *reversed(hidden), n_in]
        dec = [_glorot(g, a, b) for a, b in zip(dsizes[:-1], dsizes[1:])]
        return cls(enc, mu, lv, dec)

    @classmethod
    def zeros(cls, n_in: int, k: int, hidden=HIDDEN) -> "MlpVae":
        z = lambda a, b: (np.zeros((a, b)), np.zeros(b))  # noqa: E731
        sizes = [n_in, *hidden]
        dsizes = [k, *reversed(hidden), n_in]
        return cls(
            [z(a, b) for a, b in zip(sizes[:-1], sizes[1:])],
            z(sizes[-1], k), z(sizes[-1], k),
            [z(a, b) for a, b in zip(dsizes[:-1], dsizes[1:])],
        )

    def layers(self) -> list:
        return [*self.encoder, self.mu_head, self.logvar_head, *self.decoder]

    @classmethod
    def from_layers(cls, layers) -> "MlpVae":
        n = len(layers)
        if n < 3 or (n - 3) % 2:
            raise ValueError(f"invalid layer count {n}")
        h = (n - 3) // 2
        return cls(list(layers[:h]), layers[h], layers[h + 1], list(layers[h + 2:]))

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers() for a in layer]

    def copy(self) -> "MlpVae":
        return MlpVae.from_layers([(W.copy(), b.copy()) for W, b in self.layers()])

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec: np.ndarray) -> "MlpVae":
        out, i = [], 0
        for W, b in self.layers():
            Wn = vec[i:i + W.size].reshape(W.shape)
            i += W.size
            bn = vec[i:i + b.size].copy()
            i += b.size
            out.append((Wn.copy(), bn))
        if i != vec.size:
            raise ValueError(f"vector has {vec.size} entries, network has {i}")
        return MlpVae.from_layers(out)


def _check_layer(W, b, fan_in):
    if W.ndim != 2 or b.shape != (W.shape[1],):
        raise ValueError(f"bad layer shapes {W.shape}, {b.shape}")
    if W.shape[0] != fan_in:
        raise ValueError(f"layer expects {W.shape[0]} inputs, previous layer gives {fan_in}")


def _encode_batch(net: MlpVae, X: np.ndarray):
    hs = [X]
    for W, b in net.encoder:
        hs.append(np.tanh(hs[-1] @ W + b))
    mu = hs[-1] @ net.mu_head[0] + net.mu_head[1]
    logvar = hs[-1] @ net.logvar_head[0] + net.logvar_head[1]
    return hs, mu, logvar


def _decode_batch(net: MlpVae, Z: np.ndarray):
    gs = [Z]
    for W, b in net.decoder[:-1]:
        gs.append(np.tanh(gs[-1] @ W + b))
    W, b = net.decoder[-1]
    return gs, gs[-1] @ W + b


def _check_input(net: MlpVae, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise ValueError(f"expected (n, {net.n_in}) input, got {X.shape}")
    return X


def encode(net: MlpVae, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched encoder: (means, variances), each (n, k)."""
    _, mu, logvar = _encode_batch(net, _check_input(net, X))
    return mu, np.exp(logvar)


def decode(net: MlpVae, Z: np.ndarray) -> np.ndarray:
    return _decode_batch(net, np.atleast_2d(np.asarray(Z, dtype=float)))[1]


def forward_encode(net: MlpVae, x: np.ndarray) -> GaussianMoments:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("forward_encode takes a single input vector")
    mu, var = encode(net, x[None, :])
    return GaussianMoments.diagonal(mu[0], var[0])


def reparameterize(moments: GaussianMoments, eps: np.ndarray) -> np.ndarray:
    cov = moments.cov
    if np.any(cov != np.diag(np.diag(cov))):
        raise ValueError("reparameterize needs diagonal moments")
    eps = np.asarray(eps, dtype=float)
    if eps.shape != moments.mean.shape:
        raise ValueError(f"eps shape {eps.shape} != {moments.mean.shape}")
    return moments.mean + np.sqrt(np.diag(cov)) * eps


def _kl_prior_rows(mu, logvar):
    return 0.5 * np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar, axis=1)


def loss_and_grad(net: MlpVae, X: np.ndarray, beta: float, eps: np.ndarray) -> tuple[float, MlpVae]:
    """Batch-mean beta-VAE objective and its gradient (an ascent direction).

    Per sample: -1/2 ||xhat - x||^2 - N/2 ln(2 pi) - beta KL(q(z|x) || N(0, I)),
    with z = mu + exp(logvar / 2) * eps.
    """
    X = _check_input(net, X)
    B, N = X.shape
    if B == 0:
        raise ValueError("empty batch")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (B, net.k):
        raise ValueError(f"eps must have shape {(B, net.k)}")

    with np.errstate(invalid="ignore", over="ignore"):
        hs, mu, logvar = _encode_batch(net, X)
        std = np.exp(0.5 * logvar)
        z = mu + std * eps
        gs, xhat = _decode_batch(net, z)
        resid = xhat - X
        kl = _kl_prior_rows(mu, logvar)
        value = float(np.mean(-0.5 * np.sum(resid * resid, axis=1) - 0.5 * N * LOG_2PI - beta * kl))
    if not np.isfinite(value):
        raise Divergence(f"objective is {value}")

    dec_grads = [None] * len(net.decoder)
    delta = -resid / B
    for i in range(len(net.decoder) - 1, -1, -1):
        W, _ = net.decoder[i]
        dec_grads[i] = (gs[i].T @ delta, delta.sum(axis=0))
        delta = delta @ W.T
        if i > 0:
            delta = delta * (1.0 - gs[i] ** 2)
    dz = delta
    dmu = dz - beta * mu / B
    dlv = 0.5 * dz * eps * std - 0.5 * beta * (np.exp(logvar) - 1.0) / B

    h = hs[-1]
    mu_g = (h.T @ dmu, dmu.sum(axis=0))
    lv_g = (h.T @ dlv, dlv.sum(axis=0))
    delta = (dmu @ net.mu_head[0].T + dlv @ net.logvar_head[0].T) * (1.0 - h ** 2)
    enc_grads = [None] * len(net.encoder)
    for i in range(len(net.encoder) - 1, -1, -1):
        W, _ = net.encoder[i]
        enc_grads[i] = (hs[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W.T) * (1.0 - hs[i] ** 2)
    return value, MlpVae(enc_grads, mu_g, lv_g, dec_grads)


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1.0
    epochs: int = 200
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 100
    seed: int = 0
    mc_samples_eval: int = 1000

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        for name in ("epochs", "batch_size", "mc_samples_eval"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be > 0")


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place ascent step along ``grads``."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p += self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(net: MlpVae, data: np.ndarray, cfg: TrainConfig) -> tuple[MlpVae, np.ndarray]:
    """Mini-batch Adam on the objective; returns the trained copy and the per-epoch mean objective.

    ``data`` should already be standardized. Shuffles and eps draws come from
    streams keyed by ``cfg.seed``, so a run is reproducible bit for bit.
    """
    data = _check_input(net, data)
    net = net.copy()
    params = net.arrays()
    opt = Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    g_shuffle = _rng.stream(cfg.seed, "train_shuffle")
    g_eps = _rng.stream(cfg.seed, "train_eps")
    n = data.shape[0]
    trace = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        order = g_shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            eps = _rng.normal(g_eps, (len(idx), net.k))
            try:
                value, grad = loss_and_grad(net, data[idx], cfg.beta, eps)
            except Divergence as exc:
                raise Divergence(f"training diverged at epoch {epoch}: {exc}") from None
            opt.step(params, grad.arrays())
            total += value * len(idx)
        trace[epoch] = total / n
    return net, trace


@dataclass(frozen=True)
class DeepSweepRecord:
    beta: float
    elbo: float
    tie: float
    recon: float
    ci_loss: float
    realization: int
    recon_se: float = 0.0


DEEP_CSV_FIELDS = ("beta", "realization", "elbo", "recon", "ci_loss", "tie", "recon_se")


def align_latents(mu, var, target_mean, E):
    """Signed permutation of latent axes minimising the mean KL to N(target_mean, E).

    Returns ``(perm, signs)``.
    """
    best, best_val = None, np.inf
    for perm, signs in signed_permutations(mu.shape[1]):
        val = float(np.mean(kl_diag_rows(mu[:, perm] * signs, var[:, perm], target_mean, E)))
        if val < best_val - 1e-12:
            best, best_val = (perm, signs), val
    return best


def evaluate(
    net: MlpVae,
    m: MixingModel,
    images: np.ndarray,
    positions: Optional[np.ndarray],
    cfg: TrainConfig,
    realization: int = 0,
    align: Optional[tuple[np.ndarray, np.ndarray]] = None,
    chunk: int = 100,
) -> DeepSweepRecord:
    """Objective terms and true inference error of a trained network.

    ``positions`` are the source-space observations A s + eta that generated
    each image; the ground-truth posterior is evaluated there. The latent
    gauge is fitted on ``align`` (images, positions), defaulting to the
    evaluation data itself.
    """
    if positions is None:
        raise ValueError("evaluate needs the generating positions for the true inference error")
    images = _check_input(net, images)
    positions = np.asarray(positions, dtype=float)
    if positions.shape != (images.shape[0], m.N):
        raise ValueError(f"positions must have shape {(images.shape[0], m.N)}")
    if m.k != net.k:
        raise ValueError(f"mixing model has k={m.k}, network has k={net.k}")
    n, N = images.shape
    mu, logvar = _encode_batch(net, images)[1:]
    var = np.exp(logvar)

    g = _rng.stream(cfg.seed, "evaluate", realization)
    S = cfg.mc_samples_eval
    per_x = np.empty(n)
    for start in range(0, n, chunk):
        mb, vb, xb = mu[start:start + chunk], var[start:start + chunk], images[start:start + chunk]
        eps = _rng.normal(g, (S, len(xb), net.k))
        z = mb + np.sqrt(vb) * eps
        xhat = decode(net, z.reshape(-1, net.k)).reshape(S, len(xb), N)
        sq = np.sum((xhat - xb) ** 2, axis=2)
        per_x[start:start + chunk] = np.mean(-0.5 * (N * LOG_2PI + sq), axis=0)
    recon = float(np.mean(per_x))
    recon_se = float(np.std(per_x, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    ci = float(np.mean(_kl_prior_rows(mu, logvar)))

    truth = ground_truth_posterior(m)
    if align is None:
        a_mu, a_var, a_pos = mu, var, positions
    else:
        a_mu, a_lv = _encode_batch(net, _check_input(net, align[0]))[1:]
        a_var, a_pos = np.exp(a_lv), np.asarray(align[1], dtype=float)
    perm, signs = align_latents(a_mu, a_var, a_pos @ truth.F.T, truth.E)
    tie = float(np.mean(kl_diag_rows(mu[:, perm] * signs, var[:, perm], positions @ truth.F.T, truth.E)))
    return DeepSweepRecord(cfg.beta, recon - ci, tie, recon, ci, int(realization), recon_se)


def save_model(net: MlpVae, path) -> None:
    layers = net.layers()
    buf = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(layers))]
    for W, b in layers:
        buf.append(struct.pack("<II", *W.shape))
        buf.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        buf.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_model(path) -> MlpVae:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError("not a BVAE model file")
    if len(buf) < 12:
        raise ValueError("truncated model header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    off, layers = 12, []
    for _ in range(count):
        if off + 8 > len(buf):
            raise ValueError("truncated model file")
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        need = 8 * (rows * cols + cols)
        if off + need > len(buf):
            raise ValueError("truncated model file")
        W = np.frombuffer(buf, "<f8", rows * cols, off).reshape(rows, cols).astype(float)
        off += 8 * rows * cols
        b = np.frombuffer(buf, "<f8", cols, off).astype(float)
        off += 8 * cols
        layers.append((W, b))
    if off != len(buf):
        raise ValueError(f"{len(buf) - off} trailing bytes in model file")
    return MlpVae.from_layers(layers)
