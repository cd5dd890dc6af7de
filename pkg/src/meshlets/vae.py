"""Fully-connected variational autoencoder over vectorized canonical meshlets.

Forward and backward passes are written out by hand with numpy. The encoder
has 6 layers (the last one split into mean and log-variance heads) and the
decoder mirrors it; hidden widths shrink geometrically from the input size to
a latent size of one third of the input.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadDimError, BadMagicError, DimMismatchError, NonFiniteError, VersionError
from .meshlet import read_mlc

logger = logging.getLogger(__name__)

N_LAYERS = 6
LEAK = 0.01
_MAGIC = b"VAE1"
_VERSION = 1


def _leaky(a):
    return np.where(a > 0, a, LEAK * a)


def _leaky_grad(a):
    return np.where(a > 0, 1.0, LEAK).astype(a.dtype)


def layer_widths(input_dim: int, latent_dim: int, n_layers: int = N_LAYERS) -> list[int]:
    """Geometric interpolation ``input_dim -> latent_dim`` in ``n_layers`` steps."""
    ratio = latent_dim / input_dim
    widths = [input_dim]
    for k in range(1, n_layers):
        w = int(round(input_dim * ratio ** (k / n_layers)))
        widths.append(min(max(w, latent_dim), widths[-1]))
    widths.append(latent_dim)
    return widths


class VaeModel:
    """Weights of the encoder (hidden layers + two heads) and decoder.

    Every layer is a pair ``(W, b)`` with ``W`` of shape ``(fan_in, fan_out)``.
    """

    def __init__(self, encoder, mu_head, logvar_head, decoder):
        self.encoder = [(W, b) for W, b in encoder]
        self.mu_head = mu_head
        self.logvar_head = logvar_head
        self.decoder = [(W, b) for W, b in decoder]
        self.history: list[float] = []
        self._check()

    def _check(self):
        if len(self.encoder) != N_LAYERS - 1 or len(self.decoder) != N_LAYERS:
            raise DimMismatchError("expected 5 encoder hidden layers, 2 heads and 6 decoder layers")
        chain = self.encoder + [self.mu_head]
        for (W0, _), (W1, _) in zip(chain, chain[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise DimMismatchError("encoder layer shapes do not chain")
        if self.mu_head[0].shape != self.logvar_head[0].shape:
            raise DimMismatchError("mean and log-variance heads differ in shape")
        for (W0, _), (W1, _) in zip(self.decoder, self.decoder[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise DimMismatchError("decoder layer shapes do not chain")
        if self.decoder[0][0].shape[0] != self.latent_dim or self.decoder[-1][0].shape[1] != self.input_dim:
            raise DimMismatchError("decoder does not map latent_dim -> input_dim")

    @property
    def input_dim(self) -> int:
        return self.encoder[0][0].shape[0]

    @property
    def latent_dim(self) -> int:
        return self.mu_head[0].shape[1]

    @property
    def grid_size(self) -> int:
        return int(round((self.input_dim / 3) ** 0.5))

    @property
    def dtype(self):
        return self.encoder[0][0].dtype

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """All layers in checkpoint order."""
        return self.encoder + [self.mu_head, self.logvar_head] + self.decoder

    def params(self) -> list[np.ndarray]:
        return [a for layer in self.layers() for a in layer]

    @classmethod
    def from_layers(cls, layers) -> VaeModel:
        layers = list(layers)
        return cls(layers[:5], layers[5], layers[6], layers[7:])

    def astype(self, dtype) -> VaeModel:
        return VaeModel.from_layers([(W.astype(dtype), b.astype(dtype)) for W, b in self.layers()])

    def copy(self) -> VaeModel:
        return self.astype(self.dtype)


def init_model(input_dim: int, seed: int = 0, dtype=np.float32) -> VaeModel:
    """Random fan-in scaled weights and zero biases; deterministic given ``seed``."""
    if input_dim <= 0 or input_dim % 3 != 0:
        raise BadDimError(f"input_dim must be a positive multiple of 3, got {input_dim}")
    latent = input_dim // 3
    widths = layer_widths(input_dim, latent)
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out, gain=2.0):
        W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
        return W.astype(dtype), np.zeros(fan_out, dtype=dtype)

    enc = [dense(widths[k], widths[k + 1]) for k in range(N_LAYERS - 1)]
    mu = dense(widths[-2], latent, 1.0)
    lv = dense(widths[-2], latent, 0.01)
    rev = widths[::-1]
    dec = [dense(rev[k], rev[k + 1], 2.0 if k < N_LAYERS - 1 else 1.0) for k in range(N_LAYERS)]
    return VaeModel(enc, mu, lv, dec)


def _as_batch(x, dim: int, what: str, dtype):
    a = np.asarray(x, dtype=dtype)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[-1] != dim:
        raise DimMismatchError(f"{what} has length {a.shape[-1]}, expected {dim}")
    return a, single


def _encoder_forward(model: VaeModel, x):
    acts = [x]
    pres = []
    h = x
    for W, b in model.encoder:
        a = h @ W + b
        pres.append(a)
        h = _leaky(a)
        acts.append(h)
    mu = h @ model.mu_head[0] + model.mu_head[1]
    lv = h @ model.logvar_head[0] + model.logvar_head[1]
    return mu, lv, (acts, pres)


def _decoder_forward(model: VaeModel, z):
    acts = [z]
    pres = []
    h = z
    last = len(model.decoder) - 1
    for i, (W, b) in enumerate(model.decoder):
        a = h @ W + b
        pres.append(a)
        h = _leaky(a) if i < last else a
        acts.append(h)
    return h, (acts, pres)


def _decoder_backward(model: VaeModel, cache, g, want_params: bool = True):
    acts, pres = cache
    grads = []
    last = len(model.decoder) - 1
    for i in range(last, -1, -1):
        W, _ = model.decoder[i]
        if i < last:
            g = g * _leaky_grad(pres[i])
        if want_params:
            grads.append((acts[i].T @ g, g.sum(axis=0)))
        g = g @ W.T
    grads.reverse()
    return g, grads


def encode(model: VaeModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Mean and log-variance of the approximate posterior (no sampling)."""
    xb, single = _as_batch(x, model.input_dim, "meshlet vector", model.dtype)
    mu, lv, _ = _encoder_forward(model, xb)
    return (mu[0], lv[0]) if single else (mu, lv)


def decode(model: VaeModel, latent) -> np.ndarray:
    zb, single = _as_batch(latent, model.latent_dim, "latent vector", model.dtype)
    out, _ = _decoder_forward(model, zb)
    return out[0] if single else out


def decoder_vjp(model: VaeModel, latent, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Decoded output and the vector-Jacobian product ``grad_out^T d(decode)/d(latent)``."""
    zb = np.atleast_2d(np.asarray(latent, dtype=model.dtype))
    out, cache = _decoder_forward(model, zb)
    g, _ = _decoder_backward(model, cache, np.atleast_2d(grad_out).astype(model.dtype),
                             want_params=False)
    return out, g


def elbo_loss(model: VaeModel, batch, beta: float, mask=None, eps=None):
    """Masked squared reconstruction error plus ``beta`` times the KL term.

    Parameters
    ----------
    batch : array_like, shape (B, input_dim)
        Meshlet vectors, zero at invalid cells.
    mask : array_like, optional
        Per-entry weights (1 for valid coordinates, 0 for invalid).
    eps : array_like, optional
        Standard-normal noise for the reparameterization, shape
        ``(B, latent_dim)``. ``None`` decodes the posterior mean.

    Returns
    -------
    loss : float
        Batch mean of the per-sample objective.
    grads : list of ndarray
        Gradients aligned with ``model.params()``.
    """
    x, _ = _as_batch(batch, model.input_dim, "batch", model.dtype)
    B = len(x)
    if B == 0:
        raise ValueError("empty batch")
    m = np.ones_like(x) if mask is None else np.asarray(mask, dtype=model.dtype).reshape(x.shape)
    mu, lv, enc_cache = _encoder_forward(model, x)
    std = np.exp(0.5 * lv)
    e = np.zeros_like(mu) if eps is None else np.asarray(eps, dtype=model.dtype).reshape(mu.shape)
    z = mu + std * e
    xhat, dec_cache = _decoder_forward(model, z)

    diff = xhat - x
    recon = np.sum(m * diff * diff, axis=1)
    kl = -0.5 * np.sum(1.0 + lv - mu * mu - np.exp(lv), axis=1)
    loss = float(np.mean(recon + beta * kl))
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")

    g_out = (2.0 / B) * m * diff
    dz, dec_grads = _decoder_backward(model, dec_cache, g_out)
    dmu = dz + (beta / B) * mu
    dlv = dz * e * 0.5 * std + (beta / B) * 0.5 * (np.exp(lv) - 1.0)

    acts, pres = enc_cache
    h = acts[-1]
    g_mu = (h.T @ dmu, dmu.sum(axis=0))
    g_lv = (h.T @ dlv, dlv.sum(axis=0))
    g = dmu @ model.mu_head[0].T + dlv @ model.logvar_head[0].T
    enc_grads = []
    for i in range(len(model.encoder) - 1, -1, -1):
        W, _ = model.encoder[i]
        g = g * _leaky_grad(pres[i])
        enc_grads.append((acts[i].T @ g, g.sum(axis=0)))
        g = g @ W.T
    enc_grads.reverse()
    grads = [a for layer in enc_grads + [g_mu, g_lv] + dec_grads for a in layer]
    return loss, grads


def interpolate(model: VaeModel, la, lb, steps: int) -> list[np.ndarray]:
    """Decode ``(1 - t) la + t lb`` at ``steps`` evenly spaced ``t`` in [0, 1]."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    la = np.asarray(la, dtype=model.dtype)
    lb = np.asarray(lb, dtype=model.dtype)
    for v in (la, lb):
        if v.shape != (model.latent_dim,):
            raise DimMismatchError(f"latent has shape {v.shape}, expected ({model.latent_dim},)")
    ts = np.linspace(0.0, 1.0, steps)
    out = decode(model, (1 - ts)[:, None] * la[None] + ts[:, None] * lb[None])
    return list(out)


# *** training ***

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    beta: float = 1e-3
    warmup_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


class Adam:
    """First/second-moment adaptive steps (decay 0.9 / 0.999)."""

    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def corpus_arrays(grids, valid):
    """Meshlet vectors and per-coordinate masks from corpus grids."""
    grids = np.asarray(grids)
    valid = np.asarray(valid, dtype=bool)
    n = len(grids)
    x = np.where(valid[..., None], grids, 0.0).reshape(n, -1)
    m = np.repeat(valid.reshape(n, -1), 3, axis=1)
    return x, m


def train(corpus, cfg: TrainConfig | None = None, model: VaeModel | None = None,
          checkpoint: str | os.PathLike | None = None, on_epoch=None) -> VaeModel:
    """Train on a ``.mlc`` corpus (path) or a ``(grids, valid)`` pair.

    The KL weight ramps linearly from 0 to ``cfg.beta`` over the first
    ``warmup_fraction`` of the epochs. Per-epoch mean losses are appended to
    ``model.history``; if ``checkpoint`` is given the model is written there
    after every epoch.
    """
    cfg = cfg or TrainConfig()
    grids, valid = read_mlc(corpus) if isinstance(corpus, (str, Path)) else corpus
    if len(grids) == 0:
        raise ValueError("corpus is empty")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = init_model(int(np.prod(grids.shape[1:])), seed=cfg.seed)
    x_all, m_all = corpus_arrays(grids, valid)
    x_all = x_all.astype(model.dtype)
    m_all = m_all.astype(model.dtype)
    if x_all.shape[1] != model.input_dim:
        raise DimMismatchError(f"corpus vectors have length {x_all.shape[1]}, model expects {model.input_dim}")
    params = model.params()
    opt = Adam(params, cfg.lr)
    warm = max(1, int(np.ceil(cfg.warmup_fraction * cfg.epochs)))
    n = len(x_all)
    for epoch in range(cfg.epochs):
        beta = cfg.beta * min(1.0, (epoch + 1) / warm)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            eps = rng.standard_normal((len(idx), model.latent_dim)).astype(model.dtype)
            loss, grads = elbo_loss(model, x_all[idx], beta, m_all[idx], eps)
            opt.step(params, grads)
            total += loss * len(idx)
        mean = total / n
        model.history.append(mean)
        logger.info("epoch %d/%d loss %.6g beta %.3g", epoch + 1, cfg.epochs, mean, beta)
        if on_epoch is not None:
            on_epoch(epoch, mean)
        if checkpoint is not None:
            save_checkpoint(model, checkpoint)
    return model


# *** checkpoints ***

def save_checkpoint(model: VaeModel, path) -> None:
    layers = model.layers()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BIIB", _VERSION, model.input_dim, model.latent_dim, len(layers)))
        for W, b in layers:
            fh.write(struct.pack("<II", *W.shape))
            fh.write(np.ascontiguousarray(W, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path) -> VaeModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise BadMagicError(f"{path}: not a VAE1 checkpoint")
    if len(data) < 14:
        raise BadMagicError(f"{path}: truncated header")
    version, input_dim, latent_dim, count = struct.unpack_from("<BIIB", data, 4)
    if version != _VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {_VERSION}")
    off = 14
    layers = []
    for _ in range(count):
        if off + 8 > len(data):
            raise BadMagicError(f"{path}: truncated layer header")
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        nbytes = 4 * (rows * cols + cols)
        if off + nbytes > len(data):
            raise BadMagicError(f"{path}: truncated layer data")
        W = np.frombuffer(data, "<f4", rows * cols, off).reshape(rows, cols).astype(np.float32)
        off += 4 * rows * cols
        b = np.frombuffer(data, "<f4", cols, off).astype(np.float32)
        off += 4 * cols
        layers.append((W, b))
    if off != len(data):
        raise BadMagicError(f"{path}: trailing bytes after last layer")
    if count != 2 * N_LAYERS + 1:
        raise DimMismatchError(f"{path}: {count} layers, expected {2 * N_LAYERS + 1}")
    model = VaeModel.from_layers(layers)
    if model.input_dim != input_dim or model.latent_dim != latent_dim:
        raise DimMismatchError(f"{path}: header dims disagree with layer shapes")
    return model
