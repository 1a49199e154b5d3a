"""Sequence encoders: token arrays to variational Gaussian latents.

A stack of gated convolution blocks (1-D conv + GLU + layer norm + dropout
+ residual) feeds a global max pool and a linear projection; two linear
heads then parameterize mean and log standard deviation, from which the
latent is drawn by reparameterization, z0 = mu + exp(log_sigma) * eps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParamStore, Tensor
from .numerics.ops import (conv1d, dropout, embed_lookup, glu,
                           global_max_pool, layer_norm, linear)

LOG_SIGMA_RANGE = 10.0  # log_sigma clamped to +/- this bound


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    embed_dim: int = 128
    conv_channels: tuple[int, ...] = (256, 512, 768)
    kernel: int = 4
    conv_dropout: float = 0.2
    latent_dim: int = 384

    def __post_init__(self):
        if not self.conv_channels:
            raise ValueError("EncoderConfig: conv_channels must be non-empty")
        if any(c % 2 for c in self.conv_channels):
            raise ValueError(
                f"EncoderConfig: channel counts must be even, got {self.conv_channels}")
        if self.latent_dim <= 0:
            raise ValueError("EncoderConfig: latent_dim must be positive")


@dataclass
class VariationalLatent:
    mu: Tensor
    log_sigma: Tensor
    z0: Tensor
    eps: np.ndarray  # the recorded standard-normal draw


def init_encoder_params(store: ParamStore, prefix: str, cfg: EncoderConfig,
                        rng: np.random.Generator) -> None:
    store.add(f"{prefix}.embed",
              0.1 * rng.standard_normal((cfg.vocab_size + 1, cfg.embed_dim)))
    c_in = cfg.embed_dim
    for i, c_out in enumerate(cfg.conv_channels, start=1):
        # conv produces 2*c_out channels; the GLU gate halves them back
        fan_in = cfg.kernel * c_in
        fan_out = cfg.kernel * 2 * c_out
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{prefix}.block{i}.conv_w",
                  rng.uniform(-limit, limit, (cfg.kernel, c_in, 2 * c_out)))
        store.add(f"{prefix}.block{i}.conv_b", np.zeros(2 * c_out))
        store.add(f"{prefix}.block{i}.ln_gamma", np.ones(c_out))
        store.add(f"{prefix}.block{i}.ln_beta", np.zeros(c_out))
        if c_in != c_out:
            plimit = np.sqrt(6.0 / (c_in + c_out))
            store.add(f"{prefix}.block{i}.proj_w",
                      rng.uniform(-plimit, plimit, (c_in, c_out)))
        c_in = c_out
    for name, (fi, fo) in {
        "pool_proj": (c_in, cfg.latent_dim),
        "mu": (cfg.latent_dim, cfg.latent_dim),
    }.items():
        limit = np.sqrt(6.0 / (fi + fo))
        store.add(f"{prefix}.{name}.w", rng.uniform(-limit, limit, (fi, fo)))
        store.add(f"{prefix}.{name}.b", np.zeros(fo))
    # the pooled features are not normalized, so a fan-in init here would
    # scatter initial log_sigma over several e-folds; start the head at a
    # uniform sigma = e^-2 and let backprop shape it
    store.add(f"{prefix}.log_sigma.w", np.zeros((cfg.latent_dim, cfg.latent_dim)))
    store.add(f"{prefix}.log_sigma.b", np.full(cfg.latent_dim, -2.0))


def gated_conv_block(x: Tensor, store: ParamStore, block_prefix: str,
                     train: bool, rng: np.random.Generator,
                     dropout_rate: float) -> Tensor:
    """conv -> GLU -> layer norm -> dropout, added to the (projected) input."""
    h = conv1d(x, store[f"{block_prefix}.conv_w"], store[f"{block_prefix}.conv_b"])
    h = glu(h)
    h = layer_norm(h, store[f"{block_prefix}.ln_gamma"], store[f"{block_prefix}.ln_beta"])
    h = dropout(h, dropout_rate, rng, train)
    proj_name = f"{block_prefix}.proj_w"
    x_res = x.matmul(store[proj_name]) if proj_name in store else x
    return x_res + h


def encode(tokens: np.ndarray, store: ParamStore, prefix: str, cfg: EncoderConfig,
           train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Token batch (B, L) to pre-variational features (B, latent_dim)."""
    if train and rng is None:
        raise ValueError("encode: training mode needs an rng for dropout")
    x = embed_lookup(store[f"{prefix}.embed"], tokens)
    for i in range(1, len(cfg.conv_channels) + 1):
        x = gated_conv_block(x, store, f"{prefix}.block{i}", train, rng, cfg.conv_dropout)
    pooled = global_max_pool(x)
    return linear(pooled, store[f"{prefix}.pool_proj.w"], store[f"{prefix}.pool_proj.b"])


def sample_latent(h: Tensor, store: ParamStore, prefix: str,
                  rng: np.random.Generator | None = None,
                  eps: np.ndarray | None = None) -> VariationalLatent:
    """Reparameterized Gaussian draw from the two linear heads.

    Pass eps explicitly (e.g. zeros at inference) to bypass the rng; the
    draw used is recorded on the result either way.
    """
    mu = linear(h, store[f"{prefix}.mu.w"], store[f"{prefix}.mu.b"])
    log_sigma = linear(h, store[f"{prefix}.log_sigma.w"], store[f"{prefix}.log_sigma.b"])
    log_sigma = log_sigma.clip(-LOG_SIGMA_RANGE, LOG_SIGMA_RANGE)
    if eps is None:
        if rng is None:
            raise ValueError("sample_latent: need rng when eps is not given")
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    else:
        eps = np.asarray(eps, dtype=mu.dtype)
        if eps.shape != mu.shape:
            raise ValueError(
                f"sample_latent: eps shape {eps.shape} != latent shape {mu.shape}")
    z0 = mu + log_sigma.exp() * eps
    return VariationalLatent(mu=mu, log_sigma=log_sigma, z0=z0, eps=eps)
