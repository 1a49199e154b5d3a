"""Affinity heads over latent pairs, and the weighted regression loss.

Two parameter-disjoint instances of the same head live under
``regressor.var`` (clean latents) and ``regressor.diff`` (denoised
latents); ``tie_weights`` in the config collapses them to one set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParamStore, Tensor
from .numerics.ops import concat, dropout, linear


@dataclass(frozen=True)
class RegressorConfig:
    latent_dim: int = 384
    proj_dim: int = 384
    hidden_dims: tuple[int, ...] = (512, 64, 1)
    fc_dropout: float = 0.1
    tie_weights: bool = False

    def __post_init__(self):
        if self.hidden_dims[-1] != 1:
            raise ValueError(
                f"RegressorConfig: final width must be 1, got {self.hidden_dims}")


def init_regressor_params(store: ParamStore, prefix: str, cfg: RegressorConfig,
                          rng: np.random.Generator, output_bias: float = 0.0) -> None:
    """output_bias seeds the final layer at the label scale (e.g. the train
    mean), which saves Adam the long march from zero to pKd range."""
    def add_linear(name, fi, fo, bias=0.0):
        limit = np.sqrt(6.0 / (fi + fo))
        store.add(f"{prefix}.{name}.w", rng.uniform(-limit, limit, (fi, fo)))
        store.add(f"{prefix}.{name}.b", np.full(fo, bias))

    add_linear("proj_drug", cfg.latent_dim, cfg.proj_dim)
    add_linear("proj_target", cfg.latent_dim, cfg.proj_dim)
    c_in = 2 * cfg.proj_dim
    n = len(cfg.hidden_dims)
    for i, width in enumerate(cfg.hidden_dims, start=1):
        add_linear(f"fc{i}", c_in, width, bias=output_bias if i == n else 0.0)
        c_in = width


def predict_affinity(z_drug: Tensor, z_target: Tensor, store: ParamStore,
                     prefix: str, cfg: RegressorConfig, train: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Project each modality, concatenate, regress to one scalar per row."""
    if z_drug.shape != z_target.shape or z_drug.shape[-1] != cfg.latent_dim:
        raise ValueError(
            f"predict_affinity: latent shapes {z_drug.shape} / {z_target.shape} "
            f"incompatible with latent_dim {cfg.latent_dim}")
    pd = linear(z_drug, store[f"{prefix}.proj_drug.w"], store[f"{prefix}.proj_drug.b"])
    pt = linear(z_target, store[f"{prefix}.proj_target.w"], store[f"{prefix}.proj_target.b"])
    h = concat([pd, pt], axis=1)
    n = len(cfg.hidden_dims)
    for i in range(1, n + 1):
        h = linear(h, store[f"{prefix}.fc{i}.w"], store[f"{prefix}.fc{i}.b"])
        if i < n:
            h = h.relu()
            h = dropout(h, cfg.fc_dropout, rng, train)
    return h.reshape(h.shape[0])


def affinity_loss(y, y_hat, weight: float = 1.0):
    """Weighted mean squared error between labels and predictions."""
    y_hat_t = y_hat if isinstance(y_hat, Tensor) else Tensor(np.asarray(y_hat))
    y_arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=y_hat_t.dtype)
    if y_arr.shape != y_hat_t.shape:
        raise ValueError(f"affinity_loss: shapes disagree, {y_arr.shape} vs {y_hat_t.shape}")
    d = y_hat_t - Tensor(y_arr)
    return (d * d).mean() * float(weight)
