"""Latent-space denoising diffusion: schedule, corruption, denoiser, recovery.

The forward process corrupts a clean latent z0 in closed form,

    zk = sqrt(abar_k) * z0 + sqrt(1 - abar_k) * eps,    eps ~ N(0, I),

with abar_k the running product of (1 - beta) over a linear beta schedule.
A time-conditioned MLP with a symmetric down/up shape and concatenative
skips predicts eps from zk; the clean latent is then recovered one-shot by
inverting the corruption with the predicted noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ParamStore, Tensor
from .numerics.ops import concat, film_modulate, linear, sinusoidal_time_embed


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-step tables; steps are 1-based, k in [1, T]."""
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray

    def _gather(self, table: np.ndarray, k) -> np.ndarray:
        k = np.asarray(k)
        if k.size and (k.min() < 1 or k.max() > self.T):
            raise ValueError(f"diffusion step k out of range [1, {self.T}]")
        return table[k - 1]

    def sqrt_ab(self, k) -> np.ndarray:
        return self._gather(self.sqrt_alpha_bar, k)

    def sqrt_one_minus_ab(self, k) -> np.ndarray:
        return self._gather(self.sqrt_one_minus_alpha_bar, k)


def build_schedule(T: int = 1000, beta_start: float = 1e-4,
                   beta_end: float = 4e-4) -> NoiseSchedule:
    """Linear beta schedule with derived square-root tables.

    beta[k] = beta_start + (k-1)/(T-1) * (beta_end - beta_start) for
    1-based k; alpha_bar is the cumulative product of 1 - beta.
    """
    if T < 1:
        raise ValueError(f"build_schedule: T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"build_schedule: need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if not np.all(np.diff(alpha_bar) < 0) and T > 1:
        raise ValueError("build_schedule: alpha_bar is not strictly decreasing")
    return NoiseSchedule(
        T=T, beta_start=beta_start, beta_end=beta_end,
        beta=beta, alpha=alpha, alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
    )


def forward_noise(z0: np.ndarray, k, eps: np.ndarray,
                  schedule: NoiseSchedule) -> np.ndarray:
    """Corrupt clean latents to step k (per row when k is a vector)."""
    z0 = np.asarray(z0)
    c1 = schedule.sqrt_ab(k).astype(z0.dtype)
    c2 = schedule.sqrt_one_minus_ab(k).astype(z0.dtype)
    if z0.ndim == 2 and np.ndim(c1) == 1:
        c1 = c1[:, None]
        c2 = c2[:, None]
    return c1 * z0 + c2 * eps


def reconstruct_z0(zk, eps_hat, k, schedule: NoiseSchedule):
    """One-shot inversion of the corruption: (zk - sqrt(1-abar)*eps) / sqrt(abar).

    Accepts plain arrays or autodiff tensors for eps_hat/zk; coefficients
    are constants either way.
    """
    ref = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
    c1 = schedule.sqrt_one_minus_ab(k).astype(ref.dtype)
    inv = (1.0 / schedule.sqrt_ab(k)).astype(ref.dtype)
    if ref.ndim == 2 and np.ndim(c1) == 1:
        c1 = c1[:, None]
        inv = inv[:, None]
    if isinstance(eps_hat, Tensor) or isinstance(zk, Tensor):
        zk_t = zk if isinstance(zk, Tensor) else Tensor(np.asarray(zk))
        eps_t = eps_hat if isinstance(eps_hat, Tensor) else Tensor(ref)
        return (zk_t - eps_t * c1) * inv
    return (np.asarray(zk) - c1 * ref) * inv


def diffusion_loss(eps, eps_hat):
    """Mean over batch and elements of the squared noise-prediction error."""
    if isinstance(eps_hat, Tensor) or isinstance(eps, Tensor):
        eps_t = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps))
        eps_hat_t = eps_hat if isinstance(eps_hat, Tensor) else Tensor(np.asarray(eps_hat))
        if eps_t.shape != eps_hat_t.shape:
            raise ValueError(
                f"diffusion_loss: shapes disagree, {eps_t.shape} vs {eps_hat_t.shape}")
        d = eps_t - eps_hat_t
        return (d * d).mean()
    eps = np.asarray(eps)
    eps_hat = np.asarray(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"diffusion_loss: shapes disagree, {eps.shape} vs {eps_hat.shape}")
    return float(np.mean((eps - eps_hat) ** 2))


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 384
    down_dims: tuple[int, ...] = (192, 96)
    time_embed_dim: int = 128

    def stage_widths(self) -> list[tuple[str, int, int]]:
        """(name, in_width, out_width) for every stage, skips included."""
        stages = []
        prev = self.latent_dim
        for i, w in enumerate(self.down_dims, start=1):
            stages.append((f"down{i}", prev, w))
            prev = w
        stages.append(("mid", prev, prev))
        # up path mirrors the down path; each stage consumes the running
        # activation concatenated with the matching down activation
        down_outs = list(self.down_dims)
        up_widths = list(self.down_dims[-2::-1]) + [self.latent_dim]
        for i, w in enumerate(up_widths, start=1):
            skip = down_outs[-i]
            stages.append((f"up{i}", prev + skip, w))
            prev = w
        return stages


def init_denoiser_params(store: ParamStore, prefix: str, cfg: DenoiserConfig,
                         rng: np.random.Generator) -> None:
    for name, fan_in, fan_out in cfg.stage_widths():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{prefix}.{name}.w", rng.uniform(-limit, limit, (fan_in, fan_out)))
        store.add(f"{prefix}.{name}.b", np.zeros(fan_out))
        flimit = np.sqrt(6.0 / (cfg.time_embed_dim + 2 * fan_out))
        store.add(f"{prefix}.{name}.film_w",
                  rng.uniform(-flimit, flimit, (cfg.time_embed_dim, 2 * fan_out)))
        # scale half of the FiLM bias starts at 1 so stages begin near identity
        film_b = np.zeros(2 * fan_out)
        film_b[:fan_out] = 1.0
        store.add(f"{prefix}.{name}.film_b", film_b)


def denoise_eps(zk, k, store: ParamStore, prefix: str, cfg: DenoiserConfig) -> Tensor:
    """Predict the injected noise from a corrupted latent at step k.

    Symmetric down/up MLP with concatenative skips; every stage is
    modulated by a scale/shift pair mapped from the sinusoidal embedding
    of its timestep. All stages end in relu except the output stage.
    """
    x = zk if isinstance(zk, Tensor) else Tensor(np.asarray(zk))
    if x.ndim != 2 or x.shape[1] != cfg.latent_dim:
        raise ValueError(
            f"denoise_eps: expected (B, {cfg.latent_dim}) latents, got {x.shape}")
    k = np.asarray(k)
    if k.ndim == 0:
        k = np.full(x.shape[0], int(k))
    t_emb = sinusoidal_time_embed(k, cfg.time_embed_dim, dtype=x.dtype)

    stages = cfg.stage_widths()
    down_acts: list[Tensor] = []
    n_down = len(cfg.down_dims)
    for idx, (name, _fi, fan_out) in enumerate(stages):
        if name.startswith("up"):
            i = int(name[2:])
            x = concat([x, down_acts[n_down - i]], axis=1)
        x = linear(x, store[f"{prefix}.{name}.w"], store[f"{prefix}.{name}.b"])
        cond = linear(t_emb, store[f"{prefix}.{name}.film_w"], store[f"{prefix}.{name}.film_b"])
        x = film_modulate(x, cond[:, :fan_out], cond[:, fan_out:])
        if idx != len(stages) - 1:
            x = x.relu()
        if name.startswith("down"):
            down_acts.append(x)
    return x
