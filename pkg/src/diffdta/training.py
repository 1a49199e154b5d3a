"""Two-stage training: encoder pretraining, then diffusion as a regularizer.

Stage one fits the extractors, variational heads, and the clean-latent
regressor under the weighted MSE objective alone. Stage two freezes the
encoders (their latents are computed once, outside the graph), then trains
the two denoisers and the denoised-latent regressor on

    total = affinity_loss(y, y_diff) + noise_mse(drug) + noise_mse(target).

Parameter movement per stage is auditable by namespace: stage one touches
exactly encoder.* and regressor.var.*, stage two exactly diffusion.* and
regressor.diff.*.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .data import SETTINGS, TokenizedDataset, load_dataset, read_json, split_from_manifest, write_json
from .diffusion import (DenoiserConfig, NoiseSchedule, build_schedule,
                        denoise_eps, diffusion_loss, forward_noise,
                        init_denoiser_params, reconstruct_z0)
from .encoder import EncoderConfig, encode, init_encoder_params, sample_latent
from .numerics import ParamStore, Tensor, adam_step, backward, no_grad
from .numerics.checkpoint import load_params, save_adam, save_params
from .regressor import (RegressorConfig, affinity_loss, init_regressor_params,
                        predict_affinity)

STAGE_ONE_NAMESPACES = ("encoder.", "regressor.var.")
STAGE_TWO_NAMESPACES = ("diffusion.", "regressor.diff.")


@dataclass
class RunConfig:
    """Resolved settings for one training run; JSON round-trips losslessly."""
    manifest: str = ""
    split: str = ""
    checkpoint_dir: str = ""
    stage: str = "both"            # "one" | "two" | "both"
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    affinity_weight: float = 1.0
    seed: int = 0
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 4e-4
    patience: int = 20
    inference_step: int = 0        # 0 means T // 2
    mc_samples: int = 1
    schema_version: int = 1

    def __post_init__(self):
        if self.stage not in ("one", "two", "both"):
            raise ValueError(f"RunConfig: stage must be one|two|both, got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("RunConfig: epochs and batch_size must be positive")
        if self.mc_samples < 1:
            raise ValueError("RunConfig: mc_samples must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"RunConfig: unknown fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class Model:
    params: ParamStore
    drug_encoder: EncoderConfig
    target_encoder: EncoderConfig
    denoiser: DenoiserConfig
    regressor: RegressorConfig
    schedule: NoiseSchedule
    stage: int = 0  # highest completed training stage

    def diff_head_prefix(self) -> str:
        return "regressor.var" if self.regressor.tie_weights else "regressor.diff"


def build_model(drug_vocab_size: int, target_vocab_size: int, *, seed: int = 0,
                dtype=np.float32, schedule: NoiseSchedule | None = None,
                drug_encoder: EncoderConfig | None = None,
                target_encoder: EncoderConfig | None = None,
                denoiser: DenoiserConfig | None = None,
                regressor: RegressorConfig | None = None,
                output_bias: float = 0.0) -> Model:
    """Initialize every sub-network under its checkpoint namespace.

    output_bias (typically the train-label mean) seeds both affinity heads
    at the label scale.
    """
    drug_encoder = drug_encoder or EncoderConfig(vocab_size=drug_vocab_size)
    target_encoder = target_encoder or EncoderConfig(vocab_size=target_vocab_size)
    denoiser = denoiser or DenoiserConfig(latent_dim=drug_encoder.latent_dim)
    regressor = regressor or RegressorConfig(latent_dim=drug_encoder.latent_dim)
    schedule = schedule or build_schedule()

    store = ParamStore(dtype=dtype)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    init_encoder_params(store, "encoder.drug", drug_encoder, rng)
    init_encoder_params(store, "encoder.target", target_encoder, rng)
    init_denoiser_params(store, "diffusion.drug", denoiser, rng)
    init_denoiser_params(store, "diffusion.target", denoiser, rng)
    init_regressor_params(store, "regressor.var", regressor, rng, output_bias)
    if not regressor.tie_weights:
        init_regressor_params(store, "regressor.diff", regressor, rng, output_bias)
    return Model(params=store, drug_encoder=drug_encoder, target_encoder=target_encoder,
                 denoiser=denoiser, regressor=regressor, schedule=schedule)


def _batches(n: int, batch_size: int, perm: np.ndarray | None):
    order = perm if perm is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _require_finite(value: float, what: str, stage: int, epoch: int, batch: int) -> None:
    if not math.isfinite(value):
        raise RuntimeError(
            f"non-finite {what} ({value}) in stage {stage}, epoch {epoch}, batch {batch}")


def stage_one_epoch(data: TokenizedDataset, model: Model, rng: np.random.Generator,
                    *, lr: float = 1e-3, affinity_weight: float = 1.0,
                    batch_size: int = 256, epoch: int = 0) -> dict:
    """One pass of encoder + variational-head training; returns loss means."""
    store = model.params
    n = len(data)
    total, count = 0.0, 0
    for b, idx in enumerate(_batches(n, batch_size, rng.permutation(n))):
        h_d = encode(data.drug_tokens[idx], store, "encoder.drug",
                     model.drug_encoder, train=True, rng=rng)
        lat_d = sample_latent(h_d, store, "encoder.drug", rng=rng)
        h_t = encode(data.target_tokens[idx], store, "encoder.target",
                     model.target_encoder, train=True, rng=rng)
        lat_t = sample_latent(h_t, store, "encoder.target", rng=rng)
        y_hat = predict_affinity(lat_d.z0, lat_t.z0, store, "regressor.var",
                                 model.regressor, train=True, rng=rng)
        loss = affinity_loss(data.labels[idx], y_hat, affinity_weight)
        _require_finite(loss.item(), "stage-one loss", 1, epoch, b)
        backward(loss)
        adam_step(store, lr=lr)
        total += loss.item() * idx.size
        count += idx.size
    return {"affinity": total / count}


def encode_clean_latents(data: TokenizedDataset, model: Model,
                         batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-encoder latent means (dropout off, eps = 0), outside the graph."""
    store = model.params
    zd, zt = [], []
    with no_grad():
        for idx in _batches(len(data), batch_size, None):
            h_d = encode(data.drug_tokens[idx], store, "encoder.drug",
                         model.drug_encoder, train=False)
            lat_d = sample_latent(h_d, store, "encoder.drug",
                                  eps=np.zeros(h_d.shape, dtype=h_d.dtype))
            h_t = encode(data.target_tokens[idx], store, "encoder.target",
                         model.target_encoder, train=False)
            lat_t = sample_latent(h_t, store, "encoder.target",
                                  eps=np.zeros(h_t.shape, dtype=h_t.dtype))
            zd.append(lat_d.z0.data)
            zt.append(lat_t.z0.data)
    return np.concatenate(zd, axis=0), np.concatenate(zt, axis=0)


def _check_frozen(store: ParamStore, namespaces=("encoder.", "regressor.var.")) -> None:
    for name, p in store.items():
        if name.startswith(namespaces) and p.grad is not None and np.any(p.grad):
            raise RuntimeError(f"stage-two freeze violated: nonzero gradient on {name}")


def stage_two_epoch(z0_drug: np.ndarray, z0_target: np.ndarray, labels: np.ndarray,
                    model: Model, rng: np.random.Generator, *, lr: float = 1e-3,
                    affinity_weight: float = 1.0, batch_size: int = 256,
                    epoch: int = 0, denoiser_override=None) -> dict:
    """One pass of denoiser + denoised-head training on frozen latents.

    Per modality each row draws its own timestep and noise; the clean
    latent estimate is recovered in closed form from the predicted noise
    before the affinity head sees it. ``denoiser_override(zk, k, eps,
    modality)`` replaces the networks in tests.
    """
    store = model.params
    sched = model.schedule
    head = model.diff_head_prefix()
    n = labels.shape[0]
    sums = {"affinity": 0.0, "drug_diffusion": 0.0, "target_diffusion": 0.0}
    count = 0

    def denoise(zk, k, eps, modality):
        if denoiser_override is not None:
            out = denoiser_override(zk, k, eps, modality)
            return out if isinstance(out, Tensor) else Tensor(np.asarray(out))
        return denoise_eps(zk, k, store, f"diffusion.{modality}", model.denoiser)

    for b, idx in enumerate(_batches(n, batch_size, rng.permutation(n))):
        zb_d = z0_drug[idx]
        zb_t = z0_target[idx]
        k_d = rng.integers(1, sched.T + 1, size=idx.size)
        eps_d = rng.standard_normal((idx.size, zb_d.shape[1])).astype(zb_d.dtype)
        k_t = rng.integers(1, sched.T + 1, size=idx.size)
        eps_t = rng.standard_normal((idx.size, zb_t.shape[1])).astype(zb_t.dtype)

        zk_d = forward_noise(zb_d, k_d, eps_d, sched)
        zk_t = forward_noise(zb_t, k_t, eps_t, sched)
        eps_hat_d = denoise(zk_d, k_d, eps_d, "drug")
        eps_hat_t = denoise(zk_t, k_t, eps_t, "target")
        z0h_d = reconstruct_z0(zk_d, eps_hat_d, k_d, sched)
        z0h_t = reconstruct_z0(zk_t, eps_hat_t, k_t, sched)

        y_hat = predict_affinity(z0h_d, z0h_t, store, head, model.regressor,
                                 train=True, rng=rng)
        l_aff = affinity_loss(labels[idx], y_hat, affinity_weight)
        l_d = diffusion_loss(eps_d, eps_hat_d)
        l_t = diffusion_loss(eps_t, eps_hat_t)
        loss = l_aff + l_d + l_t
        _require_finite(loss.item(), "stage-two loss", 2, epoch, b)
        backward(loss)
        frozen = ("encoder.",) if head == "regressor.var" else ("encoder.", "regressor.var.")
        _check_frozen(store, frozen)
        adam_step(store, lr=lr)

        sums["affinity"] += l_aff.item() * idx.size
        sums["drug_diffusion"] += float(l_d.item() if isinstance(l_d, Tensor) else l_d) * idx.size
        sums["target_diffusion"] += float(l_t.item() if isinstance(l_t, Tensor) else l_t) * idx.size
        count += idx.size
    return {k: v / count for k, v in sums.items()}


def _predict_diff_from_latents(z0_d: np.ndarray, z0_t: np.ndarray, model: Model,
                               rng: np.random.Generator, k_star: int,
                               mc_samples: int, denoiser_override=None) -> np.ndarray:
    store = model.params
    sched = model.schedule
    head = model.diff_head_prefix()
    acc = np.zeros(z0_d.shape[0], dtype=np.float64)
    with no_grad():
        for _ in range(mc_samples):
            eps_d = rng.standard_normal(z0_d.shape).astype(z0_d.dtype)
            eps_t = rng.standard_normal(z0_t.shape).astype(z0_t.dtype)
            k = np.full(z0_d.shape[0], k_star)
            zk_d = forward_noise(z0_d, k, eps_d, sched)
            zk_t = forward_noise(z0_t, k, eps_t, sched)
            if denoiser_override is not None:
                eh_d = denoiser_override(zk_d, k, eps_d, "drug")
                eh_t = denoiser_override(zk_t, k, eps_t, "target")
                eh_d = eh_d if isinstance(eh_d, Tensor) else Tensor(np.asarray(eh_d))
                eh_t = eh_t if isinstance(eh_t, Tensor) else Tensor(np.asarray(eh_t))
            else:
                eh_d = denoise_eps(zk_d, k, store, "diffusion.drug", model.denoiser)
                eh_t = denoise_eps(zk_t, k, store, "diffusion.target", model.denoiser)
            z0h_d = reconstruct_z0(zk_d, eh_d, k, sched)
            z0h_t = reconstruct_z0(zk_t, eh_t, k, sched)
            y = predict_affinity(z0h_d, z0h_t, store, head, model.regressor, train=False)
            acc += y.data.astype(np.float64)
    return acc / mc_samples


def predict(data: TokenizedDataset, model: Model, mode: str, seed: int = 0, *,
            batch_size: int = 256, inference_step: int = 0, mc_samples: int = 1,
            denoiser_override=None) -> np.ndarray:
    """Affinity predictions for every record, in order.

    mode "var" regresses from the clean latent means (deterministic);
    mode "diff" runs a seeded perturb-and-denoise pass at a fixed step
    (default T // 2) and regresses from the recovered latents, averaging
    ``mc_samples`` passes.
    """
    if mode not in ("var", "diff"):
        raise ValueError(f"predict: mode must be 'var' or 'diff', got {mode!r}")
    if mode == "diff" and model.stage < 2 and denoiser_override is None:
        raise RuntimeError("predict: mode 'diff' requires stage-two trained parameters")
    store = model.params
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    k_star = inference_step or model.schedule.T // 2
    out = np.zeros(len(data), dtype=np.float64)
    with no_grad():
        for idx in _batches(len(data), batch_size, None):
            h_d = encode(data.drug_tokens[idx], store, "encoder.drug",
                         model.drug_encoder, train=False)
            mu_d = sample_latent(h_d, store, "encoder.drug",
                                 eps=np.zeros(h_d.shape, dtype=h_d.dtype)).z0
            h_t = encode(data.target_tokens[idx], store, "encoder.target",
                         model.target_encoder, train=False)
            mu_t = sample_latent(h_t, store, "encoder.target",
                                 eps=np.zeros(h_t.shape, dtype=h_t.dtype)).z0
            if mode == "var":
                y = predict_affinity(mu_d, mu_t, store, "regressor.var",
                                     model.regressor, train=False)
                out[idx] = y.data.astype(np.float64)
            else:
                out[idx] = _predict_diff_from_latents(
                    mu_d.data, mu_t.data, model, rng, k_star, mc_samples,
                    denoiser_override)
    return out


def evaluate_buckets(data: TokenizedDataset, model: Model, buckets: dict[str, list[int]],
                     mode: str, seed: int = 0, *, inference_step: int = 0,
                     mc_samples: int = 1, batch_size: int = 256) -> dict[str, dict | None]:
    """MetricsReport dict per bucket; empty buckets map to None."""
    reports: dict[str, dict | None] = {}
    for setting, indices in buckets.items():
        if not indices:
            reports[setting] = None
            continue
        sub = data.subset(indices)
        y_hat = predict(sub, model, mode, seed, batch_size=batch_size,
                        inference_step=inference_step, mc_samples=mc_samples)
        reports[setting] = metrics_mod.evaluate(sub.labels, y_hat, setting).to_dict()
    return reports


# ---------------------------------------------------------------------------
# run orchestration
# ---------------------------------------------------------------------------

def _mean_val_mse(reports: dict[str, dict | None]) -> float | None:
    vals = [r["mse"] for r in reports.values() if r is not None]
    return float(np.mean(vals)) if vals else None


def _log_entry(stage: int, epoch: int, losses: dict, val: dict, wall: float) -> dict:
    return {"stage": stage, "epoch": epoch, "losses": losses,
            "val": val, "wall_time_s": round(wall, 3)}


class _EpochDriver:
    """Shared epoch loop: logging, best-on-validation tracking, patience."""

    def __init__(self, model: Model, cfg: RunConfig, log_fh, stage: int):
        self.model = model
        self.cfg = cfg
        self.log_fh = log_fh
        self.stage = stage
        self.best_mse: float | None = None
        self.best_values: dict | None = None
        self.since_best = 0
        self.entries: list[dict] = []

    def after_epoch(self, epoch: int, losses: dict, val: dict, wall: float) -> bool:
        """Record an epoch; returns True when patience is exhausted."""
        entry = _log_entry(self.stage, epoch, losses, val, wall)
        self.entries.append(entry)
        if self.log_fh is not None:
            self.log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            self.log_fh.flush()
        mean_mse = _mean_val_mse(val)
        if mean_mse is None:
            return False
        if self.best_mse is None or mean_mse < self.best_mse:
            self.best_mse = mean_mse
            self.best_values = self.model.params.snapshot()
            self.since_best = 0
        else:
            self.since_best += 1
        return self.since_best >= self.cfg.patience

    def restore_best(self) -> None:
        if self.best_values is not None:
            self.model.params.load_values(self.best_values)


def train_stage_one(model: Model, train_data: TokenizedDataset, cfg: RunConfig,
                    val_data: TokenizedDataset | None = None,
                    val_buckets: dict[str, list[int]] | None = None,
                    log_fh=None) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    model.params.reset_adam()
    driver = _EpochDriver(model, cfg, log_fh, stage=1)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = stage_one_epoch(train_data, model, rng, lr=cfg.lr,
                                 affinity_weight=cfg.affinity_weight,
                                 batch_size=cfg.batch_size, epoch=epoch)
        val = {}
        if val_data is not None and val_buckets:
            val = evaluate_buckets(val_data, model, val_buckets, "var", cfg.seed,
                                   batch_size=cfg.batch_size)
        if driver.after_epoch(epoch, losses, val, time.perf_counter() - t0):
            break
    driver.restore_best()
    model.stage = max(model.stage, 1)
    return driver.entries


def train_stage_two(model: Model, train_data: TokenizedDataset, cfg: RunConfig,
                    val_data: TokenizedDataset | None = None,
                    val_buckets: dict[str, list[int]] | None = None,
                    log_fh=None, denoiser_override=None) -> list[dict]:
    if model.stage < 1:
        raise RuntimeError("stage two requires stage-one trained parameters")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    model.params.reset_adam()
    # frozen encoders + eval mode make the latents constant: encode once
    z0_d, z0_t = encode_clean_latents(train_data, model, cfg.batch_size)
    k_star = cfg.inference_step or model.schedule.T // 2
    driver = _EpochDriver(model, cfg, log_fh, stage=2)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = stage_two_epoch(z0_d, z0_t, train_data.labels, model, rng,
                                 lr=cfg.lr, affinity_weight=cfg.affinity_weight,
                                 batch_size=cfg.batch_size, epoch=epoch,
                                 denoiser_override=denoiser_override)
        val = {}
        if val_data is not None and val_buckets:
            val = evaluate_buckets(val_data, model, val_buckets, "diff", cfg.seed,
                                   inference_step=k_star, mc_samples=cfg.mc_samples,
                                   batch_size=cfg.batch_size)
        if driver.after_epoch(epoch, losses, val, time.perf_counter() - t0):
            break
    driver.restore_best()
    model.stage = max(model.stage, 2)
    return driver.entries


def train_run(cfg: RunConfig, denoiser_override=None) -> dict:
    """End-to-end run per config: load data/split, train stages, checkpoint."""
    data, _manifest = load_dataset(cfg.manifest)
    split = split_from_manifest(read_json(cfg.split))
    train_data = data.subset(split.train)
    val_buckets = {s: split.val[s] for s in SETTINGS}

    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "resolved_config.json", cfg.to_dict())

    model = build_model(data.drug_vocab.size, data.target_vocab.size, seed=cfg.seed,
                        schedule=build_schedule(cfg.diffusion_steps,
                                                cfg.beta_start, cfg.beta_end),
                        output_bias=float(train_data.labels.mean()))
    stage1_path = out_dir / "stage1.ckpt"
    stage2_path = out_dir / "stage2.ckpt"

    if cfg.stage == "two":
        if not stage1_path.exists():
            raise FileNotFoundError(
                f"stage two requires a stage-one checkpoint at {stage1_path}")
        meta = load_params(stage1_path, model.params)
        model.stage = int(meta.get("stage", 1))

    with (out_dir / "trainlog.jsonl").open("w", encoding="utf-8") as log_fh:
        if cfg.stage in ("one", "both"):
            train_stage_one(model, train_data, cfg, data, val_buckets, log_fh)
            save_params(stage1_path, model.params, meta={"stage": 1})
            save_adam(stage1_path, model.params)
        if cfg.stage in ("two", "both"):
            train_stage_two(model, train_data, cfg, data, val_buckets, log_fh,
                            denoiser_override=denoiser_override)
            save_params(stage2_path, model.params, meta={"stage": 2})
            save_adam(stage2_path, model.params)

    return {
        "checkpoint_dir": str(out_dir),
        "stage1": str(stage1_path) if stage1_path.exists() else None,
        "stage2": str(stage2_path) if stage2_path.exists() else None,
    }


def load_model_checkpoint(ckpt_path, drug_vocab_size: int, target_vocab_size: int,
                          cfg: RunConfig | None = None) -> Model:
    """Rebuild a model skeleton and load checkpointed values into it."""
    cfg = cfg or RunConfig()
    model = build_model(drug_vocab_size, target_vocab_size, seed=cfg.seed,
                        schedule=build_schedule(cfg.diffusion_steps,
                                                cfg.beta_start, cfg.beta_end))
    meta = load_params(ckpt_path, model.params)
    model.stage = int(meta.get("stage", 0))
    return model
