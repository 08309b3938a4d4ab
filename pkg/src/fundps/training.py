"""Denoising score matching with GRF noise, Adam, EMA and a resolution curriculum."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .denoiser import DenoiserModel, c_out, level_shapes, precondition, save_checkpoint
from .field import Grid2D, resample_array
from .grf import CovarianceSpec, GrfSampler, build_sampler
from .pde import load_dataset

log = logging.getLogger(__name__)

SIGMA_BUCKETS = (0.002, 0.02, 0.2, 2.0, 20.0, 80.0)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_samples: int | None = None
    ema_half_life_samples: float | None = None
    dropout: float = 0.13
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    batch_size: int = 16
    epochs: int = 1
    curriculum: list = field(default_factory=list)
    noise: CovarianceSpec = field(default_factory=CovarianceSpec.rbf)
    resample_method: str = "bicubic"
    seed: int = 0
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        self.curriculum = [(int(r), int(e)) for r, e in self.curriculum]
        res = [r for r, _ in self.curriculum]
        if res != sorted(res):
            raise ValueError("curriculum resolutions must be nondecreasing")

    def stages(self, native: int) -> list[tuple[int, int]]:
        return self.curriculum or [(native, self.epochs)]

    def total_samples(self, n: int, native: int) -> int:
        return sum(e for _, e in self.stages(native)) * n

    def resolved_warmup(self, total: int) -> float:
        """Warmup length; by default a tenth of all samples seen."""
        return float(self.warmup_samples) if self.warmup_samples is not None else 0.1 * total

    def resolved_half_life(self, total: int) -> float:
        """EMA half-life; by default 1/30 of all samples seen."""
        if self.ema_half_life_samples is not None:
            return float(self.ema_half_life_samples)
        return max(total / 30.0, float(self.batch_size))


def sample_sigma(rng: np.random.Generator, sigma_min: float = 0.002, sigma_max: float = 80.0, size=None):
    """Log-uniform noise levels on ``[sigma_min, sigma_max]``."""
    return np.exp(rng.uniform(np.log(sigma_min), np.log(sigma_max), size=size))


def loss_weight(sigma, sigma_data: float = 1.0):
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def estimate_sigma_data(data: np.ndarray) -> float:
    """Pooled standard deviation of a normalised ``[n, C, H, W]`` training set."""
    return float(np.sqrt(np.mean((data - data.mean(axis=(0, 2, 3), keepdims=True)) ** 2)))


@dataclass
class OptimizerState:
    """Adam moments, step counter and samples seen."""

    m: dict
    v: dict
    step: int = 0
    samples: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def noisy_batch(batch: np.ndarray, sigma: np.ndarray, noise: GrfSampler, rng) -> np.ndarray:
    eta = noise.sample_array(rng, 1.0, batch=batch.shape[:2])
    return batch + sigma.reshape(-1, 1, 1, 1) * eta


def batch_loss(model: DenoiserModel, params, batch: np.ndarray, sigma: np.ndarray, y: np.ndarray, rate=0.0, rng=None):
    """Mean over the batch of ``lambda(sigma) * mean((D(y) - a)^2)``; also per-sample values."""
    cfg = model.config
    out = precondition(cfg, params, y, sigma, rate, rng)
    per_el = np.prod(batch.shape[1:])
    w = loss_weight(sigma, cfg.sigma_data) / (per_el * batch.shape[0])
    err = ad.mul(out - batch, np.sqrt(w).reshape(-1, 1, 1, 1))
    per_sample = ad.sum(ad.mul(err, err), axis=(1, 2, 3))
    return ad.sum(per_sample), ad.value_of(per_sample) * batch.shape[0]


def train_step(
    model: DenoiserModel,
    batch: np.ndarray,
    rng: np.random.Generator,
    cfg: TrainConfig,
    state: OptimizerState,
    noise: GrfSampler,
    warmup: float = 0.0,
    half_life: float = np.inf,
) -> tuple[float, np.ndarray, np.ndarray]:
    """One Adam step on a normalised ``[B, C, H, W]`` batch.

    Returns the batch loss, the per-sample losses and the drawn sigmas.
    """
    bsz = batch.shape[0]
    sigma = sample_sigma(rng, cfg.sigma_min, cfg.sigma_max, size=bsz)
    y = noisy_batch(batch, sigma, noise, rng)
    tape = ad.Tape()
    names = sorted(model.params)
    traced = {k: tape.var(model.params[k]) for k in names}
    loss, per_sample = batch_loss(model, traced, batch, sigma, y, cfg.dropout, rng)
    value = float(loss.value)
    if not np.isfinite(value):
        bad = np.flatnonzero(~np.isfinite(per_sample))
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step}: batch indices {bad.tolist()}, sigma {sigma[bad].tolist()}"
        )
    grads = tape.gradients(loss, [traced[k] for k in names])

    state.step += 1
    state.samples += bsz
    lr = cfg.learning_rate * (min(1.0, state.samples / warmup) if warmup > 0 else 1.0)
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1 - b1**state.step
    corr2 = 1 - b2**state.step
    decay = 0.5 ** (bsz / half_life) if np.isfinite(half_life) else 1.0
    for k, g in zip(names, grads):
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        model.params[k] -= lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.eps)
        ema = model.ema_params[k]
        ema *= decay
        ema += (1 - decay) * model.params[k]
    return value, per_sample, sigma


def evaluation_loss(model: DenoiserModel, data: np.ndarray, noise: GrfSampler, seed: int = 0, n: int = 64,
                    use_ema: bool = False, levels=None) -> float:
    """Deterministic loss on a fixed subset, fixed sigma ladder and fixed noise."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(data), size=min(n, len(data)), replace=False)
    batch = data[np.sort(idx)]
    if levels is None:
        levels = np.geomspace(0.002, 80.0, 8)
    sigma = np.resize(np.asarray(levels, dtype=float), len(batch))
    y = noisy_batch(batch, sigma, noise, rng)
    params = model.ema_params if use_ema else model.params
    total = 0.0
    for s in range(0, len(batch), 16):
        sl = slice(s, s + 16)
        loss, _ = batch_loss(model, params, batch[sl], sigma[sl], y[sl])
        total += float(ad.value_of(loss)) * len(batch[sl])
    return total / len(batch)


def _bucket(sigma: float) -> str:
    edges = SIGMA_BUCKETS
    for lo, hi in zip(edges[:-1], edges[1:]):
        if sigma < hi:
            return f"{lo:g}-{hi:g}"
    return f"{edges[-2]:g}-{edges[-1]:g}"


@dataclass
class StageReport:
    resolution: int
    epochs: int
    steps: int
    initial_loss: float
    final_loss: float


@dataclass
class TrainResult:
    stages: list
    steps: int
    samples: int
    losses: list
    seconds: float


def train_on_array(
    model: DenoiserModel,
    data: np.ndarray,
    cfg: TrainConfig,
    log_path=None,
    checkpoint_path=None,
    extra_meta: dict | None = None,
) -> TrainResult:
    """Run the curriculum on an in-memory normalised dataset ``[n, C, H, W]``."""
    n, _, ny, nx = data.shape
    stages = cfg.stages(ny)
    for res, _ in stages:
        level_shapes(model.config, res, res)
    total = cfg.total_samples(n, ny)
    warmup = cfg.resolved_warmup(total)
    half_life = cfg.resolved_half_life(total)
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.zeros_like(model.params)
    reports, losses = [], []
    ema_loss = None
    start = time.perf_counter()
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "sigma_bucket", "loss", "ema_loss", "seconds"])
    try:
        for res, epochs in stages:
            stage_data = data if (res, res) == (ny, nx) else resample_array(data, (res, res), cfg.resample_method)
            noise = build_sampler(cfg.noise, Grid2D.square(res))
            initial = evaluation_loss(model, stage_data, noise, seed=cfg.seed)
            steps = 0
            for _ in range(epochs):
                order = rng.permutation(n)
                for s in range(0, n, cfg.batch_size):
                    if cfg.max_steps is not None and state.step >= cfg.max_steps:
                        break
                    batch = stage_data[order[s : s + cfg.batch_size]]
                    value, per_sample, sigma = train_step(model, batch, rng, cfg, state, noise, warmup, half_life)
                    steps += 1
                    losses.append(value)
                    ema_loss = value if ema_loss is None else 0.98 * ema_loss + 0.02 * value
                    if writer is not None:
                        elapsed = time.perf_counter() - start
                        buckets: dict[str, list] = {}
                        for sg, ls in zip(sigma, per_sample):
                            buckets.setdefault(_bucket(sg), []).append(ls)
                        for name in sorted(buckets, key=lambda b: float(b.split("-")[0])):
                            writer.writerow(
                                [state.step, name, f"{np.mean(buckets[name]):.6g}", f"{ema_loss:.6g}", f"{elapsed:.3f}"]
                            )
            final = evaluation_loss(model, stage_data, noise, seed=cfg.seed)
            reports.append(StageReport(res, epochs, steps, initial, final))
            log.info("stage %d^2: %d steps, eval loss %.4g -> %.4g", res, steps, initial, final)
    finally:
        if fh is not None:
            fh.close()
    model.metadata.update({"noise": cfg.noise.describe(), "steps": str(state.step), "samples": str(state.samples)})
    if extra_meta:
        model.metadata.update({k: str(v) for k, v in extra_meta.items()})
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(reports, state.step, state.samples, losses, time.perf_counter() - start)


def train_curriculum(model: DenoiserModel, dataset_dir, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Train on a dataset directory; writes ``checkpoint`` and ``train_log.csv`` to ``out_dir``."""
    data, manifest = load_dataset(dataset_dir, normalized=True)
    log_path = ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path, ckpt = out / "train_log.csv", out / "checkpoint"
    meta = {"pde": manifest.pde, "dataset": str(dataset_dir)}
    return train_on_array(model, data, cfg, log_path, ckpt, meta)


def edm_weight_balance(sigma, sigma_data: float = 1.0):
    """``lambda(sigma) * c_out(sigma)^2``; identically one under EDM weighting."""
    return loss_weight(sigma, sigma_data) * c_out(sigma, sigma_data) ** 2


__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "OptimizerState",
    "sample_sigma",
    "loss_weight",
    "estimate_sigma_data",
    "train_step",
    "evaluation_loss",
    "train_on_array",
    "train_curriculum",
    "edm_weight_balance",
]
