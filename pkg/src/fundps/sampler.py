"""Guided reverse diffusion: Karras schedule, Heun steps and gradient guidance.

A denoiser is any object with ``denoise(y, sigma)`` mapping a ``[B, C, H, W]``
batch (plain or traced) to its clean estimate. The guidance gradient is taken
through one denoiser call with respect to that call's input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .field import Field, Grid2D, Mask, apply_mask, resample_array
from .grf import CovarianceSpec, GrfSampler, build_sampler
from .pde import PdeSpec, residual

OBS_LOSSES = ("mse", "l2")
TASK_KINDS = ("forward", "inverse", "recover")


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, sigma: float, detail: str):
        super().__init__(f"sampler diverged at step {step} (sigma={sigma:.4g}): {detail}")
        self.step = step
        self.sigma = sigma


@dataclass(frozen=True, eq=False)
class SigmaSchedule:
    sigmas: np.ndarray
    n: int
    sigma_min: float
    sigma_max: float
    rho: float = 7.0

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=float)
        if s.ndim != 1 or len(s) < 2 or s[-1] != 0.0 or np.any(np.diff(s) >= 0):
            raise ValueError("sigmas must be strictly decreasing and end in 0")
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def from_levels(cls, levels) -> "SigmaSchedule":
        """Schedule through explicit positive levels followed by 0."""
        lv = np.append(np.asarray(levels, dtype=float), 0.0)
        return cls(lv, len(lv) - 1, float(lv[-2]), float(lv[0]), np.nan)

    def __len__(self):
        return len(self.sigmas)

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1

    def tail(self, start_sigma: float) -> "SigmaSchedule":
        """Levels strictly below ``start_sigma``, with ``start_sigma`` prepended."""
        lv = self.sigmas[:-1]
        lv = np.concatenate([[start_sigma], lv[lv < start_sigma]])
        return SigmaSchedule.from_levels(lv)


def karras_schedule(n: int, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> SigmaSchedule:
    """``n`` polynomially spaced levels from ``sigma_max`` to ``sigma_min``, then 0."""
    if n < 2:
        raise ValueError("karras schedule needs n >= 2")
    if not 0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    i = np.arange(n) / (n - 1)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    s = (hi + i * (lo - hi)) ** rho
    s[0], s[-1] = sigma_max, sigma_min
    return SigmaSchedule(np.append(s, 0.0), n, sigma_min, sigma_max, rho)


@dataclass(frozen=True, eq=False)
class GuidanceTask:
    """Observation and PDE terms guiding the sampler.

    ``observed`` lives in the same (normalised) space as the sampled field.
    ``mean``/``std`` map that space to physical units for the PDE residual,
    whose values are divided by the channel-0 scale before the Huber loss.
    """

    mask: Mask
    observed: np.ndarray
    obs_loss: str = "mse"
    obs_weight: float = 0.0
    pde_spec: PdeSpec | None = None
    pde_weight: float = 0.0
    huber_delta: float = 1.0
    pde_active_below_sigma: float = 1.0
    mean: tuple = ()
    std: tuple = ()

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=float).ravel()
        object.__setattr__(self, "observed", obs)
        if obs.size != self.mask.count:
            raise ValueError(f"{obs.size} observed values for a mask with {self.mask.count} true entries")
        if self.obs_loss not in OBS_LOSSES:
            raise ValueError(f"obs_loss must be one of {OBS_LOSSES}")
        if self.obs_weight < 0 or self.pde_weight < 0:
            raise ValueError("guidance weights must be non-negative")
        if self.pde_weight > 0 and self.pde_spec is None:
            raise ValueError("a PDE weight needs a pde_spec")

    @property
    def grid(self) -> Grid2D:
        return self.mask.grid

    def effective_weight(self, zeta: float, sigma: float) -> float:
        return effective_weight(zeta, sigma)

    def pde_active(self, sigma: float) -> bool:
        return self.pde_weight > 0 and self.pde_spec is not None and sigma < self.pde_active_below_sigma

    def is_unguided(self) -> bool:
        return (self.obs_weight == 0 or self.mask.count == 0) and self.pde_weight == 0

    def with_weights(self, obs_weight=None, pde_weight=None) -> "GuidanceTask":
        kw = dict(self.__dict__)
        if obs_weight is not None:
            kw["obs_weight"] = obs_weight
        if pde_weight is not None:
            kw["pde_weight"] = pde_weight
        return GuidanceTask(**kw)


def effective_weight(zeta: float, sigma: float) -> float:
    """Guidance weight schedule: ``sigma * zeta`` below one, ``zeta`` otherwise."""
    return sigma * zeta if sigma < 1 else zeta


def unguided_task(grid: Grid2D, channels: int) -> GuidanceTask:
    return GuidanceTask(Mask.full(grid, channels, False), np.zeros(0))


# ---------------------------------------------------------------------------
# guidance


def observation_loss(task: GuidanceTask, a0, chains: int):
    """Observation misfit summed over chains; ``a0`` is ``[B, C, H, W]``."""
    pred = ad.gather(a0, task.mask.indicator)
    r = pred - task.observed[None, :]
    n = max(task.observed.size, 1)
    if task.obs_loss == "mse":
        return ad.mul(ad.squared_l2(r), 1.0 / n)
    per_chain = ad.sqrt(ad.squared_l2(r, axis=1) + 1e-30)
    return ad.sum(per_chain)


def pde_loss(task: GuidanceTask, a0):
    """Mean Huber loss of the scaled PDE residual, summed over chains."""
    v = ad.value_of(a0)
    mean = np.asarray(task.mean or [0.0] * v.shape[1], dtype=float)
    std = np.asarray(task.std or [1.0] * v.shape[1], dtype=float)
    a = a0[:, 0] * std[0] + mean[0]
    u = a0[:, 1] * std[1] + mean[1]
    r = residual(task.pde_spec, a, u)
    ny, nx = v.shape[-2:]
    scale = 1.0 / std[0]
    return ad.mul(ad.sum(ad.huber(ad.mul(r, scale), task.huber_delta)), 1.0 / ((ny - 2) * (nx - 2)))


def guided_denoise(model, task: GuidanceTask, x: np.ndarray, sigma: float):
    """Denoise a batch and, when guidance is active, the gradient of the weighted loss.

    Returns ``(a0_hat, gradient or None)``.
    """
    pde_on = task.pde_active(sigma)
    obs_on = task.obs_weight > 0 and task.mask.count > 0
    if not (obs_on or pde_on):
        return np.asarray(ad.value_of(model.denoise(x, sigma))), None
    tape = ad.Tape()
    xt = tape.var(x)
    a0 = model.denoise(xt, sigma)
    total = 0.0
    if obs_on:
        total = ad.mul(observation_loss(task, a0, x.shape[0]), effective_weight(task.obs_weight, sigma))
    if pde_on:
        total = total + ad.mul(pde_loss(task, a0), effective_weight(task.pde_weight, sigma))
    (g,) = tape.gradients(total, [xt])
    return np.array(ad.value_of(a0)), g


def guidance_gradient(model, task: GuidanceTask, a: Field, sigma: float) -> Field:
    """Gradient of the weighted guidance loss at ``a`` through one denoiser call."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    _, g = guided_denoise(model, task, a.values[None], sigma)
    if g is None:
        return Field(a.grid, np.zeros_like(a.values))
    return Field(a.grid, g[0])


# ---------------------------------------------------------------------------
# sampling


def _check(x: np.ndarray, step: int, sigma: float, limit: float):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(step, sigma, "non-finite values")
    peak = float(np.abs(x).max()) if x.size else 0.0
    if peak > limit:
        raise DivergenceError(step, sigma, f"max |a| = {peak:.3g} exceeds {limit:g}")


def run_chains(model, task: GuidanceTask, schedule: SigmaSchedule, x: np.ndarray, limit: float = 1e6) -> np.ndarray:
    """Heun sampler with guidance from the batch ``x`` at ``schedule.sigmas[0]``."""
    s = schedule.sigmas
    x = np.array(x, dtype=float)
    for i in range(len(s) - 1):
        sc, sn = float(s[i]), float(s[i + 1])
        a0, g = guided_denoise(model, task, x, sc)
        d = (x - a0) / sc
        x_next = x + (sn - sc) * d
        if sn != 0:
            a0b, g = guided_denoise(model, task, x_next, sn)
            d2 = (x_next - a0b) / sn
            x_next = x + (sn - sc) * 0.5 * (d + d2)
        if g is not None:
            x_next = x_next - g
        x = x_next
        _check(x, i, sn if sn else sc, limit)
    return x


def _noise_sampler(noise, grid: Grid2D) -> GrfSampler:
    if isinstance(noise, GrfSampler):
        if noise.grid != grid:
            raise ValueError("noise sampler grid differs from the task grid")
        return noise
    return build_sampler(noise, grid)


def default_noise(model) -> CovarianceSpec:
    meta = getattr(model, "metadata", None) or {}
    if "noise" in meta:
        return CovarianceSpec.parse(meta["noise"])
    return getattr(model, "noise_spec", None) or CovarianceSpec.rbf()


def initial_state(noise: GrfSampler, channels: int, chains: int, sigma: float, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return noise.sample_array(rng, sigma, batch=(chains, channels))


def fundps_sample(model, task: GuidanceTask, schedule: SigmaSchedule, seed, chains: int = 1,
                  noise=None, limit: float = 1e6) -> np.ndarray:
    """Guided samples ``[chains, C, H, W]`` starting from ``N(0, sigma_max^2 C)`` noise."""
    grid = task.grid
    sampler = _noise_sampler(noise if noise is not None else default_noise(model), grid)
    x = initial_state(sampler, task.mask.channels, chains, float(schedule.sigmas[0]), seed)
    return run_chains(model, task, schedule, x, limit)


def fundps_sample_field(model, task: GuidanceTask, schedule: SigmaSchedule, seed, noise=None) -> Field:
    return Field(task.grid, fundps_sample(model, task, schedule, seed, 1, noise)[0])


# ---------------------------------------------------------------------------
# two-stage multi-resolution inference


@dataclass(frozen=True)
class ReNoiseConfig:
    low_res: Grid2D
    t_up: float = 0.8
    restart_sigma: float = 2.0
    stage1_sigma_min: float = 0.2
    upscale: str = "fourier"

    def __post_init__(self):
        if not 0 <= self.t_up < 1:
            raise ValueError("t_up must lie in [0, 1)")
        if not 1 <= self.restart_sigma <= 10:
            raise ValueError(f"restart sigma must lie in [1, 10], got {self.restart_sigma}")
        if self.stage1_sigma_min <= 0:
            raise ValueError("stage-1 sigma_min must be positive")
        if self.upscale not in ("fourier", "bicubic"):
            raise ValueError("upscale must be 'fourier' or 'bicubic'")


def coarsen_task(task: GuidanceTask, grid: Grid2D) -> GuidanceTask:
    """Re-mask a task on a coarser grid by block-averaging observed values.

    A coarse cell is observed when any fine point in its block is; its value
    is the mean of the fine observations inside the block.
    """
    fy, fx = task.grid.ny // grid.ny, task.grid.nx // grid.nx
    if fy * grid.ny != task.grid.ny or fx * grid.nx != task.grid.nx:
        raise ValueError("coarse grid must divide the task grid")
    c = task.mask.channels
    ind = task.mask.indicator
    vals = np.zeros(ind.shape)
    vals[ind] = task.observed
    shape = (c, grid.ny, fy, grid.nx, fx)
    count = ind.reshape(shape).sum(axis=(2, 4))
    total = vals.reshape(shape).sum(axis=(2, 4))
    coarse = count > 0
    observed = total[coarse] / count[coarse]
    pde = PdeSpec(task.pde_spec.kind, grid, task.pde_spec.k) if task.pde_spec is not None else None
    kw = dict(task.__dict__)
    kw.update(mask=Mask(grid, coarse), observed=observed, pde_spec=pde)
    return GuidanceTask(**kw)


def split_schedule(schedule: SigmaSchedule, cfg: ReNoiseConfig) -> tuple[SigmaSchedule | None, SigmaSchedule]:
    """Split a step budget: ``t_up`` of it at low resolution, the rest after the restart."""
    n = schedule.steps
    n1 = int(round(cfg.t_up * n))
    if n1 == 0:
        return None, schedule
    n2 = n - n1
    if n1 < 2 or n2 < 2:
        raise ValueError(f"cannot split {n} steps into stages of {n1} and {n2}")
    rho = schedule.rho if np.isfinite(schedule.rho) else 7.0
    s1 = karras_schedule(n1, cfg.stage1_sigma_min, float(schedule.sigmas[0]), rho)
    s2 = karras_schedule(n2, schedule.sigma_min, cfg.restart_sigma, rho)
    return s1, s2


def renoise_sample(model, task: GuidanceTask, cfg: ReNoiseConfig, schedules, seed, chains: int = 1,
                   noise=None, low_model=None) -> np.ndarray:
    """Low-resolution sampling, upscale, fresh noise at the restart level, refinement.

    ``schedules`` is a full-budget :class:`SigmaSchedule` (split by ``t_up``) or
    an explicit ``(stage1, stage2)`` pair. ``low_model`` denoises the coarse
    stage and defaults to ``model``.
    """
    if isinstance(schedules, SigmaSchedule):
        s1, s2 = split_schedule(schedules, cfg)
    else:
        s1, s2 = schedules
    if s1 is None:
        return fundps_sample(model, task, s2, seed, chains, noise)
    spec = noise if noise is not None else default_noise(model)
    if isinstance(spec, GrfSampler):
        spec = spec.spec
    seeds = np.random.SeedSequence(seed).spawn(2)
    low_task = coarsen_task(task, cfg.low_res)
    low_model = low_model if low_model is not None else model
    low = fundps_sample(low_model, low_task, s1, seeds[0], chains, spec)
    up = resample_array(low, task.grid.shape, cfg.upscale)
    high_noise = build_sampler(spec, task.grid)
    x = up + high_noise.sample_array(np.random.default_rng(seeds[1]), float(s2.sigmas[0]),
                                     batch=up.shape[:2])
    return run_chains(model, task, s2, x)


# ---------------------------------------------------------------------------
# tasks


def _choose(rng, size: int, fraction: float) -> np.ndarray:
    k = int(np.floor(fraction * size + 0.5))
    flat = np.zeros(size, dtype=bool)
    flat[rng.choice(size, size=k, replace=False)] = True
    return flat


def solve_task(kind: str, sample: Field, obs_fraction: float, seed, obs_fraction_b: float | None = None,
               **task_kwargs) -> GuidanceTask:
    """Observation task over a joint ``(a, u)`` field.

    forward observes a fraction of channel 0, inverse of channel 1, recover
    of both (``obs_fraction_b`` for channel 1, defaulting to ``obs_fraction``).
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"task kind must be one of {TASK_KINDS}")
    fractions = [obs_fraction] + ([obs_fraction_b] if obs_fraction_b is not None else [])
    if any(not 0 <= f <= 1 for f in fractions):
        raise ValueError("observation fractions must lie in [0, 1]")
    if sample.channels < 2:
        raise ValueError("tasks act on joint two-channel fields")
    rng = np.random.default_rng(seed)
    grid = sample.grid
    ind = np.zeros((sample.channels, *grid.shape), dtype=bool)
    if kind == "forward":
        ind[0] = _choose(rng, grid.size, obs_fraction).reshape(grid.shape)
    elif kind == "inverse":
        ind[1] = _choose(rng, grid.size, obs_fraction).reshape(grid.shape)
    else:
        fb = obs_fraction if obs_fraction_b is None else obs_fraction_b
        ind[0] = _choose(rng, grid.size, obs_fraction).reshape(grid.shape)
        ind[1] = _choose(rng, grid.size, fb).reshape(grid.shape)
    mask = Mask(grid, ind)
    return GuidanceTask(mask, apply_mask(sample, mask), **task_kwargs)


__all__ = [
    "SigmaSchedule",
    "GuidanceTask",
    "ReNoiseConfig",
    "DivergenceError",
    "karras_schedule",
    "effective_weight",
    "unguided_task",
    "guidance_gradient",
    "guided_denoise",
    "fundps_sample",
    "fundps_sample_field",
    "run_chains",
    "renoise_sample",
    "coarsen_task",
    "split_schedule",
    "solve_task",
]
