"""Command-line pipelines: gen-data, train, sample, eval, verify, export-image.

Every subcommand takes ``--config FILE`` (``key=value`` lines, ``#`` comments)
plus one flag per key; flags override the file. Each run writes its outputs and
the fully resolved configuration to a fresh ``runs/<timestamp>_seed<seed>``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("fundps")

REQUIRED = object()


class CliError(Exception):
    category = "internal"


class ConfigError(CliError):
    category = "config"


class UsageError(CliError):
    category = "usage"


class VerificationFailed(CliError):
    category = "verification"


# key -> (default, converter, help)
COMMON = {
    "seed": (REQUIRED, int, "master random seed (mandatory)"),
    "runs_dir": ("runs", str, "parent directory for run outputs"),
}

KEYS = {
    "gen-data": {
        "pde": (REQUIRED, str, "darcy, poisson or helmholtz"),
        "n": (REQUIRED, int, "number of samples"),
        "resolution": (32, int, "grid points per side"),
        "prior": ("matern_op(tau=3,alpha=2,scale=1)", str, "coefficient prior"),
        "k": (1.0, float, "Helmholtz wavenumber"),
        "workers": (1, int, "parallel worker processes"),
    },
    "train": {
        "data": (REQUIRED, str, "dataset directory"),
        "epochs": (20, int, "epochs at the native resolution"),
        "curriculum": ("", str, "stages as res:epochs,res:epochs"),
        "batch_size": (16, int, "batch size"),
        "learning_rate": (2e-3, float, "peak Adam learning rate"),
        "warmup_samples": (-1, int, "warmup length in samples (-1: 10% of total)"),
        "ema_half_life_samples": (-1.0, float, "EMA half-life in samples (-1: 1/30 of total)"),
        "dropout": (0.13, float, "dropout rate on channel mixing"),
        "sigma_min": (0.002, float, "smallest training noise level"),
        "sigma_max": (80.0, float, "largest training noise level"),
        "noise": ("rbf(length_scale=0.05,jitter=1e-12)", str, "diffusion noise covariance"),
        "levels": (2, int, "U-net levels"),
        "base_channels": (16, int, "channels at level 0"),
        "modes": ("8,4", str, "Fourier modes per level"),
        "projection_channels": (32, int, "projection width"),
        "max_steps": (0, int, "stop after this many steps (0: no limit)"),
    },
    "sample": {
        "checkpoint": (REQUIRED, str, "trained checkpoint"),
        "pde": ("", str, "PDE kind (defaults to the checkpoint's)"),
        "data": ("", str, "dataset of ground-truth samples (generated when empty)"),
        "samples": (1, int, "number of ground-truth samples to reconstruct"),
        "start": (0, int, "index of the first dataset sample"),
        "prior": ("matern_op(tau=3,alpha=2,scale=1)", str, "prior for generated ground truth"),
        "task": ("forward", str, "forward, inverse or recover"),
        "obs_fraction": (0.03, float, "observed fraction of the observed channel"),
        "obs_fraction_b": (-1.0, float, "channel-1 fraction for recover (-1: same)"),
        "steps": (200, int, "sampler steps"),
        "sigma_min": (0.002, float, "smallest sampler noise level"),
        "sigma_max": (80.0, float, "largest sampler noise level"),
        "rho": (7.0, float, "schedule exponent"),
        "obs_loss": ("mse", str, "mse or l2"),
        "zeta_obs": (100.0, float, "observation guidance weight"),
        "zeta_pde": (0.0, float, "PDE guidance weight"),
        "huber_delta": (1.0, float, "Huber threshold for the PDE loss"),
        "pde_active_below": (1.0, float, "apply the PDE loss below this sigma"),
        "chains": (1, int, "independent chains per sample (averaged)"),
        "renoise": (0, int, "1 enables two-stage sampling"),
        "low_res": (16, int, "stage-1 resolution"),
        "t_up": (0.8, float, "fraction of steps at low resolution"),
        "restart_sigma": (2.0, float, "noise level re-injected after upscaling"),
        "stage1_sigma_min": (0.2, float, "last noise level of stage 1"),
    },
    "eval": {
        "run": (REQUIRED, str, "sample run directory with recon/truth files"),
        "threshold": (-1.0, float, "binarisation threshold (-1: 7.5 for darcy, off otherwise)"),
    },
    "verify": {
        "oracle": ("all", str, "tweedie, sweep, posterior or all"),
    },
    "export-image": {
        "field": (REQUIRED, str, "FGRD file to export"),
    },
}


# ---------------------------------------------------------------------------
# configuration


def parse_config_text(text: str, allowed) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw.strip()!r}")
        k, _, v = line.partition("=")
        k = k.strip().replace("-", "_")
        if k not in allowed:
            raise ConfigError(f"config line {lineno}: unknown key {k!r}")
        out[k] = (v.strip(), lineno)
    return out


def resolve(command: str, file_values: dict, flag_values: dict) -> dict:
    spec = {**COMMON, **KEYS[command]}
    cfg = {}
    for key, (default, conv, _) in spec.items():
        if flag_values.get(key) is not None:
            raw, where = flag_values[key], f"flag --{key.replace('_', '-')}"
        elif key in file_values:
            raw, line = file_values[key]
            where = f"config line {line}"
        elif default is REQUIRED:
            raise UsageError(f"missing required key {key!r} for {command}")
        else:
            cfg[key] = default
            continue
        try:
            cfg[key] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value {raw!r} for {key}: {exc}") from None
    return cfg


def write_resolved(cfg: dict, command: str, run_dir: Path) -> None:
    lines = [f"command={command}"] + [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (run_dir / "config").write_text("\n".join(lines) + "\n")


def make_run_dir(cfg: dict) -> Path:
    parent = Path(cfg["runs_dir"])
    parent.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{stamp}_seed{cfg['seed']}"
    run = parent / base
    k = 1
    while True:
        try:
            run.mkdir()
            return run
        except FileExistsError:
            run = parent / f"{base}-{k}"
            k += 1


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg, run: Path):
    from .field import Grid2D
    from .grf import CovarianceSpec
    from .pde import PdeSpec, gen_dataset

    spec = PdeSpec(cfg["pde"], Grid2D.square(cfg["resolution"]), cfg["k"])
    prior = CovarianceSpec.parse(cfg["prior"])
    m = gen_dataset(spec, prior, cfg["n"], cfg["seed"], run / "data", workers=cfg["workers"])
    print(f"wrote {m.n} samples to {run / 'data'}")


def _parse_curriculum(text: str):
    stages = []
    for part in text.split(","):
        if part.strip():
            r, _, e = part.partition(":")
            stages.append((int(r), int(e)))
    return stages


def cmd_train(cfg, run: Path):
    from .denoiser import DenoiserModel, UnoConfig
    from .grf import CovarianceSpec
    from .pde import load_dataset
    from .training import TrainConfig, estimate_sigma_data, train_on_array

    data, manifest = load_dataset(cfg["data"], normalized=True)
    ucfg = UnoConfig(
        in_channels=data.shape[1],
        levels=cfg["levels"],
        base_channels=cfg["base_channels"],
        modes=tuple(int(x) for x in cfg["modes"].split(",")),
        projection_channels=cfg["projection_channels"],
        sigma_data=round(estimate_sigma_data(data), 6),
    )
    tcfg = TrainConfig(
        learning_rate=cfg["learning_rate"],
        warmup_samples=None if cfg["warmup_samples"] < 0 else cfg["warmup_samples"],
        ema_half_life_samples=None if cfg["ema_half_life_samples"] < 0 else cfg["ema_half_life_samples"],
        dropout=cfg["dropout"],
        sigma_min=cfg["sigma_min"],
        sigma_max=cfg["sigma_max"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        curriculum=_parse_curriculum(cfg["curriculum"]),
        noise=CovarianceSpec.parse(cfg["noise"]),
        seed=cfg["seed"],
        max_steps=cfg["max_steps"] or None,
    )
    model = DenoiserModel(ucfg, seed=cfg["seed"])
    meta = {"pde": manifest.pde, "k": manifest.k, "resolution": manifest.grid.nx}
    for c, (mu, sd) in enumerate(zip(manifest.mean, manifest.std)):
        meta[f"mean_{c}"] = repr(mu)
        meta[f"std_{c}"] = repr(sd)
    res = train_on_array(model, data, tcfg, run / "train_log.csv", run / "checkpoint", meta)
    for st in res.stages:
        print(f"stage {st.resolution}^2: {st.steps} steps, eval loss {st.initial_loss:.4g} -> {st.final_loss:.4g}")
    print(f"checkpoint: {run / 'checkpoint'}")


def _stats_from_meta(meta: dict, channels: int):
    mean = [float(meta.get(f"mean_{c}", 0.0)) for c in range(channels)]
    std = [float(meta.get(f"std_{c}", 1.0)) for c in range(channels)]
    return np.array(mean), np.array(std)


def cmd_sample(cfg, run: Path):
    from .denoiser import load_checkpoint
    from .field import Field, Grid2D, write_field
    from .grf import CovarianceSpec
    from .metrics import DARCY_THRESHOLD, EvalResult
    from .pde import PdeSpec, generate_sample, load_dataset
    from .sampler import ReNoiseConfig, fundps_sample, karras_schedule, renoise_sample, solve_task

    model = load_checkpoint(cfg["checkpoint"])
    meta = model.metadata
    nch = model.config.in_channels
    mean, std = _stats_from_meta(meta, nch)
    pde = cfg["pde"] or meta.get("pde", "")
    if not pde:
        raise UsageError("no PDE kind given and none recorded in the checkpoint")
    k = float(meta.get("k", 1.0))
    if cfg["data"]:
        raw, manifest = load_dataset(cfg["data"], normalized=False)
        grid = manifest.grid
        truths = raw[cfg["start"] : cfg["start"] + cfg["samples"]]
    else:
        grid = Grid2D.square(int(meta.get("resolution", 32)))
        spec = PdeSpec(pde, grid, k)
        prior = CovarianceSpec.parse(cfg["prior"])
        truths = np.stack([generate_sample(spec, prior, cfg["seed"], i).values for i in range(cfg["samples"])])
    if len(truths) == 0:
        raise UsageError("no ground-truth samples selected")
    model.check_resolution(grid.ny, grid.nx)
    pde_spec = PdeSpec(pde, grid, k)
    schedule = karras_schedule(cfg["steps"], cfg["sigma_min"], cfg["sigma_max"], cfg["rho"])
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(2 * len(truths))
    result = EvalResult()
    threshold = DARCY_THRESHOLD if pde == "darcy" else None
    for i, truth in enumerate(truths):
        norm = Field(grid, (truth - mean[:, None, None]) / std[:, None, None])
        task = solve_task(
            cfg["task"], norm, cfg["obs_fraction"], seeds[2 * i],
            obs_fraction_b=None if cfg["obs_fraction_b"] < 0 else cfg["obs_fraction_b"],
            obs_loss=cfg["obs_loss"], obs_weight=cfg["zeta_obs"], pde_spec=pde_spec,
            pde_weight=cfg["zeta_pde"], huber_delta=cfg["huber_delta"],
            pde_active_below_sigma=cfg["pde_active_below"], mean=tuple(mean), std=tuple(std),
        )
        if cfg["renoise"]:
            rcfg = ReNoiseConfig(Grid2D.square(cfg["low_res"]), cfg["t_up"], cfg["restart_sigma"],
                                 cfg["stage1_sigma_min"])
            x = renoise_sample(model, task, rcfg, schedule, seeds[2 * i + 1], cfg["chains"])
        else:
            x = fundps_sample(model, task, schedule, seeds[2 * i + 1], cfg["chains"])
        pred = Field(grid, x.mean(axis=0) * std[:, None, None] + mean[:, None, None])
        true_f = Field(grid, truth)
        write_field(pred, run / f"recon_{i:04d}.fgrd")
        write_field(true_f, run / f"truth_{i:04d}.fgrd")
        row = result.add(f"{i:04d}", pred, true_f, channels=range(nch), threshold=threshold)
        print(" ".join(f"{k}={v:.4g}" if not isinstance(v, str) else f"{k}={v}" for k, v in row.items()))
    (run / "pde").write_text(pde + "\n")
    result.write_csv(run / "metrics.csv")


def cmd_eval(cfg, run: Path):
    from .field import read_field
    from .metrics import DARCY_THRESHOLD, EvalResult

    src = Path(cfg["run"])
    recons = sorted(src.glob("recon_*.fgrd"))
    if not recons:
        raise UsageError(f"no recon_*.fgrd files in {src}")
    threshold = cfg["threshold"]
    if threshold < 0:
        pde_file = src / "pde"
        pde = pde_file.read_text().strip() if pde_file.exists() else ""
        threshold = DARCY_THRESHOLD if pde == "darcy" else None
    result = EvalResult()
    for path in recons:
        tag = path.stem.split("_", 1)[1]
        pred = read_field(path)
        truth = read_field(src / f"truth_{tag}.fgrd")
        result.add(tag, pred, truth, channels=range(truth.channels), threshold=threshold)
    result.write_csv(run / "metrics.csv")
    for k, (m, s) in result.aggregate().items():
        print(f"{k}: mean {m:.4g} std {s:.4g}")


def _verify_tweedie(seed: int):
    from .oracle import GaussianMixture1D, posterior_mean_quadrature, tweedie_from_score, tweedie_posterior_mean

    rng = np.random.default_rng(seed)
    y = np.linspace(-5, 5, 101)
    worst = 0.0
    for _ in range(100):
        gm = GaussianMixture1D.random(rng)
        worst = max(worst, float(np.abs(tweedie_posterior_mean(gm, y) - tweedie_from_score(gm, y)).max()))
    two = GaussianMixture1D([0.5, 0.5], [-1.0, 1.0], [0.0, 0.0], 1.0)
    one = GaussianMixture1D([1.0], [0.0], [1.0], 1.0)
    three = GaussianMixture1D([0.2, 0.5, 0.3], [-2.0, 0.3, 1.5], [0.4, 1.0, 0.2], 0.8)
    return [
        ("tweedie_identity_random_mixtures", worst, 1e-8),
        ("two_point_masses_tanh", float(np.abs(tweedie_posterior_mean(two, y) - np.tanh(y)).max()), 1e-12),
        ("single_gaussian_half", float(np.abs(tweedie_posterior_mean(one, y) - y / 2).max()), 1e-12),
        ("three_component_quadrature",
         abs(float(tweedie_posterior_mean(three, 0.7)) - posterior_mean_quadrature(three, 0.7)), 1e-8),
    ]


def _verify_sweep(seed: int, run: Path):
    from .grf import CovarianceSpec
    from .oracle import sweep_growth, verify_tweedie_resolution_sweep

    rows = verify_tweedie_resolution_sweep(CovarianceSpec.matern_op(), noising=CovarianceSpec.rbf(),
                                           seed=seed, report_path=run / "sweep.csv")
    out = [(f"sweep_{r.resolution}_sigma{r.sigma:g}", r.discrepancy, 1e-8) for r in rows]
    out.append(("sweep_growth_ratio", sweep_growth(rows), 1.5))
    return out


def _verify_posterior(seed: int):
    from .field import Grid2D, Mask
    from .grf import CovarianceSpec
    from .oracle import LinearGaussianProblem, exact_posterior, mc_posterior_moments

    grid = Grid2D.square(8)
    rng = np.random.default_rng(seed)
    ind = np.zeros(grid.size, dtype=bool)
    ind[rng.choice(grid.size, 6, replace=False)] = True
    lg = LinearGaussianProblem(grid, CovarianceSpec.matern_op(), Mask(grid, ind.reshape(1, 8, 8)), 0.05)
    u = rng.standard_normal(6)
    post = exact_posterior(lg, u)
    mc, se = mc_posterior_moments(lg, u, 10**6, seed + 1)
    z = float(np.max(np.abs(mc - post.mean.values.ravel()) / se))
    return [("posterior_mean_vs_monte_carlo_z", z, 3.0)]


def cmd_verify(cfg, run: Path):
    which = cfg["oracle"]
    checks = []
    if which in ("tweedie", "all"):
        checks += _verify_tweedie(cfg["seed"])
    if which in ("sweep", "all"):
        checks += _verify_sweep(cfg["seed"], run)
    if which in ("posterior", "all"):
        checks += _verify_posterior(cfg["seed"])
    if not checks:
        raise UsageError(f"unknown oracle {which!r}; choose tweedie, sweep, posterior or all")
    failed = []
    with open(run / "verify.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "value", "tolerance", "pass"])
        for name, value, tol in checks:
            ok = value <= tol
            w.writerow([name, f"{value:.3e}", f"{tol:g}", int(ok)])
            print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (tol {tol:g})")
            if not ok:
                failed.append(name)
    if failed:
        raise VerificationFailed(f"{len(failed)} check(s) failed: {', '.join(failed)}")


def cmd_export_image(cfg, run: Path):
    from .field import read_field, write_pgm

    f = read_field(cfg["field"])
    outs = write_pgm(f, run / Path(cfg["field"]).stem)
    lines = [f"{p.name} min={lo!r} max={hi!r}" for p, lo, hi in outs]
    (run / "scaling.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "export-image": cmd_export_image,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fundps", description="Function-space diffusion posterior sampling")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, keys in KEYS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value configuration file")
        if name == "verify":
            sp.add_argument("oracle_name", nargs="?", help="tweedie, sweep, posterior or all")
        for key, (default, _, help_text) in {**COMMON, **keys}.items():
            shown = "required" if default is REQUIRED else f"default {default}"
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help=f"{help_text} ({shown})")
    return p


def _error_category(exc: BaseException) -> str:
    from .denoiser import CheckpointError, ResolutionError
    from .field import FieldFormatError
    from .pde import SolverError
    from .sampler import DivergenceError
    from .training import TrainingDivergedError

    if isinstance(exc, CliError):
        return exc.category
    for cls, name in (
        (DivergenceError, "divergence"),
        (TrainingDivergedError, "divergence"),
        (SolverError, "solver"),
        (FieldFormatError, "format"),
        (CheckpointError, "format"),
        (ResolutionError, "resolution"),
        (OSError, "io"),
        (ValueError, "value"),
    ):
        if isinstance(exc, cls):
            return name
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    command = args.command
    try:
        allowed = {**COMMON, **KEYS[command]}
        file_values = {}
        if args.config:
            file_values = parse_config_text(Path(args.config).read_text(), allowed)
        flags = {k: getattr(args, k) for k in allowed}
        if command == "verify" and args.oracle_name:
            flags["oracle"] = args.oracle_name
        cfg = resolve(command, file_values, flags)
        run = make_run_dir(cfg)
        write_resolved(cfg, command, run)
        print(f"run directory: {run}")
        COMMANDS[command](cfg, run)
    except Exception as exc:  # noqa: BLE001 - reported as a category line
        print(f"error: {_error_category(exc)}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2 if isinstance(exc, (UsageError, ConfigError)) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
