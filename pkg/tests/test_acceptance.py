"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed at the end of the session) and
then asserts the same condition, so a failing criterion fails its test.
"""

import time

import numpy as np
import pytest
from helpers import fd_check, record
from test_autodiff import PRIMITIVES
from test_cli import run, strip_seconds, tree_bytes
from test_denoiser import TINY
from test_pde import manufactured_error

from fundps.denoiser import DenoiserModel, UnoConfig
from fundps.field import Field, Grid2D, Mask
from fundps.grf import CovarianceSpec, build_sampler
from fundps.metrics import rel_l2
from fundps.oracle import (
    ExactDenoiser,
    GaussianMixture1D,
    LinearGaussianProblem,
    exact_posterior,
    sweep_growth,
    tweedie_from_score,
    tweedie_posterior_mean,
    verify_tweedie_resolution_sweep,
)
from fundps.pde import PdeSpec, darcy_coeff_pushforward, gen_dataset, load_dataset, solve_darcy_traced
from fundps.sampler import (
    DivergenceError,
    GuidanceTask,
    ReNoiseConfig,
    coarsen_task,
    effective_weight,
    fundps_sample,
    karras_schedule,
    renoise_sample,
    solve_task,
    unguided_task,
)
from fundps.training import TrainConfig, evaluation_loss, train_on_array

# guidance weight tuned on the linear-Gaussian problem below
TUNED_ZETA = 100.0


@pytest.fixture(scope="module")
def linear16():
    """16x16 linear-Gaussian problem, 8% observed, noise 0.05, rbf diffusion noise."""
    g = Grid2D.square(16)
    rng = np.random.default_rng(1)
    ind = np.zeros(g.size, dtype=bool)
    ind[rng.choice(g.size, round(0.08 * g.size), replace=False)] = True
    mask = Mask(g, ind.reshape(1, 16, 16))
    lg = LinearGaussianProblem(g, CovarianceSpec.matern_op(), mask, 0.05, CovarianceSpec.rbf())
    truth = Field(g, lg.prior_sampler.sample_array(np.random.default_rng(5))[None])
    u = lg.observe(truth, seed=6)
    return lg, u, exact_posterior(lg, u)


def guided(lg, u, zeta=TUNED_ZETA):
    return GuidanceTask(lg.mask, u, obs_loss="mse", obs_weight=zeta)


def test_criterion_01_tweedie_identity():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    y = np.linspace(-5, 5, 201)
    worst = max(np.abs(tweedie_posterior_mean(gm, y) - tweedie_from_score(gm, y)).max()
                for gm in (GaussianMixture1D.random(rng) for _ in range(100)))
    tanh = np.abs(tweedie_posterior_mean(GaussianMixture1D([0.5, 0.5], [-1, 1], [0, 0], 1.0), y) - np.tanh(y)).max()
    half = np.abs(tweedie_posterior_mean(GaussianMixture1D([1.0], [0.0], [1.0], 1.0), y) - y / 2).max()
    dt = time.perf_counter() - t
    ok = worst <= 1e-8 and tanh <= 1e-14 and half <= 1e-14 and dt < 1.0
    assert record("1", ok, f"max identity gap {worst:.2e}, tanh {tanh:.1e}, y/2 {half:.1e}, {dt:.2f}s")


def test_criterion_02_resolution_sweep():
    t = time.perf_counter()
    rows = verify_tweedie_resolution_sweep(CovarianceSpec.matern_op(), noising=CovarianceSpec.rbf())
    dt = time.perf_counter() - t
    worst = max(r.discrepancy for r in rows)
    growth = sweep_growth(rows)
    ok = worst <= 1e-8 and growth <= 1.5 and dt < 10
    assert record("2", ok, f"max discrepancy {worst:.2e} (<= 1e-8), growth ratio {growth:.2f} (<= 1.5), {dt:.1f}s")


def test_criterion_03_guided_sampler_matches_posterior(linear16):
    lg, u, post = linear16
    t = time.perf_counter()
    x = fundps_sample(ExactDenoiser(lg), guided(lg, u), karras_schedule(200), seed=0, chains=256)
    dt = time.perf_counter() - t
    mean = x.mean(axis=0)
    err = rel_l2(mean, post.mean.values)
    rms = float(np.sqrt(np.mean((mean.ravel()[lg.observed_index] - u) ** 2)))
    ok = err <= 0.10 and rms <= 3 * lg.noise_std and dt < 120
    assert record("3", ok, f"posterior-mean rel-L2 {err:.4f} (<= 0.10), observed RMS {rms:.2e} (<= 0.15), {dt:.1f}s")


def test_criterion_04_unconditional_prior_variance():
    g = Grid2D.square(16)
    lg = LinearGaussianProblem(g, CovarianceSpec.matern_op(), Mask.full(g, 1, False), 0.0, CovarianceSpec.rbf())
    t = time.perf_counter()
    x = fundps_sample(ExactDenoiser(lg), unguided_task(g, 1), karras_schedule(200), seed=0, chains=512)
    dt = time.perf_counter() - t
    var = x.var(axis=0).ravel()
    target = np.diag(lg.C)
    rel = abs(var.mean() / target.mean() - 1)
    worst = float(np.abs(var / target - 1).max())
    ok = rel <= 0.10 and dt < 120
    assert record("4", ok, f"grid-averaged variance off by {rel:.3f} (<= 0.10; worst single point {worst:.3f}), {dt:.1f}s")


def test_criterion_05_gradients():
    t = time.perf_counter()
    prim = max(fd_check(fn, inputs) for fn, inputs in PRIMITIVES.values())
    m = DenoiserModel(TINY, seed=3)
    y = np.random.default_rng(2).standard_normal((1, 1, 8, 8))
    comp = fd_check(lambda v: m.denoise(v[0], 0.7), [y])
    g = Grid2D.square(17)
    a0 = 1 + np.random.default_rng(6).random((17, 17))
    darcy = fd_check(lambda v: solve_darcy_traced(v[0], g), [a0])
    dt = time.perf_counter() - t
    ok = prim <= 1e-5 and comp <= 1e-4 and darcy <= 1e-4 and dt < 60
    assert record("5", ok, f"primitives {prim:.1e}, denoiser {comp:.1e}, darcy adjoint {darcy:.1e}, {dt:.1f}s")


def test_criterion_06_pde_convergence():
    t = time.perf_counter()
    orders = {}
    for kind in ("poisson", "helmholtz", "darcy"):
        e = [manufactured_error(kind, n) for n in (17, 33, 65)]
        orders[kind] = np.log2(np.array(e[:-1]) / np.array(e[1:]))
    g = Grid2D.square(16)
    pushed = darcy_coeff_pushforward(Field(g, np.random.default_rng(0).standard_normal((1, 16, 16))))
    dt = time.perf_counter() - t
    in_band = all(np.all((o >= 1.8) & (o <= 2.2)) for o in orders.values())
    ok = in_band and set(np.unique(pushed.values)) == {3.0, 12.0} and dt < 30
    shown = ", ".join(f"{k} {o.min():.3f}-{o.max():.3f}" for k, o in orders.items())
    assert record("6", ok, f"observed orders {shown}, pushforward values {{3, 12}}, {dt:.1f}s")


def test_criterion_07_grf_statistics():
    g = Grid2D.square(32)
    spec = CovarianceSpec.rbf()
    t = time.perf_counter()
    s = build_sampler(spec, g)
    x = s.sample_array(np.random.default_rng(0), batch=(10_000,))
    dt = time.perf_counter() - t
    var = float(np.mean(x**2))
    lag = float(np.mean(x * np.roll(x, -1, axis=-1)))
    # periodised Gaussian kernel, normalised to unit variance, evaluated directly
    k = lambda d: sum(np.exp(-((d + m) ** 2) / (2 * spec.length_scale**2)) for m in range(-2, 3))
    expected_lag = k(1 / 32) / k(0.0)
    rv, rl = abs(var - 1), abs(lag / expected_lag - 1)
    ok = rv <= 0.05 and rl <= 0.05 and dt < 30
    assert record("7", ok, f"variance off by {rv:.4f}, lag-1 covariance off by {rl:.4f} (<= 0.05), {dt:.1f}s")


def test_criterion_08_karras_schedule():
    ok = True
    for n in (50, 200, 500):
        s = karras_schedule(n, rho=7).sigmas
        ok &= s[0] == 80.0 and s[n - 1] == 0.002 and s[n] == 0.0 and len(s) == n + 1
        ok &= bool(np.all(np.diff(s) < 0))
    assert record("8", ok, "endpoints 80 / 0.002 / 0 exact, strictly decreasing for N in {50, 200, 500}")


@pytest.fixture(scope="module")
def desk_training(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    spec = PdeSpec("poisson", Grid2D.square(32))
    gen_dataset(spec, CovarianceSpec.matern_op(), 2000, 0, root / "train")
    gen_dataset(spec, CovarianceSpec.matern_op(), 16, 1, root / "test")
    data, manifest = load_dataset(root / "train")
    cfg = UnoConfig(base_channels=16, modes=(8, 4), projection_channels=32)
    model = DenoiserModel(cfg, seed=0)
    fresh = evaluation_loss(DenoiserModel(cfg, seed=0), data, build_sampler(CovarianceSpec.rbf(), spec.grid), seed=0)
    t = time.perf_counter()
    result = train_on_array(model, data, TrainConfig(learning_rate=2e-3, curriculum=[(16, 40), (32, 15)], seed=0))
    return model, result, fresh, time.perf_counter() - t, root, manifest


def test_criterion_09a_forward_reconstruction(desk_training):
    model, _, _, train_time, root, manifest = desk_training
    train_raw, _ = load_dataset(root / "train", normalized=False)
    test_raw, _ = load_dataset(root / "test", normalized=False)
    spec = PdeSpec("poisson", Grid2D.square(32))
    baseline = train_raw.mean(axis=0)
    errs, base = [], []
    for i, truth in enumerate(test_raw):
        task = solve_task("forward", Field(spec.grid, manifest.normalize(truth)), 0.03, seed=100 + i,
                          obs_loss="mse", obs_weight=FORWARD_ZETA, pde_spec=spec, pde_weight=0.0,
                          mean=manifest.mean, std=manifest.std)
        x = fundps_sample(model, task, karras_schedule(100), seed=i, chains=8).mean(axis=0)
        errs.append(rel_l2(manifest.denormalize(x), truth, 1))
        base.append(rel_l2(baseline, truth, 1))
    ratio = np.mean(errs) / np.mean(base)
    ok = ratio <= 0.5 and train_time <= 1800
    assert record("9a", ok, f"guided rel-L2 {np.mean(errs):.3f} vs mean-field {np.mean(base):.3f}, "
                            f"ratio {ratio:.3f} (<= 0.5), training {train_time:.0f}s")


def test_criterion_09b_curriculum_transfer(desk_training):
    _, result, fresh, _, _, _ = desk_training
    stage2 = result.stages[1].initial_loss
    assert record("9b", stage2 < fresh, f"stage-2 initial loss {stage2:.3f} vs fresh 32^2 model {fresh:.3f}")


def test_criterion_10_renoise(linear16):
    lg, u, post = linear16
    t = time.perf_counter()
    task = guided(lg, u)
    sched = karras_schedule(200)
    single = rel_l2(fundps_sample(ExactDenoiser(lg), task, sched, seed=0, chains=256).mean(axis=0), post.mean.values)
    g8 = Grid2D.square(8)
    low = LinearGaussianProblem(g8, CovarianceSpec.matern_op(), coarsen_task(task, g8).mask, 0.05, CovarianceSpec.rbf())
    x = renoise_sample(ExactDenoiser(lg), task, ReNoiseConfig(g8, 0.8), sched, seed=0, chains=256,
                       low_model=ExactDenoiser(low))
    two = rel_l2(x.mean(axis=0), post.mean.values)
    dt = time.perf_counter() - t
    ok = two <= 1.25 * single and dt < 180
    assert record("10", ok, f"two-stage {two:.4f} vs single {single:.4f}, ratio {two / single:.3f} (<= 1.25), {dt:.1f}s")


def test_criterion_11_guidance_schedule_and_divergence(linear16):
    lg, u, _ = linear16
    schedule_ok = all(effective_weight(7.0, s) == (s * 7.0 if s < 1 else 7.0) for s in (0.002, 0.5, 0.999, 1.0, 80.0))
    try:
        fundps_sample(ExactDenoiser(lg), guided(lg, u, 100 * TUNED_ZETA), karras_schedule(200), seed=0, chains=16)
        raised = "no error"
    except DivergenceError as exc:
        raised = str(exc)
    ok = schedule_ok and raised.startswith("sampler diverged")
    assert record("11", ok, f"weight schedule {'ok' if schedule_ok else 'wrong'}; zeta {100 * TUNED_ZETA:g}: {raised}")


def test_criterion_12_determinism(tmp_path):
    outs = []
    for rep in ("a", "b"):
        runs = tmp_path / rep
        codes = []
        code, data = run(["gen-data", "--seed", "11", "--pde", "poisson", "--n", "8", "--resolution", "32"], runs)
        codes.append(code)
        code, train = run(["train", "--seed", "11", "--data", str(data / "data"), "--max-steps", "10",
                        "--batch-size", "4"], runs)
        codes.append(code)
        code, sample = run(["sample", "--seed", "11", "--checkpoint", str(train / "checkpoint"),
                         "--data", str(data / "data"), "--samples", "1", "--steps", "20"], runs)
        assert codes + [code] == [0, 0, 0]
        outs.append((tree_bytes(data / "data"), (train / "checkpoint").read_bytes(),
                     strip_seconds(train / "train_log.csv"), tree_bytes(sample, skip={"config"})))
    same = [x == y for x, y in zip(*outs)]
    ok = all(same) and len(outs[0][3]) > 0
    names = ("gen-data", "train checkpoint", "train log", "sample")
    assert record("12", ok, ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in zip(names, same)))


# guidance weight for the learned forward problem, chosen on a separate 16-sample
# validation split (seed 2): 50 -> 0.75, 100 -> 0.57, 150 -> 0.53, 200 -> 0.53, 250 unstable
FORWARD_ZETA = 150.0
