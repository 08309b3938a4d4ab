"""Closed-form targets: 1-D mixture posterior means and the linear-Gaussian posterior.

Everything here is dense float64 algebra on small grids; these values gate the
sampler and denoiser tests, so exactness is preferred over speed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg
from scipy.special import logsumexp

from . import autodiff as ad
from .field import Field, Grid2D, Mask
from .grf import CovarianceSpec, GrfSampler, build_sampler


class SingularSystemError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# 1-D Gaussian mixtures


@dataclass(frozen=True, eq=False)
class GaussianMixture1D:
    """``X ~ sum_k w_k N(m_k, v_k)`` observed as ``Y = X + N(0, c)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        w, m, v = (np.atleast_1d(np.asarray(x, dtype=float)) for x in (self.weights, self.means, self.variances))
        if not (w.shape == m.shape == v.shape):
            raise ValueError("weights, means and variances must have equal length")
        if np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("weights must be positive and sum to one")
        if np.any(v < 0) or self.c <= 0:
            raise ValueError("variances must be non-negative and c positive")
        for name, arr in (("weights", w), ("means", m), ("variances", v)):
            object.__setattr__(self, name, arr)

    @classmethod
    def random(cls, rng: np.random.Generator, k: int | None = None) -> "GaussianMixture1D":
        k = k or int(rng.integers(1, 5))
        w = rng.dirichlet(np.ones(k))
        m = rng.uniform(-3, 3, k)
        v = rng.uniform(0, 2, k) * (rng.random(k) > 0.2)
        return cls(w, m, v, float(rng.uniform(0.2, 2.0)))

    def _log_terms(self, y):
        s = self.variances + self.c
        y = np.asarray(y)[..., None]
        return np.log(self.weights) - 0.5 * np.log(2 * np.pi * s) - 0.5 * (y - self.means) ** 2 / s

    def log_marginal(self, y):
        """``ln p_Y(y)``; accepts complex ``y`` for complex-step differentiation."""
        t = self._log_terms(y)
        if np.iscomplexobj(t):
            shift = t.real.max(axis=-1, keepdims=True)
            return shift[..., 0] + np.log(np.sum(np.exp(t - shift), axis=-1))
        return logsumexp(t, axis=-1)

    def responsibilities(self, y):
        t = self._log_terms(y)
        return np.exp(t - logsumexp(t, axis=-1, keepdims=True))

    def posterior_density(self, x, y) -> float:
        """``p(x | y)`` for a mixture without point masses."""
        if np.any(self.variances == 0):
            raise ValueError("posterior density undefined with point masses")
        px = np.sum(self.weights * np.exp(-0.5 * (x - self.means) ** 2 / self.variances)
                    / np.sqrt(2 * np.pi * self.variances))
        lik = np.exp(-0.5 * (y - x) ** 2 / self.c) / np.sqrt(2 * np.pi * self.c)
        return px * lik / np.exp(self.log_marginal(y))


def tweedie_posterior_mean(gm: GaussianMixture1D, y):
    """``E[X | Y = y]`` from per-component conjugate updates."""
    r = gm.responsibilities(y)
    comp = (gm.means * gm.c + np.asarray(y)[..., None] * gm.variances) / (gm.variances + gm.c)
    return np.sum(r * comp, axis=-1)


def score_complex_step(gm: GaussianMixture1D, y, h: float = 1e-30):
    """``d/dy ln p_Y`` by complex-step differentiation (no subtractive cancellation)."""
    y = np.asarray(y, dtype=float)
    return np.imag(gm.log_marginal(y + 1j * h)) / h


def tweedie_from_score(gm: GaussianMixture1D, y):
    """The score side of Tweedie's identity, ``y + c * d/dy ln p_Y(y)``."""
    return np.asarray(y, dtype=float) + gm.c * score_complex_step(gm, y)


def posterior_mean_quadrature(gm: GaussianMixture1D, y: float, tol: float = 1e-10) -> float:
    """``int x p(x | y) dx`` by adaptive quadrature (continuous mixtures only)."""
    sd = np.sqrt(gm.variances.max() + gm.c)
    lo = min(gm.means.min(), y) - 12 * sd
    hi = max(gm.means.max(), y) + 12 * sd
    pts = sorted(set(np.clip(np.append(gm.means, y), lo, hi)))
    val, _ = integrate.quad(lambda x: x * gm.posterior_density(x, y), lo, hi, points=pts,
                            epsabs=tol, epsrel=tol, limit=500)
    return float(val)


# ---------------------------------------------------------------------------
# linear-Gaussian problem


@dataclass(frozen=True, eq=False)
class LinearGaussianProblem:
    """Prior ``N(0, C)``, observations ``u = M a + N(0, noise_std^2 I)``, noising ``C_gamma``.

    Single-channel fields on a grid of at most 32x32.
    """

    grid: Grid2D
    prior: CovarianceSpec
    mask: Mask
    noise_std: float = 0.05
    noising: CovarianceSpec | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.grid.nx > 32 or self.grid.ny > 32:
            raise ValueError("dense oracle limited to grids of at most 32x32")
        if self.mask.grid != self.grid or self.mask.channels != 1:
            raise ValueError("mask must be single-channel on the problem grid")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def prior_sampler(self) -> GrfSampler:
        if "ps" not in self._cache:
            self._cache["ps"] = build_sampler(self.prior, self.grid)
        return self._cache["ps"]

    @property
    def noise_sampler(self) -> GrfSampler:
        if "ns" not in self._cache:
            spec = self.noising or self.prior
            self._cache["ns"] = build_sampler(spec, self.grid)
        return self._cache["ns"]

    @property
    def C(self) -> np.ndarray:
        if "C" not in self._cache:
            self._cache["C"] = self.prior_sampler.covariance_matrix()
        return self._cache["C"]

    @property
    def C_gamma(self) -> np.ndarray:
        if "Cg" not in self._cache:
            self._cache["Cg"] = self.noise_sampler.covariance_matrix()
        return self._cache["Cg"]

    @property
    def observed_index(self) -> np.ndarray:
        return np.flatnonzero(self.mask.indicator.ravel())

    @property
    def M(self) -> np.ndarray:
        return np.eye(self.grid.size)[self.observed_index]

    def observe(self, a: Field, seed=None) -> np.ndarray:
        u = a.values.ravel()[self.observed_index]
        if seed is not None and self.noise_std > 0:
            u = u + self.noise_std * np.random.default_rng(seed).standard_normal(u.shape)
        return u

    def shrinkage(self, sigma: float) -> np.ndarray:
        """Dense ``W = C (C + sigma^2 C_gamma)^-1``.

        Assembled as ``I - sigma^2 C_gamma (C + sigma^2 C_gamma)^-1`` so that
        ``W y - y`` keeps full relative accuracy at small sigma.
        """
        key = ("W", float(sigma))
        if key not in self._cache:
            n = self.grid.size
            if sigma == 0:
                W = np.eye(n)
            else:
                A = self.C + sigma**2 * self.C_gamma
                try:
                    # (C_gamma A^-1)^T = A^-1 C_gamma since both are symmetric
                    G = linalg.solve(A, self.C_gamma, assume_a="pos").T
                except linalg.LinAlgError as exc:
                    raise SingularSystemError(f"C + sigma^2 C_gamma singular at sigma={sigma}") from exc
                W = np.eye(n) - sigma**2 * G
            W.setflags(write=False)
            self._cache[key] = W
        return self._cache[key]


class ExactDenoiser:
    """Posterior-mean denoiser of a linear-Gaussian problem; traceable in its input."""

    def __init__(self, lg: LinearGaussianProblem):
        self.lg = lg
        self.noise_spec = lg.noising or lg.prior
        self.metadata = {"noise": self.noise_spec.describe()}

    def denoise(self, y, sigma):
        v = ad.value_of(y)
        b = v.shape[0]
        n = self.lg.grid.size
        W = self.lg.shrinkage(float(sigma))
        flat = ad.reshape(y, (b, n))
        return ad.reshape(ad.matmul(flat, W.T), v.shape)


def exact_denoiser(lg: LinearGaussianProblem, a_t: Field, sigma: float) -> Field:
    """``E[a_0 | a_t] = C (C + sigma^2 C_gamma)^-1 a_t``."""
    W = lg.shrinkage(float(sigma))
    return Field(a_t.grid, (W @ a_t.values.ravel()).reshape(a_t.values.shape))


def spectral_shrinkage(lg: LinearGaussianProblem, values: np.ndarray, sigma: float) -> np.ndarray:
    """Per-Fourier-mode version of :func:`exact_denoiser` for ``[..., ny, nx]`` arrays."""
    lam = lg.prior_sampler.eigenvalues
    gam = lg.noise_sampler.eigenvalues
    gain = np.where(lam > 0, lam / (lam + sigma**2 * gam), 0.0)
    return np.fft.ifft2(np.fft.fft2(values) * gain).real


def analytic_score(lg: LinearGaussianProblem, values: np.ndarray, sigma: float) -> np.ndarray:
    """Cameron-Martin score ``-C_gamma (C + sigma^2 C_gamma)^-1 y`` applied per Fourier mode."""
    lam = lg.prior_sampler.eigenvalues
    gam = lg.noise_sampler.eigenvalues
    gain = -gam / (lam + sigma**2 * gam)
    return np.fft.ifft2(np.fft.fft2(values) * gain).real


@dataclass(frozen=True, eq=False)
class GaussianPosterior:
    mean: Field
    cov: np.ndarray


def exact_posterior(lg: LinearGaussianProblem, u) -> GaussianPosterior:
    """Conditional Gaussian: mean ``C M^T (M C M^T + s^2 I)^-1 u`` and its covariance."""
    u = np.asarray(u, dtype=float).ravel()
    idx = lg.observed_index
    if u.size != idx.size:
        raise ValueError(f"{u.size} observations for {idx.size} observed points")
    C = lg.C
    if idx.size == 0:
        return GaussianPosterior(Field(lg.grid, np.zeros((1, *lg.grid.shape))), C.copy())
    S = C[np.ix_(idx, idx)] + lg.noise_std**2 * np.eye(idx.size)
    K = C[:, idx]
    try:
        cho = linalg.cho_factor(S)
    except linalg.LinAlgError as exc:
        raise SingularSystemError("M C M^T + noise^2 I is singular") from exc
    mean = K @ linalg.cho_solve(cho, u)
    cov = C - K @ linalg.cho_solve(cho, K.T)
    cov = 0.5 * (cov + cov.T)
    return GaussianPosterior(Field(lg.grid, mean.reshape(1, *lg.grid.shape)), cov)


def posterior_samples_mc(lg: LinearGaussianProblem, u, n: int, seed, chunk: int = 20000):
    """Posterior draws by conditioning prior draws (Matheron's rule); yields chunks."""
    u = np.asarray(u, dtype=float).ravel()
    idx = lg.observed_index
    C = lg.C
    S = C[np.ix_(idx, idx)] + lg.noise_std**2 * np.eye(idx.size)
    gain = linalg.solve(S, C[idx, :], assume_a="pos").T  # C M^T S^-1
    rng = np.random.default_rng(seed)
    sampler = lg.prior_sampler
    done = 0
    while done < n:
        k = min(chunk, n - done)
        a = sampler.sample_array(rng, 1.0, batch=(k,)).reshape(k, -1)
        e = lg.noise_std * rng.standard_normal((k, idx.size))
        yield a + (u[None, :] - a[:, idx] - e) @ gain.T
        done += k


def mc_posterior_moments(lg: LinearGaussianProblem, u, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo posterior mean and its standard error per grid point."""
    s1 = s2 = 0.0
    for block in posterior_samples_mc(lg, u, n, seed):
        s1 = s1 + block.sum(axis=0)
        s2 = s2 + (block**2).sum(axis=0)
    mean = s1 / n
    var = np.maximum(s2 / n - mean**2, 0.0)
    return mean, np.sqrt(var / n)


# ---------------------------------------------------------------------------
# resolution sweep


@dataclass
class SweepRow:
    resolution: int
    sigma: float
    discrepancy: float
    passed: bool


def verify_tweedie_resolution_sweep(spec: CovarianceSpec, resolutions=(8, 16, 32), sigmas=(0.01, 1.0, 80.0),
                                    noising: CovarianceSpec | None = None, seed: int = 0, tol: float = 1e-8,
                                    report_path=None) -> list[SweepRow]:
    """Denoiser-derived score vs the analytic Gaussian score on several grids.

    The dense exact denoiser gives ``(D(y) - y) / sigma^2``; the analytic side
    is the per-mode Cameron-Martin score. Test points are marginal samples
    ``y ~ N(0, C + sigma^2 C_gamma)``.
    """
    from .denoiser import score_from_denoiser

    rows = []
    for n in resolutions:
        grid = Grid2D.square(n)
        lg = LinearGaussianProblem(grid, spec, Mask.full(grid, 1, False), 0.0, noising)
        den = ExactDenoiser(lg)
        rng = np.random.default_rng([seed, n])
        for s in sigmas:
            y = lg.prior_sampler.sample_array(rng) + s * lg.noise_sampler.sample_array(rng)
            field_y = Field(grid, y[None])
            num = score_from_denoiser(den, field_y, s).values[0]
            ref = analytic_score(lg, y, s)
            d = float(np.abs(num - ref).max())
            rows.append(SweepRow(n, float(s), d, d <= tol))
    if report_path is not None:
        with open(report_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["resolution", "sigma", "max_abs_discrepancy", "pass"])
            for r in rows:
                w.writerow([r.resolution, r.sigma, f"{r.discrepancy:.3e}", int(r.passed)])
    return rows


def sweep_growth(rows: list[SweepRow]) -> float:
    """Largest ratio of the worst discrepancy between consecutive resolutions."""
    worst = {}
    for r in rows:
        worst[r.resolution] = max(worst.get(r.resolution, 0.0), r.discrepancy)
    res = sorted(worst)
    ratios = [worst[b] / max(worst[a], 1e-300) for a, b in zip(res[:-1], res[1:])]
    return max(ratios) if ratios else 1.0


__all__ = [
    "GaussianMixture1D",
    "tweedie_posterior_mean",
    "tweedie_from_score",
    "score_complex_step",
    "posterior_mean_quadrature",
    "LinearGaussianProblem",
    "ExactDenoiser",
    "SingularSystemError",
    "exact_denoiser",
    "spectral_shrinkage",
    "analytic_score",
    "GaussianPosterior",
    "exact_posterior",
    "posterior_samples_mc",
    "mc_posterior_moments",
    "verify_tweedie_resolution_sweep",
    "sweep_growth",
]
