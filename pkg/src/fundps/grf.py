"""Stationary Gaussian random fields on the periodic unit square.

The covariance is diagonal in the discrete Fourier basis, so sampling,
whitening and dense-matrix assembly all reduce to per-mode scalings. The
operator is normalised so a unit-sigma sample has unit pointwise variance;
the normalisation factor is kept on the sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field import Field, Grid2D


class SpectrumError(ValueError):
    pass


@dataclass(frozen=True)
class CovarianceSpec:
    kind: str
    length_scale: float = 0.05
    tau: float = 3.0
    alpha: float = 2.0
    scale: float = 1.0
    jitter: float = 1e-12

    def __post_init__(self):
        if self.kind == "rbf":
            if not 0 < self.length_scale < 1:
                raise ValueError(f"rbf length_scale must lie in (0, 1), got {self.length_scale}")
        elif self.kind == "matern_op":
            if self.tau <= 0 or self.scale <= 0:
                raise ValueError("matern_op needs tau > 0 and scale > 0")
            if self.alpha <= 1:
                raise ValueError(f"matern_op alpha must exceed 1, got {self.alpha}")
        else:
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    @classmethod
    def rbf(cls, length_scale: float = 0.05, jitter: float = 1e-12) -> "CovarianceSpec":
        return cls("rbf", length_scale=length_scale, jitter=jitter)

    @classmethod
    def matern_op(cls, tau: float = 3.0, alpha: float = 2.0, scale: float = 1.0) -> "CovarianceSpec":
        return cls("matern_op", tau=tau, alpha=alpha, scale=scale)

    def describe(self) -> str:
        if self.kind == "rbf":
            return f"rbf(length_scale={self.length_scale:g},jitter={self.jitter:g})"
        return f"matern_op(tau={self.tau:g},alpha={self.alpha:g},scale={self.scale:g})"

    @classmethod
    def parse(cls, text: str) -> "CovarianceSpec":
        """Inverse of :meth:`describe`."""
        text = text.strip()
        name, _, rest = text.partition("(")
        kwargs = {}
        for part in rest.rstrip(")").split(","):
            if part.strip():
                k, _, v = part.partition("=")
                kwargs[k.strip()] = float(v)
        return cls(name.strip(), **kwargs)


def wavenumbers(grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
    """Integer wavenumbers ``(kx, ky)`` on the full FFT layout."""
    kx = np.fft.fftfreq(grid.nx, d=1.0 / grid.nx)
    ky = np.fft.fftfreq(grid.ny, d=1.0 / grid.ny)
    return np.meshgrid(kx, ky)


def _rbf_eigenvalues(spec: CovarianceSpec, grid: Grid2D) -> np.ndarray:
    # First row of the circulant covariance: periodised kernel at torus offsets.
    dx = np.arange(grid.nx) / grid.nx
    dy = np.arange(grid.ny) / grid.ny
    ell = spec.length_scale
    images = range(-2, 3)
    kx = sum(np.exp(-((dx + m) ** 2) / (2 * ell**2)) for m in images)
    ky = sum(np.exp(-((dy + m) ** 2) / (2 * ell**2)) for m in images)
    row = np.outer(ky, kx)
    lam = np.fft.fft2(row).real
    return lam


@dataclass(frozen=True, eq=False)
class GrfSampler:
    spec: CovarianceSpec
    grid: Grid2D
    sqrt_spectrum: np.ndarray
    normalization: float = 1.0
    _eff: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s = np.asarray(self.sqrt_spectrum, dtype=float)
        if s.shape != self.grid.shape or np.any(s < 0) or not np.all(np.isfinite(s)):
            raise SpectrumError("sqrt_spectrum must be finite, non-negative and grid-shaped")
        s.setflags(write=False)
        object.__setattr__(self, "sqrt_spectrum", s)
        eff = s * self.normalization
        eff.setflags(write=False)
        object.__setattr__(self, "_eff", eff)

    @property
    def amplitudes(self) -> np.ndarray:
        """Per-mode amplitudes of the normalised ``C^(1/2)``."""
        return self._eff

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._eff**2

    def pointwise_variance(self) -> float:
        return float(np.mean(self.eigenvalues))

    def kernel(self) -> np.ndarray:
        """Covariance between grid point (0, 0) and every other grid point."""
        return np.fft.ifft2(self.eigenvalues).real

    # -- linear actions, batched over leading axes ------------------------

    def apply_power(self, values: np.ndarray, power: float) -> np.ndarray:
        """Apply ``C^power`` to ``[..., ny, nx]`` arrays; zero modes stay zero."""
        lam = self.eigenvalues
        scale = np.zeros_like(lam)
        pos = lam > 0
        scale[pos] = lam[pos] ** power
        spec = np.fft.fft2(values, norm="ortho")
        return np.fft.ifft2(spec * scale, norm="ortho").real

    def color(self, white: np.ndarray) -> np.ndarray:
        """``C^(1/2) w`` for real white noise ``w``."""
        spec = np.fft.fft2(white, norm="ortho")
        return np.fft.ifft2(spec * self._eff, norm="ortho").real

    def sample_array(self, rng: np.random.Generator, sigma: float = 1.0, batch: tuple = ()) -> np.ndarray:
        white = rng.standard_normal((*batch, *self.grid.shape))
        return sigma * self.color(white)

    def covariance_matrix(self) -> np.ndarray:
        """Dense ``N x N`` covariance in row-major point order."""
        ny, nx = self.grid.shape
        k = self.kernel()
        iy, ix = np.divmod(np.arange(ny * nx), nx)
        dy = (iy[None, :] - iy[:, None]) % ny
        dx = (ix[None, :] - ix[:, None]) % nx
        return k[dy, dx]


def build_sampler(spec: CovarianceSpec, grid: Grid2D, normalize: bool = True) -> GrfSampler:
    if spec.kind == "matern_op":
        kx, ky = wavenumbers(grid)
        amp = spec.scale * (4 * np.pi**2 * (kx**2 + ky**2) + spec.tau**2) ** (-spec.alpha / 2)
    else:
        lam = _rbf_eigenvalues(spec, grid)
        tol = 1e-8 * lam.max()
        if lam.min() + spec.jitter < -tol:
            raise SpectrumError(
                f"rbf spectrum has eigenvalue {lam.min():.3e} below tolerance {-tol:.3e}"
            )
        amp = np.sqrt(np.maximum(lam + spec.jitter, 0.0))
    norm = 1.0
    if normalize:
        norm = 1.0 / np.sqrt(np.mean(amp**2))
    return GrfSampler(spec, grid, amp, norm)


def sample(s: GrfSampler, rng_seed, sigma: float = 1.0) -> Field:
    """One field drawn from ``N(0, sigma^2 C)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(rng_seed)
    return Field(s.grid, s.sample_array(rng, sigma)[None])


def whiten(s: GrfSampler, f: Field) -> Field:
    """Apply ``C^(-1/2)`` channel-wise, zeroing unsupported modes."""
    return Field(f.grid, s.apply_power(f.values, -0.5))


def cameron_martin_norm_sq(s: GrfSampler, f: Field) -> float:
    return float(np.sum(whiten(s, f).values ** 2))
