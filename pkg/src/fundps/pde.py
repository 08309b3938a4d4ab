"""Darcy, Poisson and Helmholtz on the unit square with zero Dirichlet data.

All solvers use the node-centred grid: boundary nodes hold ``u = 0`` and the
unknowns are the ``(ny - 2) x (nx - 2)`` interior nodes. Residuals use the
same five-point stencils as the solvers, so an exact discrete solution has a
residual at round-off level.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import fft as sfft
from scipy.sparse.linalg import cg, splu

from . import autodiff as ad
from .field import Field, Grid2D, read_field, write_field
from .grf import CovarianceSpec, build_sampler

log = logging.getLogger(__name__)

KINDS = ("darcy", "poisson", "helmholtz")


class SolverError(RuntimeError):
    pass


class NonPositiveCoefficientError(SolverError, ValueError):
    pass


class IterationLimitError(SolverError):
    pass


class ResonanceError(SolverError, ValueError):
    pass


@dataclass(frozen=True)
class PdeSpec:
    kind: str
    grid: Grid2D
    k: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pde kind {self.kind!r}")


def spacing(grid: Grid2D) -> tuple[float, float]:
    return 1.0 / (grid.nx - 1), 1.0 / (grid.ny - 1)


def darcy_coeff_pushforward(g: Field) -> Field:
    if g.channels != 1:
        raise ValueError("pushforward expects a single-channel field")
    return Field(g.grid, np.where(g.values > 0, 12.0, 3.0))


# ---------------------------------------------------------------------------
# Darcy: -div(a grad u) = f


def _harmonic(p, q):
    return 2.0 * p * q / (p + q)


def _faces(ny: int, nx: int):
    """Yield (p_index_slices, q_index_slices, axis) for x- and y-faces."""
    return (
        ((slice(None), slice(0, nx - 1)), (slice(None), slice(1, nx)), 1),
        ((slice(0, ny - 1), slice(None)), (slice(1, ny), slice(None)), 0),
    )


def darcy_matrix(a: np.ndarray, grid: Grid2D) -> sp.csr_matrix:
    """Sparse SPD matrix of the interior Darcy operator with harmonic faces."""
    ny, nx = grid.shape
    hx, hy = spacing(grid)
    mi, mj = ny - 2, nx - 2
    full_id = -np.ones((ny, nx), dtype=int)
    full_id[1:-1, 1:-1] = np.arange(mi * mj).reshape(mi, mj)
    rows, cols, vals = [], [], []
    for (ps, qs, axis), h in zip(_faces(ny, nx), (hx, hy)):
        af = _harmonic(a[ps], a[qs]) / h**2
        pid, qid = full_id[ps], full_id[qs]
        for own, other in ((pid, qid), (qid, pid)):
            sel = own >= 0
            rows.append(own[sel])
            cols.append(own[sel])
            vals.append(af[sel])
            both = sel & (other >= 0)
            rows.append(own[both])
            cols.append(other[both])
            vals.append(-af[both])
    n = mi * mj
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return mat.tocsr()


def _darcy_pullback(a: np.ndarray, grid: Grid2D, lam: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Cotangent of ``a`` for ``-lam^T (dA/da) u`` (both on the interior)."""
    ny, nx = grid.shape
    hx, hy = spacing(grid)
    U = np.zeros((ny, nx))
    L = np.zeros((ny, nx))
    U[1:-1, 1:-1] = u.reshape(ny - 2, nx - 2)
    L[1:-1, 1:-1] = lam.reshape(ny - 2, nx - 2)
    out = np.zeros((ny, nx))
    for (ps, qs, _), h in zip(_faces(ny, nx), (hx, hy)):
        ap, aq = a[ps], a[qs]
        s = -(U[qs] - U[ps]) * (L[qs] - L[ps]) / h**2
        den = (ap + aq) ** 2
        out[ps] += s * 2 * aq**2 / den
        out[qs] += s * 2 * ap**2 / den
    return out


def _forcing_interior(forcing, grid: Grid2D) -> np.ndarray:
    f = np.broadcast_to(np.asarray(forcing, dtype=float), grid.shape)
    return np.ascontiguousarray(f[1:-1, 1:-1]).ravel()


def solve_darcy(
    a: Field, forcing=1.0, method: str = "direct", tol: float = 1e-12, maxiter: int = 10_000
) -> Field:
    """Five-point FDM solve of ``-div(a grad u) = forcing`` with ``u = 0`` on the boundary."""
    if a.channels != 1:
        raise ValueError("darcy coefficient must be single-channel")
    av = a.values[0]
    if np.any(av <= 0):
        raise NonPositiveCoefficientError("darcy coefficient must be strictly positive")
    grid = a.grid
    mat = darcy_matrix(av, grid)
    rhs = _forcing_interior(forcing, grid)
    if method == "direct":
        u = splu(mat.tocsc()).solve(rhs)
    elif method == "cg":
        d = mat.diagonal()
        u, info = cg(mat, rhs, rtol=tol, maxiter=maxiter, M=sp.diags(1.0 / d))
        if info != 0:
            raise IterationLimitError(f"conjugate gradient did not converge in {maxiter} iterations")
    else:
        raise ValueError(f"unknown method {method!r}")
    out = np.zeros(grid.shape)
    out[1:-1, 1:-1] = u.reshape(grid.ny - 2, grid.nx - 2)
    return Field(grid, out[None])


def solve_darcy_traced(a, grid: Grid2D, forcing=1.0):
    """Darcy solve differentiable in ``a`` via the implicit-function adjoint.

    ``a`` is a ``[ny, nx]`` array or traced value; returns the interior
    solution zero-padded to ``[ny, nx]``.
    """
    av = ad.value_of(a)
    if np.any(av <= 0):
        raise NonPositiveCoefficientError("darcy coefficient must be strictly positive")

    def matrix_fn(p):
        return darcy_matrix(p, grid), lambda lam, u: _darcy_pullback(p, grid, lam, u)

    u = ad.linear_solve(matrix_fn, a, _forcing_interior(forcing, grid))
    u = ad.reshape(u, (grid.ny - 2, grid.nx - 2))
    return ad.pad2d(u, 1, 1, 1, 1)


# ---------------------------------------------------------------------------
# Poisson / Helmholtz by discrete sine transform


def laplacian_eigenvalues(grid: Grid2D) -> np.ndarray:
    """Eigenvalues of the interior five-point Laplacian, shape ``(ny-2, nx-2)``."""
    hx, hy = spacing(grid)
    kx = np.arange(1, grid.nx - 1)
    ky = np.arange(1, grid.ny - 1)
    lx = -4.0 / hx**2 * np.sin(np.pi * kx / (2 * (grid.nx - 1))) ** 2
    ly = -4.0 / hy**2 * np.sin(np.pi * ky / (2 * (grid.ny - 1))) ** 2
    return ly[:, None] + lx[None, :]


def _sine_solve(a: Field, shift: float) -> Field:
    if a.channels != 1:
        raise ValueError("source must be single-channel")
    lam = laplacian_eigenvalues(a.grid) + shift
    if np.min(np.abs(lam)) < 1e-10 * np.max(np.abs(lam)):
        raise ResonanceError(f"k^2 = {shift:g} hits a discrete Laplacian eigenvalue")
    rhs = a.values[0, 1:-1, 1:-1]
    coef = sfft.dstn(rhs, type=1, norm="ortho")
    u_int = sfft.idstn(coef / lam, type=1, norm="ortho")
    out = np.zeros(a.grid.shape)
    out[1:-1, 1:-1] = u_int
    return Field(a.grid, out[None])


def solve_poisson(a: Field) -> Field:
    """Solve ``lap u = a`` with ``u = 0`` on the boundary."""
    return _sine_solve(a, 0.0)


def solve_helmholtz(a: Field, k: float = 1.0) -> Field:
    """Solve ``lap u + k^2 u = a`` with ``u = 0`` on the boundary."""
    return _sine_solve(a, k * k)


def solve(spec: PdeSpec, a: Field) -> Field:
    if spec.kind == "darcy":
        return solve_darcy(a)
    if spec.kind == "poisson":
        return solve_poisson(a)
    return solve_helmholtz(a, spec.k)


# ---------------------------------------------------------------------------
# residuals (traceable)


def _shifts(x):
    """Centre, east, west, north, south interior views of ``[..., ny, nx]``."""
    return (
        x[..., 1:-1, 1:-1],
        x[..., 1:-1, 2:],
        x[..., 1:-1, :-2],
        x[..., 2:, 1:-1],
        x[..., :-2, 1:-1],
    )


def laplacian(u, grid: Grid2D):
    hx, hy = spacing(grid)
    c, e, w, n, s = _shifts(u)
    return (e + w - 2.0 * c) * (1.0 / hx**2) + (n + s - 2.0 * c) * (1.0 / hy**2)


def residual(spec: PdeSpec, a, u, forcing=1.0):
    """Pointwise PDE residual on interior nodes, zero on the boundary.

    ``a`` and ``u`` are ``[..., ny, nx]`` arrays or traced values.
    darcy: ``-div(a grad u) - forcing``; poisson: ``lap u - a``;
    helmholtz: ``lap u + k^2 u - a``.
    """
    grid = spec.grid
    if spec.kind == "darcy":
        hx, hy = spacing(grid)
        ac, ae, aw, an, as_ = _shifts(a)
        uc, ue, uw, un, us = _shifts(u)
        flux_x = ad.harmonic(ac, ae) * (ue - uc) - ad.harmonic(ac, aw) * (uc - uw)
        flux_y = ad.harmonic(ac, an) * (un - uc) - ad.harmonic(ac, as_) * (uc - us)
        f = np.broadcast_to(np.asarray(forcing, dtype=float), grid.shape)[1:-1, 1:-1]
        r = -(flux_x * (1.0 / hx**2) + flux_y * (1.0 / hy**2)) - f
    else:
        lap = laplacian(u, grid)
        if spec.kind == "helmholtz":
            lap = lap + (spec.k**2) * u[..., 1:-1, 1:-1]
        r = lap - a[..., 1:-1, 1:-1]
    return ad.pad2d(r, 1, 1, 1, 1)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Manifest:
    pde: str
    grid: Grid2D
    prior: CovarianceSpec
    n: int
    seed: int
    k: float = 1.0
    mean: list = field(default_factory=list)
    std: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"pde={self.pde}",
            f"nx={self.grid.nx}",
            f"ny={self.grid.ny}",
            f"prior={self.prior.describe()}",
            f"n={self.n}",
            f"seed={self.seed}",
            f"k={self.k!r}",
        ]
        for c, (m, s) in enumerate(zip(self.mean, self.std)):
            lines.append(f"mean_{c}={m!r}")
            lines.append(f"std_{c}={s!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Manifest":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        nch = sum(1 for k in kv if k.startswith("mean_"))
        return cls(
            pde=kv["pde"],
            grid=Grid2D(nx=int(kv["nx"]), ny=int(kv["ny"])),
            prior=CovarianceSpec.parse(kv["prior"]),
            n=int(kv["n"]),
            seed=int(kv["seed"]),
            k=float(kv.get("k", 1.0)),
            mean=[float(kv[f"mean_{c}"]) for c in range(nch)],
            std=[float(kv[f"std_{c}"]) for c in range(nch)],
        )

    @property
    def spec(self) -> PdeSpec:
        return PdeSpec(self.pde, self.grid, self.k)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        m, s = np.asarray(self.mean), np.asarray(self.std)
        return (values - m[:, None, None]) / s[:, None, None]

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        m, s = np.asarray(self.mean), np.asarray(self.std)
        return values * s[:, None, None] + m[:, None, None]


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Per-sample seed; independent of how samples are scheduled."""
    return np.random.SeedSequence(seed, spawn_key=(index,))


def generate_sample(spec: PdeSpec, prior: CovarianceSpec, seed: int, index: int) -> Field:
    sampler = build_sampler(prior, spec.grid)
    rng = np.random.default_rng(sample_seed(seed, index))
    g = Field(spec.grid, sampler.sample_array(rng)[None])
    if spec.kind == "darcy":
        a = darcy_coeff_pushforward(g)
    else:
        a = g
    u = solve(spec, a)
    return Field(spec.grid, np.concatenate([a.values, u.values]))


def _generate_one(args):
    spec, prior, seed, i, out_dir = args
    f = generate_sample(spec, prior, seed, i)
    write_field(f, Path(out_dir) / f"sample_{i:06d}.fgrd")
    return f.values.sum(axis=(1, 2)), (f.values**2).sum(axis=(1, 2))


def gen_dataset(
    spec: PdeSpec, prior: CovarianceSpec, n: int, seed: int, out_dir, workers: int = 1
) -> Manifest:
    """Generate ``n`` joint ``(a, u)`` samples as FGRD files plus a manifest."""
    if n < 1:
        raise ValueError("n must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, prior, seed, i, out) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            stats = list(pool.map(_generate_one, jobs, chunksize=16))
    else:
        stats = [_generate_one(j) for j in jobs]
    npts = n * spec.grid.size
    s1 = np.sum([s[0] for s in stats], axis=0)
    s2 = np.sum([s[1] for s in stats], axis=0)
    mean = s1 / npts
    std = np.sqrt(np.maximum(s2 / npts - mean**2, 0.0))
    std = np.where(std > 0, std, 1.0)
    manifest = Manifest(
        pde=spec.kind, grid=spec.grid, prior=prior, n=n, seed=seed, k=spec.k,
        mean=[float(m) for m in mean], std=[float(s) for s in std],
    )
    (out / "manifest").write_text(manifest.to_text())
    log.info("wrote %d %s samples to %s", n, spec.kind, out)
    return manifest


def read_manifest(data_dir) -> Manifest:
    return Manifest.from_text((Path(data_dir) / "manifest").read_text())


def load_dataset(data_dir, normalized: bool = True) -> tuple[np.ndarray, Manifest]:
    """All samples of a dataset directory as ``[n, channels, ny, nx]``."""
    manifest = read_manifest(data_dir)
    arr = np.stack(
        [read_field(Path(data_dir) / f"sample_{i:06d}.fgrd").values for i in range(manifest.n)]
    )
    if normalized:
        arr = manifest.normalize(arr)
    return arr, manifest
