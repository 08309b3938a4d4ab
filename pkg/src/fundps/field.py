"""Grid-valued fields, observation masks, resampling and the FGRD file format.

Grid conventions
----------------
A ``Grid2D`` only stores its point counts; the unit square is implied. Two
coordinate conventions are used, each by the code that needs it:

* node-centred: point ``(i, j)`` sits at ``(j / (nx - 1), i / (ny - 1))``.
  The Dirichlet solvers in :mod:`fundps.pde` use this one; boundary nodes
  carry the boundary values.
* cell-centred periodic: point ``(i, j)`` sits at
  ``((j + 0.5) / nx, (i + 0.5) / ny)`` on the unit torus. GRF sampling and
  both resampling methods use this one.

Arrays are always laid out ``[channels, ny, nx]`` (y outer, x inner).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

MAGIC = b"FGRD"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FieldFormatError(Exception):
    """Base class for FGRD decoding failures."""


class BadMagicError(FieldFormatError):
    pass


class VersionMismatchError(FieldFormatError):
    pass


class TruncatedPayloadError(FieldFormatError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.ny}x{self.nx}")

    @classmethod
    def square(cls, n: int) -> "Grid2D":
        return cls(nx=n, ny=n)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Node-centred coordinates ``(X, Y)``, each of shape ``(ny, nx)``."""
        x = np.arange(self.nx) / (self.nx - 1)
        y = np.arange(self.ny) / (self.ny - 1)
        return np.meshgrid(x, y)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centred periodic coordinates ``(X, Y)``."""
        x = (np.arange(self.nx) + 0.5) / self.nx
        y = (np.arange(self.ny) + 0.5) / self.ny
        return np.meshgrid(x, y)


@dataclass(frozen=True, eq=False)
class Field:
    """Immutable ``[channels, ny, nx]`` array of finite float64 values."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[1:] != self.grid.shape:
            raise ShapeMismatchError(
                f"values of shape {np.shape(self.values)} do not fit grid {self.grid.shape}"
            )
        if v.shape[0] < 1:
            raise ShapeMismatchError("a field needs at least one channel")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_array(cls, values) -> "Field":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        return cls(Grid2D(nx=v.shape[2], ny=v.shape[1]), v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def channel(self, c: int) -> "Field":
        return Field(self.grid, self.values[c : c + 1])

    def __eq__(self, other):
        if not isinstance(other, Field):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    def __add__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values + other.values)

    def __mul__(self, alpha: float) -> "Field":
        return Field(self.grid, alpha * self.values)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class Mask:
    grid: Grid2D
    indicator: np.ndarray

    def __post_init__(self):
        ind = np.array(self.indicator, dtype=bool, copy=True)
        if ind.ndim == 2:
            ind = ind[None]
        if ind.ndim != 3 or ind.shape[1:] != self.grid.shape:
            raise ShapeMismatchError(
                f"mask of shape {np.shape(self.indicator)} does not fit grid {self.grid.shape}"
            )
        ind.setflags(write=False)
        object.__setattr__(self, "indicator", ind)

    @classmethod
    def full(cls, grid: Grid2D, channels: int, value: bool = True) -> "Mask":
        return cls(grid, np.full((channels, *grid.shape), value))

    @property
    def channels(self) -> int:
        return self.indicator.shape[0]

    @property
    def count(self) -> int:
        return int(self.indicator.sum())

    def fraction(self, channel: int | None = None) -> float:
        ind = self.indicator if channel is None else self.indicator[channel]
        return float(ind.mean())


def apply_mask(f: Field, m: Mask) -> np.ndarray:
    """Observed values of ``f`` under ``m``, channel-major then row-major."""
    if f.grid != m.grid or f.channels != m.channels:
        raise ShapeMismatchError(
            f"field {f.channels}x{f.grid.shape} vs mask {m.channels}x{m.grid.shape}"
        )
    return f.values[m.indicator].copy()


# ---------------------------------------------------------------------------
# resampling


def _dirichlet_kernel(t: np.ndarray, n_band: int, full_nyquist: bool) -> np.ndarray:
    """Sum of ``exp(2 pi i k t)`` over the band of an ``n_band``-point grid.

    For even ``n_band`` the Nyquist pair ``k = +-n_band/2`` enters either with
    weight 1/2 each (the interpolating convention, ``full_nyquist=False``) or
    with weight 1 each (the projection convention used when downsampling).
    """
    out = np.ones_like(t)
    kmax = (n_band - 1) // 2
    for k in range(1, kmax + 1):
        out += 2.0 * np.cos(2 * np.pi * k * t)
    if n_band % 2 == 0:
        w = 2.0 if full_nyquist else 1.0
        out += w * np.cos(np.pi * n_band * t)
    return out


@lru_cache(maxsize=128)
def fourier_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense 1-D trigonometric resampling matrix between cell-centred grids.

    Upsampling evaluates the minimal trigonometric interpolant of the input;
    downsampling projects onto the band of the output grid first, then samples.
    """
    x_in = (np.arange(n_in) + 0.5) / n_in
    x_out = (np.arange(n_out) + 0.5) / n_out
    t = x_out[:, None] - x_in[None, :]
    if n_out >= n_in:
        r = _dirichlet_kernel(t, n_in, full_nyquist=False) / n_in
    else:
        r = _dirichlet_kernel(t, n_out, full_nyquist=True) / n_in
    r.setflags(write=False)
    return r


def _keys_weights(s: np.ndarray, a: float = -0.5) -> np.ndarray:
    s = np.abs(s)
    w = np.where(
        s <= 1,
        (a + 2) * s**3 - (a + 3) * s**2 + 1,
        np.where(s < 2, a * s**3 - 5 * a * s**2 + 8 * a * s - 4 * a, 0.0),
    )
    return w


@lru_cache(maxsize=128)
def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D Keys cubic convolution matrix with clamped edges (cell-centred)."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    base = np.floor(src).astype(int)
    r = np.zeros((n_out, n_in))
    for off in (-1, 0, 1, 2):
        idx = base + off
        w = _keys_weights(src - idx)
        np.add.at(r, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    r.setflags(write=False)
    return r


def resample_array(values: np.ndarray, shape: tuple[int, int], method: str = "fourier") -> np.ndarray:
    """Resample the last two axes of ``values`` to ``shape``."""
    ny, nx = values.shape[-2:]
    if (ny, nx) == tuple(shape):
        return values.copy()
    if method == "fourier":
        ry, rx = fourier_matrix(ny, shape[0]), fourier_matrix(nx, shape[1])
    elif method == "bicubic":
        ry, rx = bicubic_matrix(ny, shape[0]), bicubic_matrix(nx, shape[1])
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    return np.einsum("ai,...ij,bj->...ab", ry, values, rx, optimize=True)


def resample(f: Field, target: Grid2D, method: str = "bicubic") -> Field:
    if f.grid == target:
        return Field(target, f.values)
    return Field(target, resample_array(f.values, target.shape, method))


# ---------------------------------------------------------------------------
# FGRD i/o


def encode_field(f: Field) -> bytes:
    c, ny, nx = f.values.shape
    head = _HEADER.pack(MAGIC, VERSION, c, ny, nx)
    return head + f.values.astype("<f8").tobytes(order="C")


def decode_field(buf: bytes) -> Field:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("header is truncated")
    _, version, c, ny, nx = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported FGRD version {version} (expected {VERSION})")
    n = c * ny * nx
    payload = buf[_HEADER.size :]
    if len(payload) != 8 * n:
        raise TruncatedPayloadError(
            f"header declares {c}x{ny}x{nx} = {n} floats, payload holds {len(payload) / 8:g}"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(c, ny, nx)
    return Field(Grid2D(nx=nx, ny=ny), values)


def write_field(f: Field, path) -> None:
    Path(path).write_bytes(encode_field(f))


def read_field(path) -> Field:
    return decode_field(Path(path).read_bytes())


def write_pgm(f: Field, path_prefix) -> list[tuple[Path, float, float]]:
    """Write one 8-bit PGM per channel, min-max normalised per channel.

    Returns ``(path, lo, hi)`` for each written image.
    """
    out = []
    prefix = Path(path_prefix)
    for c in range(f.channels):
        v = f.values[c]
        lo, hi = float(v.min()), float(v.max())
        scale = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
        img = np.round(255 * scale).astype(np.uint8)
        p = prefix.with_name(f"{prefix.name}_c{c}.pgm")
        header = f"P5\n{f.grid.nx} {f.grid.ny}\n255\n".encode("ascii")
        p.write_bytes(header + img.tobytes())
        out.append((p, lo, hi))
    return out
