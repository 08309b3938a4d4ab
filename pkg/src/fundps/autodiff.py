"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive accepts plain arrays or :class:`Traced` values. When no
argument is traced the primitive just returns an ndarray, so model code is
written once and runs either plainly or under a tape.

Complex values (spectra) carry gradients in the convention
``g = dL/dRe(z) + i dL/dIm(z)``; adjoints are taken with respect to the real
inner product ``Re <a, b>``.

Fourier transforms use the "forward" normalisation: ``rfft2`` divides by the
number of grid points and ``irfft2`` does not scale, so Fourier coefficients
are resolution independent. Their adjoints are scaled inverse transforms.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special
from scipy.sparse.linalg import splu

from .field import fourier_matrix


class TapeError(RuntimeError):
    pass


class Tape:
    """Ordered record of primitive applications.

    Node ``i`` holds its parent node ids (``None`` for constants) and a
    backward closure mapping the output cotangent to input cotangents.
    """

    def __init__(self):
        self._parents: list[tuple] = []
        self._backward: list[Callable | None] = []
        self._shapes: list[tuple] = []

    def __len__(self):
        return len(self._parents)

    def var(self, value) -> "Traced":
        """Register a leaf (an input we may differentiate with respect to)."""
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.complexfloating):
            value = value.astype(np.float64, copy=True)
        return self._record(value, (), None)

    def _record(self, value, parents, backward) -> "Traced":
        idx = len(self._parents)
        self._parents.append(tuple(parents))
        self._backward.append(backward)
        self._shapes.append(np.shape(value))
        return Traced(value, self, idx)

    def gradients(self, output: "Traced", wrt: Sequence["Traced"], seed=None) -> list[np.ndarray]:
        if not isinstance(output, Traced) or output.tape is not self:
            raise TapeError("output is not recorded on this tape")
        for w in wrt:
            if not isinstance(w, Traced) or w.tape is not self:
                raise TapeError("wrt value is not recorded on this tape")
        if seed is None:
            if output.value.size != 1:
                raise TapeError("gradient of a non-scalar output needs an explicit seed")
            seed = np.ones_like(output.value)
        wanted = {w.idx for w in wrt}
        lo = min(wanted)
        # forward reachability from the wrt leaves limits the backward sweep
        live = np.zeros(output.idx + 1, dtype=bool)
        for i in wanted:
            if i <= output.idx:
                live[i] = True
        for i in range(lo, output.idx + 1):
            if not live[i]:
                live[i] = any(p is not None and p >= lo and live[p] for p in self._parents[i])
        grads: dict[int, np.ndarray] = {output.idx: np.asarray(seed)}
        for i in range(output.idx, lo - 1, -1):
            g = grads.get(i)
            if g is None or self._backward[i] is None:
                continue
            if i not in wanted:
                grads.pop(i)
            parents = self._parents[i]
            needs = tuple(p is not None and p >= lo and bool(live[p]) for p in parents)
            if not any(needs):
                continue
            pgs = self._backward[i](g, needs)
            for p, need, pg in zip(parents, needs, pgs):
                if not need or pg is None:
                    continue
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
        out = []
        for w in wrt:
            g = grads.get(w.idx)
            if g is None:
                g = np.zeros(self._shapes[w.idx], dtype=w.value.dtype)
            out.append(g)
        return out


class Traced:
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape, idx: int):
        self.value = value
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Traced(node={self.idx}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value_of(x):
    return x.value if isinstance(x, Traced) else np.asarray(x)


def is_traced(x) -> bool:
    return isinstance(x, Traced)


def _emit(value, inputs, backward):
    tape = None
    for x in inputs:
        if isinstance(x, Traced):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands live on different tapes")
    if tape is None:
        return value
    parents = [x.idx if isinstance(x, Traced) else None for x in inputs]
    return tape._record(value, parents, backward)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _match(g, like):
    """Cast a cotangent to the dtype family of its primal."""
    if not np.iscomplexobj(like) and np.iscomplexobj(g):
        return g.real
    return g


def _check_broadcast(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ValueError(f"shape mismatch: {' vs '.join(map(str, shapes))}") from exc


def grad(tape: Tape, output: Traced, wrt):
    """Reverse-mode gradient of scalar ``output`` with respect to ``wrt``.

    ``wrt`` may be one traced value or a sequence; the return mirrors it.
    """
    if isinstance(wrt, Traced):
        return tape.gradients(output, [wrt])[0]
    return tape.gradients(output, list(wrt))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast(np.shape(av), np.shape(bv))

    def backward(g, needs):
        return (
            _match(_unbroadcast(g, np.shape(av)), av) if needs[0] else None,
            _match(_unbroadcast(g, np.shape(bv)), bv) if needs[1] else None,
        )

    return _emit(av + bv, (a, b), backward)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast(np.shape(av), np.shape(bv))

    def backward(g, needs):
        return (
            _match(_unbroadcast(g, np.shape(av)), av) if needs[0] else None,
            _match(_unbroadcast(-g, np.shape(bv)), bv) if needs[1] else None,
        )

    return _emit(av - bv, (a, b), backward)


def neg(a):
    return _emit(-value_of(a), (a,), lambda g, needs: (-g,))


def mul(a, b):
    """Pointwise product with broadcasting (covers scalar multiplication)."""
    av, bv = value_of(a), value_of(b)
    _check_broadcast(np.shape(av), np.shape(bv))

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _match(_unbroadcast(g * np.conj(bv), np.shape(av)), av)
        if needs[1]:
            gb = _match(_unbroadcast(g * np.conj(av), np.shape(bv)), bv)
        return ga, gb

    return _emit(av * bv, (a, b), backward)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast(np.shape(av), np.shape(bv))
    out = av / bv

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _match(_unbroadcast(g / np.conj(bv), np.shape(av)), av)
        if needs[1]:
            gb = _match(_unbroadcast(-g * np.conj(out / bv), np.shape(bv)), bv)
        return ga, gb

    return _emit(out, (a, b), backward)


def real(a):
    """Real part; the cotangent of a real output is a real-valued complex cotangent."""
    av = value_of(a)
    return _emit(np.real(av).copy(), (a,), lambda g, needs: (g.astype(av.dtype),))


def sqrt(a):
    out = np.sqrt(value_of(a))
    return _emit(out, (a,), lambda g, needs: (g / (2 * out),))


_SQRT2 = np.sqrt(2.0)


def gelu(a):
    """Exact GELU ``x * Phi(x)``."""
    x = value_of(a)
    cdf = 0.5 * (1 + special.erf(x / _SQRT2))

    def backward(g, needs):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
        return (g * (cdf + x * pdf),)

    return _emit(x * cdf, (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    av = value_of(a)
    old = av.shape
    return _emit(av.reshape(shape), (a,), lambda g, needs: (g.reshape(old),))


def index(a, idx):
    """Basic (slice / integer) indexing; the adjoint scatters into zeros."""
    av = value_of(a)

    def backward(g, needs):
        out = np.zeros_like(av, dtype=np.result_type(av, g))
        out[idx] = g
        return (_match(out, av),)

    return _emit(av[idx], (a,), backward)


def concat(xs, axis: int = 1):
    vals = [value_of(x) for x in xs]
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate(vals, axis=axis), tuple(xs), backward)


def pad2d(a, top: int, bottom: int, left: int, right: int):
    """Zero padding of the last two axes."""
    av = value_of(a)
    widths = [(0, 0)] * (av.ndim - 2) + [(top, bottom), (left, right)]
    ny, nx = av.shape[-2:]

    def backward(g, needs):
        return (g[..., top : top + ny, left : left + nx],)

    return _emit(np.pad(av, widths), (a,), backward)


# ---------------------------------------------------------------------------
# reductions and losses


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    out = av.sum(axis=axis)

    def backward(g, needs):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % av.ndim for ax in axes)
        gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return _emit(out, (a,), backward)


def squared_l2(a, axis=None):
    """Sum of squares (of moduli for complex input)."""
    av = value_of(a)
    out = (av.real**2 + av.imag**2 if np.iscomplexobj(av) else av * av).sum(axis=axis)

    def backward(g, needs):
        gg = g
        if axis is not None:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            gg = np.expand_dims(g, tuple(ax % av.ndim for ax in axes))
        return (2 * gg * av,)

    return _emit(out, (a,), backward)


def huber(a, delta: float = 1.0):
    """Elementwise Huber loss: ``x^2/2`` inside ``delta``, linear outside."""
    x = value_of(a)
    ax = np.abs(x)
    inside = ax <= delta
    out = np.where(inside, 0.5 * x * x, delta * (ax - 0.5 * delta))

    def backward(g, needs):
        return (g * np.where(inside, x, delta * np.sign(x)),)

    return _emit(out, (a,), backward)


def gather(a, mask):
    """Masked gather: ``[B, C, H, W]`` under a ``[C, H, W]`` mask -> ``[B, n]``."""
    av = value_of(a)
    mask = np.asarray(mask, dtype=bool)
    if av.shape[-mask.ndim :] != mask.shape:
        raise ValueError(f"shape mismatch: mask {mask.shape} vs values {av.shape}")
    lead = av.shape[: av.ndim - mask.ndim]

    def backward(g, needs):
        out = np.zeros_like(av)
        out[(Ellipsis, mask)] = g
        return (out,)

    return _emit(av[(Ellipsis, mask)].reshape(*lead, -1), (a,), backward)


# ---------------------------------------------------------------------------
# linear layers


def matmul(a, w):
    """``a @ w`` for ``a`` of shape ``[..., n]`` and a 2-D ``w``."""
    av, wv = value_of(a), value_of(w)
    if av.shape[-1] != wv.shape[0]:
        raise ValueError(f"shape mismatch: {av.shape} @ {wv.shape}")

    def backward(g, needs):
        ga = gw = None
        if needs[0]:
            ga = g @ np.conj(wv).T
        if needs[1]:
            gw = np.conj(av).reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    return _emit(av @ wv, (a, w), backward)


def channel_mix(x, w, b=None):
    """1x1 channel mixing: ``[B, Cin, ...]`` with ``w: [Cout, Cin]``."""
    xv, wv = value_of(x), value_of(w)
    if xv.shape[1] != wv.shape[1]:
        raise ValueError(f"shape mismatch: {xv.shape[1]} input channels vs weight {wv.shape}")
    bsz, cin = xv.shape[:2]
    rest = xv.shape[2:]
    flat = xv.reshape(bsz, cin, -1)
    out = np.matmul(wv, flat).reshape(bsz, wv.shape[0], *rest)
    if b is not None:
        bv = value_of(b)
        out = out + bv.reshape(1, -1, *([1] * len(rest)))

    def backward(g, needs):
        gf = g.reshape(bsz, wv.shape[0], -1)
        gx = gw = gb = None
        if needs[0]:
            gx = np.matmul(wv.T, gf).reshape(xv.shape)
        if needs[1]:
            gw = np.einsum("bon,bin->oi", gf, flat, optimize=True)
        if len(needs) > 2 and needs[2]:
            gb = gf.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, backward)


def group_norm(x, groups: int, eps: float = 1e-5):
    """Normalise ``[B, C, H, W]`` over (channel-group, H, W); no affine part."""
    xv = value_of(x)
    bsz, c = xv.shape[:2]
    if c % groups:
        raise ValueError(f"shape mismatch: {c} channels not divisible into {groups} groups")
    xr = xv.reshape(bsz, groups, -1)
    mu = xr.mean(axis=-1, keepdims=True)
    var = xr.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xr - mu) * inv

    def backward(g, needs):
        gr = g.reshape(bsz, groups, -1)
        gm = gr.mean(axis=-1, keepdims=True)
        gxm = (gr * xhat).mean(axis=-1, keepdims=True)
        return ((inv * (gr - gm - xhat * gxm)).reshape(xv.shape),)

    return _emit(xhat.reshape(xv.shape), (x,), backward)


# ---------------------------------------------------------------------------
# spectral primitives


def _rfft_weights(nx: int, ncols: int) -> np.ndarray:
    w = np.full(ncols, 0.5)
    w[0] = 1.0
    if nx % 2 == 0:
        w[-1] = 1.0
    return w


def rfft2(x):
    """Real 2-D FFT over the last two axes, normalised by the point count."""
    xv = value_of(x)
    ny, nx = xv.shape[-2:]
    out = np.fft.rfft2(xv, norm="forward")
    w = _rfft_weights(nx, out.shape[-1])

    def backward(g, needs):
        return (np.fft.irfft2(g * w, s=(ny, nx), norm="backward"),)

    return _emit(out, (x,), backward)


def irfft2(z, shape: tuple[int, int]):
    """Inverse of :func:`rfft2` onto a grid of the given shape (unscaled)."""
    zv = value_of(z)
    ny, nx = shape
    if zv.shape[-2] != ny or zv.shape[-1] != nx // 2 + 1:
        raise ValueError(f"shape mismatch: spectrum {zv.shape[-2:]} for grid {shape}")
    w = _rfft_weights(nx, zv.shape[-1])

    def backward(g, needs):
        return (np.fft.rfft2(g, norm="backward") / w,)

    return _emit(np.fft.irfft2(zv, s=(ny, nx), norm="forward"), (z,), backward)


def truncate_modes(z, m1: int, m2: int):
    """Keep rows ``[:m1]`` and ``[-m1:]``, columns ``[:m2]`` of an rfft2 spectrum."""
    zv = value_of(z)
    rows, cols = zv.shape[-2:]
    if 2 * m1 > rows or m2 > cols:
        raise ValueError(f"shape mismatch: modes ({m1}, {m2}) exceed spectrum {rows}x{cols}")
    out = np.concatenate([zv[..., :m1, :m2], zv[..., rows - m1 :, :m2]], axis=-2)

    def backward(g, needs):
        full = np.zeros(zv.shape, dtype=g.dtype)
        full[..., :m1, :m2] = g[..., :m1, :]
        full[..., rows - m1 :, :m2] += g[..., m1:, :]
        return (full,)

    return _emit(out, (z,), backward)


def embed_modes(z, rows: int, cols: int):
    """Adjoint of :func:`truncate_modes`: zero-fill into a ``rows x cols`` spectrum."""
    zv = value_of(z)
    m1, m2 = zv.shape[-2] // 2, zv.shape[-1]
    if 2 * m1 > rows or m2 > cols:
        raise ValueError(f"shape mismatch: modes ({m1}, {m2}) exceed spectrum {rows}x{cols}")
    out = np.zeros((*zv.shape[:-2], rows, cols), dtype=zv.dtype)
    out[..., :m1, :m2] = zv[..., :m1, :]
    out[..., rows - m1 :, :m2] += zv[..., m1:, :]

    def backward(g, needs):
        return (np.concatenate([g[..., :m1, :m2], g[..., rows - m1 :, :m2]], axis=-2),)

    return _emit(out, (z,), backward)


def spectral_mix(z, w):
    """Per-mode complex channel mixing.

    ``z``: ``[B, Cin, R, M]`` complex; ``w``: ``[Cin, Cout, R, M, 2]`` real
    (real and imaginary parts). Returns ``[B, Cout, R, M]``.
    """
    zv, wv = value_of(z), value_of(w)
    if zv.shape[1] != wv.shape[0] or zv.shape[2:] != wv.shape[2:4]:
        raise ValueError(f"shape mismatch: spectrum {zv.shape} vs weights {wv.shape}")
    wc = wv[..., 0] + 1j * wv[..., 1]
    # batched matmul over modes: [RM, B, Cin] @ [RM, Cin, Cout]
    bsz, cin, r, m = zv.shape
    cout = wv.shape[1]
    zt = zv.reshape(bsz, cin, r * m).transpose(2, 0, 1)
    wt = wc.reshape(cin, cout, r * m).transpose(2, 0, 1)
    out = np.matmul(zt, wt).transpose(1, 2, 0).reshape(bsz, cout, r, m)

    def backward(g, needs):
        gt = g.reshape(bsz, cout, r * m).transpose(2, 0, 1)
        gz = gw = None
        if needs[0]:
            gz = np.matmul(gt, np.conj(wt).transpose(0, 2, 1)).transpose(1, 2, 0).reshape(zv.shape)
        if needs[1]:
            gwc = np.matmul(np.conj(zt).transpose(0, 2, 1), gt)  # [RM, Cin, Cout]
            gwc = gwc.transpose(1, 2, 0).reshape(cin, cout, r, m)
            gw = np.stack([gwc.real, gwc.imag], axis=-1)
        return gz, gw

    return _emit(out, (z, w), backward)


def resample_fourier(x, shape: tuple[int, int]):
    """Trigonometric resampling of the last two axes (see :mod:`fundps.field`)."""
    xv = value_of(x)
    ny, nx = xv.shape[-2:]
    if (ny, nx) == tuple(shape):
        return x
    ry, rx = fourier_matrix(ny, shape[0]), fourier_matrix(nx, shape[1])
    out = np.einsum("ai,...ij,bj->...ab", ry, xv, rx, optimize=True)

    def backward(g, needs):
        return (np.einsum("ai,...ab,bj->...ij", ry, g, rx, optimize=True),)

    return _emit(out, (x,), backward)


def resample_nearest(x, shape: tuple[int, int]):
    """Nearest-neighbour resampling on cell-centred grids."""
    xv = value_of(x)
    ny, nx = xv.shape[-2:]
    iy = np.minimum(((np.arange(shape[0]) + 0.5) * ny / shape[0]).astype(int), ny - 1)
    ix = np.minimum(((np.arange(shape[1]) + 0.5) * nx / shape[1]).astype(int), nx - 1)
    out = xv[..., iy[:, None], ix[None, :]]

    def backward(g, needs):
        acc = np.zeros_like(xv)
        np.add.at(acc, (Ellipsis, iy[:, None], ix[None, :]), g)
        return (acc,)

    return _emit(out, (x,), backward)


# ---------------------------------------------------------------------------
# implicit-function adjoint for linear solves


def linear_solve(matrix_fn: Callable, params, rhs):
    """Differentiable ``u = A(params)^{-1} rhs`` for a sparse ``A``.

    ``matrix_fn(params) -> (A, dA)`` where ``dA(lam, u)`` returns the cotangent
    of ``params`` given ``-lam^T (dA/dparams) u``. The backward pass solves
    ``A^T lam = g`` once and reuses the LU factors.
    """
    pv = value_of(params)
    rv = value_of(rhs)
    a_mat, pullback = matrix_fn(pv)
    lu = splu(a_mat.tocsc())
    u = lu.solve(np.ascontiguousarray(rv, dtype=float))

    def backward(g, needs):
        lam = lu.solve(np.ascontiguousarray(g, dtype=float), trans="T")
        gp = pullback(lam, u) if needs[0] else None
        gr = lam if needs[1] else None
        return gp, gr

    return _emit(u, (params, rhs), backward)


def harmonic(p, q):
    """Harmonic mean ``2pq / (p + q)`` built from primitives."""
    return div(mul(2.0, mul(p, q)), add(p, q))
