"""U-shaped neural operator denoiser with EDM preconditioning.

``D(y, sigma) = c_skip * y + c_out * F(c_in * y, c_noise)`` where ``F`` is a
small U-shaped Fourier neural operator. All layers are written with the
primitives of :mod:`fundps.autodiff`, so the same code runs plainly, traced
with respect to its parameters (training) or traced with respect to its
input (guidance).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .field import Field

CKPT_MAGIC = b"FCKP"
CKPT_VERSION = 1


class ResolutionError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class UnoConfig:
    in_channels: int = 2
    levels: int = 2
    base_channels: int = 32
    modes: tuple = (12, 6)
    projection_channels: int = 64
    emb_dim: int = 32
    emb_freqs: int = 8
    groups: int = 4
    sigma_data: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        if self.levels < 1 or len(self.modes) != self.levels:
            raise ValueError("need one mode count per level")
        if min(self.in_channels, self.base_channels, self.projection_channels, *self.modes) < 1:
            raise ValueError("channel and mode counts must be positive")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        for c in self.channels:
            if c % self.groups:
                raise ValueError(f"{c} channels not divisible into {self.groups} groups")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**l for l in range(self.levels)]

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_dict(cls, kv: dict) -> "UnoConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            v = kv[f.name]
            if f.name == "modes":
                v = tuple(int(x) for x in str(v).split(",") if x.strip())
            elif f.name == "sigma_data":
                v = float(v)
            else:
                v = int(v)
            kwargs[f.name] = v
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# preconditioning


def c_skip(sigma, sigma_data: float = 1.0):
    return sigma_data**2 / (sigma**2 + sigma_data**2)


def c_out(sigma, sigma_data: float = 1.0):
    return sigma * sigma_data / np.sqrt(sigma**2 + sigma_data**2)


def c_in(sigma, sigma_data: float = 1.0):
    return 1.0 / np.sqrt(sigma**2 + sigma_data**2)


def c_noise(sigma):
    return np.log(sigma) / 4.0


# ---------------------------------------------------------------------------
# parameters


def parameter_shapes(cfg: UnoConfig) -> dict[str, tuple]:
    ch, m = cfg.channels, cfg.modes
    e, f = cfg.emb_dim, cfg.emb_freqs
    shapes = {
        "lift.w": (ch[0], cfg.in_channels + 2),
        "lift.b": (ch[0],),
        "emb.w1": (2 * f, e),
        "emb.b1": (e,),
        "emb.w2": (e, e),
        "emb.b2": (e,),
    }

    def block(prefix, c, modes):
        shapes[f"{prefix}.spec"] = (c, c, 2 * modes, modes, 2)
        shapes[f"{prefix}.mix.w"] = (c, c)
        shapes[f"{prefix}.mix.b"] = (c,)
        shapes[f"{prefix}.norm.g"] = (c,)
        shapes[f"{prefix}.norm.b"] = (c,)
        shapes[f"{prefix}.emb.w"] = (e, c)

    for l in range(cfg.levels):
        block(f"enc{l}", ch[l], m[l])
        if l < cfg.levels - 1:
            mm = m[l + 1]
            shapes[f"down{l}.spec"] = (ch[l], ch[l + 1], 2 * mm, mm, 2)
            shapes[f"down{l}.mix.w"] = (ch[l + 1], ch[l])
            shapes[f"down{l}.mix.b"] = (ch[l + 1],)
            shapes[f"up{l}.spec"] = (ch[l + 1], ch[l], 2 * mm, mm, 2)
            shapes[f"up{l}.mix.w"] = (ch[l], ch[l + 1])
            shapes[f"up{l}.mix.b"] = (ch[l],)
            shapes[f"dec{l}.fuse.w"] = (ch[l], 2 * ch[l])
            shapes[f"dec{l}.fuse.b"] = (ch[l],)
            block(f"dec{l}", ch[l], m[l])
    shapes["proj1.w"] = (cfg.projection_channels, ch[0])
    shapes["proj1.b"] = (cfg.projection_channels,)
    shapes["proj2.w"] = (cfg.in_channels, cfg.projection_channels)
    shapes["proj2.b"] = (cfg.in_channels,)
    return shapes


def init_parameters(cfg: UnoConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        kind = name.rsplit(".", 1)[-1]
        if name.endswith(".spec"):
            std = 1.0 / np.sqrt(2 * shape[0])
            params[name] = std * rng.standard_normal(shape)
        elif name.endswith(".norm.g"):
            params[name] = np.ones(shape)
        elif kind in ("b", "b1", "b2"):
            params[name] = np.zeros(shape)
        elif "emb" in name:
            # [fan_in, fan_out] layout used with matmul
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            # [fan_out, fan_in] layout used with channel_mix
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[1])
    return params


# ---------------------------------------------------------------------------
# network


def _dropout(x, rate, rng):
    if not rate or rng is None:
        return x
    keep = rng.random(ad.value_of(x).shape) >= rate
    return ad.mul(x, keep / (1.0 - rate))


def _spectral_conv(x, w, modes, out_shape):
    z = ad.truncate_modes(ad.rfft2(x), modes, modes)
    z = ad.spectral_mix(z, w)
    z = ad.embed_modes(z, out_shape[0], out_shape[1] // 2 + 1)
    return ad.irfft2(z, out_shape)


def _block(h, p, prefix, modes, emb, groups, rate, rng):
    shape = ad.value_of(h).shape
    y = _spectral_conv(h, p[f"{prefix}.spec"], modes, shape[-2:])
    y = y + _dropout(ad.channel_mix(h, p[f"{prefix}.mix.w"], p[f"{prefix}.mix.b"]), rate, rng)
    y = ad.group_norm(y, groups)
    c = shape[1]
    y = y * ad.reshape(p[f"{prefix}.norm.g"], (1, c, 1, 1)) + ad.reshape(p[f"{prefix}.norm.b"], (1, c, 1, 1))
    y = y + ad.reshape(ad.matmul(emb, p[f"{prefix}.emb.w"]), (shape[0], c, 1, 1))
    return h + ad.gelu(y)


def _resample_block(h, p, prefix, modes, out_shape, rate, rng):
    y = _spectral_conv(h, p[f"{prefix}.spec"], modes, out_shape)
    skip = ad.resample_fourier(h, out_shape)
    y = y + _dropout(ad.channel_mix(skip, p[f"{prefix}.mix.w"], p[f"{prefix}.mix.b"]), rate, rng)
    return ad.gelu(y)


def _coords(bsz, ny, nx):
    x = (np.arange(nx) + 0.5) / nx
    y = (np.arange(ny) + 0.5) / ny
    gx, gy = np.meshgrid(x, y)
    return np.broadcast_to(np.stack([gx, gy])[None], (bsz, 2, ny, nx))


def level_shapes(cfg: UnoConfig, ny: int, nx: int) -> list[tuple[int, int]]:
    """Grid shape of every level; raises if any level cannot hold its modes."""
    shapes = []
    for l in range(cfg.levels):
        f = 2**l
        if ny % f or nx % f:
            raise ResolutionError(f"level {l}: grid {ny}x{nx} is not divisible by {f}")
        sy, sx = ny // f, nx // f
        m = cfg.modes[l]
        if 2 * m > sy or m > sx // 2 + 1:
            raise ResolutionError(
                f"level {l}: {m} Fourier modes do not fit the {sy}x{sx} grid at that level"
            )
        shapes.append((sy, sx))
    return shapes


def network(cfg: UnoConfig, p: dict, x, cnoise: np.ndarray, rate: float = 0.0, rng=None):
    """The raw network ``F(x, c_noise)`` on a ``[B, C, H, W]`` batch."""
    xv = ad.value_of(x)
    bsz, _, ny, nx = xv.shape
    shapes = level_shapes(cfg, ny, nx)
    freqs = 0.5 * 2.0 ** np.arange(cfg.emb_freqs)
    feats = np.concatenate([np.sin(np.outer(cnoise, freqs)), np.cos(np.outer(cnoise, freqs))], axis=1)
    emb = ad.gelu(ad.matmul(feats, p["emb.w1"]) + p["emb.b1"])
    emb = ad.matmul(emb, p["emb.w2"]) + p["emb.b2"]

    h = ad.channel_mix(ad.concat([x, _coords(bsz, ny, nx)], axis=1), p["lift.w"], p["lift.b"])
    skips = []
    for l in range(cfg.levels):
        h = _block(h, p, f"enc{l}", cfg.modes[l], emb, cfg.groups, rate, rng)
        if l < cfg.levels - 1:
            skips.append(h)
            h = _resample_block(h, p, f"down{l}", cfg.modes[l + 1], shapes[l + 1], rate, rng)
    for l in reversed(range(cfg.levels - 1)):
        h = _resample_block(h, p, f"up{l}", cfg.modes[l + 1], shapes[l], rate, rng)
        h = ad.channel_mix(ad.concat([h, skips[l]], axis=1), p[f"dec{l}.fuse.w"], p[f"dec{l}.fuse.b"])
        h = _block(h, p, f"dec{l}", cfg.modes[l], emb, cfg.groups, rate, rng)
    h = ad.gelu(_dropout(ad.channel_mix(h, p["proj1.w"], p["proj1.b"]), rate, rng))
    return ad.channel_mix(h, p["proj2.w"], p["proj2.b"])


def precondition(cfg: UnoConfig, p: dict, y, sigma, rate: float = 0.0, rng=None):
    """EDM-preconditioned denoiser ``D(y, sigma)`` for a batch.

    ``sigma`` is a scalar or one value per batch element.
    """
    yv = ad.value_of(y)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (yv.shape[0],))
    if np.any(sig <= 0):
        raise ValueError("sigma must be positive")
    sd = cfg.sigma_data
    col = lambda v: v.reshape(-1, 1, 1, 1)  # noqa: E731
    f = network(cfg, p, ad.mul(y, col(c_in(sig, sd))), c_noise(sig), rate, rng)
    return ad.mul(y, col(c_skip(sig, sd))) + ad.mul(f, col(c_out(sig, sd)))


class DenoiserModel:
    """Parameters (raw and EMA) plus the preconditioned forward map."""

    def __init__(self, config: UnoConfig, params=None, ema_params=None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed)
        self.ema_params = ema_params if ema_params is not None else {
            k: v.copy() for k, v in self.params.items()
        }
        self.metadata: dict[str, str] = {}
        expected = parameter_shapes(config)
        for bank in (self.params, self.ema_params):
            if set(bank) != set(expected) or any(bank[k].shape != expected[k] for k in expected):
                raise ValueError("parameter shapes do not match the configuration")

    def parameter_count(self) -> int:
        return parameter_count(self.config)

    def check_resolution(self, ny: int, nx: int):
        level_shapes(self.config, ny, nx)

    def zero_output(self):
        for bank in (self.params, self.ema_params):
            bank["proj2.w"][...] = 0.0
            bank["proj2.b"][...] = 0.0

    def apply(self, y, sigma, use_ema: bool = True, params=None):
        p = params if params is not None else (self.ema_params if use_ema else self.params)
        return precondition(self.config, p, y, sigma)

    def denoise(self, y, sigma):
        """Sampler interface: EMA weights, ``[B, C, H, W]`` input."""
        return self.apply(y, sigma, use_ema=True)


def parameter_count(cfg: UnoConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


def forward(m: DenoiserModel, a_t: Field, sigma: float, use_ema: bool = True) -> Field:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if a_t.channels != m.config.in_channels:
        raise ValueError(f"model expects {m.config.in_channels} channels, got {a_t.channels}")
    out = m.apply(a_t.values[None], sigma, use_ema=use_ema)
    return Field(a_t.grid, ad.value_of(out)[0])


def score_from_denoiser(m, a_t: Field, sigma: float) -> Field:
    """``(D(a_t, sigma) - a_t) / sigma^2`` for any object with ``denoise``."""
    if sigma == 0:
        raise ValueError("score is undefined at sigma = 0")
    d = ad.value_of(m.denoise(a_t.values[None], sigma))[0]
    return Field(a_t.grid, (d - a_t.values) / sigma**2)


# ---------------------------------------------------------------------------
# checkpoints


def _pack_bank(bank: dict) -> bytes:
    out = [struct.pack("<I", len(bank))]
    for name in sorted(bank):
        arr = np.ascontiguousarray(bank[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def _unpack_bank(buf: bytes, pos: int) -> tuple[dict, int]:
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    bank = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape))
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"checkpoint truncated inside parameter {name!r}")
        bank[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return bank, pos


def save_checkpoint(m: DenoiserModel, path, extra: dict | None = None) -> None:
    """Header (key=value text, length-prefixed) then raw and EMA parameter sections."""
    meta = dict(m.metadata)
    meta.update(extra or {})
    header = m.config.to_text() + "".join(f"meta.{k}={v}\n" for k, v in sorted(meta.items()))
    hb = header.encode()
    body = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hb)), hb]
    for section, bank in (("raw", m.params), ("ema", m.ema_params)):
        sb = section.encode()
        body.append(struct.pack("<I", len(sb)) + sb)
        body.append(_pack_bank(bank))
    Path(path).write_bytes(b"".join(body))


def load_checkpoint(path) -> DenoiserModel:
    try:
        return _parse_checkpoint(Path(path).read_bytes())
    except (struct.error, UnicodeDecodeError, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None


def _parse_checkpoint(buf: bytes) -> DenoiserModel:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    header = buf[pos : pos + hlen].decode()
    pos += hlen
    kv = {}
    for line in header.splitlines():
        k, _, v = line.partition("=")
        kv[k] = v
    banks = {}
    for _ in range(2):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        section = buf[pos : pos + ln].decode()
        pos += ln
        banks[section], pos = _unpack_bank(buf, pos)
    cfg = UnoConfig.from_dict({k: v for k, v in kv.items() if not k.startswith("meta.")})
    m = DenoiserModel(cfg, banks["raw"], banks["ema"])
    m.metadata = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    return m


__all__ = [
    "UnoConfig",
    "DenoiserModel",
    "ResolutionError",
    "forward",
    "score_from_denoiser",
    "save_checkpoint",
    "load_checkpoint",
    "parameter_count",
]
