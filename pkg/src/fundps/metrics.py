"""Relative L2 and binary disagreement metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .field import Field

DARCY_THRESHOLD = 7.5


def _values(x, channel=None) -> np.ndarray:
    v = x.values if isinstance(x, Field) else np.asarray(x, dtype=float)
    if channel is None:
        return v
    return v[channel]


def rel_l2(pred, truth, channel: int | None = 0) -> float:
    """``||pred - truth|| / ||truth||`` over one channel (all channels if ``None``)."""
    p, t = _values(pred, channel), _values(truth, channel)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    denom = np.linalg.norm(t)
    if denom == 0:
        raise ValueError("relative error undefined for a zero reference")
    return float(np.linalg.norm(p - t) / denom)


def binary_error(pred, truth, threshold: float = DARCY_THRESHOLD, channel: int | None = None) -> float:
    """Fraction of points on opposite sides of ``threshold``."""
    p, t = _values(pred, channel), _values(truth, channel)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.mean((p > threshold) != (t > threshold)))


@dataclass
class EvalResult:
    """Per-sample rows plus mean and standard deviation per metric."""

    rows: list = field(default_factory=list)

    def add(self, sample: str, pred, truth, channels=(0, 1), threshold: float | None = None):
        row = {"sample": sample}
        for c in channels:
            row[f"rel_l2_c{c}"] = rel_l2(pred, truth, c)
        if threshold is not None:
            row["binary_error"] = binary_error(pred, truth, threshold, channel=0)
        self.rows.append(row)
        return row

    @property
    def metrics(self) -> list[str]:
        return [k for k in self.rows[0] if k != "sample"] if self.rows else []

    def aggregate(self) -> dict:
        out = {}
        for k in self.metrics:
            v = np.array([r[k] for r in self.rows])
            out[k] = (float(v.mean()), float(v.std()))
        return out

    def write_csv(self, path) -> None:
        keys = self.metrics
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", *keys])
            for r in self.rows:
                w.writerow([r["sample"], *(f"{r[k]:.6g}" for k in keys)])
            agg = self.aggregate()
            w.writerow(["mean", *(f"{agg[k][0]:.6g}" for k in keys)])
            w.writerow(["std", *(f"{agg[k][1]:.6g}" for k in keys)])


__all__ = ["rel_l2", "binary_error", "EvalResult", "DARCY_THRESHOLD"]
