"""Flow accuracy metrics: EPE, magnitude-bucketed EPE, Fl-all and 1px.

Undefined quantities (empty masks or buckets) are reported as ``nan`` with
their pixel count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from megaflow.core import FlowField

# left-closed magnitude buckets in pixels
BUCKETS = (("s0-10", 0.0, 10.0), ("s10-40", 10.0, 40.0), ("s40+", 40.0, math.inf))


def _vectors(f):
    return f.vectors if isinstance(f, FlowField) else torch.as_tensor(f)


def _prepare(pred, gt, mask):
    pred, gt = _vectors(pred).double(), _vectors(gt).double()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and gt {tuple(gt.shape)} differ")
    if mask is None:
        mask = torch.ones(gt.shape[:-3] + gt.shape[-2:], dtype=torch.bool)
    mask = torch.as_tensor(mask).bool()
    if mask.shape != gt.shape[:-3] + gt.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape)} does not match flow {tuple(gt.shape)}")
    return pred, gt, mask


def epe_map(pred, gt):
    """Per-pixel end-point error ``... x H x W``."""
    pred, gt, _ = _prepare(pred, gt, None)
    return torch.linalg.norm(pred - gt, dim=-3)


def epe(pred, gt, mask=None):
    """Mean EPE over valid pixels and the per-pixel map."""
    pred, gt, mask = _prepare(pred, gt, mask)
    err = torch.linalg.norm(pred - gt, dim=-3)
    n = int(mask.sum())
    mean = float(err[mask].mean()) if n else float("nan")
    return mean, err


def bucketed_epe(pred, gt, mask=None):
    """``{name: {"epe", "count"}}`` with pixels bucketed by gt magnitude."""
    pred, gt, mask = _prepare(pred, gt, mask)
    err = torch.linalg.norm(pred - gt, dim=-3)
    mag = torch.linalg.norm(gt, dim=-3)
    out = {}
    for name, lo, hi in BUCKETS:
        sel = mask & (mag >= lo) & (mag < hi)
        n = int(sel.sum())
        out[name] = {"epe": float(err[sel].mean()) if n else float("nan"), "count": n}
    return out


def fl_all(pred, gt, mask=None):
    """Percent of valid pixels with EPE > 3 px and EPE > 5% of the gt magnitude."""
    pred, gt, mask = _prepare(pred, gt, mask)
    err = torch.linalg.norm(pred - gt, dim=-3)
    mag = torch.linalg.norm(gt, dim=-3)
    outlier = (err > 3.0) & (err > 0.05 * mag)
    n = int(mask.sum())
    return 100.0 * float(outlier[mask].double().mean()) if n else float("nan")


def one_px(pred, gt, mask=None):
    """Percent of valid pixels with EPE > 1 px."""
    pred, gt, mask = _prepare(pred, gt, mask)
    err = torch.linalg.norm(pred - gt, dim=-3)
    n = int(mask.sum())
    return 100.0 * float((err[mask] > 1.0).double().mean()) if n else float("nan")


@dataclass
class EvalReport:
    """Pixel-weighted aggregate over a dataset, plus a per-sequence breakdown."""

    epe_sum: float = 0.0
    count: int = 0
    fl_count: int = 0
    px1_count: int = 0
    bucket_sum: dict = field(default_factory=lambda: {n: 0.0 for n, _, _ in BUCKETS})
    bucket_count: dict = field(default_factory=lambda: {n: 0 for n, _, _ in BUCKETS})
    sequences: list = field(default_factory=list)
    missing: list = field(default_factory=list)

    def add(self, pred, gt, mask=None, name=None):
        pred, gt, mask = _prepare(pred, gt, mask)
        err = torch.linalg.norm(pred - gt, dim=-3)[mask]
        mag = torch.linalg.norm(gt, dim=-3)[mask]
        n = int(err.numel())
        self.epe_sum += float(err.sum())
        self.count += n
        self.fl_count += int(((err > 3.0) & (err > 0.05 * mag)).sum())
        self.px1_count += int((err > 1.0).sum())
        for bname, lo, hi in BUCKETS:
            sel = (mag >= lo) & (mag < hi)
            self.bucket_sum[bname] += float(err[sel].sum())
            self.bucket_count[bname] += int(sel.sum())
        if name is not None:
            self.sequences.append({
                "name": name,
                "epe": float(err.mean()) if n else float("nan"),
                "fl_all": 100.0 * float(((err > 3.0) & (err > 0.05 * mag)).double().mean()) if n else float("nan"),
                "one_px": 100.0 * float((err > 1.0).double().mean()) if n else float("nan"),
                "count": n,
            })

    def _ratio(self, num, den, scale=1.0):
        return scale * num / den if den else float("nan")

    @property
    def epe(self):
        return self._ratio(self.epe_sum, self.count)

    @property
    def fl_all(self):
        return self._ratio(self.fl_count, self.count, 100.0)

    @property
    def one_px(self):
        return self._ratio(self.px1_count, self.count, 100.0)

    @property
    def epe_by_bucket(self):
        return {n: self._ratio(self.bucket_sum[n], self.bucket_count[n]) for n, _, _ in BUCKETS}

    def summary(self):
        return {
            "epe": self.epe,
            "fl_all": self.fl_all,
            "one_px": self.one_px,
            "epe_by_bucket": self.epe_by_bucket,
            "bucket_count": dict(self.bucket_count),
            "count": self.count,
            "missing": list(self.missing),
        }
