"""Middlebury ``.flo`` files, images, and flow / error visualisation.

``.flo`` layout (always little-endian)::

    bytes 0-3    float32  202021.25 (magic)
    bytes 4-7    int32    width
    bytes 8-11   int32    height
    bytes 12-    float32  u, v interleaved per pixel, row-major

so a valid file has exactly ``12 + 8 * width * height`` bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from megaflow.core import FlowField

FLO_MAGIC = 202021.25


class FloFormatError(ValueError):
    """Not a .flo file (bad magic or header)."""


class FloCorruptionError(ValueError):
    """Header and payload length disagree."""


def _as_hw2(flow):
    if isinstance(flow, FlowField):
        if flow.stride != 1:
            raise ValueError(".flo files hold stride-1 flow")
        return flow.to_numpy()
    if isinstance(flow, torch.Tensor):
        return flow.detach().cpu().permute(1, 2, 0).numpy() if flow.shape[0] == 2 and flow.dim() == 3 else flow.numpy()
    return np.asarray(flow)


def flo_bytes(flow) -> bytes:
    arr = _as_hw2(flow)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"flow must be H x W x 2, got {arr.shape}")
    h, w = arr.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot write an empty flow field")
    if not np.isfinite(arr).all():
        raise ValueError("flow contains non-finite values")
    header = np.array([FLO_MAGIC], "<f4").tobytes() + np.array([w, h], "<i4").tobytes()
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def write_flo(path, flow):
    Path(path).write_bytes(flo_bytes(flow))


def parse_flo(data: bytes) -> FlowField:
    if len(data) < 12:
        raise FloFormatError("file shorter than the .flo header")
    magic = np.frombuffer(data[:4], "<f4")[0]
    if magic != np.float32(FLO_MAGIC):
        raise FloFormatError(f"bad magic {magic!r}")
    w, h = (int(v) for v in np.frombuffer(data[4:12], "<i4"))
    if w <= 0 or h <= 0:
        raise FloFormatError(f"invalid size {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FloCorruptionError(f"expected {expected} bytes for {w}x{h}, got {len(data)}")
    arr = np.frombuffer(data[12:], "<f4").astype(np.float32).reshape(h, w, 2)
    return FlowField.from_numpy(arr.copy(), 1)


def read_flo(path) -> FlowField:
    return parse_flo(Path(path).read_bytes())


def write_image(path, image):
    """Write ``H x W x 3`` floats in [0, 1] (or uint8) as PNG / PPM by extension."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0, 1) * 255 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_image(path):
    """``H x W x 3`` float32 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def make_colorwheel():
    """The 55-entry Middlebury colour wheel (0-255).

    Six hue ramps: red->yellow (15), yellow->green (6), green->cyan (4),
    cyan->blue (11), blue->magenta (13), magenta->red (6); each ramp varies
    one channel by ``floor(255 * i / n)``.
    """
    segments = [(15, 0, 1, +1), (6, 1, 0, -1), (4, 1, 2, +1), (11, 2, 1, -1), (13, 2, 0, +1), (6, 0, 2, -1)]
    wheel = []
    for n, full, ramp, sign in segments:
        for i in range(n):
            c = [0, 0, 0]
            c[full] = 255
            step = int(np.floor(255 * i / n))
            c[ramp] = step if sign > 0 else 255 - step
            wheel.append(c)
    return np.array(wheel, dtype=np.float64)


COLORWHEEL = make_colorwheel()


def wheel_position(u, v):
    """Fractional wheel index in ``[0, ncols - 1]`` of a flow direction."""
    ncols = len(COLORWHEEL)
    a = np.arctan2(-np.asarray(v, dtype=np.float64), -np.asarray(u, dtype=np.float64)) / np.pi
    return (a + 1) / 2 * (ncols - 1)


def flow_to_color(flow, max_magnitude=None):
    """``H x W x 3`` float image in [0, 1]; hue = direction, saturation = magnitude."""
    arr = _as_hw2(flow).astype(np.float64)
    u, v = arr[..., 0], arr[..., 1]
    rad = np.sqrt(u ** 2 + v ** 2)
    if max_magnitude is None:
        max_magnitude = rad.max()
    scale = max_magnitude if max_magnitude > 0 else 1.0
    rad = rad / scale
    ncols = len(COLORWHEEL)
    fk = wheel_position(u, v)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = ((1 - f) * COLORWHEEL[k0] + f * COLORWHEEL[k1]) / 255.0
    r = rad[..., None]
    return np.where(r <= 1, 1 - r * (1 - col), col * 0.75)


def error_heatmap(pred, gt, vmax=None, cmap="magma"):
    """Per-pixel EPE rendered with a monotone colormap.

    Returns ``(image, legend)``; ``legend`` records the colormap and value
    range so the image can be read back quantitatively.
    """
    from megaflow.metrics import epe_map

    p = pred.vectors if isinstance(pred, FlowField) else torch.as_tensor(pred)
    g = gt.vectors if isinstance(gt, FlowField) else torch.as_tensor(gt)
    err = epe_map(p, g).numpy()
    if vmax is None:
        vmax = float(err.max())
    scale = vmax if vmax > 0 else 1.0
    pos = np.clip(err / scale, 0, 1)
    image = colormaps[cmap](pos)[..., :3]
    legend = {"colormap": cmap, "vmin": 0.0, "vmax": float(vmax), "quantity": "endpoint error (px)"}
    return image, legend, pos


def save_error_heatmap(path, pred, gt, vmax=None):
    image, legend, _ = error_heatmap(pred, gt, vmax)
    write_image(path, image)
    Path(str(path) + ".json").write_text(json.dumps(legend, indent=2, sort_keys=True))
    return legend
