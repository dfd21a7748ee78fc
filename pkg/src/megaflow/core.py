"""Shared data model, coordinate conventions and the bilinear sampler.

Conventions used throughout the package:

* x points right, y points down; flow channel order is ``(dx, dy)``.
* Flow tensors are channel-first, ``(..., 2, H, W)``.
* A grid at stride ``s`` has its cell ``j`` centred on full-resolution pixel
  ``j * s + (s - 1) / 2`` (the layout produced by average pooling or pixel
  unshuffle), and flow at stride ``s`` is measured in cells of that grid.
* Sampling outside the field clamps to the border.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class ImageSequence:
    """``T`` RGB frames sharing one resolution, stored ``T x H x W x 3`` in [0, 1]."""

    frames: torch.Tensor

    def __post_init__(self):
        f = self.frames
        if f.dim() != 4 or f.shape[-1] != 3:
            raise ValueError(f"frames must be T x H x W x 3, got {tuple(f.shape)}")
        if f.shape[0] < 2:
            raise ValueError("an image sequence needs at least 2 frames")
        if not torch.isfinite(f).all():
            raise ValueError("frames contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def to_tensor(self) -> torch.Tensor:
        """Channel-first ``T x 3 x H x W`` view for the network."""
        return self.frames.permute(0, 3, 1, 2).contiguous()

    @classmethod
    def from_tensor(cls, frames: torch.Tensor) -> "ImageSequence":
        return cls(frames.permute(0, 2, 3, 1).contiguous())


@dataclass(frozen=True)
class FlowField:
    """Dense displacement ``(..., 2, H, W)`` measured in cells of its own stride."""

    vectors: torch.Tensor
    stride: int = 1

    def __post_init__(self):
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError(f"stride must be a positive integer, got {self.stride}")
        if self.vectors.dim() < 3 or self.vectors.shape[-3] != 2:
            raise ValueError(f"flow must be (..., 2, H, W), got {tuple(self.vectors.shape)}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.vectors.shape[-2:])

    def to_numpy(self):
        """``H x W x 2`` array (unbatched fields only)."""
        if self.vectors.dim() != 3:
            raise ValueError("to_numpy expects an unbatched 2 x H x W field")
        return self.vectors.detach().permute(1, 2, 0).cpu().numpy()

    @classmethod
    def from_numpy(cls, array, stride: int = 1) -> "FlowField":
        return cls(torch.as_tensor(array).permute(2, 0, 1).contiguous(), stride)


def coords_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``H x W x 2`` grid whose entry ``(i, j)`` is ``(j, i)``."""
    ys = torch.arange(height, dtype=dtype, device=device)
    xs = torch.arange(width, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def bilinear_sample(field: torch.Tensor, points: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Sample ``field`` (``..., C, H, W``) at pixel ``points`` (``..., N, 2``).

    Returns ``..., N, C``. Leading dimensions of ``field`` and ``points`` must
    match. Out-of-range points clamp to the border. Differentiable with
    respect to both arguments.
    """
    if check:
        if not torch.isfinite(field).all():
            raise ValueError("field contains non-finite values")
        if not torch.isfinite(points).all():
            raise ValueError("points contain non-finite values")
    if points.shape[-1] != 2:
        raise ValueError(f"points must end in a size-2 axis, got {tuple(points.shape)}")
    lead = field.shape[:-3]
    if points.shape[:-2] != lead:
        raise ValueError(f"leading dims differ: field {tuple(lead)} vs points {tuple(points.shape[:-2])}")
    C, H, W = field.shape[-3:]
    N = points.shape[-2]

    x = points[..., 0].clamp(0, W - 1)
    y = points[..., 1].clamp(0, H - 1)
    # unchecked non-finite points get a valid index and propagate nan through the weights
    x0 = x.detach().nan_to_num(0.0).floor().clamp(max=max(W - 2, 0))
    y0 = y.detach().nan_to_num(0.0).floor().clamp(max=max(H - 2, 0))
    wx = (x - x0).unsqueeze(-2)
    wy = (y - y0).unsqueeze(-2)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)

    flat = field.reshape(*lead, C, H * W)

    def gather(yi, xi):
        idx = (yi * W + xi).unsqueeze(-2).expand(*lead, C, N)
        return torch.gather(flat, -1, idx)

    out = (
        gather(y0, x0) * (1 - wx) * (1 - wy)
        + gather(y0, x1) * wx * (1 - wy)
        + gather(y1, x0) * (1 - wx) * wy
        + gather(y1, x1) * wx * wy
    )
    return out.transpose(-1, -2)


def _resize(vectors: torch.Tensor, size: tuple[int, int], mode: str) -> torch.Tensor:
    lead = vectors.shape[:-3]
    v = vectors.reshape(-1, *vectors.shape[-3:])
    if mode == "bilinear":
        v = F.interpolate(v, size=size, mode="bilinear", align_corners=False)
    else:
        v = F.interpolate(v, size=size, mode="area")
    return v.reshape(*lead, *v.shape[-3:])


def upsample_flow(flow: FlowField, stride: int) -> FlowField:
    """Bilinearly upsample ``flow`` to a finer ``stride`` and rescale magnitudes."""
    if stride < 1 or flow.stride % stride != 0:
        raise ValueError(f"target stride {stride} must divide source stride {flow.stride}")
    factor = flow.stride // stride
    if factor == 1:
        return flow
    h, w = flow.shape
    up = _resize(flow.vectors, (h * factor, w * factor), "bilinear")
    return FlowField(up * factor, stride)


def downsample_flow(flow: FlowField, stride: int) -> FlowField:
    """Area-average ``flow`` to a coarser ``stride`` and rescale magnitudes."""
    if stride % flow.stride != 0:
        raise ValueError(f"source stride {flow.stride} must divide target stride {stride}")
    factor = stride // flow.stride
    if factor == 1:
        return flow
    h, w = flow.shape
    if h % factor or w % factor:
        raise ValueError(f"flow of size {h}x{w} is not divisible by {factor}")
    down = _resize(flow.vectors, (h // factor, w // factor), "area")
    return FlowField(down / factor, stride)
