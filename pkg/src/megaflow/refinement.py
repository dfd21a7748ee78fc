"""Local recurrent refinement at 1/4 resolution.

Each step samples a ``(2r+1)^2`` local correlation window around the current
flow, encodes it with the flow into motion features, updates a per-pair
hidden state with a convolutional GRU, mixes the hidden states of all frame
pairs by attention along the pair axis and regresses a residual flow.

Pair-stacked tensors are ``B x P x C x h x w`` with ``P = T - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from megaflow.config import ModelConfig
from megaflow.core import FlowField, bilinear_sample, coords_grid, upsample_flow
from megaflow.matching import all_pairs_correlation


def window_offsets(radius, dtype=torch.float32, device=None):
    """``(2r+1)^2 x 2`` offsets ``(dx, dy)``, dy-major so index = (dy+r)*(2r+1) + (dx+r)."""
    d = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    dy, dx = torch.meshgrid(d, d, indexing="ij")
    return torch.stack([dx, dy], dim=-1).reshape(-1, 2)


class CorrSampler:
    """All-pairs correlation of two quarter-res maps, sampled in local windows.

    Bilinear sampling is linear in the sampled map, so looking up the
    precomputed volume at ``u + flow(u) + du`` equals the dot product of the
    source feature with the bilinearly sampled target feature.
    """

    def __init__(self, f1, f2, radius):
        if radius < 0:
            raise ValueError(f"correlation radius must be >= 0, got {radius}")
        if f1.shape != f2.shape:
            raise ValueError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        self.radius = radius
        self.lead = f1.shape[:-3]
        self.h, self.w = f1.shape[-2:]
        corr = all_pairs_correlation(f1, f2)
        self.volume = corr.reshape(*self.lead, self.h * self.w, 1, self.h, self.w)
        self.offsets = window_offsets(radius, f1.dtype, f1.device)
        self.grid = coords_grid(self.h, self.w, f1.dtype, f1.device).reshape(-1, 2)

    def __call__(self, flow):
        """``flow``: ``..., 2, h, w`` in quarter-res cells -> ``..., (2r+1)^2, h, w``."""
        n = self.h * self.w
        centre = self.grid + flow.reshape(*self.lead, 2, n).transpose(-1, -2)
        points = centre.unsqueeze(-2) + self.offsets
        out = bilinear_sample(self.volume, points, check=False)
        return out.squeeze(-1).transpose(-1, -2).reshape(*self.lead, -1, self.h, self.w)


def local_correlation(f1, f2, flow, radius):
    """Local correlation volume of ``f1`` against ``f2`` warped by ``flow``.

    ``flow`` may be a tensor or a stride-4 :class:`FlowField`.
    """
    if isinstance(flow, FlowField):
        if flow.stride != 4:
            raise ValueError(f"local correlation needs stride-4 flow, got stride {flow.stride}")
        flow = flow.vectors
    return CorrSampler(f1, f2, radius)(flow)


class MotionEncoder(nn.Module):
    def __init__(self, corr_channels, feat_dim, out_dim):
        super().__init__()
        self.scale = 1.0 / math.sqrt(feat_dim)
        self.convc1 = nn.Conv2d(corr_channels, 2 * out_dim, 1)
        self.convc2 = nn.Conv2d(2 * out_dim, out_dim, 3, padding=1)
        self.convf1 = nn.Conv2d(2, out_dim, 7, padding=3)
        self.convf2 = nn.Conv2d(out_dim, out_dim // 2, 3, padding=1)
        self.conv = nn.Conv2d(out_dim + out_dim // 2, out_dim - 2, 3, padding=1)

    def forward(self, corr, flow):
        c = F.gelu(self.convc2(F.gelu(self.convc1(corr * self.scale))))
        f = F.gelu(self.convf2(F.gelu(self.convf1(flow))))
        out = F.gelu(self.conv(torch.cat([c, f], dim=1)))
        return torch.cat([out, flow], dim=1)


class ConvGRU(nn.Module):
    def __init__(self, hidden_dim, input_dim):
        super().__init__()
        self.convz = nn.Conv2d(hidden_dim + input_dim, hidden_dim, 3, padding=1)
        self.convr = nn.Conv2d(hidden_dim + input_dim, hidden_dim, 3, padding=1)
        self.convq = nn.Conv2d(hidden_dim + input_dim, hidden_dim, 3, padding=1)

    def forward(self, h, x):
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


class TemporalAttention(nn.Module):
    """Self-attention across the pair axis at every pixel, with a residual."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, h):
        b, p, c, hh, ww = h.shape
        x = h.permute(0, 3, 4, 1, 2).reshape(b * hh * ww, p, c)
        qkv = self.qkv(self.norm(x)).reshape(-1, p, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(-1, p, c)
        y = self.proj(y).reshape(b, hh, ww, p, c).permute(0, 3, 4, 1, 2)
        return h + y


class FlowHead(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, 2, 3, padding=1)

    def forward(self, h):
        return self.conv2(F.gelu(self.conv1(h)))


@dataclass
class RefineOutput:
    init: FlowField          # global-matching init, upsampled to stride 1
    iterates: list           # stride-1 FlowField per iteration
    coarse_iterates: list    # stride-4 FlowField per iteration

    @property
    def final(self) -> FlowField:
        return self.iterates[-1] if self.iterates else self.init


class Refiner(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c4 = cfg.cnn_dims[1]
        corr_channels = (2 * cfg.corr_radius + 1) ** 2
        self.context_in = nn.Conv2d(cfg.fuse_dim + c4, cfg.hidden_dim, 1)
        self.hidden_proj = nn.Conv2d(cfg.fuse_dim, cfg.hidden_dim, 1)
        self.motion = MotionEncoder(corr_channels, c4, cfg.motion_dim)
        self.gru = ConvGRU(cfg.hidden_dim, cfg.motion_dim + cfg.hidden_dim)
        self.temporal = TemporalAttention(cfg.hidden_dim, cfg.temporal_heads)
        self.head = FlowHead(cfg.hidden_dim)

    def zero_residual(self):
        """Zero the last flow-head layer so every update is exactly zero."""
        with torch.no_grad():
            self.head.conv2.weight.zero_()
            self.head.conv2.bias.zero_()

    def init_hidden(self, context, fcnn):
        """Bounded initial hidden state from context maps resized to ``fcnn``'s grid."""
        lead = context.shape[:-3]
        ctx = F.interpolate(context.flatten(0, -4), size=fcnn.shape[-2:], mode="bilinear", align_corners=False)
        if self.cfg.zero_hidden_init:
            h = torch.zeros(ctx.shape[0], self.cfg.hidden_dim, *ctx.shape[-2:], dtype=ctx.dtype, device=ctx.device)
        else:
            h = torch.tanh(self.hidden_proj(ctx))
        return h.reshape(*lead, *h.shape[1:])

    def context_features(self, context, fcnn):
        lead = context.shape[:-3]
        ctx = F.interpolate(context.flatten(0, -4), size=fcnn.shape[-2:], mode="bilinear", align_corners=False)
        x = F.gelu(self.context_in(torch.cat([ctx, fcnn.flatten(0, -4)], dim=1)))
        return x.reshape(*lead, *x.shape[1:])

    def step(self, flows, hidden, corr_fn, ctx):
        """One residual update of every pair. Returns (flows, hidden, delta)."""
        b, p = flows.shape[:2]
        if p < 1:
            raise ValueError("refinement needs at least one frame pair")
        corr = corr_fn(flows)
        motion = self.motion(corr.flatten(0, 1), flows.flatten(0, 1))
        h = self.gru(hidden.flatten(0, 1), torch.cat([motion, ctx.flatten(0, 1)], dim=1))
        h = h.reshape(b, p, *h.shape[1:])
        if self.cfg.temporal_attention:
            h = self.temporal(h)
        delta = self.head(h.flatten(0, 1)).reshape(b, p, 2, *h.shape[-2:])
        return flows + delta, h, delta

    def forward(self, flow_init: FlowField, fcnn_src, fcnn_dst, context, iters, flow0=None):
        """Refine ``B x P`` initial flows.

        ``flow_init`` is the global-matching flow at the global stride;
        ``flow0`` optionally replaces its upsampled version as the starting
        point (stride 4).
        """
        if iters < 0:
            raise ValueError("iters must be >= 0")
        start = upsample_flow(flow_init, 4)
        init_full = upsample_flow(start, 1)
        flows = start.vectors if flow0 is None else flow0
        corr_fn = CorrSampler(fcnn_src, fcnn_dst, self.cfg.corr_radius)
        hidden = self.init_hidden(context, fcnn_src)
        ctx = self.context_features(context, fcnn_src)
        coarse, full = [], []
        for _ in range(iters):
            # each update is trained through its own residual only
            flows, hidden, _ = self.step(flows.detach(), hidden, corr_fn, ctx)
            f4 = FlowField(flows, 4)
            coarse.append(f4)
            full.append(upsample_flow(f4, 1))
        return RefineOutput(init_full, full, coarse)
