"""Feature extraction: CNN pyramid, patch tokens, alternating attention, fusion.

All per-frame operations share weights across frames. Tensors carry a
leading ``B x T`` pair of axes (batch, frame).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from megaflow.config import ModelConfig


class ResidualBlock(nn.Module):
    def __init__(self, in_dim, out_dim, stride=1):
        super().__init__()
        # biases in front of instance norm would be cancelled by it
        self.conv1 = nn.Conv2d(in_dim, out_dim, 3, stride=stride, padding=1, bias=False)
        self.conv2 = nn.Conv2d(out_dim, out_dim, 3, padding=1, bias=False)
        self.norm1 = nn.InstanceNorm2d(out_dim)
        self.norm2 = nn.InstanceNorm2d(out_dim)
        if stride != 1 or in_dim != out_dim:
            self.skip = nn.Conv2d(in_dim, out_dim, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        y = F.gelu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.gelu(self.skip(x) + y)


class CNNEncoder(nn.Module):
    """Two-stage residual encoder producing 1/2 and 1/4 resolution maps."""

    def __init__(self, dims=(32, 64)):
        super().__init__()
        c2, c4 = dims
        self.stem = nn.Sequential(nn.Conv2d(3, c2, 5, stride=2, padding=2), nn.GELU())
        self.stage2 = ResidualBlock(c2, c2)
        self.stage4 = nn.Sequential(ResidualBlock(c2, c4, stride=2), ResidualBlock(c4, c4))

    def forward(self, x):
        half = self.stage2(self.stem(x))
        return half, self.stage4(half)


def sincos_position_encoding(dim, height, width, dtype=torch.float32, device=None):
    """Fixed 2D sine/cosine encoding, ``height*width x dim``."""
    if dim % 4:
        raise ValueError("position encoding width must be a multiple of 4")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=dtype, device=device) / quarter))
    ys = torch.arange(height, dtype=dtype, device=device)
    xs = torch.arange(width, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    ay = gy.reshape(-1, 1) * freqs
    ax = gx.reshape(-1, 1) * freqs
    return torch.cat([ay.sin(), ay.cos(), ax.sin(), ax.cos()], dim=1)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        n, length, c = x.shape
        qkv = self.qkv(x).reshape(n, length, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(n, length, c))


class TransformerLayer(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=2.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class AlternatingBlock(nn.Module):
    """A frame-wise layer followed by a global layer over all frames."""

    def __init__(self, dim, heads, mlp_ratio=2.0, use_global=True):
        super().__init__()
        self.frame = TransformerLayer(dim, heads, mlp_ratio)
        self.glob = TransformerLayer(dim, heads, mlp_ratio)
        self.use_global = use_global

    def forward(self, tokens):
        b, t, n, c = tokens.shape
        x = self.frame(tokens.reshape(b * t, n, c)).reshape(b, t, n, c)
        if self.use_global:
            x = self.glob(x.reshape(b, t * n, c)).reshape(b, t, n, c)
        return x


class ResidualConvUnit(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(F.gelu(x))))


class FusionHead(nn.Module):
    """DPT-style decoder merging token taps with pixel-unshuffled CNN maps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        width = cfg.fuse_dim
        c2, c4 = cfg.cnn_dims
        self.patch = cfg.patch_size
        self.stride = cfg.global_stride
        self.tap_proj = nn.ModuleList(nn.Linear(cfg.token_dim, width) for _ in cfg.taps)
        self.tap_units = nn.ModuleList(ResidualConvUnit(width) for _ in cfg.taps)
        self.merge_units = nn.ModuleList(ResidualConvUnit(width) for _ in cfg.taps[1:])
        self.up_conv = nn.Conv2d(width, width, 3, padding=1)
        cnn_dim = c4 * (self.patch // 4) ** 2 + c2 * (self.patch // 2) ** 2
        self.out1 = nn.Conv2d(width + cnn_dim, width, 1)
        self.out2 = nn.Conv2d(width, cfg.fuse_dim, 1)

    def forward(self, taps, half, quarter, size):
        """``taps``: list of ``B x T x N x C``; ``half``/``quarter``: ``B x T x C x h x w``."""
        if len(taps) != len(self.tap_proj):
            raise ValueError(f"expected {len(self.tap_proj)} taps, got {len(taps)}")
        h, w = size
        if h % self.patch or w % self.patch or h % self.stride or w % self.stride:
            raise ValueError(f"image size {h}x{w} incompatible with patch {self.patch} / stride {self.stride}")
        b, t = quarter.shape[:2]
        gh, gw = h // self.patch, w // self.patch
        out_size = (h // self.stride, w // self.stride)

        def grid(tap, i):
            x = self.tap_proj[i](tap).reshape(b * t, gh, gw, -1).permute(0, 3, 1, 2)
            return self.tap_units[i](x)

        x = grid(taps[-1], len(taps) - 1)
        for j, i in enumerate(reversed(range(len(taps) - 1))):
            x = self.merge_units[j](x + grid(taps[i], i))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.interpolate(self.up_conv(x), size=out_size, mode="bilinear", align_corners=False)

        q = F.pixel_unshuffle(quarter.flatten(0, 1), self.patch // 4)
        hf = F.pixel_unshuffle(half.flatten(0, 1), self.patch // 2)
        cnn = F.interpolate(torch.cat([q, hf], dim=1), size=out_size, mode="bilinear", align_corners=False)

        fused = self.out2(F.gelu(self.out1(torch.cat([x, cnn], dim=1))))
        return fused.reshape(b, t, *fused.shape[1:])


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.cnn = CNNEncoder(cfg.cnn_dims)
        self.patch_embed = nn.Conv2d(3, cfg.token_dim, cfg.patch_size, stride=cfg.patch_size)
        self.blocks = nn.ModuleList(
            AlternatingBlock(cfg.token_dim, cfg.num_heads, cfg.mlp_ratio, cfg.global_attention)
            for _ in range(cfg.num_blocks)
        )
        self.fusion = FusionHead(cfg)

    def check_size(self, h, w):
        m = self.cfg.input_multiple
        if h % m or w % m:
            raise ValueError(f"image size {h}x{w} must be a multiple of {m}; pad the input")
        if min(h, w) < 8:
            raise ValueError(f"image size {h}x{w} is below the 8 px minimum")

    def encode_cnn(self, images):
        """``B x T x 3 x H x W`` -> (half, quarter) pyramids, each ``B x T x C x h x w``."""
        b, t, _, h, w = images.shape
        if h % 4 or w % 4:
            raise ValueError(f"image size {h}x{w} must be divisible by 4")
        half, quarter = self.cnn(images.flatten(0, 1))
        return half.reshape(b, t, *half.shape[1:]), quarter.reshape(b, t, *quarter.shape[1:])

    def tokenize(self, images):
        """``B x T x 3 x H x W`` -> ``B x T x N x C`` patch tokens with position encoding."""
        b, t, _, h, w = images.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
        x = self.patch_embed(images.flatten(0, 1))
        x = x.flatten(2).transpose(1, 2)
        pe = sincos_position_encoding(self.cfg.token_dim, h // p, w // p, x.dtype, x.device)
        return (x + pe).reshape(b, t, -1, self.cfg.token_dim)

    def alternating_attention(self, tokens):
        taps = []
        tap_ids = set(self.cfg.taps)
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i in tap_ids:
                taps.append(tokens)
        return tokens, taps

    def fuse(self, taps, half, quarter, size):
        return self.fusion(taps, half, quarter, size)

    def forward(self, images):
        """Returns (fused ``B x T x D x H/S x W/S``, quarter-res CNN ``B x T x C x H/4 x W/4``)."""
        h, w = images.shape[-2:]
        self.check_size(h, w)
        half, quarter = self.encode_cnn(images)
        _, taps = self.alternating_attention(self.tokenize(images))
        return self.fuse(taps, half, quarter, (h, w)), quarter


def num_tokens(h, w, patch):
    return (h // patch) * (w // patch)
