"""Global matching: all-pairs correlation, softmax matching, expectation flow.

Feature maps are ``(..., D, Hg, Wg)``. Grid cells are flattened row-major,
``u = i * Wg + j``, so a correlation volume is ``(..., Hg*Wg, Hg*Wg)`` with
rows indexing the source frame and columns the target frame. Cost and
memory grow as ``(Hg * Wg) ** 2 * D``.
"""

from __future__ import annotations

import torch

from megaflow.core import FlowField, coords_grid


def all_pairs_correlation(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    if f1.shape != f2.shape:
        raise ValueError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    d, h, w = f1.shape[-3:]
    a = f1.reshape(*f1.shape[:-3], d, h * w)
    b = f2.reshape(*f2.shape[:-3], d, h * w)
    return a.transpose(-1, -2) @ b


def softmax_match(corr: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    # torch.softmax subtracts the row max internally
    return torch.softmax(corr / temperature, dim=-1)


def expectation_flow(probs: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Expected target coordinate minus source coordinate, ``(..., 2, Hg, Wg)``.

    ``grid`` is the ``Hg x Wg x 2`` coordinate grid of the target map.
    """
    h, w = grid.shape[:2]
    n = h * w
    if probs.shape[-2:] != (n, n):
        raise ValueError(f"match distribution {tuple(probs.shape)} does not fit a {h}x{w} grid")
    g = grid.reshape(n, 2).to(probs.dtype)
    matched = probs @ g
    flow = matched - g
    return flow.transpose(-1, -2).reshape(*probs.shape[:-2], 2, h, w)


def argmax_match_oracle(corr: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Hard-argmax correspondence; ties go to the lowest flat index."""
    h, w = grid.shape[:2]
    n = h * w
    g = grid.reshape(n, 2).to(corr.dtype)
    # torch.argmax returns the first maximal index
    best = corr.argmax(dim=-1)
    flow = g[best] - g
    return flow.transpose(-1, -2).reshape(*corr.shape[:-2], 2, h, w)


def global_match(f1: torch.Tensor, f2: torch.Tensor, temperature: float, stride: int) -> FlowField:
    """Initial flow between two fused maps, in cells of ``stride``."""
    corr = all_pairs_correlation(f1, f2)
    probs = softmax_match(corr, temperature)
    grid = coords_grid(*f1.shape[-2:], dtype=f1.dtype, device=f1.device)
    return FlowField(expectation_flow(probs, grid), stride)


def matching_cost(grid_h: int, grid_w: int, dim: int) -> int:
    """Multiply-adds of one correlation volume."""
    return (grid_h * grid_w) ** 2 * dim
