"""Sequence losses for dense flow and point tracks.

Both losses share one reduction: per-element error summed over the two
components, averaged over valid pixels (or points), summed over frames. The
global-matching prediction gets a smooth-L1 term and the ``K`` refinement
iterates get L1 terms weighted by ``gamma ** (K - k)``.
"""

from __future__ import annotations

import warnings
from decimal import Decimal

import torch
import torch.nn.functional as F

from megaflow.config import LossConfig


def iterate_weights(num_iters, gamma=0.9):
    """Weights ``gamma ** (K - k)`` for ``k = 1..K``.

    Powers are taken in decimal on ``repr(gamma)`` and rounded once, so a
    decimal gamma such as 0.9 gives exactly 0.729 rather than 0.9 ** 3.
    """
    g = Decimal(repr(float(gamma)))
    return [float(g ** (num_iters - k)) for k in range(1, num_iters + 1)]


def _masked_mean(err, valid):
    # err: ... x N (component-summed), valid: ... x N bool; mean over valid, per frame
    valid = valid.to(err.dtype)
    count = valid.sum(dim=-1)
    total = (err * valid).sum(dim=-1)
    return torch.where(count > 0, total / count.clamp(min=1), torch.zeros_like(total))


def sequence_loss(init, iterates, target, valid, cfg: LossConfig | None = None):
    """Shared loss over ``F x N x 2`` predictions (F frames, N elements).

    Returns ``(total, info)`` where ``info`` holds the per-term breakdown and
    an ``empty_mask`` flag.
    """
    cfg = cfg or LossConfig()
    if init.shape != target.shape or any(it.shape != target.shape for it in iterates):
        raise ValueError("prediction and target shapes differ")
    if valid.shape != target.shape[:-1]:
        raise ValueError(f"mask shape {tuple(valid.shape)} does not match {tuple(target.shape[:-1])}")
    valid = valid.bool()
    empty = not bool(valid.any())
    if empty:
        warnings.warn("loss evaluated on an empty validity mask", RuntimeWarning, stacklevel=2)

    def smooth_term(pred):
        err = F.smooth_l1_loss(pred, target, reduction="none", beta=cfg.smooth_beta).sum(-1)
        return _masked_mean(err, valid).sum()

    def l1_term(pred):
        return _masked_mean((pred - target).abs().sum(-1), valid).sum()

    init_term = smooth_term(init)
    weights = iterate_weights(len(iterates), cfg.gamma)
    iter_terms = [w * l1_term(p) for w, p in zip(weights, iterates)]
    total = init_term + sum(iter_terms, torch.zeros_like(init_term))
    info = {
        "init": float(init_term.detach()),
        "iters": [float(v.detach()) for v in iter_terms],
        "weights": weights,
        "empty_mask": empty,
    }
    return total, info


def _flatten_flow(flow):
    # ... x 2 x H x W -> frames x (H*W) x 2, frames = all leading dims
    return flow.flatten(-2).transpose(-1, -2).reshape(-1, flow.shape[-2] * flow.shape[-1], 2)


def flow_loss(init, iterates, gt, valid=None, cfg: LossConfig | None = None):
    """Flow loss over ``... x 2 x H x W`` stride-1 flows.

    Leading dims (batch, pair) are treated as frames; a batched pair index
    is averaged over the batch so the loss scale does not depend on it.
    ``valid`` is ``... x H x W``; pixels outside it contribute nothing.
    """
    if valid is None:
        valid = torch.ones(gt.shape[:-3] + gt.shape[-2:], dtype=torch.bool, device=gt.device)
    if gt.dim() == 5:
        # B x P: pool the batch into the pixel axis so each pair is one frame
        valid = valid.transpose(0, 1).reshape(gt.shape[1], -1)
        return sequence_loss(_pool_pairs(init), [_pool_pairs(i) for i in iterates], _pool_pairs(gt), valid, cfg)
    target = _flatten_flow(gt)
    return sequence_loss(
        _flatten_flow(init), [_flatten_flow(i) for i in iterates], target,
        valid.reshape(target.shape[:-1]), cfg,
    )


def _pool_pairs(flow):
    # B x P x 2 x H x W -> P x (B*H*W) x 2
    return flow.permute(1, 0, 3, 4, 2).reshape(flow.shape[1], -1, 2)


def point_loss(init_tracks, iterate_tracks, gt_tracks, valid=None, cfg: LossConfig | None = None):
    """Track loss over ``... x P x T x 2`` positions (time steps are the frames).

    Predictions are usually obtained by sampling dense flows at the query
    points; ``valid`` masks out unsupervised (point, step) entries.
    """
    if init_tracks.shape != gt_tracks.shape:
        raise ValueError(f"track shapes differ: {tuple(init_tracks.shape)} vs {tuple(gt_tracks.shape)}")
    if valid is None:
        valid = torch.ones(gt_tracks.shape[:-1], dtype=torch.bool, device=gt_tracks.device)

    def frames_first(x):
        # ... x P x T x 2 -> T x (... * P) x 2
        return x.movedim(-2, 0).reshape(x.shape[-2], -1, 2)

    v = valid.movedim(-1, 0).reshape(valid.shape[-1], -1)
    return sequence_loss(
        frames_first(init_tracks), [frames_first(t) for t in iterate_tracks], frames_first(gt_tracks), v, cfg
    )
