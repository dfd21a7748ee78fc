"""The full network: backbone -> pair-wise global matching -> refinement."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from megaflow.backbone import Backbone
from megaflow.config import ModelConfig
from megaflow.core import FlowField
from megaflow.matching import global_match
from megaflow.refinement import Refiner

PAIRINGS = ("consecutive", "anchored")


def pair_indices(num_frames, pairing="consecutive"):
    """(source, target) frame indices of the ``T - 1`` predicted flows."""
    if pairing == "consecutive":
        return [(i, i + 1) for i in range(num_frames - 1)]
    if pairing == "anchored":
        return [(0, t) for t in range(1, num_frames)]
    raise ValueError(f"unknown pairing {pairing!r}; expected one of {PAIRINGS}")


@dataclass
class FlowPrediction:
    flows: torch.Tensor        # B x P x 2 x H x W, final iterate at stride 1
    init: torch.Tensor         # B x P x 2 x H x W, global-matching flow at stride 1
    iterates: list             # K tensors shaped like ``flows``
    coarse: torch.Tensor       # B x P x 2 x H/4 x W/4, final iterate at stride 4
    init_global: torch.Tensor  # B x P x 2 x H/S x W/S, in global-grid cells


class MegaFlow(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.backbone = Backbone(self.cfg)
        self.refiner = Refiner(self.cfg)

    def transformer_parameters(self):
        return list(self.backbone.blocks.parameters())

    def forward(self, images, iters=None, pairing="consecutive", flow0=None):
        """Predict the ``T - 1`` flows of ``B x T x 3 x H x W`` images in [0, 1].

        ``flow0`` (``B x P x 2 x H/4 x W/4``) replaces the matching-based
        starting point of the refinement, as used when chaining tracking
        windows.
        """
        if images.dim() == 4:
            images = images.unsqueeze(0)
        b, t = images.shape[:2]
        if t < 2:
            raise ValueError("need at least two frames")
        if iters is None:
            iters = self.cfg.train_iters if self.training else self.cfg.eval_iters
        pairs = pair_indices(t, pairing)
        src = [i for i, _ in pairs]
        dst = [j for _, j in pairs]

        fused, quarter = self.backbone(2 * images - 1)
        init = global_match(
            fused[:, src], fused[:, dst], self.cfg.softmax_temperature, self.cfg.global_stride
        )
        out = self.refiner(init, quarter[:, src], quarter[:, dst], fused[:, src], iters, flow0=flow0)
        iterates = [f.vectors for f in out.iterates]
        coarse = out.coarse_iterates[-1].vectors if out.coarse_iterates else None
        return FlowPrediction(
            flows=out.final.vectors,
            init=out.init.vectors,
            iterates=iterates,
            coarse=coarse,
            init_global=init.vectors,
        )

    @torch.no_grad()
    def predict(self, images, iters=None, pairing="consecutive"):
        """Inference helper returning a list of stride-1 :class:`FlowField` per pair."""
        was_training = self.training
        self.eval()
        try:
            pred = self(images, iters=iters, pairing=pairing)
        finally:
            self.train(was_training)
        return [FlowField(pred.flows[:, p], 1) for p in range(pred.flows.shape[1])]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
