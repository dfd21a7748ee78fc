"""Training loop, optimiser schedule and resumable checkpoints.

Every step's data is a pure function of ``(seed, step)``, so a run resumed
from a checkpoint replays the same batches as an uninterrupted run.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import torch

from megaflow.checkpoint import (
    load_checkpoint,
    load_model_arrays,
    model_arrays,
    save_checkpoint,
)
from megaflow.config import LossConfig, ModelConfig, TrainConfig
from megaflow.core import bilinear_sample
from megaflow.losses import flow_loss, point_loss
from megaflow.model import MegaFlow
from megaflow.synth import random_spec, render_record, render_sequence

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class Batch:
    images: torch.Tensor      # B x T x 3 x H x W
    gt: torch.Tensor          # B x P x 2 x H x W
    valid: torch.Tensor       # B x P x H x W
    pairing: str
    queries: torch.Tensor | None = None    # B x N x 2
    tracks: torch.Tensor | None = None     # B x N x P x 2
    track_valid: torch.Tensor | None = None


def lr_at(step, cfg: TrainConfig):
    """Linear warmup then cosine annealing to zero."""
    total = max(cfg.steps, 1)
    warm = int(cfg.warmup_fraction * total)
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    progress = (step - warm) / max(total - warm, 1)
    return cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))


def frames_at(step, cfg: TrainConfig, rng):
    """Two-frame warm-up stage, then uniform over ``[min_frames, max_frames]``."""
    if step < int(cfg.two_frame_fraction * cfg.steps):
        return 2
    return int(rng.integers(cfg.min_frames, cfg.max_frames + 1))


def make_batch(step, cfg: TrainConfig, records=None) -> Batch:
    rng = np.random.default_rng([cfg.seed, step])
    t = frames_at(step, cfg, rng)
    pairing = "anchored" if rng.random() < cfg.track_fraction else "consecutive"
    samples = []
    if records:
        for b in range(cfg.batch_size):
            samples.append(render_record(records[(step * cfg.batch_size + b) % len(records)]))
        t = min([t] + [s.sequence.num_frames for s in samples])
    else:
        cap_mode = "anchored" if pairing == "anchored" else "consecutive"
        for _ in range(cfg.batch_size):
            spec = random_spec(rng, cfg.warp_kind, t, cfg.crop_size, cfg.crop_size, cfg.max_displacement, cap_mode)
            samples.append(render_sequence(spec, int(rng.integers(2**31))))
    images = torch.stack([s.images[:t] for s in samples])
    if pairing == "anchored":
        gt = torch.stack([s.gt_anchor_flows[: t - 1] for s in samples])
        valid = torch.stack([s.anchor_valid[: t - 1] for s in samples])
        queries = torch.stack([s.gt_tracks.queries for s in samples])
        tracks = torch.stack([s.gt_tracks.positions[:, 1:t] for s in samples])
        tvalid = torch.stack([s.gt_tracks.valid[:, 1:t] for s in samples])
        return Batch(images, gt, valid, pairing, queries, tracks, tvalid)
    gt = torch.stack([s.gt_flows[: t - 1] for s in samples])
    valid = torch.stack([s.valid[: t - 1] for s in samples])
    return Batch(images, gt, valid, pairing)


def sample_tracks(flows, queries):
    """Positions ``B x N x P x 2`` of ``queries`` (``B x N x 2``) under ``B x P x 2 x H x W`` flows."""
    p = flows.shape[1]
    pts = queries.unsqueeze(1).expand(-1, p, -1, -1)
    disp = bilinear_sample(flows, pts, check=False)
    return (pts + disp).transpose(1, 2)


def compute_loss(model, batch: Batch, loss_cfg: LossConfig, iters=None):
    pred = model(batch.images, iters=iters, pairing=batch.pairing)
    if batch.tracks is not None:
        init = sample_tracks(pred.init, batch.queries)
        its = [sample_tracks(f, batch.queries) for f in pred.iterates]
        loss, info = point_loss(init, its, batch.tracks, batch.track_valid, loss_cfg)
    else:
        loss, info = flow_loss(pred.init, pred.iterates, batch.gt, batch.valid, loss_cfg)
    return loss, info, pred


def _prefetch(pool, steps, fn, depth):
    """Yield ``fn(step)`` in order with at most ``depth`` batches in flight."""
    pending = deque()
    it = iter(steps)
    for s in it:
        pending.append(pool.submit(fn, s))
        if len(pending) >= depth:
            break
    for s in it:
        yield pending.popleft().result()
        pending.append(pool.submit(fn, s))
    while pending:
        yield pending.popleft().result()


def global_grad_norm(params):
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0


class Trainer:
    def __init__(self, model: MegaFlow, cfg: TrainConfig, records=None):
        self.model = model
        self.cfg = cfg
        self.records = records
        self.step = 0
        self.history = []
        self.elapsed = 0.0
        attn = {id(p) for p in model.transformer_parameters()}
        self.param_names = [n for n, _ in model.named_parameters()]
        groups = [
            {"params": [p for p in model.parameters() if id(p) not in attn], "lr_scale": 1.0},
            {"params": [p for p in model.parameters() if id(p) in attn], "lr_scale": cfg.transformer_lr_ratio},
        ]
        self.opt = torch.optim.AdamW(
            groups, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay
        )

    def _set_lr(self):
        base = lr_at(self.step, self.cfg)
        for g in self.opt.param_groups:
            g["lr"] = base * g["lr_scale"]
        return base

    def train_step(self, batch: Batch):
        self.model.train()
        lr = self._set_lr()
        loss, info, _ = compute_loss(self.model, batch, self.cfg.loss)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(self.step, value)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for p in self.model.parameters() if p.grad is not None]
        norm = float(torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip))
        if self.cfg.check_clipping:
            after = global_grad_norm(params)
            assert after <= self.cfg.grad_clip + 1e-6, f"clipped norm {after} above {self.cfg.grad_clip}"
        self.opt.step()
        rec = {
            "step": self.step, "loss": value, "lr": lr, "grad_norm": norm,
            "frames": batch.images.shape[1], "pairing": batch.pairing,
        }
        self.history.append(rec)
        self.step += 1
        return rec

    def run(self, until=None, checkpoint_path=None, callback=None):
        until = self.cfg.steps if until is None else until
        steps = range(self.step, until)
        start = time.perf_counter()
        if self.cfg.data_workers > 0:
            pool = ThreadPoolExecutor(self.cfg.data_workers)
            batches = _prefetch(pool, steps, lambda s: make_batch(s, self.cfg, self.records), 2 * self.cfg.data_workers)
        else:
            pool = None
            batches = (make_batch(s, self.cfg, self.records) for s in steps)
        try:
            for batch in batches:
                rec = self.train_step(batch)
                if self.cfg.log_every and rec["step"] % self.cfg.log_every == 0:
                    log.info("step %d loss %.4f T=%d %s lr %.2e", rec["step"], rec["loss"], rec["frames"], rec["pairing"], rec["lr"])
                if callback is not None:
                    callback(rec)
                if checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(checkpoint_path)
        finally:
            if pool is not None:
                pool.shutdown(wait=False, cancel_futures=True)
            self.elapsed += time.perf_counter() - start
        if checkpoint_path:
            self.save(checkpoint_path)
        return self.history

    # checkpointing

    def state_arrays(self):
        arrays = model_arrays(self.model)
        params = dict(self.model.named_parameters())
        for name in self.param_names:
            state = self.opt.state.get(params[name], {})
            for key, val in state.items():
                arrays[f"optim/{name}/{key}"] = val
        arrays["rng/torch"] = torch.get_rng_state()
        arrays["log/loss"] = np.array([h["loss"] for h in self.history], dtype=np.float64)
        arrays["log/grad_norm"] = np.array([h["grad_norm"] for h in self.history], dtype=np.float64)
        arrays["log/frames"] = np.array([h["frames"] for h in self.history], dtype=np.int64)
        return arrays

    def meta(self):
        return {
            "step": self.step,
            "elapsed_seconds": self.elapsed,
            "model_config": asdict(self.model.cfg),
            "train_config": asdict(self.cfg),
            "pairings": [h["pairing"] for h in self.history],
            "lrs": [h["lr"] for h in self.history],
        }

    def save(self, path):
        save_checkpoint(path, self.state_arrays(), self.meta())

    def load_state(self, arrays, meta):
        load_model_arrays(self.model, arrays)
        params = dict(self.model.named_parameters())
        for name in self.param_names:
            keys = [k for k in arrays if k.startswith(f"optim/{name}/")]
            if keys:
                self.opt.state[params[name]] = {
                    k.rsplit("/", 1)[1]: torch.from_numpy(np.array(arrays[k])) for k in keys
                }
        torch.set_rng_state(torch.from_numpy(np.array(arrays["rng/torch"])))
        self.step = int(meta["step"])
        self.elapsed = float(meta.get("elapsed_seconds", 0.0))
        loss = arrays["log/loss"].tolist()
        gn = arrays["log/grad_norm"].tolist()
        fr = arrays["log/frames"].tolist()
        pairings = meta.get("pairings", [""] * len(loss))
        lrs = meta.get("lrs", [0.0] * len(loss))
        self.history = [
            {"step": i, "loss": loss[i], "lr": lrs[i], "grad_norm": gn[i], "frames": fr[i], "pairing": pairings[i]}
            for i in range(len(loss))
        ]

    @classmethod
    def from_checkpoint(cls, path, records=None):
        arrays, meta = load_checkpoint(path)
        model_cfg, train_cfg = configs_from_meta(meta)
        model = MegaFlow(model_cfg)
        trainer = cls(model, train_cfg, records)
        trainer.load_state(arrays, meta)
        return trainer


def configs_from_meta(meta):
    model_cfg = ModelConfig(**meta["model_config"])
    tc = dict(meta["train_config"])
    tc["loss"] = LossConfig(**tc["loss"])
    return model_cfg, TrainConfig(**tc)


def load_model(path) -> MegaFlow:
    arrays, meta = load_checkpoint(path)
    model = MegaFlow(ModelConfig(**meta["model_config"]))
    load_model_arrays(model, arrays)
    model.eval()
    return model


def build_model(model_cfg: ModelConfig, seed: int) -> MegaFlow:
    torch.manual_seed(seed)
    return MegaFlow(model_cfg)


def train(model_cfg: ModelConfig, cfg: TrainConfig, records=None, checkpoint_path=None, callback=None) -> Trainer:
    """Build a model from ``cfg.seed`` and train it for ``cfg.steps`` steps."""
    trainer = Trainer(build_model(model_cfg, cfg.seed), cfg, records)
    trainer.run(checkpoint_path=checkpoint_path, callback=callback)
    return trainer
