"""Point tracking from frame-0-anchored flow fields.

A query ``x`` in frame 0 is tracked as ``p_t(x) = x + f_{0->t}(x)``. Long
videos are processed in windows that each re-include frame 0 as their first
frame, so every prediction is an anchored flow; each window starts its
refinement from the last flow of the previous window.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from megaflow.core import FlowField, bilinear_sample, downsample_flow

DELTA_THRESHOLDS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class TrackSet:
    queries: torch.Tensor    # P x 2, frame-0 pixel coordinates
    positions: torch.Tensor  # P x T x 2
    valid: torch.Tensor      # P x T bool

    def __post_init__(self):
        p = self.queries.shape[0]
        if self.queries.shape != (p, 2) or self.positions.dim() != 3 or self.positions.shape[0] != p:
            raise ValueError("tracks must be queries P x 2 and positions P x T x 2")
        if self.valid.shape != self.positions.shape[:2]:
            raise ValueError("valid must be P x T")
        if self.positions.shape[1] and not torch.equal(self.positions[:, 0], self.queries):
            raise ValueError("positions at frame 0 must equal the queries")

    @property
    def num_points(self):
        return self.positions.shape[0]

    @property
    def num_frames(self):
        return self.positions.shape[1]


def _inside(points, height, width):
    x, y = points[..., 0], points[..., 1]
    return (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)


def flows_to_tracks(flows, queries) -> TrackSet:
    """Tracks of ``queries`` (``P x 2``) through anchored stride-1 flows for frames ``1..T-1``.

    ``flows`` is a sequence of :class:`FlowField` (or a ``T-1 x 2 x H x W``
    tensor). Queries or positions outside the image are clamp-sampled and
    marked invalid.
    """
    if isinstance(flows, torch.Tensor):
        flows = [FlowField(f, 1) for f in flows]
    queries = queries.to(torch.float32) if not queries.is_floating_point() else queries
    positions = [queries]
    valid = [torch.ones(queries.shape[0], dtype=torch.bool)]
    for f in flows:
        if f.stride != 1:
            raise ValueError("flows_to_tracks expects stride-1 flows")
        h, w = f.shape
        disp = bilinear_sample(f.vectors.to(queries.dtype), queries)
        pos = queries + disp
        positions.append(pos)
        valid.append(_inside(queries, h, w) & _inside(pos, h, w))
    return TrackSet(queries, torch.stack(positions, dim=1), torch.stack(valid, dim=1))


@dataclass(frozen=True)
class WindowPlan:
    window_size: int
    windows: tuple  # each entry: (start_target, frame_indices) with frame 0 first

    def targets(self):
        return [t for _, frames in self.windows for t in frames[1:]]


def plan_windows(num_frames, window_size=8) -> WindowPlan:
    """Split targets ``1..num_frames-1`` into windows of ``window_size - 1`` targets plus frame 0."""
    if window_size < 2:
        raise ValueError("window_size must be >= 2")
    if num_frames < 2:
        raise ValueError("need at least two frames")
    per = window_size - 1
    windows = []
    for start in range(1, num_frames, per):
        targets = list(range(start, min(start + per, num_frames)))
        windows.append((start, tuple([0] + targets)))
    return WindowPlan(window_size, tuple(windows))


@torch.no_grad()
def track_window(model, frames, prev_flow=None, iters=None):
    """Anchored flows ``f_{0->t}`` for a window whose first frame is the query frame.

    ``frames``: ``T x 3 x H x W`` (or batched). ``prev_flow``: the previous
    window's last stride-1 anchored flow (``2 x H x W``), used as the
    refinement starting point for every target of this window.
    """
    if frames.dim() == 4:
        frames = frames.unsqueeze(0)
    b, t = frames.shape[:2]
    if t < 2:
        raise ValueError("a tracking window needs at least two frames")
    flow0 = None
    if prev_flow is not None:
        prev = prev_flow if prev_flow.dim() == 4 else prev_flow.unsqueeze(0)
        coarse = downsample_flow(FlowField(prev, 1), 4).vectors
        flow0 = coarse.unsqueeze(1).expand(b, t - 1, *coarse.shape[1:]).contiguous()
    was_training = model.training
    model.eval()
    try:
        pred = model(frames, iters=iters, pairing="anchored", flow0=flow0)
    finally:
        model.train(was_training)
    return pred.flows


@torch.no_grad()
def track_video(model, frames, queries, window_size=8, iters=None, chain=True) -> TrackSet:
    """Track ``queries`` through a ``T x 3 x H x W`` video with sliding windows."""
    num = frames.shape[0]
    plan = plan_windows(num, window_size)
    anchored = [None] * num
    prev = None
    for _, idx in plan.windows:
        flows = track_window(model, frames[list(idx)], prev if chain else None, iters)[0]
        for k, t in enumerate(idx[1:]):
            anchored[t] = flows[k]
        prev = flows[-1]
    fields = [FlowField(anchored[t], 1) for t in range(1, num)]
    return flows_to_tracks(fields, queries)


def evaluate_tracks(pred: TrackSet, gt: TrackSet, thresholds=DELTA_THRESHOLDS, skip_first=True):
    """Percentage of gt-valid (point, frame) entries within each pixel threshold.

    Returns ``{"delta": {k: pct}, "delta_avg": pct, "count": n}``; with no
    valid entries the percentages are ``nan``.
    """
    if pred.positions.shape != gt.positions.shape:
        raise ValueError(f"track shapes differ: {tuple(pred.positions.shape)} vs {tuple(gt.positions.shape)}")
    valid = gt.valid.clone()
    if skip_first:
        valid[:, 0] = False
    err = torch.linalg.norm(pred.positions.double() - gt.positions.double(), dim=-1)[valid]
    n = int(err.numel())
    if n == 0:
        nan = float("nan")
        return {"delta": {k: nan for k in thresholds}, "delta_avg": nan, "count": 0}
    delta = {k: 100.0 * float((err < k).double().mean()) for k in thresholds}
    return {"delta": delta, "delta_avg": sum(delta.values()) / len(delta), "count": n}


def write_tracks(path, tracks: TrackSet):
    """Plain-text table, one ``point_id frame x y valid`` row per entry."""
    with open(path, "w") as fh:
        fh.write("# point_id frame x y valid\n")
        for p in range(tracks.num_points):
            for t in range(tracks.num_frames):
                x, y = tracks.positions[p, t].tolist()
                fh.write(f"{p} {t} {x!r} {y!r} {int(tracks.valid[p, t])}\n")


def read_tracks(path) -> TrackSet:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            pid, t, x, y, v = line.split()
            rows.append((int(pid), int(t), float(x), float(y), bool(int(v))))
    if not rows:
        raise ValueError(f"{path}: no track rows")
    num_p = max(r[0] for r in rows) + 1
    num_t = max(r[1] for r in rows) + 1
    if len(rows) != num_p * num_t:
        raise ValueError(f"{path}: expected {num_p * num_t} rows, found {len(rows)}")
    pos = torch.zeros(num_p, num_t, 2, dtype=torch.float32)
    valid = torch.zeros(num_p, num_t, dtype=torch.bool)
    for pid, t, x, y, v in rows:
        pos[pid, t, 0] = x
        pos[pid, t, 1] = y
        valid[pid, t] = v
    return TrackSet(pos[:, 0].clone(), pos, valid)
