"""Synthetic sequences with analytic ground truth.

A procedural value-noise texture is defined on the whole plane, so every
frame is rendered by evaluating it at the inverse-warped pixel grid and no
resampling or border handling is involved. Frame ``t`` shows frame-0 content
moved by a 3x3 matrix ``A_t`` (``A_0 = I``): the point ``y`` of frame 0 appears
at ``A_t y`` in frame ``t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from megaflow.core import ImageSequence
from megaflow.tracking import TrackSet

WARP_KINDS = ("translation", "affine", "homography")


class ValueNoise:
    """Multi-octave smoothstep value noise with periodic random lattices."""

    def __init__(self, seed, cells=(16, 8, 4, 2), period=97, contrast=2.2):
        rng = np.random.default_rng(seed)
        self.cells = cells
        self.period = period
        self.contrast = contrast
        self.lattices = [rng.random((period, period, 3)) for _ in cells]
        self.shifts = [rng.random(2) * period for _ in cells]
        self.amps = [0.6 ** k for k in range(len(cells))]

    def __call__(self, x, y):
        """Colour at continuous pixel coordinates ``x``, ``y`` (same shape) -> ``... x 3``."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        out = np.zeros(x.shape + (3,))
        for cell, lat, shift, amp in zip(self.cells, self.lattices, self.shifts, self.amps):
            gx = x / cell + shift[0]
            gy = y / cell + shift[1]
            x0 = np.floor(gx)
            y0 = np.floor(gy)
            tx = gx - x0
            ty = gy - y0
            tx = (tx * tx * (3 - 2 * tx))[..., None]
            ty = (ty * ty * (3 - 2 * ty))[..., None]
            p = self.period
            i0 = x0.astype(np.int64) % p
            j0 = y0.astype(np.int64) % p
            i1 = (i0 + 1) % p
            j1 = (j0 + 1) % p
            top = lat[j0, i0] * (1 - tx) + lat[j0, i1] * tx
            bot = lat[j1, i0] * (1 - tx) + lat[j1, i1] * tx
            out += amp * (top * (1 - ty) + bot * ty - 0.5)
        out *= self.contrast / sum(self.amps)
        return np.clip(out + 0.5, 0.0, 1.0)


def generate_texture(seed, height, width):
    """Deterministic ``H x W x 3`` texture in [0, 1]."""
    if height < 1 or width < 1:
        raise ValueError("texture size must be positive")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return ValueNoise(seed)(xs, ys).astype(np.float32)


def _apply(mat, x, y):
    """Apply a 3x3 projective matrix to coordinate arrays."""
    den = mat[2, 0] * x + mat[2, 1] * y + mat[2, 2]
    return (
        (mat[0, 0] * x + mat[0, 1] * y + mat[0, 2]) / den,
        (mat[1, 0] * x + mat[1, 1] * y + mat[1, 2]) / den,
    )


@dataclass
class WarpSpec:
    """Per-frame warps of frame 0. ``cap`` bounds the consecutive (or, with
    ``cap_mode="anchored"``, the frame-0-anchored) gt displacement."""

    kind: str
    matrices: list
    height: int
    width: int
    cap: float = math.inf
    cap_mode: str = "consecutive"
    noise: float = 0.0
    brightness_jitter: float = 0.0
    query_step: int = 4

    @property
    def num_frames(self):
        return len(self.matrices)

    def mats(self):
        return [np.asarray(m, dtype=np.float64) for m in self.matrices]

    def validate(self):
        if self.kind not in WARP_KINDS:
            raise ValueError(f"unknown warp kind {self.kind!r}")
        if self.num_frames < 2:
            raise ValueError("a warp spec needs at least 2 frames")
        if self.cap_mode not in ("consecutive", "anchored"):
            raise ValueError(f"unknown cap mode {self.cap_mode!r}")
        mats = self.mats()
        if not np.allclose(mats[0], np.eye(3)):
            raise ValueError("frame 0 must use the identity warp")
        corners_x = np.array([0.0, self.width - 1, 0.0, self.width - 1])
        corners_y = np.array([0.0, 0.0, self.height - 1, self.height - 1])
        for t, m in enumerate(mats):
            if m.shape != (3, 3) or not np.isfinite(m).all():
                raise ValueError(f"frame {t}: warp must be a finite 3x3 matrix")
            if abs(np.linalg.det(m)) < 1e-6:
                raise ValueError(f"frame {t}: warp is not invertible")
            if self.kind != "homography" and not np.allclose(m[2], [0, 0, 1]):
                raise ValueError(f"frame {t}: {self.kind} warp must have last row (0, 0, 1)")
            if self.kind == "translation" and not np.allclose(m[:2, :2], np.eye(2)):
                raise ValueError(f"frame {t}: translation warp has a linear part")
            # the denominator is affine in (x, y): positive at the corners means positive everywhere
            den = m[2, 0] * corners_x + m[2, 1] * corners_y + m[2, 2]
            if (den <= 0).any():
                raise ValueError(f"frame {t}: homography folds the image domain")
        if math.isfinite(self.cap):
            flows = anchored_flows(self) if self.cap_mode == "anchored" else consecutive_flows(self)
            biggest = float(np.linalg.norm(flows, axis=1).max())
            if biggest > self.cap + 1e-9:
                raise ValueError(f"max displacement {biggest:.3f} exceeds cap {self.cap}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["matrices"] = [np.asarray(m, dtype=np.float64).tolist() for m in self.matrices]
        if not math.isfinite(self.cap):
            d["cap"] = None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("cap") is None:
            d["cap"] = math.inf
        return cls(**d)

    @classmethod
    def translation(cls, steps, height, width, **kw):
        """Translation by cumulative ``steps`` (a list of per-frame ``(dx, dy)``)."""
        mats = [np.eye(3)]
        for dx, dy in steps:
            m = mats[-1].copy()
            m[0, 2] += dx
            m[1, 2] += dy
            mats.append(m)
        return cls("translation", [m.tolist() for m in mats], height, width, **kw)


def pixel_grid(height, width):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def consecutive_flows(spec: WarpSpec):
    """``T-1 x 2 x H x W`` flows: pixel ``u`` of frame ``t`` moves to ``A_{t+1} A_t^{-1} u``."""
    xs, ys = pixel_grid(spec.height, spec.width)
    mats = spec.mats()
    out = []
    for a, b in zip(mats[:-1], mats[1:]):
        tx, ty = _apply(b @ np.linalg.inv(a), xs, ys)
        out.append(np.stack([tx - xs, ty - ys]))
    return np.stack(out)


def anchored_flows(spec: WarpSpec):
    """``T-1 x 2 x H x W`` flows from frame 0 to each later frame."""
    xs, ys = pixel_grid(spec.height, spec.width)
    out = []
    for m in spec.mats()[1:]:
        tx, ty = _apply(m, xs, ys)
        out.append(np.stack([tx - xs, ty - ys]))
    return np.stack(out)


def in_bounds(flows, height, width):
    xs, ys = pixel_grid(height, width)
    tx = xs + flows[:, 0]
    ty = ys + flows[:, 1]
    return (tx >= 0) & (tx <= width - 1) & (ty >= 0) & (ty <= height - 1)


def query_grid(height, width, step=4):
    off = step / 2 - 0.5
    ys, xs = np.mgrid[off:height:step, off:width:step]
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


@dataclass
class Sample:
    sequence: ImageSequence
    gt_flows: torch.Tensor          # T-1 x 2 x H x W consecutive
    valid: torch.Tensor             # T-1 x H x W
    gt_anchor_flows: torch.Tensor   # T-1 x 2 x H x W, frame 0 -> t
    anchor_valid: torch.Tensor      # T-1 x H x W
    gt_tracks: TrackSet
    spec: WarpSpec = field(repr=False)
    seed: int = 0

    @property
    def images(self):
        """``T x 3 x H x W`` channel-first frames."""
        return self.sequence.to_tensor()


def render_sequence(spec: WarpSpec, seed: int) -> Sample:
    spec.validate()
    texture = ValueNoise(seed)
    xs, ys = pixel_grid(spec.height, spec.width)
    rng = np.random.default_rng([seed, 1])
    frames = []
    for m in spec.mats():
        sx, sy = _apply(np.linalg.inv(m), xs, ys)
        img = texture(sx, sy)
        if spec.brightness_jitter:
            img = img * (1 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter))
        if spec.noise:
            img = img + rng.normal(0, spec.noise, img.shape)
        frames.append(np.clip(img, 0, 1))
    frames = torch.from_numpy(np.stack(frames).astype(np.float32))

    cons = consecutive_flows(spec)
    anch = anchored_flows(spec)
    queries = query_grid(spec.height, spec.width, spec.query_step)
    positions = [queries]
    for m in spec.mats()[1:]:
        positions.append(np.stack(_apply(m, queries[:, 0], queries[:, 1]), axis=1))
    positions = np.stack(positions, axis=1)
    inside = (
        (positions[..., 0] >= 0) & (positions[..., 0] <= spec.width - 1)
        & (positions[..., 1] >= 0) & (positions[..., 1] <= spec.height - 1)
    )
    tracks = TrackSet(
        torch.from_numpy(queries).float(),
        torch.from_numpy(positions).float(),
        torch.from_numpy(inside),
    )
    return Sample(
        sequence=ImageSequence(frames),
        gt_flows=torch.from_numpy(cons).float(),
        valid=torch.from_numpy(in_bounds(cons, spec.height, spec.width)),
        gt_anchor_flows=torch.from_numpy(anch).float(),
        anchor_valid=torch.from_numpy(in_bounds(anch, spec.height, spec.width)),
        gt_tracks=tracks,
        spec=spec,
        seed=seed,
    )


def _shrink_to_cap(mats, cap, measure):
    """Scale each frame's deviation from the previous warp until ``measure`` fits under ``cap``."""
    for _ in range(60):
        biggest = measure(mats)
        if biggest <= cap:
            return mats
        scale = 0.98 * cap / biggest
        steps = [b @ np.linalg.inv(a) for a, b in zip(mats[:-1], mats[1:])]
        out = [np.eye(3)]
        for s in steps:
            out.append((np.eye(3) + scale * (s - np.eye(3))) @ out[-1])
        mats = out
    raise RuntimeError("could not fit warp under displacement cap")


def random_spec(rng, kind, num_frames, height, width, cap, cap_mode="consecutive", **kw) -> WarpSpec:
    """Random warp whose consecutive (or anchored) displacements stay under ``cap``."""
    if kind not in WARP_KINDS:
        raise ValueError(f"unknown warp kind {kind!r}")

    def disk():
        r = cap * math.sqrt(rng.random())
        a = rng.random() * 2 * math.pi
        return r * math.cos(a), r * math.sin(a)

    if kind == "translation" and cap_mode == "anchored":
        mats = [np.eye(3)]
        for _ in range(num_frames - 1):
            m = np.eye(3)
            m[0, 2], m[1, 2] = disk()
            mats.append(m)
        return WarpSpec(kind, [m.tolist() for m in mats], height, width, cap=cap, cap_mode=cap_mode, **kw)

    mats = [np.eye(3)]
    cx, cy = (width - 1) / 2, (height - 1) / 2
    for _ in range(num_frames - 1):
        s = np.eye(3)
        if kind != "translation":
            ang = rng.uniform(-0.05, 0.05)
            sc = 1 + rng.uniform(-0.04, 0.04)
            shear = rng.uniform(-0.03, 0.03)
            lin = sc * np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
            lin = lin @ np.array([[1, shear], [0, 1]])
            s[:2, :2] = lin
            s[:2, 2] = np.array([cx, cy]) - lin @ np.array([cx, cy])
        if kind == "homography":
            s[2, :2] = rng.uniform(-2e-4, 2e-4, 2)
            s[2, 2] = 1 - s[2, 0] * cx - s[2, 1] * cy
        dx, dy = disk()
        s[0, 2] += dx
        s[1, 2] += dy
        mats.append(s @ mats[-1])

    probe = WarpSpec(kind, mats, height, width)

    def measure(ms):
        probe.matrices = ms
        flows = anchored_flows(probe) if cap_mode == "anchored" else consecutive_flows(probe)
        return float(np.linalg.norm(flows, axis=1).max())

    mats = _shrink_to_cap(mats, cap, measure)
    return WarpSpec(kind, [m.tolist() for m in mats], height, width, cap=cap, cap_mode=cap_mode, **kw)


def make_manifest(count, seed=0, kind="translation", frames=(2, 6), size=32, cap=8.0, cap_mode="consecutive"):
    """``count`` reproducible ``{"id", "seed", "spec"}`` records."""
    rng = np.random.default_rng(seed)
    lo, hi = frames
    records = []
    for i in range(count):
        t = int(rng.integers(lo, hi + 1))
        spec = random_spec(rng, kind, t, size, size, cap, cap_mode)
        records.append({"id": f"{seed:04d}_{i:05d}", "seed": int(rng.integers(2**31)), "spec": spec.to_dict()})
    return records


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path):
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                records.append(json.loads(line))
    return records


def render_record(record) -> Sample:
    return render_sequence(WarpSpec.from_dict(record["spec"]), record["seed"])


def export_sample(sample: Sample, out_dir, name):
    """Write frames as PNG and gt flows as .flo under ``out_dir/name``."""
    from megaflow.flowio import write_flo, write_image
    from megaflow.tracking import write_tracks

    d = Path(out_dir) / name
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(sample.sequence.frames):
        write_image(d / f"frame_{t:03d}.png", frame.numpy())
    for i, f in enumerate(sample.gt_flows):
        write_flo(d / f"flow_{i:03d}.flo", f)
    for i, f in enumerate(sample.gt_anchor_flows):
        write_flo(d / f"anchor_{i + 1:03d}.flo", f)
    write_tracks(d / "tracks.txt", sample.gt_tracks)
    return d
