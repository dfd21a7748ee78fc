"""Dataset-level evaluation and report writing."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import torch

from megaflow.flowio import flow_to_color, read_flo, save_error_heatmap, write_image
from megaflow.metrics import EvalReport
from megaflow.synth import render_record
from megaflow.tracking import DELTA_THRESHOLDS, evaluate_tracks, track_video


@torch.no_grad()
def evaluate_flow(model, records, frames=4, iters=None, render_dir=None):
    """Run the model on each record's first ``frames`` frames.

    Returns ``(report, per_iter)`` where ``per_iter`` holds, per sample, the
    mean EPE after every refinement iteration.
    """
    model.eval()
    report = EvalReport()
    per_iter = []
    for rec in records:
        sample = render_record(rec)
        t = min(frames, sample.sequence.num_frames)
        pred = model(sample.images[:t].unsqueeze(0), iters=iters)
        gt = sample.gt_flows[: t - 1]
        valid = sample.valid[: t - 1]
        report.add(pred.flows[0], gt, valid, name=rec["id"])
        per_iter.append([
            float(torch.linalg.norm(f[0] - gt, dim=1)[valid].mean()) for f in pred.iterates
        ])
        if render_dir is not None:
            _render(Path(render_dir), rec["id"], sample, pred.flows[0], gt)
    return report, per_iter


def _render(out, name, sample, flows, gt):
    from megaflow.core import FlowField
    from megaflow.plotting import plot_flow_panel

    out.mkdir(parents=True, exist_ok=True)
    for i in range(flows.shape[0]):
        p, g = FlowField(flows[i], 1), FlowField(gt[i], 1)
        write_image(out / f"{name}_{i:03d}_flow.png", flow_to_color(p))
        save_error_heatmap(out / f"{name}_{i:03d}_error.png", p, g)
        if i == 0:
            frame = sample.sequence.frames[0].numpy()
            plot_flow_panel(frame, p, g, out / f"{name}_panel.png", title=name)


def evaluate_flow_dir(flow_dir, records, frames=None):
    """Score precomputed ``<flow_dir>/<id>/flow_###.flo`` files; missing files are listed."""
    report = EvalReport()
    flow_dir = Path(flow_dir)
    for rec in records:
        sample = render_record(rec)
        n = sample.gt_flows.shape[0] if frames is None else min(frames, sample.sequence.num_frames) - 1
        for i in range(n):
            path = flow_dir / rec["id"] / f"flow_{i:03d}.flo"
            if not path.exists():
                report.missing.append(str(path))
                continue
            pred = read_flo(path)
            report.add(pred.vectors, sample.gt_flows[i], sample.valid[i], name=f"{rec['id']}/{i}")
    return report


@torch.no_grad()
def evaluate_tracking(model, records, window_size=8, iters=None):
    """Chained sliding-window tracking on each record's query grid, pooled delta metrics."""
    model.eval()
    errors, per_seq = [], []
    for rec in records:
        sample = render_record(rec)
        gt = sample.gt_tracks
        pred = track_video(model, sample.images, gt.queries, window_size, iters)
        res = evaluate_tracks(pred, gt)
        per_seq.append({"name": rec["id"], **{f"delta_{k}": v for k, v in res["delta"].items()},
                        "delta_avg": res["delta_avg"], "count": res["count"]})
        valid = gt.valid.clone()
        valid[:, 0] = False
        errors.append(torch.linalg.norm(pred.positions - gt.positions, dim=-1)[valid])
    err = torch.cat(errors) if errors else torch.zeros(0)
    thresholds = DELTA_THRESHOLDS
    if err.numel():
        delta = {k: 100.0 * float((err < k).double().mean()) for k in thresholds}
        avg = sum(delta.values()) / len(delta)
    else:
        delta = {k: float("nan") for k in thresholds}
        avg = float("nan")
    return {"delta": delta, "delta_avg": avg, "count": int(err.numel()),
            "mean_error": float(err.mean()) if err.numel() else float("nan"), "sequences": per_seq}


def monotone_fraction(per_iter):
    """Fraction of samples whose per-iteration EPE never increases."""
    if not len(per_iter):
        return float("nan")
    d = np.diff(np.asarray(per_iter, dtype=np.float64), axis=1)
    return float(np.mean(np.all(d <= 0, axis=1)))


def json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


def _fmt(v):
    return "undefined" if isinstance(v, float) and math.isnan(v) else f"{v:.4f}"


def write_flow_report(out_dir, report: EvalReport, per_iter=None, extra=None):
    """``report.txt``, ``report.json``, ``sequences.csv`` and figures under ``out_dir``."""
    from megaflow.plotting import plot_bucket_epe, plot_iteration_curve

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    if per_iter:
        summary["epe_per_iteration"] = np.asarray(per_iter).mean(0).tolist()
        summary["monotone_fraction"] = monotone_fraction(per_iter)
    if extra:
        summary.update(extra)
    (out / "report.json").write_text(json.dumps(json_safe(summary), indent=2, sort_keys=True))
    lines = [
        f"EPE      {_fmt(summary['epe'])} px over {summary['count']} px",
        f"Fl-all   {_fmt(summary['fl_all'])} %",
        f"1px      {_fmt(summary['one_px'])} %",
    ]
    for name, v in summary["epe_by_bucket"].items():
        lines.append(f"{name:<8} {_fmt(v)} px ({summary['bucket_count'][name]} px)")
    if "monotone_fraction" in summary:
        lines.append(f"samples with non-increasing EPE over iterations {100 * summary['monotone_fraction']:.1f} %")
    if summary["missing"]:
        lines.append(f"missing  {len(summary['missing'])} flow files excluded")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    with open(out / "sequences.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["name", "epe", "fl_all", "one_px", "count"])
        writer.writeheader()
        writer.writerows(report.sequences)
    plot_bucket_epe(summary, out / "epe_buckets.png")
    if per_iter:
        plot_iteration_curve(per_iter, out / "epe_iterations.png")
    return summary


def write_track_report(out_dir, result):
    from megaflow.plotting import plot_delta_curve

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(json_safe({k: v for k, v in result.items() if k != "sequences"}),
                                                indent=2, sort_keys=True))
    lines = [f"delta_{k:<3} {_fmt(v)} %" for k, v in result["delta"].items()]
    lines.append(f"delta_avg {_fmt(result['delta_avg'])} % over {result['count']} point-frames")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    if result["sequences"]:
        with open(out / "sequences.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(result["sequences"][0]))
            writer.writeheader()
            writer.writerows(result["sequences"])
    plot_delta_curve(result, out / "delta.png")
    return result
