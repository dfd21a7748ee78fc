"""Command-line entry point: ``megaflow <subcommand> [--config FILE] [--key value ...]``.

Every ``--some-key`` flag overrides the matching ``some_key`` entry of the
config file section the subcommand reads, so a run can be described fully
by the file, fully by flags, or by a mix.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import torch

from megaflow.config import SECTIONS, _parse, build_configs, field_defaults, read_sections, save_config

# which config sections each subcommand exposes as flags
COMMAND_SECTIONS = {
    "gen-data": ("data",),
    "train": ("model", "train", "loss"),
    "eval-flow": ("eval",),
    "eval-track": ("eval",),
    "infer": ("eval",),
    "visualize": (),
}

# shorthand flags -> (section, keys) they set
ALIASES = {
    "gen-data": {"frames": ("data", ("min_frames", "max_frames"))},
    "train": {
        "frames": ("train", ("min_frames", "max_frames")),
        "iters": ("model", ("train_iters",)),
    },
}


def _effective_defaults(section):
    # what an empty config resolves to (the model starts from the toy preset)
    configs = build_configs({})
    obj = configs["train"].loss if section == "loss" else configs[section]
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _add_section_flags(parser, section, taken):
    defaults = _effective_defaults(section)
    group = parser.add_argument_group(f"[{section}] config keys")
    for f in fields(SECTIONS[section]):
        if f.name == "loss" or f.name in taken:
            continue
        taken.add(f.name)
        flag = "--" + f.name.replace("_", "-")
        default = defaults[f.name]
        kw = dict(dest=f"{section}.{f.name}", default=argparse.SUPPRESS, metavar=f.name.upper())
        if isinstance(default, bool):
            kw.update(nargs="?", const="true")
        group.add_argument(flag, help=f"default: {default}", **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="megaflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="key = value config file")
        taken = set()
        for alias, (section, _) in ALIASES.get(name, {}).items():
            p.add_argument(f"--{alias}", dest=f"alias.{alias}", default=argparse.SUPPRESS, type=int,
                           help=f"shorthand setting {section}.{'/'.join(ALIASES[name][alias][1])}")
            taken.add(alias)
        for section in COMMAND_SECTIONS[name]:
            _add_section_flags(p, section, taken)
        return p

    p = command("gen-data", "write a dataset manifest and render its samples")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--manifest", type=Path, help="render an existing manifest instead of drawing a new one")
    p.add_argument("--no-export", action="store_true", help="only write the manifest")

    p = command("train", "train a model and write a checkpoint")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--manifest", type=Path, help="train on these records instead of on-the-fly samples")
    p.add_argument("--resume", type=Path,
                   help="continue from this checkpoint with its stored configuration (config flags are ignored)")

    p = command("eval-flow", "score optical flow on a manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--flow-dir", type=Path, help="precomputed <id>/flow_###.flo files")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report directory")

    p = command("eval-track", "score chained point tracking on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report directory")

    p = command("infer", "predict flow for a sequence of images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--pairing", choices=("consecutive", "anchored"), default="consecutive")
    p.add_argument("images", type=Path, nargs="+")

    p = command("visualize", "render .flo files as colour and error maps")
    p.add_argument("flo", type=Path)
    p.add_argument("--gt", type=Path, help="ground-truth .flo for an error map")
    p.add_argument("--out", type=Path, required=True, help="output PNG prefix")
    p.add_argument("--max-magnitude", type=float)
    return parser


def resolve_configs(args):
    """Config file values overlaid with command-line flags."""
    values = read_sections(args.config)
    defaults = {name: field_defaults(cls) for name, cls in SECTIONS.items()}
    for dest, raw in vars(args).items():
        if dest.startswith("alias."):
            section, keys = ALIASES[args.command][dest.split(".", 1)[1]]
            for key in keys:
                values[section][key] = raw
        elif "." in dest:
            section, key = dest.split(".", 1)
            values[section][key] = _parse(str(raw), defaults[section][key])
    return build_configs(values)


def _emit(text):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_gen_data(args, cfgs):
    from megaflow.synth import export_sample, make_manifest, read_manifest, render_record, write_manifest

    d = cfgs["data"]
    args.out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        records = read_manifest(args.manifest)
    else:
        records = make_manifest(d.count, d.seed, d.warp_kind, (d.min_frames, d.max_frames), d.size,
                                d.max_displacement, d.cap_mode)
    path = args.out / "manifest.jsonl"
    write_manifest(path, records)
    if not args.no_export:
        for rec in records:
            export_sample(render_record(rec), args.out, rec["id"])
    _emit(f"wrote {len(records)} records to {path}")


def cmd_train(args, cfgs):
    from megaflow.evaluate import json_safe
    from megaflow.plotting import plot_loss_curve
    from megaflow.synth import read_manifest
    from megaflow.train import Trainer, build_model

    records = read_manifest(args.manifest) if args.manifest else None
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, records)
    else:
        trainer = Trainer(build_model(cfgs["model"], cfgs["train"].seed), cfgs["train"], records)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_config(args.out.with_suffix(".ini"), trainer.model.cfg, trainer.cfg)
    start = time.perf_counter()
    history = trainer.run(checkpoint_path=args.out)
    wall = time.perf_counter() - start
    report = args.out.parent
    stem = args.out.stem
    with open(report / f"{stem}_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "lr", "grad_norm", "frames", "pairing"])
        writer.writeheader()
        writer.writerows(history)
    if history:
        plot_loss_curve(history, report / f"{stem}_loss.png")
    summary = {
        "steps": trainer.step, "elapsed_seconds": trainer.elapsed, "run_seconds": wall,
        "final_loss": history[-1]["loss"] if history else None, "checkpoint": str(args.out),
    }
    (report / f"{stem}_summary.json").write_text(json.dumps(json_safe(summary), indent=2, sort_keys=True))
    _emit(f"trained to step {trainer.step} in {wall:.1f} s; final loss {summary['final_loss']}; checkpoint {args.out}")


def cmd_eval_flow(args, cfgs):
    from megaflow.evaluate import evaluate_flow, evaluate_flow_dir, write_flow_report
    from megaflow.synth import read_manifest
    from megaflow.train import load_model

    e = cfgs["eval"]
    records = read_manifest(args.manifest)
    frames = e.frames if e.frames is not None else 10**9
    if args.checkpoint:
        model = load_model(args.checkpoint)
        iters = e.iters or model.cfg.eval_iters
        report, per_iter = evaluate_flow(model, records, frames, iters,
                                         render_dir=args.out / "renders" if e.render else None)
        extra = {"frames": e.frames, "iters": iters, "checkpoint": str(args.checkpoint)}
    else:
        report, per_iter = evaluate_flow_dir(args.flow_dir, records, e.frames), None
        extra = {"frames": e.frames, "flow_dir": str(args.flow_dir)}
    write_flow_report(args.out, report, per_iter, extra)
    _emit((args.out / "report.txt").read_text())


def cmd_eval_track(args, cfgs):
    from megaflow.evaluate import evaluate_tracking, write_track_report
    from megaflow.synth import read_manifest
    from megaflow.train import load_model

    e = cfgs["eval"]
    model = load_model(args.checkpoint)
    result = evaluate_tracking(model, read_manifest(args.manifest), e.window_size, e.iters or model.cfg.eval_iters)
    write_track_report(args.out, result)
    _emit((args.out / "report.txt").read_text())


def cmd_infer(args, cfgs):
    from megaflow.core import FlowField
    from megaflow.flowio import flow_to_color, read_image, write_flo, write_image
    from megaflow.train import load_model

    if len(args.images) < 2:
        raise SystemExit("infer needs at least two images")
    model = load_model(args.checkpoint)
    frames = torch.stack([torch.from_numpy(read_image(p)).permute(2, 0, 1) for p in args.images])
    model.backbone.check_size(*frames.shape[-2:])
    with torch.no_grad():
        pred = model(frames.unsqueeze(0), iters=cfgs["eval"].iters, pairing=args.pairing)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(pred.flows[0]):
        write_flo(args.out / f"flow_{i:03d}.flo", FlowField(f, 1))
        write_image(args.out / f"flow_{i:03d}.png", flow_to_color(FlowField(f, 1)))
    _emit(f"wrote {pred.flows.shape[1]} flows to {args.out}")


def cmd_visualize(args, cfgs):
    from megaflow.flowio import flow_to_color, read_flo, save_error_heatmap, write_image

    flow = read_flo(args.flo)
    prefix = str(args.out.with_suffix(""))
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_image(prefix + "_color.png", flow_to_color(flow, args.max_magnitude))
    out = [prefix + "_color.png"]
    if args.gt:
        gt = read_flo(args.gt)
        save_error_heatmap(prefix + "_error.png", flow, gt)
        out.append(prefix + "_error.png")
    _emit("wrote " + ", ".join(out))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-flow": cmd_eval_flow,
    "eval-track": cmd_eval_track,
    "infer": cmd_infer,
    "visualize": cmd_visualize,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfgs = resolve_configs(args)
    except (KeyError, ValueError, TypeError) as exc:
        raise SystemExit(f"config error: {exc}")
    COMMANDS[args.command](args, cfgs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
