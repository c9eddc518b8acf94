"""Command-line entry point: ``fusiondet <subcommand> ...``.

Every failure exits with status 2 and one ``fusiondet: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__

PROG = "fusiondet"
DATA_ENV = "FUSIONDET_DATA"


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _config(args):
    from .detector import DetectorConfig, load_config

    cfg = load_config(args.config) if args.config else DetectorConfig()
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _data_root(args):
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise CliError(f"no dataset root: pass --data or set {DATA_ENV}")
    if not os.path.isdir(root):
        raise CliError(f"dataset root {root} is not a directory")
    return root


def _dataset(args):
    from .detector import KittiDataset

    root = _data_root(args)
    if args.split and not os.path.exists(args.split):
        raise CliError(f"split file {args.split} not found")
    return KittiDataset(root, args.split)


def _require_out(args, what):
    if not args.out:
        raise CliError(f"--out is required for {what}")
    return args.out


def _anchor_dims(cfg, args, ds=None):
    from .anchors import cluster_dimensions, parse_dims

    if getattr(args, "anchors", None):
        with open(args.anchors) as f:
            return parse_dims(f.read())
    if cfg.anchor_dims:
        return cfg.dims_array
    if ds is None:
        raise CliError("anchor sizes unknown: give --anchors or anchor_dims in the config")
    labels = [o for fid in ds.ids if ds.has_labels(fid) for o in ds.labels(fid)]
    return cluster_dimensions(labels, cfg.anchor_clusters, seed=cfg.seed)


def _prepared_frames(ds, cfg, dims, ids=None):
    from .detector import prepare_frame

    return [prepare_frame(ds.load(fid), cfg, dims) for fid in (ids or ds.ids)]


def _read_label_dir(path, ids=None):
    from .kitti_io import read_labels

    if not os.path.isdir(path):
        raise CliError(f"{path} is not a directory")
    found = {os.path.splitext(n)[0] for n in os.listdir(path) if n.endswith(".txt")}
    ids = sorted(found) if ids is None else ids
    return {fid: read_labels(os.path.join(path, fid + ".txt")) for fid in ids if fid in found}


# ---------------------------------------------------------------- subcommands

def cmd_bev(args):
    from .bev import encode_bev

    cfg = _config(args)
    ds = _dataset(args)
    out = _require_out(args, "bev")
    path = ds.path("velodyne", args.frame, "bin")
    if not os.path.exists(path):
        raise CliError(f"frame {args.frame}: {path} not found")
    from .kitti_io import read_point_cloud

    bev = encode_bev(read_point_cloud(path), cfg.grid)
    with open(out, "wb") as f:
        f.write(bev.to_bytes())
    print(f"{args.frame}: {bev.channels.shape[0]}x{bev.channels.shape[1]}x{bev.channels.shape[2]} -> {out}")
    return 0


def cmd_anchors(args):
    from .anchors import filter_empty_anchors, format_dims, generate_anchors
    from .bev import encode_bev

    cfg = _config(args)
    ds = _dataset(args)
    dims = _anchor_dims(cfg, args, ds)
    text = format_dims(dims)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    sys.stdout.write(text)
    if args.frame:
        raw = ds.load(args.frame)
        a = generate_anchors(cfg.grid, dims, raw.plane, raw.calib, cfg.anchor_height, cfg.anchor_stride)
        kept = filter_empty_anchors(a, encode_bev(raw.cloud, cfg.grid))
        print(f"{args.frame}: {len(a)} anchors, {len(kept)} non-empty")
    return 0


def cmd_train(args):
    from .detector import Detector, Trainer
    from .anchors import format_dims

    cfg = _config(args)
    if args.iterations is not None:
        cfg = cfg.with_(iterations=args.iterations)
    ds = _dataset(args)
    out = _require_out(args, "train")
    dims = _anchor_dims(cfg, args, ds)
    cfg = cfg.with_(anchor_dims=tuple(float(v) for v in dims.ravel()))
    frames = _prepared_frames(ds, cfg, dims)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "anchors.txt"), "w") as f:
        f.write(format_dims(dims))
    trainer = Trainer(Detector(cfg), frames, cfg, out)

    def progress(row):
        if row["iteration"] % max(1, args.log_every) == 0:
            print(f"iter {row['iteration']} total {row['total']:.4f} lr {row['lr']:.2e}", flush=True)

    trainer.run(progress=progress)
    print(f"checkpoint: {os.path.join(out, 'final.ckpt')}")
    return 0


def _load_model(args, cfg):
    from .detector import Detector
    from .nn import checkpoint

    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint {args.checkpoint} not found")
    with open(args.checkpoint, "rb") as f:
        raw = f.read()
    meta, _ = checkpoint.loads(raw)
    if not cfg.anchor_dims and meta.get("anchor_dims"):
        cfg = cfg.with_(anchor_dims=tuple(float(v) for v in meta["anchor_dims"].split(",")))
    model = Detector(cfg)
    checkpoint.load_into(args.checkpoint, model.params())
    return model, cfg


def cmd_infer(args):
    from .detector.evaluation import detections_to_labels
    from .kitti_io import format_labels

    cfg = _config(args)
    ds = _dataset(args)
    out = _require_out(args, "infer")
    model, cfg = _load_model(args, cfg)
    dims = _anchor_dims(cfg, args, ds)
    os.makedirs(out, exist_ok=True)
    for fid in ds.ids:
        frame = _prepared_frames(ds, cfg, dims, [fid])[0]
        _, dets = model.infer(frame)
        with open(os.path.join(out, fid + ".txt"), "w") as f:
            f.write(format_labels(detections_to_labels(dets, frame)))
        print(f"{fid}: {len(dets)} detections")
    return 0


def cmd_eval(args):
    from .detector.data import read_split
    from .eval_ap import evaluate, format_csv, format_table

    ids = read_split(args.split) if args.split else None
    gts = _read_label_dir(args.gt_dir, ids)
    if ids is not None and len(gts) != len(ids):
        missing = sorted(set(ids) - set(gts))
        raise CliError(f"ground truth missing for frames: {', '.join(missing[:5])}")
    dets = _read_label_dir(args.det_dir, sorted(gts))
    all_det_files = _read_label_dir(args.det_dir)
    if not all_det_files:
        dets = {fid: [] for fid in gts}  # no detections at all
    elif set(dets) != set(gts):
        missing = sorted(set(gts) - set(dets))
        raise CliError(f"frame mismatch: no detections file for {', '.join(missing[:5])}")
    metrics = ("bev", "3d") if args.metric == "both" else (args.metric,)
    try:
        results = {m: evaluate(dets, gts, m, args.mode) for m in metrics}
    except KeyError as e:
        raise CliError(str(e.args[0])) from None
    print(format_table(results))
    out = args.out or os.path.join(args.det_dir, "ap.csv")
    with open(out, "w") as f:
        f.write(format_csv(results))
    return 0


def cmd_viz(args):
    from .bev import encode_bev
    from .detector.data import car_boxes
    from .geometry import camera_object_to_box
    from .kitti_io import read_labels
    from .viz import render_bev, save_png

    cfg = _config(args)
    ds = _dataset(args)
    out = _require_out(args, "viz")
    try:
        raw = ds.load(args.frame)
    except Exception as e:
        raise CliError(str(e)) from None
    det_boxes = np.zeros((0, 7))
    if args.detections:
        if not os.path.exists(args.detections):
            raise CliError(f"detections file {args.detections} not found")
        dets = [o for o in read_labels(args.detections) if o.class_name == "Car"]
        det_boxes = np.array([camera_object_to_box(o, raw.calib).as_array() for o in dets]).reshape(-1, 7)
    gt = car_boxes(raw.labels, raw.calib, cfg.grid)
    save_png(out, render_bev(encode_bev(raw.cloud, cfg.grid), gt, det_boxes))
    print(f"{args.frame}: {len(gt)} ground truth, {len(det_boxes)} detections -> {out}")
    return 0


def cmd_synth(args):
    from .synthetic import write_dataset

    out = _require_out(args, "synth")
    ids = write_dataset(out, args.frames, seed=0 if args.seed is None else args.seed)
    print(f"wrote {len(ids)} frames to {out}")
    return 0


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _global_flags(suppress):
    # subcommands repeat the global flags; SUPPRESS keeps them from resetting values given earlier
    d = {"default": argparse.SUPPRESS} if suppress else {}
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", help="key = value config file", **d)
    g.add_argument("--seed", type=int, help="override the config seed", **d)
    g.add_argument("--out", help="output file or directory", **d)
    g.add_argument("--data", help=f"dataset root (default: ${DATA_ENV})", **d)
    g.add_argument("--split", help="split file, one frame id per line", **d)
    g.add_argument("-v", "--verbose", action="store_true", **d)
    return g


def build_parser():
    common = _global_flags(suppress=True)
    p = _Parser(prog=PROG, description="Camera + LIDAR vehicle detection toolkit.",
                parents=[_global_flags(suppress=False)])
    p.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("bev", parents=[common], help="encode one frame's BEV maps")
    s.add_argument("frame")
    s.set_defaults(func=cmd_bev)

    s = sub.add_parser("anchors", parents=[common], help="cluster anchor sizes from labels")
    s.add_argument("--frame", help="also report anchor counts for this frame")
    s.add_argument("--anchors", help="anchor size file instead of clustering")
    s.set_defaults(func=cmd_anchors)

    s = sub.add_parser("train", parents=[common], help="train a detector")
    s.add_argument("--iterations", type=int)
    s.add_argument("--anchors", help="anchor size file instead of clustering")
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="write detections for every frame")
    s.add_argument("checkpoint")
    s.add_argument("--anchors", help="anchor size file")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="KITTI-style AP of a detection directory")
    s.add_argument("det_dir")
    s.add_argument("gt_dir")
    s.add_argument("--metric", choices=("bev", "3d", "both"), default="both")
    s.add_argument("--mode", choices=("R11", "R40"), default="R11")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("viz", parents=[common], help="render a BEV PNG with boxes")
    s.add_argument("frame")
    s.add_argument("--detections", help="KITTI label file with detections")
    s.set_defaults(func=cmd_viz)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic KITTI-layout dataset")
    s.add_argument("--frames", type=int, default=8)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise CliError("a subcommand is required (bev, anchors, train, infer, eval, viz, synth)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as e:
        print(f"{PROG}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as e:
        msg = str(e).replace("\n", " ")
        print(f"{PROG}: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
