"""Command-line front end: one subcommand per stage plus a config-driven pipeline.

Exit codes: 0 ok, 1 usage error, 2 input/validation error, 3 runtime failure.
The default output directory comes from $SCANTRAJ_OUT when --out is not given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import autolabel, dmd, metrics, stmap, synth, traj
from .errors import ScanTrajError, ValidationError

log = logging.getLogger("scantraj")

EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 1, 2, 3
OUT_ENV = "SCANTRAJ_OUT"
DETECTED_COLOR = "#800080"
REFERENCE_COLOR = "#0000ff"
BUNDLED = {"example": "example_scene.json", "benchmark": "benchmark_scene.json",
           "example-pipeline": "example_pipeline.json",
           "benchmark-pipeline": "benchmark_pipeline.json"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def data_path(name: str) -> Path:
    return Path(str(resources.files("scantraj") / "data" / name))


def resolve_input(path) -> Path:
    """A real path, or the short name of a bundled spec ("example", "benchmark", ...)."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        return data_path(BUNDLED[str(path)])
    if not p.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return p


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, inputs, outputs) -> Path:
    import scipy

    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "inputs": {str(p): sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(Path(p).relative_to(out)): sha256(p) for p in outputs},
        "versions": {"scantraj": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def arg_config(args) -> dict:
    """Parsed flags as plain JSON values, without the dispatch plumbing."""
    skip = ("func", "out", "verbose")
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
            if k not in skip}


def out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_mask(path) -> autolabel.SegMask:
    arr = stmap.load_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return autolabel.SegMask((arr > 127).astype(np.uint8), "manual")


def save_mask(mask, path) -> None:
    labels = np.asarray(getattr(mask, "labels", mask))
    stmap.save_png((labels * 255).astype(np.uint8), path)


def _gray_png(values: np.ndarray, path) -> None:
    stmap.save_png(np.rint(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8), path)


def parse_threshold(text):
    if text is None or str(text) == "otsu":
        return "otsu"
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"threshold must be 'otsu' or a number, got {text!r}") from None


def parse_list(text, kind=float):
    if text is None or isinstance(text, (list, tuple)):
        return text
    return tuple(kind(v) for v in str(text).split(",") if v.strip())


# stage helpers shared by subcommands and the pipeline ---------------------

def stage_dmd(gray, out: Path, rank="energy:0.999", tol=dmd.DEFAULT_STATIONARITY_TOL,
              frame_rate: float = 1.0):
    modes = dmd.fit_dmd(gray, dmd.RankRule.parse(rank))
    split = dmd.split_background(modes, tol)
    fg = dmd.residual_foreground(gray, split)
    paths = [out / "modes.dmd", out / "diagnostics.csv", out / "spectrum.png",
             out / "background.png", out / "foreground.png", out / "background.npy",
             out / "foreground.npy"]
    dmd.save_modes(modes, paths[0])
    dmd.write_diagnostics_csv(dmd.mode_diagnostics(modes, frame_rate), paths[1])
    dmd.plot_spectrum(modes, paths[2], tol)
    _gray_png(split.background, paths[3])
    _gray_png(np.abs(fg), paths[4])
    np.save(paths[5], split.background)
    np.save(paths[6], fg)
    log.info("dmd rank %d, %d stationary mode(s)", modes.rank, len(split.background_mode_indices))
    return modes, split, fg, paths


def stage_extract(mask, cal, out: Path, min_area=autolabel.DEFAULT_MIN_AREA, name="trajectories"):
    strands, pix, world = traj.mask_to_trajectories(mask, cal, min_area)
    csv_path, info_path = out / f"{name}.csv", out / f"{name}_strands.json"
    traj.write_trajectories_csv(pix, world, csv_path)
    info = [{"id": s.id, "area": s.area, "bbox": list(s.bbox), "merged": s.merged,
             "gaps": [list(g) for g in p.gaps]} for s, p in zip(strands, pix)]
    info_path.write_text(json.dumps(info, indent=2))
    return world, [csv_path, info_path]


def write_truth_trajectories(gt, cal, path) -> None:
    rows = synth.truth_pixel_rows(gt, cal)
    pix = [traj.PixelTrajectory(t.strand_id, np.rint(t.times * cal.frame_rate).astype(int), r, [])
           for t, r in zip(gt.truth_trajectories, rows)]
    traj.write_trajectories_csv(pix, gt.truth_trajectories, path)


def stage_synth(scene_path, out: Path, cal_path=None):
    spec, cal = synth.load_scene(resolve_input(scene_path))
    if cal_path is not None:
        cal = traj.load_calibration(resolve_input(cal_path))
    if cal is None:
        raise ValidationError("scene has no calibration block; pass --calibration")
    image, gt = synth.generate(spec, cal)
    paths = [out / "stmap.stm", out / "stmap.png", out / "truth_mask.png",
             out / "truth_trajectories.csv", out / "background_plate.npy",
             out / "calibration.json"]
    stmap.save_stmap(image, paths[0])
    stmap.save_png(image.pixels, paths[1])
    save_mask(gt.truth_mask, paths[2])
    write_truth_trajectories(gt, cal, paths[3])
    np.save(paths[4], gt.background_plate)
    paths[5].write_text(json.dumps(cal.to_json(), indent=2))
    return image, gt, cal, paths


def render_overlay(image: stmap.STMap, cal, detected, reference, path, scale: int = 2,
                   detected_color=DETECTED_COLOR, reference_color=REFERENCE_COLOR) -> None:
    from PIL import Image, ImageColor, ImageDraw

    im = Image.fromarray(image.pixels).resize((image.m * scale, image.n * scale), Image.NEAREST)
    draw = ImageDraw.Draw(im)
    for trajs, color in ((reference, reference_color), (detected, detected_color)):
        rgb = ImageColor.getrgb(color)
        for t in trajs:
            cols = t.times * cal.frame_rate
            rows = cal.to_pixels(t.positions)
            pts = [((c + 0.5) * scale, (r + 0.5) * scale) for c, r in zip(cols, rows)]
            run = [pts[0]] if pts else []
            for k in range(1, len(pts)):
                if cols[k] - cols[k - 1] > 1.5:
                    _draw_run(draw, run, rgb)
                    run = []
                run.append(pts[k])
            _draw_run(draw, run, rgb)
    im.save(path)


def _draw_run(draw, run, rgb):
    if len(run) > 1:
        draw.line(run, fill=rgb, width=1)
    elif run:
        draw.point(run, fill=rgb)


# subcommands --------------------------------------------------------------

def cmd_build_stmap(args):
    out = out_dir(args)
    path = stmap.load_scanline(args.scanline)
    frames = stmap.read_frames(args.frames)
    image = stmap.build_stmap(frames, path, args.frame_rate)
    outputs = [out / "stmap.stm", out / "stmap.png"]
    stmap.save_stmap(image, outputs[0])
    stmap.save_png(image.pixels, outputs[1])
    inputs = [Path(args.scanline)] + stmap.list_frames(args.frames)
    return out, arg_config(args), inputs, outputs


def cmd_dmd(args):
    out = out_dir(args)
    image = stmap.load_stmap(args.stmap)
    _, _, _, outputs = stage_dmd(stmap.to_gray(image), out, args.rank, args.tol, image.frame_rate)
    return out, arg_config(args), [Path(args.stmap)], outputs


def cmd_autolabel(args):
    out = out_dir(args)
    image = stmap.load_stmap(args.stmap)
    gray = stmap.to_gray(image)
    modes = dmd.fit_dmd(gray, dmd.RankRule.parse(args.rank))
    fg = dmd.residual_foreground(gray, dmd.split_background(modes, args.tol))
    mask = autolabel.foreground_to_mask(fg, parse_threshold(args.threshold), args.min_area)
    path = out / "mask_auto.png"
    save_mask(mask, path)
    return out, arg_config(args), [Path(args.stmap)], [path]


def cmd_dataset(args):
    out = out_dir(args)
    maps = [stmap.load_stmap(s) for s, _ in args.pair]
    masks = [load_mask(m).labels for _, m in args.pair]
    augment = None
    if args.augment:
        augment = stmap.AugmentSpec.default().to_json()
        augment["copies"] = args.augment
    ds = autolabel.assemble_dataset(maps, masks, args.tile, augment,
                                    parse_list(args.split), args.seed, args.stride)
    outputs = autolabel.save_dataset(ds, out / "dataset")
    inputs = [Path(p) for pair in args.pair for p in pair]
    return out, arg_config(args), inputs, outputs


def net_config_from_args(args, base: dict | None = None):
    from .resunet import NetConfig

    data = dict(base or {})
    for key, attr in (("levels", "levels"), ("input_tile", "tile"), ("learning_rate", "lr"),
                      ("momentum", "momentum"), ("batch_size", "batch"),
                      ("max_epochs", "epochs"), ("seed", "seed"), ("dtype", "dtype")):
        value = getattr(args, attr, None)
        if value is not None:
            data[key] = value
    if getattr(args, "channels", None):
        data["channels"] = parse_list(args.channels, int)
    if getattr(args, "weights", None) and args.weights != "auto":
        data["class_weights"] = parse_list(args.weights)
    if "channels" not in data and "levels" in data:
        data["channels"] = tuple(8 * 2 ** i for i in range(int(data["levels"])))
    return NetConfig.from_json(data)


def cmd_train(args):
    from .resunet import ResUNetPlus, save_checkpoint, train, write_history_csv

    out = out_dir(args)
    ds = autolabel.load_dataset(args.dataset)
    cfg = net_config_from_args(args, {"input_tile": ds.tile})
    if cfg.input_tile != ds.tile:
        raise ValidationError(f"net tile {cfg.input_tile} differs from dataset tile {ds.tile}")
    result = train(ResUNetPlus(cfg).init_params(cfg.seed), cfg, ds)
    outputs = [out / "model.runp", out / "history.csv"]
    save_checkpoint(result.net, cfg, outputs[0])
    write_history_csv(result.history, outputs[1])
    return out, {**arg_config(args), "net": cfg.to_json()}, [Path(args.dataset) / "manifest.json"], outputs


def cmd_segment(args):
    from .resunet import load_checkpoint, segment

    out = out_dir(args)
    net, cfg = load_checkpoint(args.model)
    mask = segment(net, cfg, stmap.load_stmap(args.stmap), args.overlap)
    path = out / "mask_pred.png"
    save_mask(mask, path)
    return out, arg_config(args), [Path(args.model), Path(args.stmap)], [path]


def cmd_extract(args):
    out = out_dir(args)
    cal = traj.load_calibration(args.calibration)
    _, outputs = stage_extract(load_mask(args.mask), cal, out, args.min_area)
    return out, arg_config(args), [Path(args.mask), Path(args.calibration)], outputs


def cmd_evaluate(args):
    out = out_dir(args)
    seg = tr = None
    inputs = []
    if args.pred_mask or args.truth_mask:
        if not (args.pred_mask and args.truth_mask):
            raise UsageError("--pred-mask and --truth-mask go together")
        seg = metrics.segmentation_score(load_mask(args.pred_mask), load_mask(args.truth_mask),
                                         args.bf_tolerance)
        inputs += [Path(args.pred_mask), Path(args.truth_mask)]
    if args.detected or args.truth:
        if not (args.detected and args.truth):
            raise UsageError("--detected and --truth go together")
        tr = metrics.match_trajectories(traj.read_trajectories_csv(args.detected),
                                        traj.read_trajectories_csv(args.truth),
                                        args.mae_threshold)
        inputs += [Path(args.detected), Path(args.truth)]
    if seg is None and tr is None:
        raise UsageError("nothing to evaluate: give masks and/or trajectory CSVs")
    outputs = [out / "report.json", out / "summary.csv"]
    # identify inputs by content so reruns elsewhere give byte-identical reports
    report_config = {"bf_tolerance": args.bf_tolerance, "mae_threshold_ft": args.mae_threshold,
                     "lane": args.lane, "inputs": sorted(sha256(p) for p in inputs)}
    metrics.write_report_json(outputs[0], seg, tr, report_config)
    metrics.write_summary_csv([(args.lane, seg, tr)], outputs[1])
    return out, arg_config(args), inputs, outputs


def cmd_synth(args):
    out = out_dir(args)
    *_, outputs = stage_synth(args.scene, out, args.calibration)
    return out, arg_config(args), [resolve_input(args.scene)], outputs


def cmd_render(args):
    out = out_dir(args)
    image = stmap.load_stmap(args.stmap)
    cal = traj.load_calibration(args.calibration)
    detected = traj.read_trajectories_csv(args.detected) if args.detected else []
    reference = traj.read_trajectories_csv(args.reference) if args.reference else []
    path = Path(args.output) if args.output else out / "overlay.png"
    render_overlay(image, cal, detected, reference, path, args.scale, args.detected_color,
                   args.reference_color)
    inputs = [Path(p) for p in (args.stmap, args.calibration, args.detected, args.reference) if p]
    return out, arg_config(args), inputs, [path]


# pipeline -----------------------------------------------------------------

PIPELINE_DEFAULTS = {
    "seed": 0,
    "paths": {},
    "dmd": {"rank": "energy:0.999", "stationarity_tol": dmd.DEFAULT_STATIONARITY_TOL},
    "autolabel": {"threshold": "otsu", "min_area": autolabel.DEFAULT_MIN_AREA},
    "dataset": {"tile": 64, "stride": None, "split": list(autolabel.DEFAULT_SPLIT),
                "augment": None, "labels": "autolabel"},
    "net": {},
    "segment": {"overlap": 0.5},
    "eval": {"bf_tolerance": None, "mae_threshold_ft": metrics.DEFAULT_MAE_THRESHOLD_FT},
    "render": {"scale": 2, "detected_color": DETECTED_COLOR, "reference_color": REFERENCE_COLOR},
}


def merge_config(base: dict, override: dict) -> dict:
    merged = json.loads(json.dumps(base))
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_pipeline_config(path) -> dict:
    path = resolve_input(path)
    cfg = json.loads(path.read_text())
    root = path.parent
    paths = {}
    for key, value in cfg.get("paths", {}).items():
        if value is None or key == "output":
            paths[key] = value
            continue
        candidate = root / value
        paths[key] = str(candidate) if candidate.exists() else value
    cfg["paths"] = paths
    return merge_config(PIPELINE_DEFAULTS, cfg)


def run_pipeline(config: dict, out: Path) -> dict:
    """Run every stage; returns the evaluation report (plus training history)."""
    from .resunet import ResUNetPlus, save_checkpoint, segment, train, write_history_csv

    config = merge_config(PIPELINE_DEFAULTS, config)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(config["seed"])
    paths = config["paths"]
    outputs, inputs = [], []
    gt = None
    if paths.get("scene"):
        image, gt, cal, written = stage_synth(paths["scene"], out, paths.get("calibration"))
        outputs += written
        inputs.append(resolve_input(paths["scene"]))
    elif paths.get("frames") and paths.get("scanline"):
        scan = stmap.load_scanline(paths["scanline"])
        cal = traj.load_calibration(paths["calibration"])
        image = stmap.build_stmap(stmap.read_frames(paths["frames"]), scan, cal.frame_rate)
        outputs += [out / "stmap.stm", out / "stmap.png"]
        stmap.save_stmap(image, outputs[-2])
        stmap.save_png(image.pixels, outputs[-1])
        inputs += [Path(paths["scanline"]), Path(paths["calibration"])]
    else:
        raise ValidationError("pipeline needs paths.scene or paths.frames + paths.scanline")

    gray = stmap.to_gray(image)
    d = config["dmd"]
    _, _, fg, written = stage_dmd(gray, out, d["rank"], d["stationarity_tol"], image.frame_rate)
    outputs += written
    a = config["autolabel"]
    auto = autolabel.foreground_to_mask(fg, parse_threshold(a["threshold"]), a["min_area"])
    save_mask(auto, out / "mask_auto.png")
    outputs.append(out / "mask_auto.png")

    ds_cfg = config["dataset"]
    if ds_cfg["labels"] == "truth":
        if gt is None:
            raise ValidationError("dataset.labels = truth needs a synthetic scene")
        labels = gt.truth_mask.labels
    elif ds_cfg["labels"] == "autolabel":
        labels = auto.labels
    else:
        raise ValidationError(f"dataset.labels must be autolabel or truth, not {ds_cfg['labels']!r}")
    ds = autolabel.assemble_dataset([image], [labels], int(ds_cfg["tile"]), ds_cfg["augment"],
                                    ds_cfg["split"], seed, ds_cfg["stride"])
    outputs += autolabel.save_dataset(ds, out / "dataset")

    net_cfg = net_config_from_args(argparse.Namespace(),
                                   {"seed": seed, "input_tile": ds.tile, **config["net"]})
    result = train(ResUNetPlus(net_cfg).init_params(net_cfg.seed), net_cfg, ds)
    save_checkpoint(result.net, net_cfg, out / "model.runp")
    write_history_csv(result.history, out / "history.csv")
    outputs += [out / "model.runp", out / "history.csv"]

    pred = segment(result.net, net_cfg, image, config["segment"]["overlap"])
    save_mask(pred, out / "mask_pred.png")
    outputs.append(out / "mask_pred.png")
    detected, written = stage_extract(pred, cal, out, a["min_area"])
    outputs += written

    e = config["eval"]
    seg = tr = None
    if gt is not None:
        seg = metrics.segmentation_score(pred, gt.truth_mask, e["bf_tolerance"])
        tr = metrics.match_trajectories(detected, gt.truth_trajectories, e["mae_threshold_ft"])
    report_cfg = {**config, "net": net_cfg.to_json()}
    report = metrics.write_report_json(out / "report.json", seg, tr, report_cfg)
    metrics.write_summary_csv([(image.lane_id, seg, tr)], out / "summary.csv")
    outputs += [out / "report.json", out / "summary.csv"]

    r = config["render"]
    render_overlay(image, cal, detected, gt.truth_trajectories if gt else [], out / "overlay.png",
                   int(r["scale"]), r["detected_color"], r["reference_color"])
    outputs.append(out / "overlay.png")
    write_manifest(out, "pipeline", report_cfg, inputs, outputs)
    report["history"] = result.history
    return report


def cmd_pipeline(args):
    config = load_pipeline_config(args.config) if args.config else merge_config(PIPELINE_DEFAULTS, {})
    if args.scene:
        config["paths"]["scene"] = args.scene
    if args.seed is not None:
        config["seed"] = args.seed
    if args.labels:
        config["dataset"]["labels"] = args.labels
    if args.tile is not None:
        config["dataset"]["tile"] = args.tile
    if args.epochs is not None:
        config["net"]["max_epochs"] = args.epochs
    if args.lr is not None:
        config["net"]["learning_rate"] = args.lr
    if args.out is None and config["paths"].get("output"):
        args.out = config["paths"]["output"]
    out = out_dir(args)
    report = run_pipeline(config, out)
    if report.get("traj"):
        t = report["traj"]
        print(f"TP={t['tp']} FP={t['fp']} FN={t['fn']} TPR={t['tpr']:.3f} FPR={t['fpr']:.3f}")
    return None


# parser -------------------------------------------------------------------

def _net_flags(p):
    p.add_argument("--levels", type=int)
    p.add_argument("--channels", help="comma-separated widths, e.g. 8,16,32")
    p.add_argument("--tile", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--weights", help="comma-separated class weights or 'auto'")
    p.add_argument("--dtype", choices=("float32", "float64"))


def build_parser() -> Parser:
    parser = Parser(prog="scantraj", description="STMap vehicle trajectory toolkit")
    parser.add_argument("--version", action="version", version=f"scantraj {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
        p.set_defaults(func=func)
        return p

    p = add("build-stmap", cmd_build_stmap, "sample a scanline from a directory of frames")
    p.add_argument("--frames", required=True)
    p.add_argument("--scanline", required=True)
    p.add_argument("--frame-rate", type=float, default=10.0)

    p = add("dmd", cmd_dmd, "DMD modes, diagnostics and background/foreground split")
    p.add_argument("--stmap", required=True)
    p.add_argument("--rank", default="energy:0.999", help="'full', 'energy:x' or an integer")
    p.add_argument("--tol", type=float, default=dmd.DEFAULT_STATIONARITY_TOL)

    p = add("autolabel", cmd_autolabel, "threshold the DMD foreground into a training mask")
    p.add_argument("--stmap", required=True)
    p.add_argument("--rank", default="energy:0.999")
    p.add_argument("--tol", type=float, default=dmd.DEFAULT_STATIONARITY_TOL)
    p.add_argument("--threshold", default="otsu")
    p.add_argument("--min-area", type=int, default=autolabel.DEFAULT_MIN_AREA)

    p = add("dataset", cmd_dataset, "tile, split and augment STMap/mask pairs")
    p.add_argument("--pair", nargs=2, action="append", required=True,
                   metavar=("STMAP", "MASK"))
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--stride", type=int)
    p.add_argument("--split", default="0.6,0.2,0.2")
    p.add_argument("--augment", type=int, default=0, help="augmented copies per training tile")
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "train the Res-UNet+ segmenter")
    p.add_argument("--dataset", required=True)
    _net_flags(p)

    p = add("segment", cmd_segment, "segment an STMap with a trained checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--stmap", required=True)
    p.add_argument("--overlap", type=float, default=0.5)

    p = add("extract", cmd_extract, "strands and trajectories from a mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--min-area", type=int, default=autolabel.DEFAULT_MIN_AREA)

    p = add("evaluate", cmd_evaluate, "segmentation and trajectory metrics")
    p.add_argument("--pred-mask")
    p.add_argument("--truth-mask")
    p.add_argument("--detected")
    p.add_argument("--truth")
    p.add_argument("--bf-tolerance", type=float)
    p.add_argument("--mae-threshold", type=float, default=metrics.DEFAULT_MAE_THRESHOLD_FT)
    p.add_argument("--lane", default="lane")

    p = add("synth", cmd_synth, "render a synthetic scene with ground truth")
    p.add_argument("--scene", required=True, help="scene JSON, or 'example' / 'benchmark'")
    p.add_argument("--calibration")

    p = add("render", cmd_render, "draw trajectories over an STMap")
    p.add_argument("--stmap", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--detected")
    p.add_argument("--reference")
    p.add_argument("--output")
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--detected-color", default=DETECTED_COLOR)
    p.add_argument("--reference-color", default=REFERENCE_COLOR)

    p = add("pipeline", cmd_pipeline, "run every stage from a JSON config")
    p.add_argument("--config", help="pipeline JSON, or 'example-pipeline' / 'benchmark-pipeline'")
    p.add_argument("--scene")
    p.add_argument("--seed", type=int)
    p.add_argument("--labels", choices=("autolabel", "truth"))
    p.add_argument("--tile", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
        if result is not None:
            out, config, inputs, outputs = result
            write_manifest(out, args.command, config, inputs, outputs)
    except UsageError as exc:
        print(f"scantraj {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"scantraj {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ScanTrajError, Exception) as exc:  # noqa: BLE001 - last-resort exit code
        print(f"scantraj {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
