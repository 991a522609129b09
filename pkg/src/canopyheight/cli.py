"""Command-line pipeline: synth-data | train | finetune | infer | fuse |
evaluate | map | report, plus rerun for manifest-driven reproduction.

Every run resolves its flags to a plain dict, executes, and writes exactly one
manifest recording the resolved configuration, inputs, outputs, and wall time.
Re-running a manifest (``canopyheight rerun --manifest M``) reproduces every
listed output byte for byte; timing logs are recorded separately and are not
part of the reproducible outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .fusion import Ensemble, fuse, predict_patch_centers, predict_tile
from .metrics import balanced_metrics, calibration, filtering_curve, mae, me, rmse, rmv
from .model import ModelConfig, build, load_model, save_model
from .rasters import RasterMeta, read_raster, window_bounds, write_raster
from .synthdata import (SplitSpec, WorldParams, build_dataset, generate_world, load_dataset,
                        load_world, render_observations, save_dataset, save_world)
from .tiler import run_map
from .training import TrainConfig, compute_balance_weights, finetune_mean_head, train

TOOL = "canopyheight"


def _json_safe(value):
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def write_manifest(path, subcommand: str, args: dict, inputs: list, outputs: list,
                   wall_time_s: float, logs: list | None = None) -> None:
    manifest = {
        "tool": TOOL,
        "version": __version__,
        "subcommand": subcommand,
        "args": _json_safe(args),
        "inputs": sorted(str(p) for p in inputs),
        "outputs": sorted(str(p) for p in outputs),
        "logs": sorted(str(p) for p in (logs or [])),
        "wall_time_s": wall_time_s,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path) -> dict:
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Subcommand handlers: each takes the resolved args dict and returns
# (inputs, outputs, logs) for the manifest.
# ---------------------------------------------------------------------------


def cmd_synth_data(args: dict):
    out_dir = args["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    world = generate_world(args["seed"], extent=(args["extent"], args["extent"]),
                           params=WorldParams(n_dates=args["n_dates"], n_orbits=args["n_orbits"]))
    split = SplitSpec(tile_px=args["tile_px"], holdout_fraction=args["holdout"],
                      seed=args["split_seed"])
    ds = build_dataset(world, args["footprints"], seed=args["sample_seed"],
                       geolocation_sigma=args["sigma"], split=split)
    world_path = os.path.join(out_dir, "world.chw")
    data_path = os.path.join(out_dir, "dataset.chd")
    save_world(world_path, world)
    save_dataset(data_path, ds)
    return [], [world_path, data_path], []


def _load_normalized(dataset_path):
    from .synthdata import normalize_labels, normalize_patches

    ds = load_dataset(dataset_path)
    idx = ds.train_indices
    patches = normalize_patches(ds.patches[idx], ds.stats)
    labels = normalize_labels(ds.labels[idx], ds.stats)
    return ds, patches, labels


def cmd_train(args: dict):
    ds, patches, labels = _load_normalized(args["dataset"])
    config = ModelConfig(num_blocks=args["blocks"], filters_per_block=args["filters"])
    params = build(config, seed=args["seed"])
    train_config = TrainConfig(iterations=args["iterations"], batch_size=args["batch_size"],
                               base_lr=args["base_lr"], seed=args["seed"],
                               checkpoint_every=args["checkpoint_every"])
    out = args["out"]
    log_path = args["log"] or f"{out}.log.jsonl"

    def checkpoint_fn(step, p):
        save_model(f"{out}.step{step}", p, step=step)

    train(params, patches, labels, train_config, log_path=log_path,
          checkpoint_fn=checkpoint_fn if args["checkpoint_every"] else None)
    save_model(out, params, step=train_config.iterations)
    return [args["dataset"]], [out, f"{out}.json", log_path], []


def cmd_finetune(args: dict):
    ds, patches, labels = _load_normalized(args["dataset"])
    params, step = load_model(args["checkpoint"])
    labels_m = ds.labels[ds.train_indices].astype(np.float64)
    weights = compute_balance_weights(labels_m, bin_width=args["bin_width"])
    q = weights.weights_for(labels_m)
    out = args["out"]
    log_path = args["log"] or f"{out}.log.jsonl"
    tuned, _ = finetune_mean_head(params, patches, labels, q, iterations=args["iterations"],
                                  seed=args["seed"], base_lr=args["base_lr"],
                                  batch_size=args["batch_size"], log_path=log_path)
    save_model(out, tuned, step=step + args["iterations"])
    return [args["dataset"], args["checkpoint"]], [out, f"{out}.json", log_path], []


def _raster_meta(world, channel, dtype, nodata):
    H, W = world.shape
    bounds = window_bounds(world, 0, 0, H, W)
    return RasterMeta(channel=channel, height=H, width=W, lon_min=bounds[0], lon_max=bounds[1],
                      lat_min=bounds[2], lat_max=bounds[3], gsd=world.gsd, nodata=nodata, dtype=dtype)


def cmd_infer(args: dict):
    world = load_world(args["world"])
    ds = load_dataset(args["dataset"])
    params, _ = load_model(args["checkpoint"])
    observations = render_observations(world)
    if not 0 <= args["date"] < len(observations):
        raise SystemExit(f"date {args['date']} outside the observation range 0..{len(observations) - 1}")
    img = observations[args["date"]]
    from .synthdata import geo_channels_for_window

    H, W = world.shape
    stackin = np.empty((1, 15, H, W), dtype=np.float32)
    stackin[0, :12] = img.spectral
    stackin[0, 12:] = geo_channels_for_window(world, 0, 0, H, W)
    stack = predict_tile(Ensemble(members=[params]), stackin, ds.stats,
                         valid=img.valid[None], dates=np.array([img.date]))
    prefix = args["out_prefix"]
    paths = [f"{prefix}_mean.raster", f"{prefix}_variance.raster", f"{prefix}_valid.raster"]
    write_raster(paths[0], stack.means[0].astype(np.float32),
                 _raster_meta(world, "height_mean_m", "f4", float("nan")))
    write_raster(paths[1], stack.variances[0].astype(np.float32),
                 _raster_meta(world, "height_variance_m2", "f4", float("nan")))
    write_raster(paths[2], stack.valid[0].astype(np.uint8),
                 _raster_meta(world, "valid", "u1", 255.0))
    return [args["world"], args["dataset"], args["checkpoint"]], paths, []


def cmd_fuse(args: dict):
    means, variances, valids = [], [], []
    meta = None
    inputs = []
    for prefix in args["inputs"]:
        m, meta = read_raster(f"{prefix}_mean.raster")
        v, _ = read_raster(f"{prefix}_variance.raster")
        ok, _ = read_raster(f"{prefix}_valid.raster")
        inputs += [f"{prefix}_mean.raster", f"{prefix}_variance.raster", f"{prefix}_valid.raster"]
        means.append(m)
        variances.append(v)
        valids.append(ok.astype(bool))
    fused = fuse(np.stack(means), np.stack(variances), np.stack(valids))
    prefix = args["out_prefix"]
    paths = [f"{prefix}_mean.raster", f"{prefix}_std.raster"]
    out_meta = RasterMeta(channel="height_mean_m", height=meta.height, width=meta.width,
                          lon_min=meta.lon_min, lon_max=meta.lon_max, lat_min=meta.lat_min,
                          lat_max=meta.lat_max, gsd=meta.gsd, nodata=float("nan"), dtype="f4")
    write_raster(paths[0], fused.mean.astype(np.float32), out_meta)
    std_meta = RasterMeta(**{**out_meta.__dict__, "channel": "predictive_std_m"})
    write_raster(paths[1], np.sqrt(fused.variance).astype(np.float32), std_meta)
    return inputs, paths, []


def _write_pairs(path, pred, ref, uncert):
    with open(path, "w") as f:
        f.write("prediction_m,reference_m,uncertainty_m2\n")
        for p, r, u in zip(pred, ref, uncert):
            f.write(f"{float(p)!r},{float(r)!r},{float(u)!r}\n")


def _read_pairs(path):
    pred, ref, unc = [], [], []
    with open(path) as f:
        header = f.readline().strip()
        if header != "prediction_m,reference_m,uncertainty_m2":
            raise SystemExit(f"{path}: unexpected pairs header {header!r}")
        for line in f:
            p, r, u = line.strip().split(",")
            pred.append(float(p))
            ref.append(float(r))
            unc.append(float(u))
    return np.array(pred), np.array(ref), np.array(unc)


def cmd_evaluate(args: dict):
    inputs = []
    outputs = []
    if args["pairs"]:
        pred, ref, uncert = _read_pairs(args["pairs"])
        inputs.append(args["pairs"])
    else:
        if not args["dataset"] or not args["checkpoints"]:
            raise SystemExit("evaluate needs either --pairs or both --dataset and --checkpoints")
        ds = load_dataset(args["dataset"])
        inputs = [args["dataset"], *args["checkpoints"]]
        members = [load_model(c)[0] for c in args["checkpoints"]]
        ensemble = Ensemble(members=members, assignment_seed=args["assign_seed"])
        idx = {"validation": ds.val_indices, "train": ds.train_indices,
               "all": np.arange(ds.n)}[args["split"]]
        if idx.size == 0:
            raise SystemExit(f"split {args['split']!r} holds no samples")
        pred, uncert = predict_patch_centers(ensemble, ds.patches[idx], ds.stats)
        ref = ds.labels[idx].astype(np.float64)
        if args["pairs_out"]:
            _write_pairs(args["pairs_out"], pred, ref, uncert)
            outputs.append(args["pairs_out"])
    fractions = [float(x) for x in args["filter_fractions"].split(",") if x != ""]
    report = {
        "n": int(pred.size),
        "rmse": rmse(pred, ref),
        "me": me(pred, ref),
        "mae": mae(pred, ref),
        "rmv": rmv(uncert),
        "balanced": balanced_metrics(pred, ref).to_dict(),
        "calibration": calibration(pred, ref, uncert, n_bins=args["calibration_bins"],
                                   strategy=args["calibration_strategy"]).to_dict(),
        "filtering": [row.to_dict() for row in filtering_curve(pred, ref, uncert, fractions)],
    }
    with open(args["out"], "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    outputs.append(args["out"])
    return inputs, outputs, []


def cmd_map(args: dict):
    world = load_world(args["world"])
    ds = load_dataset(args["dataset"])
    members = [load_model(c)[0] for c in args["checkpoints"]]
    ensemble = Ensemble(members=members, assignment_seed=args["assign_seed"], mode=args["mode"])
    date_window = None
    if args["date_min"] is not None or args["date_max"] is not None:
        lo = args["date_min"] if args["date_min"] is not None else 0
        hi = args["date_max"] if args["date_max"] is not None else world.params.n_dates - 1
        date_window = (lo, hi)
    report = run_map(world, ensemble, ds.stats, args["out_dir"], tile_px=args["tile_px"],
                     workers=args["workers"], k_images=args["images_per_orbit"],
                     date_window=date_window)
    report_path = os.path.join(args["out_dir"], "map_report.json")
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    rasters = sorted(
        os.path.join(args["out_dir"], name)
        for name in os.listdir(args["out_dir"])
        if name.startswith("tile_") and name.endswith(".raster")
    )
    if report["n_failed"]:
        print(f"warning: {report['n_failed']} tile(s) failed; see {report_path}", file=sys.stderr)
    return ([args["world"], args["dataset"], *args["checkpoints"]], rasters, [report_path])


def _format_table(rows: list[list], header: list[str]) -> str:
    table = [header] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]
    return "\n".join(lines)


def cmd_report(args: dict):
    with open(args["input"]) as f:
        rep = json.load(f)
    parts = [
        f"samples: {rep['n']}",
        f"rmse_m: {rep['rmse']:.4f}  me_m: {rep['me']:.4f}  mae_m: {rep['mae']:.4f}  rmv_m: {rep['rmv']:.4f}",
        "",
        "balanced by reference-height bin "
        f"(aRMSE {rep['balanced']['armse']:.4f}, aME {rep['balanced']['ame']:.4f}, "
        f"aMAE {rep['balanced']['amae']:.4f}):",
        _format_table(
            [[r["lo"], r["hi"], r["count"], f"{r['rmse']:.4f}", f"{r['me']:.4f}", f"{r['mae']:.4f}"]
             for r in rep["balanced"]["rows"]],
            ["bin_lo_m", "bin_hi_m", "count", "rmse_m", "me_m", "mae_m"],
        ),
        "",
        f"calibration (K={rep['calibration']['n_bins']}, strategy={rep['calibration']['strategy']}, "
        f"UCE {rep['calibration']['uce']:.4f} m, AUCE {rep['calibration']['auce']:.4f} m):",
        _format_table(
            [[f"{r['lo']:.4g}", f"{r['hi']:.4g}", r["count"], f"{r['err']:.4f}", f"{r['uncert']:.4f}"]
             for r in rep["calibration"]["rows"]],
            ["uncert_lo_m2", "uncert_hi_m2", "count", "rmse_m", "rmv_m"],
        ),
        "",
        "uncertainty filtering:",
        _format_table(
            [[r["fraction"], f"{r['retained_percent']:.1f}", f"{r['rmse']:.4f}", f"{r['me']:.4f}",
              f"{r['mae']:.4f}"] for r in rep["filtering"]],
            ["dropped_fraction", "retained_percent", "rmse_m", "me_m", "mae_m"],
        ),
    ]
    text = "\n".join(parts) + "\n"
    outputs = []
    if args["out"]:
        with open(args["out"], "w") as f:
            f.write(text)
        outputs.append(args["out"])
    else:
        sys.stdout.write(text)
    return [args["input"]], outputs, []


_HANDLERS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "map": cmd_map,
    "report": cmd_report,
}


def _manifest_path(subcommand: str, args: dict) -> str:
    if "out_dir" in args and args["out_dir"]:
        return os.path.join(args["out_dir"], f"{subcommand}.manifest.json")
    if "out_prefix" in args and args["out_prefix"]:
        return f"{args['out_prefix']}.{subcommand}.manifest.json"
    if "out" in args and args["out"]:
        return f"{args['out']}.manifest.json"
    return f"{args['input']}.{subcommand}.manifest.json"


def dispatch(subcommand: str, args: dict) -> str:
    """Run one subcommand from resolved args; returns the manifest path."""
    handler = _HANDLERS[subcommand]
    started = time.perf_counter()
    inputs, outputs, logs = handler(args)
    manifest = _manifest_path(subcommand, args)
    write_manifest(manifest, subcommand, args, inputs, outputs,
                   wall_time_s=time.perf_counter() - started, logs=logs)
    return manifest


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=TOOL,
        description="Probabilistic canopy-height pipeline on synthetic worlds.",
    )
    parser.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic world and footprint dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0, help="world seed")
    p.add_argument("--sample-seed", type=int, default=None,
                   help="footprint sampling seed (default: world seed + 1)")
    p.add_argument("--extent", type=int, default=256, help="world side length in pixels")
    p.add_argument("--footprints", type=int, default=20000)
    p.add_argument("--sigma", type=float, default=5.0, help="geolocation jitter in meters")
    p.add_argument("--tile-px", type=int, default=64, help="split tile size in pixels")
    p.add_argument("--holdout", type=float, default=0.2, help="validation tile fraction")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--n-dates", type=int, default=12, help="acquisition dates for inference")
    p.add_argument("--n-orbits", type=int, default=3)

    p = sub.add_parser("train", help="train one ensemble member")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=20000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--base-lr", type=float, default=1e-4)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--filters", type=int, default=32)
    p.add_argument("--paper-config", action="store_true",
                   help="use the full-size architecture (8 blocks, 256 filters)")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log", default=None, help="training log path (default: <out>.log.jsonl)")

    p = sub.add_parser("finetune", help="balanced fine-tuning of the mean head")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--base-lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bin-width", type=float, default=1.0)
    p.add_argument("--log", default=None)

    p = sub.add_parser("infer", help="single-date inference over the full world")
    p.add_argument("--world", required=True)
    p.add_argument("--dataset", required=True, help="dataset file providing normalization stats")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--date", type=int, required=True)
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("fuse", help="inverse-variance fusion of per-date rasters")
    p.add_argument("--inputs", nargs="+", required=True, help="per-date raster prefixes")
    p.add_argument("--out-prefix", required=True)

    p = sub.add_parser("evaluate", help="error, calibration, and filtering report")
    p.add_argument("--pairs", default=None, help="CSV of prediction_m,reference_m,uncertainty_m2")
    p.add_argument("--dataset", default=None)
    p.add_argument("--checkpoints", nargs="+", default=None)
    p.add_argument("--split", choices=["validation", "train", "all"], default="validation")
    p.add_argument("--assign-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--pairs-out", default=None)
    p.add_argument("--calibration-bins", type=int, default=20)
    p.add_argument("--calibration-strategy", choices=["width", "population"], default="width")
    p.add_argument("--filter-fractions", default="0,0.05,0.1,0.2,0.5")

    p = sub.add_parser("map", help="tiled map production with an ensemble")
    p.add_argument("--world", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tile-px", type=int, default=64)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--images-per-orbit", type=int, default=10)
    p.add_argument("--assign-seed", type=int, default=0)
    p.add_argument("--mode", choices=["random", "all"], default="random")
    p.add_argument("--date-min", type=int, default=None)
    p.add_argument("--date-max", type=int, default=None)

    p = sub.add_parser("report", help="render an evaluation report as text tables")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None, help="write tables here instead of stdout")

    p = sub.add_parser("rerun", help="re-execute a recorded run from its manifest")
    p.add_argument("--manifest", required=True)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    sub = ns.subcommand
    args = {k: v for k, v in vars(ns).items() if k != "subcommand"}
    try:
        if sub == "rerun":
            manifest = load_manifest(args["manifest"])
            if manifest.get("tool") != TOOL:
                raise SystemExit(f"{args['manifest']}: not a {TOOL} manifest")
            dispatch(manifest["subcommand"], manifest["args"])
            return 0
        if sub == "synth-data" and args["sample_seed"] is None:
            args["sample_seed"] = args["seed"] + 1
        if sub == "train" and args.pop("paper_config", False):
            args["blocks"], args["filters"] = 8, 256
        dispatch(sub, args)
        return 0
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"{TOOL}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
