"""Command-line pipeline: targets, superpixels, training, prediction,
isotonic cleanup, segmentation, evaluation, synthesis, and the service.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys

import numpy as np
from PIL import Image

from . import augment, config as cfgmod, density, evaluate, instseg, isotonic, net, slic, synth, thermal
from .errors import (
    AnnotationError,
    DataGapError,
    DegenerateInputError,
    FormatError,
    PanicleError,
    ParameterError,
    ShapeError,
    TrainingError,
)
from .grid import RasterGrid, read_pdm1, sum_pool, write_pdm1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAIN = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def load_image(path) -> np.ndarray:
    """RGB pixel array (H x W x 3, values 0-255) from a PNG/JPEG file."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64)


def _load_meta(data_dir) -> dict:
    with open(os.path.join(data_dir, "meta.json")) as fh:
        return json.load(fh)


def _entries(meta, split):
    return [e for e in meta["images"] if split is None or e["split"] == split]


def _detection_target(owner: np.ndarray, sigma: float) -> RasterGrid:
    from .grid import gaussian_blur

    mask = RasterGrid.from_array((owner >= 0).astype(np.float64))
    return RasterGrid.from_array(np.clip(gaussian_blur(mask, sigma).plane(0), 0.0, 1.0))


def _pooled(grid: RasterGrid, factor: int, mean: bool = False) -> RasterGrid:
    pooled = sum_pool(grid, factor)
    if mean:
        pooled = RasterGrid(pooled.data / float(factor * factor))
    return pooled


def _full_res_map(path, image_shape, mean_map: bool) -> RasterGrid:
    """Load a PDM1 map; nearest-upsample pooled maps back to image size."""
    grid = read_pdm1(path)
    h, w = image_shape
    if (grid.height, grid.width) == (h, w):
        return grid
    factor = round(h / grid.height)
    if factor < 1 or grid.height * factor < h or grid.width * factor < w:
        raise ShapeError(f"map {grid.height}x{grid.width} does not tile image {h}x{w}")
    if mean_map:
        return instseg.upsample_detection(grid, (h, w), factor)
    return instseg.upsample_density(grid, (h, w), factor)


def _predict_detection_plane(model, rgb) -> RasterGrid:
    pooled = net.predict_density(model, net.input_stack(rgb))
    return instseg.upsample_detection(pooled, rgb.shape[:2], model.config.pool_factor)


def _build_stack(rgb, model_channels, gdd, det_model, cp):
    thermal_scale = cp.getfloat("thermal", "scale")
    if model_channels == 3:
        return net.input_stack(rgb)
    if model_channels == 4:
        if gdd is None:
            raise ParameterError("model expects a thermal channel; pass --gdd")
        return net.input_stack(rgb, thermal=gdd / thermal_scale)
    if model_channels == 5:
        if gdd is None or det_model is None:
            raise ParameterError("model expects thermal and detection channels; pass --gdd and --detect-model")
        det = _predict_detection_plane(det_model, rgb)
        return net.input_stack(rgb, thermal=gdd / thermal_scale, detection=det)
    raise ParameterError(f"unsupported input channel count {model_channels}")


def _train_common(args, cp, detection: bool):
    meta = _load_meta(args.data)
    entries = _entries(meta, "train")
    if not entries:
        raise ParameterError("dataset has no training split")
    sigma_dot = cp.getfloat("density", "sigma_dot")
    sigma_det = cp.getfloat("density", "sigma_detection")
    thermal_scale = cp.getfloat("thermal", "scale")
    det_model = net.load_checkpoint(args.detect_model) if getattr(args, "detect_model", None) else None

    dataset = []
    for entry in entries:
        rgb = load_image(os.path.join(args.data, "images", entry["id"] + ".png"))
        owner = synth.load_owner(os.path.join(args.data, "owner", entry["id"] + ".pdm1"))
        if detection:
            stack = net.input_stack(rgb)
            target = _detection_target(owner, sigma_det)
            pooled_mean = True
        else:
            det_plane = _predict_detection_plane(det_model, rgb) if det_model else None
            stack = net.input_stack(
                rgb,
                thermal=entry["gdd"] / thermal_scale,
                detection=det_plane,
            )
            ann = density.load_annotation(os.path.join(args.data, "ann_dot", entry["id"] + ".json"))
            target = density.build_dot_density(ann, rgb.shape[:2], sigma_dot=sigma_dot).grid
            pooled_mean = False
        dataset.append((stack, target, pooled_mean))

    channels = dataset[0][0].shape[2]
    target_scale = 1.0 if detection else cp.getfloat("train", "target_scale")
    if args.arch == "tuned":
        config = net.tuned_config(channels, width_scale=args.width_scale, target_scale=target_scale)
    elif args.arch == "ccnn":
        config = net.ccnn_config(channels, target_scale=target_scale)
    else:
        raise ParameterError(f"unknown arch {args.arch!r}")
    pairs = [
        (stack, RasterGrid(_pooled(t, config.pool_factor, mean=pm).data * target_scale))
        for stack, t, pm in dataset
    ]
    if args.augment:
        pairs = augment.augment_dataset(pairs)
    model = net.init_model(config, seed=args.seed)
    model = net.train(
        model,
        pairs,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed + 1,
        momentum=cp.getfloat("train", "momentum"),
        lr_decay=args.lr_decay,
    )
    net.save_checkpoint(args.out, model)
    print(f"trained {len(pairs)} pairs, final loss {model.loss_trace[-1]:.6g} -> {args.out}")


def cmd_density(args, cp):
    ann = density.load_annotation(args.ann)
    rgb = load_image(args.image)
    if args.mode == "dot":
        target = density.build_dot_density(ann, rgb.shape[:2], sigma_dot=cp.getfloat("density", "sigma_dot"))
        grid = target.grid
    else:
        if not args.superpixels:
            raise ParameterError("region and detection targets need --superpixels")
        spmap = slic.load_superpixels(args.superpixels)
        if args.mode == "region":
            grid = density.build_region_density(
                ann, spmap, rgb.shape[:2], sigma_region=cp.getfloat("density", "sigma_region")
            ).grid
        else:
            grid = density.build_detection_target(
                ann, spmap, rgb.shape[:2], sigma_det=cp.getfloat("density", "sigma_detection")
            ).grid
    write_pdm1(args.out, grid)
    print(f"{args.mode} target sum {grid.total:.6f} -> {args.out}")


def cmd_slic(args, cp):
    rgb = load_image(args.image)
    spmap = slic.slic_segment(
        rgb,
        level=args.level,
        compactness=cp.getfloat("slic", "compactness"),
        iters=cp.getint("slic", "iters"),
    )
    slic.save_superpixels(args.out, spmap)
    print(f"{spmap.n_superpixels} superpixels at level {args.level} -> {args.out}")


def cmd_gdd(args, cp):
    weather = thermal.load_weather_csv(args.weather)
    tt = thermal.compute_gdd(
        weather,
        datetime.date.fromisoformat(args.planting),
        datetime.date.fromisoformat(args.date),
    )
    print(f"{tt.gdd:.2f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"planting": args.planting, "date": args.date, "gdd": tt.gdd}, fh, indent=1)
            fh.write("\n")


def cmd_predict(args, cp):
    model = net.load_checkpoint(args.model)
    det_model = net.load_checkpoint(args.detect_model) if args.detect_model else None
    rgb = load_image(args.image)
    stack = _build_stack(rgb, model.config.input_channels, args.gdd, det_model, cp)
    if args.tta == "none":
        count = net.predict_count(model, stack)
    else:
        count = augment.tta_count(model, stack, reduce=args.tta)
    print(f"{count:.4f}")
    if args.out_map:
        write_pdm1(args.out_map, net.predict_density(model, stack))


def cmd_isotonic(args, cp):
    series = isotonic.load_count_csv(args.counts)
    corrected = isotonic.correct_series(series)
    isotonic.save_count_csv(args.out, corrected)
    print(f"{len(corrected)} segment series -> {args.out}")


def cmd_segment(args, cp):
    rgb = load_image(args.image)
    spmap = slic.load_superpixels(args.superpixels)
    det = _full_res_map(args.detection, rgb.shape[:2], mean_map=True)
    dens = _full_res_map(args.density, rgb.shape[:2], mean_map=False)
    params = instseg.FitnessParams(
        gamma=cp.getfloat("segment", "gamma"),
        delta=cp.getfloat("segment", "delta"),
        beta=args.beta,
    )
    detected = instseg.detect_superpixels(det, spmap, args.alpha)
    assignment = instseg.segment_instances(detected, rgb, spmap, dens, params)
    image_id = os.path.splitext(os.path.basename(args.image))[0]
    instseg.save_segmentation(args.out, image_id, assignment, args.alpha, args.beta)
    print(f"{assignment.n_clusters} instances -> {args.out}")


def _read_count_csv(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["id"]] = float(row["count"])
    return out


def cmd_eval_count(args, cp):
    preds = _read_count_csv(args.pred)
    truths = _read_count_csv(args.truth)
    ids = sorted(set(preds) & set(truths))
    if not ids:
        raise ParameterError("no shared ids between prediction and truth CSVs")
    p = [preds[i] for i in ids]
    t = [truths[i] for i in ids]
    summary = {"n": len(ids), "mae": evaluate.mae(p, t), "r2": evaluate.r_squared(p, t)}
    print(f"n={summary['n']} mae={summary['mae']:.4f} r2={summary['r2']:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=1)
            fh.write("\n")


def _seg_cases(args, cp, entries):
    """Build per-image segmentation eval cases; oracle maps unless models given."""
    sigma_det = cp.getfloat("density", "sigma_detection")
    sigma_region = cp.getfloat("density", "sigma_region")
    det_model = net.load_checkpoint(args.detect_model) if args.detect_model else None
    count_model = net.load_checkpoint(args.count_model) if args.count_model else None
    thermal_scale = cp.getfloat("thermal", "scale")
    cases = []
    for entry in entries:
        rgb = load_image(os.path.join(args.data, "images", entry["id"] + ".png"))
        owner = synth.load_owner(os.path.join(args.data, "owner", entry["id"] + ".pdm1"))
        spmap = slic.slic_segment(rgb, level=args.level, compactness=cp.getfloat("slic", "compactness"), iters=cp.getint("slic", "iters"))
        ann = synth.region_annotation_from_owner(owner, spmap, entry["id"], args.level)
        truth = {
            iid: frozenset(np.flatnonzero(spmap.mask(sps).ravel()).tolist())
            for iid, sps in ann.instances
        }
        if det_model is None:
            det = density.build_detection_target(ann, spmap, rgb.shape[:2], sigma_det=sigma_det).grid
            dens = density.build_region_density(ann, spmap, rgb.shape[:2], sigma_region=sigma_region).grid
        else:
            det = _predict_detection_plane(det_model, rgb)
            pooled = net.predict_density(
                count_model,
                _build_stack(rgb, count_model.config.input_channels, entry["gdd"], det_model, cp),
            )
            dens = instseg.upsample_density(pooled, rgb.shape[:2], count_model.config.pool_factor)
        cases.append(evaluate.SegEvalCase(image=rgb, spmap=spmap, detection=det, density=dens, truth=truth))
    return cases


def cmd_eval_seg(args, cp):
    meta = _load_meta(args.data)
    entries = _entries(meta, args.split)
    cases = _seg_cases(args, cp, entries)
    points, map_value = evaluate.pr_curve_and_map(
        cases,
        alpha_grid=cfgmod.float_list(cp.get("eval", "alpha_grid")),
        beta_grid=cfgmod.float_list(cp.get("eval", "beta_grid")),
        iou_threshold=cp.getfloat("eval", "iou_threshold"),
        params=instseg.FitnessParams(
            gamma=cp.getfloat("segment", "gamma"),
            delta=cp.getfloat("segment", "delta"),
        ),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    evaluate.save_pr_csv(os.path.join(args.out_dir, "pr.csv"), points)
    evaluate.save_map_summary(os.path.join(args.out_dir, "map.json"), map_value)
    print(f"mAP {map_value:.4f} over {len(points)} operating points -> {args.out_dir}")


def cmd_synth(args, cp):
    sc = cp["synth"]
    config = synth.SynthConfig(
        width=sc.getint("width"),
        height=sc.getint("height"),
        min_blobs=sc.getint("min_blobs"),
        max_blobs=sc.getint("max_blobs"),
        min_radius=sc.getfloat("min_radius"),
        max_radius=sc.getfloat("max_radius"),
        max_overlap=sc.getfloat("max_overlap"),
        n_segments=sc.getint("n_segments"),
    )
    manifest = synth.generate_dataset(args.out, config, seed=args.seed, n_train=args.n_train, n_test=args.n_test)
    print(f"{len(manifest['images'])} images -> {args.out}")


def cmd_serve(args, cp):
    import uvicorn

    from .service import create_app

    app = create_app(args.data_dir, model_path=args.model, default_alpha=cp.getfloat("serve", "default_alpha"))
    uvicorn.run(app, host=args.host, port=args.port)


def cmd_run(args, cp):
    """Sequential pipeline over a synthetic dataset, with a reproducibility manifest."""
    stages = args.stages.split(",") if args.stages else ["synth", "train", "predict", "isotonic", "eval"]
    os.makedirs(args.out, exist_ok=True)
    data_dir = os.path.join(args.out, "data")
    models = {"detect": os.path.join(args.out, "detect.pcnn"), "count": os.path.join(args.out, "count.pcnn")}
    manifest = {
        "seed": args.seed,
        "config_hash": cfgmod.config_hash(cp),
        "stages": stages,
        "artifacts": {},
    }

    ns = argparse.Namespace(
        data=data_dir,
        arch=cp.get("train", "arch"),
        width_scale=cp.getfloat("train", "width_scale"),
        epochs=cp.getint("train", "epochs"),
        lr=cp.getfloat("train", "lr"),
        lr_decay=cp.getfloat("train", "lr_decay"),
        batch_size=cp.getint("train", "batch_size"),
        seed=args.seed,
        augment=cp.getboolean("train", "augment"),
        detect_model=None,
    )
    if "synth" in stages:
        cmd_synth(argparse.Namespace(out=data_dir, seed=args.seed, n_train=args.n_train, n_test=args.n_test), cp)
        manifest["artifacts"]["data"] = data_dir
    if "train" in stages:
        ns.out = models["detect"]
        _train_common(ns, cp, detection=True)
        ns.out = models["count"]
        ns.detect_model = None
        _train_common(ns, cp, detection=False)
        manifest["artifacts"].update(models)
    if "predict" in stages or "isotonic" in stages or "eval" in stages:
        meta = _load_meta(data_dir)
        model = net.load_checkpoint(models["count"])
        rows = []
        for entry in _entries(meta, "test"):
            rgb = load_image(os.path.join(data_dir, "images", entry["id"] + ".png"))
            stack = _build_stack(rgb, model.config.input_channels, entry["gdd"], None, cp)
            raw = net.predict_count(model, stack)
            tta = augment.tta_count(model, stack, reduce=cp.get("predict", "tta"))
            rows.append((entry, raw, tta))
        pred_csv = os.path.join(args.out, "pred.csv")
        with open(pred_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "count"])
            for entry, _, tta in rows:
                writer.writerow([entry["id"], f"{tta:.6f}"])
        manifest["artifacts"]["pred"] = pred_csv
        if "isotonic" in stages:
            by_segment = {}
            for entry, _, tta in rows:
                by_segment.setdefault(entry["segment"], []).append((entry["gdd"], tta))
            series = [
                isotonic.CountSeries(
                    segment_id=str(seg),
                    gdd=tuple(g for g, _ in sorted(pts)),
                    raw_counts=tuple(c for _, c in sorted(pts)),
                )
                for seg, pts in sorted(by_segment.items())
            ]
            iso_csv = os.path.join(args.out, "isotonic.csv")
            isotonic.save_count_csv(iso_csv, isotonic.correct_series(series))
            manifest["artifacts"]["isotonic"] = iso_csv
        if "eval" in stages:
            preds = [tta for _, _, tta in rows]
            truths = [float(entry["count"]) for entry, _, _ in rows]
            summary = {"mae": evaluate.mae(preds, truths), "r2": evaluate.r_squared(preds, truths)}
            eval_json = os.path.join(args.out, "eval.json")
            with open(eval_json, "w") as fh:
                json.dump(summary, fh, indent=1)
                fh.write("\n")
            manifest["artifacts"]["eval"] = eval_json
            print(f"test mae {summary['mae']:.4f} r2 {summary['r2']:.4f}")
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="panicle", description=__doc__)
    parser.add_argument("--config", help="key-value config file overriding defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("density", help="build a density or detection target")
    p.add_argument("--ann", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mode", choices=["dot", "region", "detection"], required=True)
    p.add_argument("--superpixels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("slic", help="compute a superpixel map")
    p.add_argument("--image", required=True)
    p.add_argument("--level", choices=sorted(slic.LEVEL_SIZES), default="small")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slic)

    p = sub.add_parser("gdd", help="accumulate growing degree days")
    p.add_argument("--weather", required=True)
    p.add_argument("--planting", required=True)
    p.add_argument("--date", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gdd)

    for name, detection in (("train-detect", True), ("train-count", False)):
        p = sub.add_parser(name, help=f"train the {'detection' if detection else 'count'} network")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--arch", choices=["tuned", "ccnn"], default="tuned")
        p.add_argument("--width-scale", type=float, default=1.0)
        p.add_argument("--epochs", type=int, default=15)
        p.add_argument("--lr", type=float, default=3e-3)
        p.add_argument("--lr-decay", type=float, default=1.0)
        p.add_argument("--batch-size", type=int, default=8)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--augment", action="store_true")
        if not detection:
            p.add_argument("--detect-model")
        p.set_defaults(func=lambda a, c, d=detection: _train_common(a, c, detection=d))

    p = sub.add_parser("predict", help="predict a count for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--gdd", type=float)
    p.add_argument("--detect-model")
    p.add_argument("--tta", choices=["median", "mean", "none"], default="median")
    p.add_argument("--out-map")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("isotonic", help="monotone-correct count series")
    p.add_argument("--counts", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_isotonic)

    p = sub.add_parser("segment", help="segment instances from detection and density maps")
    p.add_argument("--image", required=True)
    p.add_argument("--superpixels", required=True)
    p.add_argument("--detection", required=True)
    p.add_argument("--density", required=True)
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval-count", help="MAE and R^2 between count CSVs")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_count)

    p = sub.add_parser("eval-seg", help="PR curve and mAP over the alpha/beta grid")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--level", choices=sorted(slic.LEVEL_SIZES), default="small")
    p.add_argument("--detect-model")
    p.add_argument("--count-model")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="run the annotation service")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--model")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("run", help="run the pipeline end to end on synthetic data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--stages")
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cp = cfgmod.load_config(args.config)
        args.func(args, cp)
        return EXIT_OK
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, AnnotationError, DataGapError, ShapeError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PanicleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
