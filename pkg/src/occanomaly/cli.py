"""Command-line front end: ``occanomaly {inject,score,eval,report}``.

A run is described by one JSON config; flags override it. Sections ``inject``,
``score``, ``eval`` and ``report`` hold per-step settings. A ``frames`` list of
partial configs (each with an ``id``) is merged over the base config one frame
at a time, and frames run in parallel with ``--jobs``.

Exit codes: 0 ok, 1 generic failure, 2 missing input, 3 config or schema
error, 4 metric undefined, 5 nothing to aggregate. Failures print one JSON
object on stderr.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import formats, metrics, scoring
from .geometry import GridMeta
from .pipeline import (
    OCCLUDED,
    VISIBLE,
    Diagnostics,
    RayMarchConfig,
    apply_depth_alignment,
    collect_alignment_pairs,
    fit_depth_alignment,
    integrate_with_occlusion,
    lift_mask_to_points,
    voxelize_points,
)
from .svr import SvrHyper

logger = logging.getLogger("occanomaly")

OUTPUT_ENV = "OCCANOMALY_OUTPUT_DIR"
CSV_FIELDS = ["method", "dataset", "radius_m", "auprc_r", "auroc", "iou", "miou"]

EXIT_OK, EXIT_FAIL, EXIT_MISSING, EXIT_CONFIG, EXIT_METRIC, EXIT_EMPTY = 0, 1, 2, 3, 4, 5

DEFAULTS = {
    "dataset": "default",
    "seed": 0,
    "grid": {"dims": [256, 256, 32], "voxel_size": 0.2, "origin": [0.0, -25.6, -2.0]},
    "inject": {
        "raw_scene": False,
        "fit_depth": None,
        "point_columns": 3,
        "samples": 1000,
        "scale": 4.0,
        "svr": {"c_reg": 100.0, "epsilon": 0.1, "gamma": None},
        "keep_occluded": False,
        "margin_voxels": 64.0,
        "output": None,
    },
    "score": {
        "method": "semantic_aware",
        "geometry_prior": True,
        "partition": None,
        "region_weight": None,
        "class_means": None,
        "output": None,
    },
    "eval": {
        "method": None,
        "radii": [4, 5, 6],
        "mode": "regional",
        "mask": None,
        "invalid_mask": None,
        "pred": None,
        "classes": None,
        "curve_points": 2000,
    },
    "report": {"inputs": [], "curves": []},
}


class CliError(Exception):
    def __init__(self, code: int, message: str, **extra):
        super().__init__(message)
        self.code = code
        self.extra = extra


# config handling

def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def parse_radii(text: str):
    try:
        radii = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"radii must be comma-separated integers, got {text!r}") from None
    return radii


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(EXIT_MISSING, f"config file not found: {path}", path=str(path))
        try:
            cfg = deep_merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config {path} is not valid JSON: {exc}") from None
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError(EXIT_CONFIG, f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(cfg, key, value)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.output_dir:
        cfg["output_dir"] = args.output_dir
    cfg.setdefault("output_dir", os.environ.get(OUTPUT_ENV, "occanomaly_out"))
    if getattr(args, "method", None):
        cfg["score"]["method"] = args.method
    if getattr(args, "no_geometry_prior", False):
        cfg["score"]["geometry_prior"] = False
    if getattr(args, "radius_voxels", None):
        cfg["eval"]["radii"] = parse_radii(args.radius_voxels)
    if getattr(args, "inputs", None):
        cfg["report"]["inputs"] = list(args.inputs)
    return cfg


def frame_configs(cfg: dict):
    frames = cfg.get("frames")
    if not frames:
        return [(cfg.get("frame", "frame"), cfg)]
    base = {k: v for k, v in cfg.items() if k != "frames"}
    out = []
    for i, frame in enumerate(frames):
        merged = deep_merge(base, frame)
        out.append((str(frame.get("id", f"{i:06d}")), merged))
    return out


def grid_meta(cfg: dict) -> GridMeta:
    g = cfg["grid"]
    try:
        return GridMeta(tuple(g["dims"]), float(g["voxel_size"]), tuple(g["origin"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid grid settings: {exc}") from None


def _require(section: dict, name: str, key: str, optional: bool = False):
    value = section.get(key)
    if value is None:
        if optional:
            return None
        raise CliError(EXIT_CONFIG, f"config is missing {name}.{key}")
    if not os.path.exists(value):
        raise CliError(EXIT_MISSING, f"input file not found: {value}", path=str(value))
    return value


def _frame_dir(cfg: dict, frame_id: str, multi: bool) -> Path:
    out = Path(cfg["output_dir"])
    return out / frame_id if multi else out


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _num(x):
    """Float for JSON/CSV; NaN becomes None."""
    if x is None:
        return None
    x = float(x)
    return None if np.isnan(x) else x


# inject

def run_inject(cfg: dict, frame_id: str, out_dir: Path) -> dict:
    sec = cfg["inject"]
    meta = grid_meta(cfg)
    scene_p = _require(sec, "inject", "scene")
    calib_p = _require(sec, "inject", "calib")
    depth_p = _require(sec, "inject", "depth")
    mask_p = _require(sec, "inject", "mask")
    points_p = _require(sec, "inject", "points")
    fit_p = _require(sec, "inject", "fit_depth", optional=True)

    depth = formats.read_depth_raster(depth_p, kind="pseudo")
    mask = formats.read_mask(mask_p)
    if (mask.width, mask.height) != (depth.width, depth.height):
        raise CliError(EXIT_CONFIG, f"mask {mask.width}x{mask.height} and depth {depth.width}x{depth.height} disagree")
    cam = formats.read_calib(calib_p, image_size=(depth.width, depth.height))
    scene = formats.read_label_grid(scene_p, fallback_meta=meta if sec["raw_scene"] else None)
    cloud = formats.read_point_cloud(points_p, int(sec["point_columns"]))

    diag = Diagnostics()
    fit_depth = formats.read_depth_raster(fit_p) if fit_p else depth
    exclude = None if fit_p else mask.mask
    seed = int(cfg["seed"])
    px, py = collect_alignment_pairs(cloud, fit_depth, cam, int(sec["samples"]), seed, exclude, diag)
    svr_cfg = sec["svr"]
    hyper = SvrHyper(c_reg=float(svr_cfg["c_reg"]), epsilon=float(svr_cfg["epsilon"]),
                     gamma=None if svr_cfg.get("gamma") is None else float(svr_cfg["gamma"]))
    model = fit_depth_alignment(np.column_stack([px, py]), hyper)
    resid = np.abs(model.predict(px) - py)

    aligned = apply_depth_alignment(model, depth)
    lifted = lift_mask_to_points(mask, aligned, cam, diag)
    voxels = voxelize_points(lifted, scene.meta, diag)
    grid, visibility = integrate_with_occlusion(
        scene, voxels, cam, RayMarchConfig(float(sec["scale"])),
        margin_voxels=float(sec["margin_voxels"]), keep_occluded=bool(sec["keep_occluded"]),
    )

    out_path = Path(sec["output"]) if sec.get("output") else out_dir / "labels_injected.occ"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    formats.write_label_grid(grid, out_path)
    report = {
        "frame": frame_id,
        "dataset": cfg["dataset"],
        "seed": seed,
        "output": str(out_path),
        "svr": {
            "pairs": int(px.size),
            "dropped_samples": diag.dropped_samples,
            "support_vectors": int(model.dual_coeffs.size),
            "iterations": model.n_iter,
            "kkt_gap": model.kkt_gap,
            "c_reg": model.c_reg,
            "epsilon": model.epsilon,
            "gamma": model.gamma,
            "residual_max": float(resid.max()),
            "residual_mean": float(resid.mean()),
            "residual_median": float(np.median(resid)),
        },
        "lift": {
            "masked_pixels": int(mask.mask.sum()),
            "lifted_points": len(lifted),
            "skipped_pixels": diag.skipped_pixels,
        },
        "voxelize": {"anomaly_voxels": len(voxels), "out_of_range_points": diag.out_of_range_points},
        "visibility": {
            "visible": sum(v == VISIBLE for v in visibility.values()),
            "occluded": sum(v == OCCLUDED for v in visibility.values()),
            "keep_occluded": bool(sec["keep_occluded"]),
            "voxels": [[*vox, state] for vox, state in sorted(visibility.items())],
        },
        "written_anomaly_voxels": int((grid.labels == grid.anomaly_class).sum()),
    }
    _dump_json(report, out_path.with_name(out_path.stem + "_report.json"))
    return report


# score

def run_score(cfg: dict, frame_id: str, out_dir: Path) -> dict:
    sec = cfg["score"]
    method = sec["method"]
    if method not in scoring.METHODS:
        raise CliError(EXIT_CONFIG, f"unknown method {method!r}; choose from {', '.join(scoring.METHODS)}")
    logits_p = _require(sec, "score", "logits")
    partition_p = _require(sec, "score", "partition", optional=True)
    means_p = _require(sec, "score", "class_means", optional=True)
    try:
        partition = scoring.ClassPartition.load(partition_p)
        if sec.get("region_weight") is not None:
            partition = scoring.ClassPartition(partition.mapping, float(sec["region_weight"]), partition.names)
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid class partition: {exc}") from None
    volume = formats.read_logit_volume(logits_p)
    try:
        partition.check_covers(volume.num_classes)
    except scoring.PartitionError as exc:
        raise CliError(EXIT_CONFIG, str(exc), missing_classes=exc.missing) from None
    class_means = scoring.ClassMeanLogits.from_dict(json.loads(Path(means_p).read_text())) if means_p else None
    prior = bool(sec["geometry_prior"])
    scores = scoring.score_volume(volume, method, partition, prior, class_means)

    tag = method if (prior or method == "semantic_aware") else f"{method}_noprior"
    out_path = Path(sec["output"]) if sec.get("output") else out_dir / f"scores_{tag}.occ"
    formats.write_score_volume(scores, out_path)
    s = scores.scores
    report = {
        "frame": frame_id,
        "method": method,
        "geometry_prior": prior if method != "semantic_aware" else True,
        "region_weight": partition.region_weight,
        "output": str(out_path),
        "min": float(s.min()),
        "max": float(s.max()),
        "diagnostics": scores.diagnostics,
    }
    _dump_json(report, out_path.with_name(out_path.stem + "_report.json"))
    return report


# eval

def _subsample(curve_x: np.ndarray, curve_y: np.ndarray, limit: int):
    n = len(curve_x)
    if limit and n > limit:
        idx = np.unique(np.linspace(0, n - 1, limit).round().astype(np.int64))
        curve_x, curve_y = curve_x[idx], curve_y[idx]
    return [float(v) for v in curve_x], [float(v) for v in curve_y]


def run_eval(cfg: dict, frame_id: str, out_dir: Path) -> dict:
    sec = cfg["eval"]
    method = sec.get("method") or cfg["score"]["method"]
    scores_p = _require(sec, "eval", "scores")
    gt_p = _require(sec, "eval", "gt")
    mask_p = _require(sec, "eval", "mask", optional=True)
    invalid_p = _require(sec, "eval", "invalid_mask", optional=True)
    pred_p = _require(sec, "eval", "pred", optional=True)
    radii = [int(r) for r in sec["radii"]]
    if not radii or any(r <= 0 for r in radii):
        raise CliError(EXIT_CONFIG, f"radii must be positive integers, got {radii}")

    scores = formats.read_score_volume(scores_p)
    gt = formats.read_label_grid(gt_p, fallback_meta=scores.meta)
    if gt.meta.dims != scores.meta.dims:
        raise CliError(EXIT_CONFIG, f"ground truth dims {gt.meta.dims} != score dims {scores.meta.dims}")
    mask = np.ones(gt.meta.dims, dtype=bool)
    if mask_p:
        mask &= formats.read_voxel_mask(mask_p, fallback_meta=gt.meta)[1]
    if invalid_p:
        mask &= ~formats.read_voxel_mask(invalid_p, fallback_meta=gt.meta)[1]
    gt_anom = gt.labels == gt.anomaly_class
    if not (gt_anom & mask).any():
        raise CliError(EXIT_METRIC, f"ground truth {gt_p} has no anomaly voxels inside the evaluation mask")

    try:
        roc_area = metrics.auroc(scores, gt_anom, mask)
    except metrics.UndefinedMetricError as exc:
        raise CliError(EXIT_METRIC, str(exc)) from None
    roc = metrics.roc_curve(scores, gt_anom, mask)

    iou = miou = None
    per_class = {}
    if pred_p:
        pred = formats.read_label_grid(pred_p, fallback_meta=gt.meta)
        classes = sec.get("classes")
        if classes is None:
            classes = sorted(int(c) for c in np.unique(gt.labels) if c != gt.free_class)
        iou = metrics.occupancy_iou(pred, gt, mask)
        per_class, miou = metrics.semantic_miou(pred, gt, classes, mask)

    limit = int(sec.get("curve_points") or 0)
    dataset = cfg["dataset"]
    rows, pr_curves = [], []
    for r in radii:
        curve = metrics.auprc_regional(scores, gt_anom, r, mask, sec.get("mode", "regional"))
        radius_m = round(r * gt.meta.voxel_size, 6)
        rows.append({
            "method": method, "dataset": dataset, "radius_m": radius_m,
            "auprc_r": curve.area, "auroc": roc_area, "iou": _num(iou), "miou": _num(miou),
        })
        rec, prec = _subsample(curve.recall, curve.precision, limit)
        pr_curves.append({"radius_voxels": r, "radius_m": radius_m, "area": curve.area, "recall": rec, "precision": prec})

    fpr, tpr = _subsample(roc.fpr, roc.tpr, limit)
    stem = f"eval_{method}"
    csv_path = out_dir / f"{stem}.csv"
    write_metric_csv(rows, csv_path)
    report = {
        "frame": frame_id,
        "method": method,
        "dataset": dataset,
        "mode": sec.get("mode", "regional"),
        "auroc": roc_area,
        "roc": {"fpr": fpr, "tpr": tpr, "area": roc.area},
        "pr": pr_curves,
        "iou": _num(iou),
        "miou": _num(miou),
        "per_class_iou": {str(k): _num(v) for k, v in per_class.items()},
        "csv": str(csv_path),
    }
    _dump_json(report, out_dir / f"{stem}.json")
    return report


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metric_csv(rows, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for row in rows:
        writer.writerow([_fmt(row[k]) for k in CSV_FIELDS])
    path.write_text(buf.getvalue())


# report

def read_metric_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_FIELDS if c not in header]
        if missing:
            raise CliError(EXIT_CONFIG, f"{path}: missing column(s) {', '.join(missing)}", missing_columns=missing)
        return list(reader)


def _mean(values):
    vals = [float(v) for v in values if v not in ("", None)]
    return sum(vals) / len(vals) if vals else None


def run_report(cfg: dict, out_dir: Path) -> dict:
    sec = cfg["report"]
    inputs = list(sec.get("inputs") or [])
    if not inputs:
        raise CliError(EXIT_EMPTY, "no per-frame CSV files to aggregate")
    for p in inputs:
        if not os.path.exists(p):
            raise CliError(EXIT_MISSING, f"input file not found: {p}", path=str(p))
    rows = []
    for p in inputs:
        rows.extend(read_metric_csv(p))
    if not rows:
        raise CliError(EXIT_EMPTY, "input CSV files contain no rows")

    groups, radii = {}, []
    for row in rows:
        key = (row["method"], row["dataset"])
        groups.setdefault(key, []).append(row)
        r = float(row["radius_m"])
        if r not in radii:
            radii.append(r)
    radii.sort()

    table = []
    for (method, dataset), grp in groups.items():
        entry = {"method": method, "dataset": dataset}
        for r in radii:
            entry[f"auprc_r@{r:g}m"] = _mean(x["auprc_r"] for x in grp if float(x["radius_m"]) == r)
        # auroc/iou/miou repeat on every radius row of a frame
        first_radius = [x for x in grp if float(x["radius_m"]) == float(grp[0]["radius_m"])]
        entry["frames"] = len(first_radius)
        entry["auroc"] = _mean(x["auroc"] for x in first_radius)
        entry["iou"] = _mean(x["iou"] for x in first_radius)
        entry["miou"] = _mean(x["miou"] for x in first_radius)
        table.append(entry)

    cols = ["method", "dataset", "frames"] + [f"auprc_r@{r:g}m" for r in radii] + ["auroc", "iou", "miou"]
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for entry in table:
        writer.writerow([_fmt(entry[c]) for c in cols])
    (out_dir / "report_table.csv").write_text(buf.getvalue())

    md = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for entry in table:
        cells = [f"{100 * entry[c]:.2f}" if isinstance(entry[c], float) else ("" if entry[c] is None else str(entry[c])) for c in cols]
        md.append("| " + " | ".join(cells) + " |")
    (out_dir / "report_table.md").write_text("\n".join(md) + "\n")

    curves = list(sec.get("curves") or [])
    if not curves:
        curves = [str(Path(p).with_suffix(".json")) for p in inputs if Path(p).with_suffix(".json").exists()]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "dataset", "frame", "curve", "radius_m", "x", "y"])
    for p in curves:
        rep = json.loads(Path(p).read_text())
        base = [rep.get("method", ""), rep.get("dataset", ""), rep.get("frame", "")]
        for x, y in zip(rep["roc"]["fpr"], rep["roc"]["tpr"]):
            writer.writerow(base + ["roc", "", repr(x), repr(y)])
        for pr in rep.get("pr", []):
            for x, y in zip(pr["recall"], pr["precision"]):
                writer.writerow(base + ["pr", repr(pr["radius_m"]), repr(x), repr(y)])
    (out_dir / "report_curves.csv").write_text(buf.getvalue())
    return {"rows": table, "columns": cols}


# driver

_RUNNERS = {"inject": run_inject, "score": run_score, "eval": run_eval}


def _run_frame(command: str, frame_id: str, cfg: dict, multi: bool) -> dict:
    out_dir = _frame_dir(cfg, frame_id, multi)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _RUNNERS[command](cfg, frame_id, out_dir)


def _map_error(exc: Exception) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, FileNotFoundError):
        return CliError(EXIT_MISSING, f"input file not found: {exc.filename or exc}", path=str(exc.filename or exc))
    if isinstance(exc, scoring.PartitionError):
        return CliError(EXIT_CONFIG, str(exc), missing_classes=exc.missing)
    if isinstance(exc, metrics.UndefinedMetricError):
        return CliError(EXIT_METRIC, str(exc))
    if isinstance(exc, formats.FormatError):
        return CliError(EXIT_CONFIG, str(exc))
    return CliError(EXIT_FAIL, f"{type(exc).__name__}: {exc}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occanomaly", description="voxel anomaly injection, scoring and evaluation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. score.logits=path")
    common.add_argument("--jobs", type=int, default=1, help="frames processed in parallel")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--output-dir", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./occanomaly_out)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("inject", parents=[common], help="write anomaly voxels into a scene grid")
    p = sub.add_parser("score", parents=[common], help="anomaly scores from a logit volume")
    p.add_argument("--method", help=f"one of {', '.join(scoring.METHODS)}")
    p.add_argument("--no-geometry-prior", action="store_true")
    p = sub.add_parser("eval", parents=[common], help="AuROC, AuPRC_r and IoU metrics")
    p.add_argument("--method", help="method name recorded in the outputs")
    p.add_argument("--radius-voxels", help="comma-separated dilation radii, default 4,5,6")
    p = sub.add_parser("report", parents=[common], help="aggregate per-frame CSV files")
    p.add_argument("inputs", nargs="*", help="per-frame eval CSV files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "eval" and args.method:
            cfg["eval"]["method"] = args.method
        if args.command == "score" and cfg["score"]["method"] not in scoring.METHODS:
            parser.print_usage(sys.stderr)
            raise CliError(EXIT_CONFIG, f"unknown method {cfg['score']['method']!r}; choose from {', '.join(scoring.METHODS)}")
        if args.command == "report":
            result = run_report(cfg, Path(cfg["output_dir"]))
            print(json.dumps({"status": "ok", "groups": len(result["rows"])}, sort_keys=True))
            return EXIT_OK
        frames = frame_configs(cfg)
        multi = "frames" in cfg and bool(cfg["frames"])
        if args.jobs > 1 and len(frames) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                futures = [pool.submit(_run_frame, args.command, fid, fcfg, multi) for fid, fcfg in frames]
                results = [f.result() for f in futures]
        else:
            results = [_run_frame(args.command, fid, fcfg, multi) for fid, fcfg in frames]
        print(json.dumps({"status": "ok", "frames": [r.get("frame") for r in results]}, sort_keys=True))
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code
        err = _map_error(exc)
        if args.verbose:
            logger.exception("command failed")
        payload = {"status": "error", "exit_code": err.code, "error": str(err), **err.extra}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return err.code


if __name__ == "__main__":
    raise SystemExit(main())
