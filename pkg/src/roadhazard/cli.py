"""Command-line pipeline: synth | disparity | detect | cstix | eval | sweep | report.

Every run writes its outputs plus a manifest.json recording the command,
parameters, seeds and SHA-256 hashes of the inputs, so runs are
reproducible byte for byte.  Exit codes: 0 success, 1 usage error, 2 data
error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .block_matching import BlockMatchConfig, block_match, disparity_to_cloud
from .cstix import ClusterParams, ObstaclePoint, midlevel_rep
from .evaluation import (
    count_pixels,
    decisions_to_points,
    instance_metrics,
    run_sweep,
)
from .geometry import CameraRig
from .hypothesis import (
    FREE_SPACE,
    NO_DECISION,
    OBSTACLE,
    DetectorConfig,
    detect_frame,
)
from .imaging import (
    DisparityMap,
    PatchGrid,
    downsample2,
    downsample2_disparity,
    load_label_pgm,
    load_pfm,
    load_pgm,
    save_pfm,
    save_pgm,
)
from .point_compat import PcParams, pc_detect
from .report import emit_report, plot_roc, read_sweep_csv
from .synth import render, scene_suite

_SMALL_RIG = CameraRig(fx=575.0, fy=575.0, x0=256.0, y0=128.0,
                       baseline=0.21, width=512, height=256)
_PAPER_RIG = CameraRig(fx=2300.0, fy=2300.0, x0=1024.0, y0=512.0,
                       baseline=0.21, width=2048, height=1024)


class _UsageError(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise _UsageError(1)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, params: dict,
                    inputs: list, outputs: list, seed=None) -> None:
    manifest = {
        "command": command,
        "params": params,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(str(Path(o).name) for o in outputs),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_patch(text: str) -> tuple[int, int]:
    if "x" in text:
        w, h = text.split("x", 1)
        return int(w), int(h)
    n = int(text)
    return n, n


def _detector_config(args) -> DetectorConfig:
    w, h = _parse_patch(args.patch)
    return DetectorConfig(
        patch_w=w, patch_h=h, stride=args.stride, dwn=args.dwn,
        phi_f=args.phi_f, phi_o=args.phi_o, tau=args.tau,
        lambda_min=args.lambda_min, max_iter=args.max_iter,
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rig = _SMALL_RIG if args.rig == "small" else _PAPER_RIG
    scenes = scene_suite(args.suite, rig=rig)
    outputs = []
    for i, spec in enumerate(scenes):
        if args.seed:
            spec = replace(spec, texture_seed=spec.texture_seed + args.seed)
        bundle = render(spec)
        scene_dir = out / f"scene_{i:03d}"
        scene_dir.mkdir(exist_ok=True)
        quantized = replace(bundle.left, pixels=np.rint(
            np.clip(bundle.left.pixels, 0, 4095)))
        save_pgm(quantized, scene_dir / "left.pgm")
        quantized = replace(bundle.right, pixels=np.rint(
            np.clip(bundle.right.pixels, 0, 4095)))
        save_pgm(quantized, scene_dir / "right.pgm")
        save_pfm(bundle.gt_disparity, scene_dir / "gt_disp.pfm")
        save_pgm(bundle.labels, scene_dir / "labels.pgm")
        outputs.append(scene_dir)
    rig.to_json(out / "calib.json")
    _write_manifest(out, "synth", {"suite": args.suite, "rig": args.rig},
                    [], [*outputs, out / "calib.json"], seed=args.seed)
    print(f"wrote {len(scenes)} scene bundles to {out}")
    return 0


def _cmd_disparity(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    left = load_pgm(args.left)
    right = load_pgm(args.right)
    cfg = BlockMatchConfig(window=args.window, d_max=args.d_max)
    dmap = block_match(left, right, cfg)
    save_pfm(dmap, out / "disp.pfm")
    _write_manifest(out, "disparity",
                    {"window": args.window, "d_max": args.d_max},
                    [args.left, args.right], [out / "disp.pfm"])
    print(f"wrote {out / 'disp.pfm'} "
          f"({int(np.count_nonzero(dmap.valid))} valid pixels)")
    return 0


def _decisions_csv(path, decisions, method: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if method == "fpht":
            cols = ["xc", "yc", "verdict", "statistic",
                    "a_f", "b_f", "F_f", "eig_f", "conv_f",
                    "a_o", "b_o", "F_o", "eig_o", "conv_o"]
        else:
            cols = ["xc", "yc", "verdict", "statistic",
                    "nx_f", "ny_f", "nz_f", "d_f", "F_f", "eig_f", "conv_f",
                    "nx_o", "ny_o", "nz_o", "d_o", "F_o", "eig_o", "conv_o"]
        writer = csv.writer(fh)
        writer.writerow(cols)
        for d in decisions:
            row = [d.patch.xc, d.patch.yc, d.verdict, repr(d.statistic)]
            for fit in (d.fit_f, d.fit_o):
                if method == "fpht":
                    row += [repr(fit.params.a), repr(fit.params.b)]
                else:
                    p = fit.params
                    row += [repr(p.nx), repr(p.ny), repr(p.nz), repr(p.d)]
                row += [repr(fit.residual_sum), repr(fit.min_eigenvalue),
                        int(fit.converged)]
            writer.writerow(row)


def _points_csv(path, points, clusters=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "X", "Y", "Z", "disparity", "source", "cluster"])
        for i, p in enumerate(points):
            cluster = "" if clusters is None else int(clusters[i])
            writer.writerow([p.x, p.y, repr(p.X), repr(p.Y), repr(p.Z),
                             repr(p.disparity), p.source, cluster])


def _read_points_csv(path):
    points, clusters = [], []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            points.append(ObstaclePoint(
                x=int(row["x"]), y=int(row["y"]), X=float(row["X"]),
                Y=float(row["Y"]), Z=float(row["Z"]),
                disparity=float(row["disparity"]), source=row["source"]))
            clusters.append(int(row["cluster"]) if row["cluster"] != "" else None)
    if any(c is None for c in clusters):
        clusters = None
    return points, clusters


def _cmd_detect(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rig = CameraRig.from_json(args.calib)
    left = load_pgm(args.left)
    right = load_pgm(args.right)
    dmap = load_pfm(args.disp)
    if args.dwn == 2:
        left, right = downsample2(left), downsample2(right)
        dmap = downsample2_disparity(dmap)
        rig = rig.downsample(2)

    inputs = [args.calib, args.left, args.right, args.disp]
    outputs = []
    if args.method in ("fpht", "pht"):
        cfg = _detector_config(args)
        grid = PatchGrid.cover(left.width, left.height, cfg.patch_w, cfg.patch_h,
                               cfg.stride, cfg.dwn)
        decisions = detect_frame(left, right, dmap, grid, cfg, rig,
                                 method=args.method, threads=args.threads)
        _decisions_csv(out / "decisions.csv", decisions, args.method)
        points = decisions_to_points(decisions, rig, args.method)
        _points_csv(out / "points.csv", points)
        outputs += [out / "decisions.csv", out / "points.csv"]
        n_obs = sum(d.verdict == OBSTACLE for d in decisions)
        print(f"{len(decisions)} patches, {n_obs} obstacle verdicts")
        params = {"method": args.method, **asdict(cfg)}
    else:  # pc
        cloud = disparity_to_cloud(dmap, rig, stride=args.stride)
        pars = PcParams(phi=args.phi, h_min=args.h_min, h_max=args.h_max)
        res = pc_detect(cloud, rig, pars)
        flagged = [p for p, f in zip(cloud, res.obstacle) if f]
        clusters = [int(c) for c, f in zip(res.cluster, res.obstacle) if f]
        pts = [ObstaclePoint(x=p.x, y=p.y, X=p.X, Y=p.Y, Z=p.Z,
                             disparity=p.disparity, source="pc")
               for p in flagged]
        _points_csv(out / "points.csv", pts, clusters)
        outputs.append(out / "points.csv")
        print(f"{len(cloud)} points, {len(pts)} flagged as obstacle")
        params = {"method": "pc", "stride": args.stride, "phi": args.phi,
                  "h_min": args.h_min, "h_max": args.h_max, "dwn": args.dwn}
    _write_manifest(out, "detect", params, inputs, outputs)
    return 0


def _cmd_cstix(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rig = CameraRig.from_json(args.calib)
    if args.dwn == 2:
        rig = rig.downsample(2)
    points, clusters = _read_points_csv(args.points)
    dmap = load_pfm(args.disp)
    if args.dwn == 2:
        dmap = downsample2_disparity(dmap)
    params = ClusterParams(stixel_width=args.width, var_thresh=args.var_thresh)
    stixels = midlevel_rep(points, dmap, params, rig, cluster_labels=clusters)
    with open(out / "stixels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster_id", "u", "width", "v_top", "v_bottom",
                         "median_disparity", "Z"])
        for s in stixels:
            writer.writerow([s.cluster_id, s.u, s.width, s.v_top, s.v_bottom,
                             repr(s.median_disparity), repr(s.Z)])
    _write_manifest(out, "cstix",
                    {"width": args.width, "var_thresh": args.var_thresh,
                     "dwn": args.dwn},
                    [args.points, args.disp, args.calib],
                    [out / "stixels.csv"])
    print(f"{len(stixels)} stixels from {len(points)} points")
    return 0


def _read_stixels_csv(path):
    from .cstix import CStix

    out = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(CStix(
                cluster_id=int(row["cluster_id"]), u=int(row["u"]),
                width=int(row["width"]), v_top=int(row["v_top"]),
                v_bottom=int(row["v_bottom"]),
                median_disparity=float(row["median_disparity"]),
                Z=float(row["Z"])))
    return out


def _cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = load_label_pgm(args.labels)
    if args.level == "pixel":
        centers, verdicts = [], []
        with open(args.pred, "r", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if "verdict" in row:
                    centers.append((int(row["xc"]), int(row["yc"])))
                    verdicts.append(row["verdict"])
                else:  # points.csv from the pc detector
                    centers.append((int(row["x"]), int(row["y"])))
                    verdicts.append(OBSTACLE)
        counts = count_pixels(centers, verdicts, labels, args.sub, args.dwn)
        tpr, fpr = counts.tpr, counts.fpr
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tp", "fp", "sub", "dwn", "gt_obstacles",
                             "gt_freespace", "tpr", "fpr"])
            writer.writerow([counts.TP, counts.FP, counts.sub, counts.dwn,
                             counts.gt_obstacles, counts.gt_freespace,
                             repr(tpr), repr(fpr)])
        print(f"TPR={tpr:.4f} FPR={fpr:.6f} (TP={counts.TP}, FP={counts.FP})")
    else:
        stixels = _read_stixels_csv(args.pred)
        stats = instance_metrics(stixels, labels, labels.free_space,
                                 overlap_thresh=args.overlap, scale=args.dwn)
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance_id", "iTP", "iFN", "iInt"])
            for iid, (tp, fn) in sorted(stats.per_instance.items()):
                i_int = tp / (tp + fn) if tp + fn else 0.0
                writer.writerow([iid, tp, fn, repr(i_int)])
            writer.writerow(["mean", "", "", repr(stats.i_int_mean)])
            writer.writerow(["fp_stixels", stats.fp_stixels, "", ""])
        print(f"iInt={stats.i_int_mean:.4f} FP-stixels={stats.fp_stixels}")
    _write_manifest(out, "eval",
                    {"level": args.level, "sub": args.sub, "dwn": args.dwn,
                     "overlap": args.overlap},
                    [args.pred, args.labels], [out / "metrics.csv"])
    return 0


def _load_scene_dir(scene_dir: Path, dwn: int):
    left = load_pgm(scene_dir / "left.pgm")
    right = load_pgm(scene_dir / "right.pgm")
    dmap = load_pfm(scene_dir / "gt_disp.pfm")
    labels = load_label_pgm(scene_dir / "labels.pgm")
    if dwn == 2:
        left, right = downsample2(left), downsample2(right)
        dmap = downsample2_disparity(dmap)
    return left, right, dmap, labels


def _cmd_sweep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes_dir = Path(args.scenes)
    with open(args.grid, "r", encoding="utf-8") as fh:
        grid = json.load(fh)
    rig = CameraRig.from_json(scenes_dir / "calib.json")
    if args.dwn == 2:
        rig = rig.downsample(2)

    scene_dirs = sorted(p for p in scenes_dir.iterdir()
                        if p.is_dir() and p.name.startswith("scene_"))
    if not scene_dirs:
        raise FileNotFoundError(f"no scene_* directories under {scenes_dir}")

    if args.method in ("fpht", "pht"):
        dataset = [_load_scene_dir(d, args.dwn) for d in scene_dirs]
        base = DetectorConfig(dwn=args.dwn)
    else:
        dataset = []
        for d in scene_dirs:
            left, right, dmap, labels = _load_scene_dir(d, args.dwn)
            cloud = disparity_to_cloud(dmap, rig, stride=args.stride)
            dataset.append((cloud, labels, args.stride, args.dwn))
        base = None

    result = run_sweep(dataset, grid, method=args.method, base_cfg=base,
                       rig=rig, threads=args.threads)
    files = emit_report(result, out)
    inputs = [args.grid, scenes_dir / "calib.json"]
    for d in scene_dirs:
        inputs += [d / "left.pgm", d / "right.pgm", d / "gt_disp.pfm",
                   d / "labels.pgm"]
    _write_manifest(out, "sweep",
                    {"method": args.method, "grid": grid, "dwn": args.dwn,
                     "stride": args.stride},
                    inputs, list(files.values()))
    print(f"{len(result.points)} sweep points, hull of {len(result.hull)} vertices")
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = read_sweep_csv(args.sweep)
    plot_roc(result, out / "roc.svg")
    _write_manifest(out, "report", {}, [args.sweep], [out / "roc.svg"])
    print(f"rendered {out / 'roc.svg'}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="roadhazard",
                     description="Stereo road-hazard detection toolkit")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene suite")
    p.add_argument("--suite", required=True,
                   choices=["flat_easy", "far_small", "double_kink"])
    p.add_argument("--out", required=True)
    p.add_argument("--rig", choices=["paper", "small"], default="paper")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("disparity", help="block-matching disparity map")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=9)
    p.add_argument("--d-max", type=int, default=128)

    p = sub.add_parser("detect", help="per-patch GLRT or PC detection")
    p.add_argument("--method", required=True, choices=["fpht", "pht", "pc"])
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--disp", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", default="15")
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--dwn", type=int, default=1, choices=[1, 2])
    p.add_argument("--tau", type=float, default=500.0)
    p.add_argument("--phi-f", dest="phi_f", type=float, default=25.0)
    p.add_argument("--phi-o", dest="phi_o", type=float, default=45.0)
    p.add_argument("--lambda-min", dest="lambda_min", type=float, default=500.0)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=30)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--phi", type=float, default=45.0, help="PC cone angle")
    p.add_argument("--h-min", dest="h_min", type=float, default=0.1)
    p.add_argument("--h-max", dest="h_max", type=float, default=0.5)

    p = sub.add_parser("cstix", help="cluster points into stixels")
    p.add_argument("--points", required=True)
    p.add_argument("--disp", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--var-thresh", dest="var_thresh", type=float, default=4.0)
    p.add_argument("--dwn", type=int, default=1, choices=[1, 2])

    p = sub.add_parser("eval", help="pixel- or instance-level metrics")
    p.add_argument("--level", required=True, choices=["pixel", "instance"])
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sub", type=int, default=2)
    p.add_argument("--dwn", type=int, default=1)
    p.add_argument("--overlap", type=float, default=0.5)

    p = sub.add_parser("sweep", help="parameter sweep over a scene directory")
    p.add_argument("--scenes", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--method", default="fpht", choices=["fpht", "pht", "pc"])
    p.add_argument("--out", required=True)
    p.add_argument("--dwn", type=int, default=1, choices=[1, 2])
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("report", help="re-render figures from a sweep CSV")
    p.add_argument("--sweep", required=True)
    p.add_argument("--out", required=True)

    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "disparity": _cmd_disparity,
    "detect": _cmd_detect,
    "cstix": _cmd_cstix,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        return _COMMANDS[args.cmd](args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
