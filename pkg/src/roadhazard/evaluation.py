"""Pixel- and instance-level detection metrics plus parameter sweeps.

Pixel-level rates rescale the prediction counts by the squared subsampling
and downsampling factors so that subsampled detectors are comparable to
dense ground truth:

    TPR = TP * Sub^2 * Dwn^2 / GT_obstacles
    FPR = FP * Sub^2 * Dwn^2 / GT_freespace

Instance-level quality is the per-instance covered fraction
iInt = iTP / (iTP + iFN), macro-averaged over instances, against
false-positive stixels per frame (a stixel is a false positive when more
than half of its box overlaps labeled free space).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .cstix import CStix, ClusterParams, ObstaclePoint, midlevel_rep
from .geometry import CameraRig, triangulate
from .hypothesis import (
    FREE_SPACE,
    NO_DECISION,
    OBSTACLE,
    DetectorConfig,
    detect_frame,
)
from .imaging import DisparityMap, LabelMap, PatchGrid
from .point_compat import PcParams, pc_detect


class EmptyGroundTruth(ValueError):
    """Ground truth contains no obstacle or no free-space pixels."""


@dataclass(frozen=True)
class PixelCounts:
    TP: int
    FP: int
    sub: int
    dwn: int
    gt_obstacles: int
    gt_freespace: int

    def __add__(self, other: "PixelCounts") -> "PixelCounts":
        if (self.sub, self.dwn) != (other.sub, other.dwn):
            raise ValueError("cannot aggregate counts across scaling factors")
        return PixelCounts(self.TP + other.TP, self.FP + other.FP,
                           self.sub, self.dwn,
                           self.gt_obstacles + other.gt_obstacles,
                           self.gt_freespace + other.gt_freespace)

    @property
    def tpr(self) -> float:
        if self.gt_obstacles <= 0:
            raise EmptyGroundTruth("no obstacle pixels in ground truth")
        return self.TP * self.sub**2 * self.dwn**2 / self.gt_obstacles

    @property
    def fpr(self) -> float:
        if self.gt_freespace <= 0:
            raise EmptyGroundTruth("no free-space pixels in ground truth")
        return self.FP * self.sub**2 * self.dwn**2 / self.gt_freespace


@dataclass(frozen=True)
class InstanceStats:
    #: per instance id: (iTP, iFN)
    per_instance: dict
    fp_stixels: int

    @property
    def i_int_mean(self) -> float:
        if not self.per_instance:
            return 0.0
        vals = [tp / (tp + fn) if tp + fn else 0.0
                for tp, fn in self.per_instance.values()]
        return float(np.mean(vals))


@dataclass(frozen=True)
class RocPoint:
    fpr: float
    tpr: float
    config: dict


@dataclass(frozen=True)
class SweepResult:
    points: list
    hull: list


def count_pixels(centers, verdicts, labels: LabelMap, sub: int, dwn: int) -> PixelCounts:
    """TP/FP counts for patch-center predictions against full-res labels.

    A center predicting obstacle counts TP on an obstacle-labeled pixel and
    FP on free space; centers on unlabeled pixels are ignored, as are
    free-space and no-decision outputs.
    """
    lab = labels.labels
    tp = fp = 0
    for (x, y), verdict in zip(centers, verdicts):
        if verdict != OBSTACLE:
            continue
        l = lab[y * dwn, x * dwn]
        if l >= 2:
            tp += 1
        elif l == 1:
            fp += 1
    return PixelCounts(TP=tp, FP=fp, sub=sub, dwn=dwn,
                       gt_obstacles=int(np.count_nonzero(lab >= 2)),
                       gt_freespace=int(np.count_nonzero(lab == 1)))


def pixel_rates(counts: PixelCounts) -> tuple[float, float]:
    """(TPR, FPR) from aggregated counts."""
    return counts.tpr, counts.fpr


def roc_hull(points) -> list:
    """Upper-left convex hull of (FPR, TPR) points, anchored at (0,0), (1,1)."""
    if not points:
        raise ValueError("need at least one point")
    pts = {(0.0, 0.0), (1.0, 1.0)}
    for p in points:
        if isinstance(p, RocPoint):
            pts.add((p.fpr, p.tpr))
        else:
            pts.add((float(p[0]), float(p[1])))
    ordered = sorted(pts)
    hull = []
    for p in ordered:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def instance_metrics(stixels, labels: LabelMap, free_space: np.ndarray,
                     overlap_thresh: float = 0.5, scale: int = 1) -> InstanceStats:
    """Per-instance coverage and the FP-stixel count for one frame.

    Stixel boxes given at detector resolution are scaled by `scale` to the
    label resolution.  A stixel is a false positive when the free-space
    fraction of its box exceeds overlap_thresh (strictly).
    """
    lab = labels.labels
    h, w = lab.shape
    covered = np.zeros_like(lab, dtype=bool)
    fp = 0
    for s in stixels:
        u0 = max(0, s.u * scale)
        u1 = min(w, (s.u + s.width) * scale)
        v0 = max(0, s.v_top * scale)
        v1 = min(h, (s.v_bottom + 1) * scale)
        if u1 <= u0 or v1 <= v0:
            continue
        box_free = np.count_nonzero(free_space[v0:v1, u0:u1])
        area = (u1 - u0) * (v1 - v0)
        if box_free / area > overlap_thresh:
            fp += 1
        covered[v0:v1, u0:u1] = True
    per_instance = {}
    for iid in labels.instance_ids:
        mask = lab == iid
        tp = int(np.count_nonzero(mask & covered))
        per_instance[iid] = (tp, int(np.count_nonzero(mask)) - tp)
    return InstanceStats(per_instance=per_instance, fp_stixels=fp)


# ---------------------------------------------------------------------------
# sweeps


def decisions_to_points(decisions, rig: CameraRig, source: str) -> list:
    """Obstacle-verdict patch centers as 3D points for the mid-level stage."""
    pts = []
    for d in decisions:
        if d.verdict != OBSTACLE:
            continue
        if source == "fpht":
            disp = d.fit_o.params.b
        else:
            from .geometry import BehindCamera, plane_to_disparity_line
            try:
                disp = plane_to_disparity_line(d.fit_o.params, rig, d.patch).b
            except BehindCamera:
                continue
        if disp <= 0:
            continue
        X, Y, Z = triangulate(float(d.patch.xc), float(d.patch.yc), float(disp), rig)
        pts.append(ObstaclePoint(x=d.patch.xc, y=d.patch.yc, X=X, Y=Y, Z=Z,
                                 disparity=float(disp), source=source))
    return pts


def _config_product(grid: dict):
    """Cross product over list-valued grid entries (tau handled separately)."""
    keys = [k for k in sorted(grid) if k != "tau"]
    lists = [grid[k] if isinstance(grid[k], (list, tuple)) else [grid[k]]
             for k in keys]
    for combo in itertools.product(*lists):
        yield dict(zip(keys, combo))


def run_sweep(dataset, grid: dict, method: str = "fpht",
              base_cfg: DetectorConfig = None, rig: CameraRig = None,
              threads: int = 1) -> SweepResult:
    """Evaluate every grid configuration over all frames.

    `dataset` is a list of (left, right, dmap_init, labels) tuples at
    detector resolution plus full-resolution labels.  For the patch-based
    methods the expensive fits are computed once per non-tau configuration
    and reused across the tau list.
    """
    if not dataset:
        raise ValueError("empty dataset")
    base_cfg = base_cfg or DetectorConfig()
    taus = grid.get("tau", [base_cfg.tau])
    if not isinstance(taus, (list, tuple)):
        taus = [taus]

    points = []
    for combo in _config_product(grid):
        if method in ("fpht", "pht"):
            cfg = replace(base_cfg, **{k: v for k, v in combo.items()})
            per_tau = {t: None for t in taus}
            for left, right, dmap, labels in dataset:
                grid_ = PatchGrid.cover(left.width, left.height, cfg.patch_w,
                                        cfg.patch_h, cfg.stride, cfg.dwn)
                decisions = detect_frame(left, right, dmap, grid_, cfg, rig,
                                         method=method, threads=threads)
                centers = [(d.patch.xc, d.patch.yc) for d in decisions]
                for t in taus:
                    verdicts = [
                        NO_DECISION if d.verdict == NO_DECISION
                        else (OBSTACLE if d.statistic > t else FREE_SPACE)
                        for d in decisions
                    ]
                    c = count_pixels(centers, verdicts, labels, cfg.stride, cfg.dwn)
                    per_tau[t] = c if per_tau[t] is None else per_tau[t] + c
            for t in taus:
                cnt = per_tau[t]
                points.append(RocPoint(fpr=cnt.fpr, tpr=cnt.tpr,
                                       config={**combo, "tau": t, "method": method}))
        elif method == "pc":
            pars = PcParams(**{k: v for k, v in combo.items()})
            total = None
            for cloud, labels, sub, dwn in dataset:
                res = pc_detect(cloud, rig, pars)
                centers = [(p.x, p.y) for p in cloud]
                verdicts = [OBSTACLE if f else FREE_SPACE for f in res.obstacle]
                c = count_pixels(centers, verdicts, labels, sub, dwn)
                total = c if total is None else total + c
            points.append(RocPoint(fpr=total.fpr, tpr=total.tpr,
                                   config={**combo, "method": "pc"}))
        else:
            raise ValueError(f"unknown method {method!r}")

    hull = roc_hull(points)
    return SweepResult(points=points, hull=hull)
