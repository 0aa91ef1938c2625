import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from roadhazard.cstix import CStix
from roadhazard.evaluation import (
    EmptyGroundTruth,
    InstanceStats,
    PixelCounts,
    RocPoint,
    SweepResult,
    count_pixels,
    instance_metrics,
    pixel_rates,
    roc_hull,
    run_sweep,
)
from roadhazard.geometry import CameraRig
from roadhazard.hypothesis import FREE_SPACE, NO_DECISION, OBSTACLE, DetectorConfig
from roadhazard.imaging import LabelMap
from roadhazard.report import (
    emit_report,
    plot_roc,
    read_sweep_csv,
    write_sweep_csv,
)
from roadhazard.synth import BoxObstacle, SceneSpec, render

SMALL_RIG = CameraRig(fx=575.0, fy=575.0, x0=256.0, y0=128.0,
                      baseline=0.21, width=512, height=256)


class TestPixelCounts:
    def test_direct_substitution(self):
        c = PixelCounts(TP=250, FP=0, sub=2, dwn=1, gt_obstacles=4000, gt_freespace=1)
        assert c.tpr == pytest.approx(0.25)

    def test_zero_predictions(self):
        c = PixelCounts(TP=0, FP=0, sub=2, dwn=2, gt_obstacles=100, gt_freespace=100)
        assert pixel_rates(c) == (0.0, 0.0)

    def test_homogeneity(self):
        a = PixelCounts(TP=10, FP=3, sub=2, dwn=1, gt_obstacles=100, gt_freespace=50)
        b = PixelCounts(TP=20, FP=6, sub=2, dwn=1, gt_obstacles=200, gt_freespace=100)
        assert a.tpr == pytest.approx(b.tpr)
        assert a.fpr == pytest.approx(b.fpr)

    def test_aggregation_equals_sum(self):
        a = PixelCounts(TP=10, FP=3, sub=2, dwn=1, gt_obstacles=100, gt_freespace=50)
        b = PixelCounts(TP=5, FP=1, sub=2, dwn=1, gt_obstacles=80, gt_freespace=60)
        tot = a + b
        assert (tot.TP, tot.FP) == (15, 4)
        assert (tot.gt_obstacles, tot.gt_freespace) == (180, 110)

    def test_empty_ground_truth(self):
        c = PixelCounts(TP=1, FP=0, sub=1, dwn=1, gt_obstacles=0, gt_freespace=10)
        with pytest.raises(EmptyGroundTruth):
            _ = c.tpr


class TestCountPixels:
    def test_hand_built_map(self):
        labels = np.zeros((20, 20), dtype=np.int32)
        labels[10:, :] = 1
        labels[2:6, 2:6] = 2
        lmap = LabelMap(labels)
        centers = [(3, 3), (4, 5), (3, 12), (1, 1), (8, 8)]
        verdicts = [OBSTACLE, OBSTACLE, OBSTACLE, OBSTACLE, FREE_SPACE]
        c = count_pixels(centers, verdicts, lmap, sub=1, dwn=1)
        # (3,3),(4,5) hit the instance, (3,12) hits free space, (1,1) is
        # unlabeled and ignored, (8,8) is not an obstacle prediction
        assert (c.TP, c.FP) == (2, 1)
        assert c.gt_obstacles == 16
        assert c.gt_freespace == 200

    def test_downsampled_lookup(self):
        labels = np.zeros((20, 20), dtype=np.int32)
        labels[10:12, 10:12] = 2
        labels[0:10, :] = 1
        lmap = LabelMap(labels)
        c = count_pixels([(5, 5)], [OBSTACLE], lmap, sub=1, dwn=2)
        assert (c.TP, c.FP) == (1, 0)


class TestRocHull:
    def test_single_point(self):
        hull = roc_hull([(0.2, 0.6)])
        assert hull == [(0.0, 0.0), (0.2, 0.6), (1.0, 1.0)]

    def test_dominated_point_excluded(self):
        hull = roc_hull([(0.1, 0.5), (0.2, 0.4)])
        assert (0.2, 0.4) not in hull
        assert (0.1, 0.5) in hull

    def test_idempotent(self):
        pts = [(0.1, 0.3), (0.3, 0.8), (0.5, 0.7), (0.7, 0.95)]
        hull = roc_hull(pts)
        assert roc_hull(hull) == hull

    def test_dominates_all_inputs(self):
        rng = np.random.default_rng(0)
        pts = [(float(f), float(t)) for f, t in rng.uniform(0, 1, size=(50, 2))]
        hull = roc_hull(pts)
        xs = np.array([p[0] for p in hull])
        ys = np.array([p[1] for p in hull])
        assert np.all(np.diff(xs) >= 0)
        assert np.all(np.diff(ys) >= 0)
        for fx, fy in pts:
            y_on = np.interp(fx, xs, ys)
            assert fy <= y_on + 1e-12


class TestInstanceMetrics:
    def make_labels(self):
        labels = np.zeros((40, 40), dtype=np.int32)
        labels[30:, :] = 1
        labels[10:20, 10:20] = 2
        return LabelMap(labels)

    def test_coverage_ratio(self):
        lmap = self.make_labels()
        # stixel covering 60 of the instance's 100 pixels
        stx = [CStix(cluster_id=0, u=10, width=10, v_top=10, v_bottom=15,
                     median_disparity=10.0, Z=10.0)]
        stats = instance_metrics(stx, lmap, lmap.free_space)
        tp, fn = stats.per_instance[2]
        assert (tp, fn) == (60, 40)
        assert stats.i_int_mean == pytest.approx(0.6)

    def test_fp_rule_fires_strictly_above_half(self):
        lmap = self.make_labels()
        free = lmap.free_space
        # rows 25..34: free rows 30..34 -> exactly 0.5, not FP
        at_half = CStix(cluster_id=0, u=0, width=4, v_top=25, v_bottom=34,
                        median_disparity=10.0, Z=10.0)
        # rows 26..35: free rows 30..35 -> 0.6, FP
        above = CStix(cluster_id=0, u=0, width=4, v_top=26, v_bottom=35,
                      median_disparity=10.0, Z=10.0)
        assert np.count_nonzero(free[25:35, 0:4]) / 40 == pytest.approx(0.5)
        assert instance_metrics([at_half], lmap, free).fp_stixels == 0
        assert np.count_nonzero(free[26:36, 0:4]) / 40 == pytest.approx(0.6)
        assert instance_metrics([above], lmap, free).fp_stixels == 1

    def test_no_stixels(self):
        lmap = self.make_labels()
        stats = instance_metrics([], lmap, lmap.free_space)
        assert stats.fp_stixels == 0
        assert stats.i_int_mean == 0.0
        assert stats.per_instance[2] == (0, 100)

    def test_order_invariance(self):
        lmap = self.make_labels()
        stx = [
            CStix(0, 10, 5, 10, 14, 10.0, 10.0),
            CStix(0, 15, 5, 12, 19, 10.0, 10.0),
            CStix(1, 2, 4, 30, 39, 10.0, 10.0),
        ]
        a = instance_metrics(stx, lmap, lmap.free_space)
        b = instance_metrics(list(reversed(stx)), lmap, lmap.free_space)
        assert a == b


@pytest.fixture(scope="module")
def sweep_dataset():
    bundle = render(SceneSpec(rig=SMALL_RIG, texture_seed=70, noise_sigma=1.0,
                              obstacles=(BoxObstacle(0.0, 10.0, 1.2, 0.8, 0.4, 2),)))
    return [(bundle.left, bundle.right, bundle.gt_disparity, bundle.labels)]


class TestRunSweep:
    def test_single_config_single_point(self, sweep_dataset):
        cfg = DetectorConfig(patch_w=11, patch_h=11, stride=8)
        res = run_sweep(sweep_dataset, {"tau": [100.0]}, method="fpht",
                        base_cfg=cfg, rig=SMALL_RIG)
        assert len(res.points) == 1
        assert res.hull[0] == (0.0, 0.0)
        assert res.hull[-1] == (1.0, 1.0)

    def test_tau_sweep_monotone(self, sweep_dataset):
        cfg = DetectorConfig(patch_w=11, patch_h=11, stride=8)
        taus = [20.0, 100.0, 500.0, 2500.0, 12500.0]
        res = run_sweep(sweep_dataset, {"tau": taus}, method="fpht",
                        base_cfg=cfg, rig=SMALL_RIG)
        by_tau = {p.config["tau"]: p for p in res.points}
        tprs = [by_tau[t].tpr for t in taus]
        fprs = [by_tau[t].fpr for t in taus]
        assert all(a >= b - 1e-12 for a, b in zip(tprs, tprs[1:]))
        assert all(a >= b - 1e-12 for a, b in zip(fprs, fprs[1:]))

    def test_sweep_deterministic(self, sweep_dataset):
        cfg = DetectorConfig(patch_w=11, patch_h=11, stride=16)
        grid = {"tau": [50.0, 200.0]}
        a = run_sweep(sweep_dataset, grid, method="fpht", base_cfg=cfg, rig=SMALL_RIG)
        b = run_sweep(sweep_dataset, grid, method="fpht", base_cfg=cfg, rig=SMALL_RIG)
        assert [(p.fpr, p.tpr) for p in a.points] == [(p.fpr, p.tpr) for p in b.points]


class TestReport:
    def test_csv_round_trip(self, tmp_path):
        pts = [RocPoint(fpr=0.125, tpr=1 / 3, config={"tau": 5.0, "method": "fpht"}),
               RocPoint(fpr=0.0, tpr=0.9999999999999999, config={"tau": 7.0})]
        res = SweepResult(points=pts, hull=roc_hull(pts))
        path = tmp_path / "sweep.csv"
        write_sweep_csv(res, path)
        back = read_sweep_csv(path)
        for orig, rt in zip(pts, back.points):
            assert rt.fpr == orig.fpr
            assert rt.tpr == orig.tpr
            assert rt.config == orig.config

    def test_empty_sweep_header_only(self, tmp_path):
        res = SweepResult(points=[], hull=[])
        path = tmp_path / "empty.csv"
        write_sweep_csv(res, path)
        lines = path.read_text().strip().splitlines()
        assert lines == ["config_hash,config,fpr,tpr"]

    def test_svg_well_formed(self, tmp_path):
        pts = [RocPoint(fpr=0.1, tpr=0.5, config={"tau": 5.0})]
        res = SweepResult(points=pts, hull=roc_hull(pts))
        path = tmp_path / "roc.svg"
        plot_roc(res, path)
        root = ET.parse(path).getroot()
        assert root.tag.endswith("svg")
        assert root.get("width") == "800pt" or "800" in root.get("width")

    def test_emit_report_writes_both(self, tmp_path):
        pts = [RocPoint(fpr=0.1, tpr=0.5, config={"tau": 5.0})]
        res = SweepResult(points=pts, hull=roc_hull(pts))
        files = emit_report(res, tmp_path / "out")
        assert (tmp_path / "out" / "sweep.csv").exists()
        assert (tmp_path / "out" / "roc.svg").exists()
        assert set(files) == {"csv", "svg"}
