import math
from dataclasses import replace

import numpy as np
import pytest

from roadhazard.geometry import CameraRig
from roadhazard.imaging import bilinear_sample
from roadhazard.synth import (
    BoxObstacle,
    SceneSpec,
    photo_consistency_mask,
    render,
    road_height_at,
    scene_suite,
)

RIG = CameraRig(fx=2300.0, fy=2300.0, x0=1024.0, y0=512.0,
                baseline=0.21, width=2048, height=1024)
SMALL_RIG = CameraRig(fx=575.0, fy=575.0, x0=256.0, y0=128.0,
                      baseline=0.21, width=512, height=256)


@pytest.fixture(scope="module")
def road_only():
    return render(SceneSpec(rig=SMALL_RIG, texture_seed=1))


@pytest.fixture(scope="module")
def box_scene():
    spec = SceneSpec(rig=SMALL_RIG, texture_seed=2, obstacles=(
        BoxObstacle(0.0, 10.0, 0.6, 0.4, 0.4, 2),))
    return render(spec)


class TestRoadOnly:
    def test_everything_below_horizon_is_road(self, road_only):
        labels = road_only.labels.labels
        horizon = int(SMALL_RIG.y0)
        assert np.all(labels[horizon + 1:, :] == 1)
        assert np.all(labels[:horizon, :] == 0)

    def test_ground_disparity_matches_analytic_profile(self, road_only):
        # flat road: d(row) = fx*B*(row - y0)/(fy*hc)
        d = road_only.gt_disparity.values
        rows = np.arange(SMALL_RIG.height, dtype=float)
        expected = SMALL_RIG.fx * SMALL_RIG.baseline * (rows - SMALL_RIG.y0) / (SMALL_RIG.fy * 1.2)
        valid = road_only.gt_disparity.valid
        for row in range(int(SMALL_RIG.y0) + 1, SMALL_RIG.height):
            assert np.all(valid[row])
            assert np.max(np.abs(d[row] - expected[row])) < 1e-6

    def test_free_space_matches_labels(self, road_only):
        assert np.array_equal(road_only.free_space, road_only.labels.labels == 1)


class TestBoxScene:
    def test_box_pixels_share_instance_id(self, box_scene):
        assert box_scene.labels.instance_ids == [2]
        assert np.count_nonzero(box_scene.labels.labels == 2) > 100

    def test_box_disparity_consistent_with_geometry(self, box_scene):
        # front face sits at z = 10; top face between 10 and 10.4
        m = box_scene.labels.labels == 2
        d = box_scene.gt_disparity.values[m]
        d_far = SMALL_RIG.fx * SMALL_RIG.baseline / 10.4
        d_near = SMALL_RIG.fx * SMALL_RIG.baseline / 10.0
        assert np.all(d >= d_far - 1e-3)
        assert np.all(d <= d_near + 1e-3)
        # most pixels lie on the front face exactly
        frac_front = np.mean(np.abs(d - d_near) < 1e-9)
        assert frac_front > 0.5

    def test_obstacle_and_freespace_disjoint(self, box_scene):
        assert not np.any(box_scene.free_space & (box_scene.labels.labels == 2))

    def test_box_occludes_road(self, box_scene):
        # rows just above the box bottom edge in the same columns are box, not road
        cols = np.where(np.any(box_scene.labels.labels == 2, axis=0))[0]
        col = int(cols[len(cols) // 2])
        rows = np.where(box_scene.labels.labels[:, col] == 2)[0]
        assert rows.size >= 3


class TestDeterminismAndNoise:
    def test_bit_identical_renders(self):
        spec = SceneSpec(rig=SMALL_RIG, texture_seed=9, noise_sigma=2.0)
        a = render(spec)
        b = render(spec)
        assert np.array_equal(a.left.pixels, b.left.pixels)
        assert np.array_equal(a.right.pixels, b.right.pixels)
        assert np.array_equal(a.gt_disparity.values[a.gt_disparity.valid],
                              b.gt_disparity.values[b.gt_disparity.valid])

    def test_noise_changes_pixels_not_truth(self):
        clean = render(SceneSpec(rig=SMALL_RIG, texture_seed=9))
        noisy = render(SceneSpec(rig=SMALL_RIG, texture_seed=9, noise_sigma=2.0))
        assert not np.array_equal(clean.left.pixels, noisy.left.pixels)
        assert np.array_equal(clean.labels.labels, noisy.labels.labels)
        resid = noisy.left.pixels - clean.left.pixels
        assert abs(float(np.std(resid)) - 2.0) < 0.05


class TestPhotoConsistency:
    @pytest.mark.parametrize("fixture", ["road_only", "box_scene"])
    def test_warp_right_through_gt_reproduces_left(self, fixture, request):
        bundle = request.getfixturevalue(fixture)
        mask = photo_consistency_mask(bundle)
        assert np.count_nonzero(mask) > 10000
        d = bundle.gt_disparity.values
        errs = []
        rows, cols = np.nonzero(mask)
        sel = np.random.default_rng(0).choice(rows.size, size=5000, replace=False)
        for i in sel:
            y, x = int(rows[i]), int(cols[i])
            rec = bilinear_sample(bundle.right, x - d[y, x], y)
            errs.append(rec - bundle.left.pixels[y, x])
        rms = float(np.sqrt(np.mean(np.square(errs))))
        assert rms < 1.0


class TestRoadProfile:
    def test_flat_height(self):
        spec = SceneSpec(rig=SMALL_RIG, camera_height=1.5)
        assert road_height_at(spec, 7.0) == pytest.approx(1.5)

    def test_piecewise_heights_continuous(self):
        spec = SceneSpec(rig=SMALL_RIG, road_profile=((0.0, 0.0), (15.0, 4.0), (25.0, -4.0)))
        h15 = road_height_at(spec, 15.0)
        assert h15 == pytest.approx(1.2)
        h25 = road_height_at(spec, 25.0)
        assert h25 == pytest.approx(1.2 - 10.0 * math.tan(math.radians(4.0)))
        # approaching from below the kink agrees
        assert road_height_at(spec, 24.999) == pytest.approx(h25, abs=1e-3)

    def test_kinked_road_renders(self):
        spec = SceneSpec(rig=SMALL_RIG, texture_seed=4,
                         road_profile=((0.0, 0.0), (15.0, 4.0), (25.0, -4.0)))
        bundle = render(spec)
        assert np.count_nonzero(bundle.labels.labels == 1) > 10000


class TestSuites:
    def test_suite_sizes(self):
        assert len(scene_suite("flat_easy")) == 3
        assert len(scene_suite("far_small")) == 4
        assert len(scene_suite("double_kink")) == 3

    def test_far_small_contains_5cm_object_at_20m(self):
        scenes = scene_suite("far_small")
        found = any(
            any(o.height == 0.05 and o.center_z == 20.0 for o in s.obstacles)
            for s in scenes
        )
        assert found

    def test_every_scene_renders(self):
        small = SMALL_RIG
        for name in ("flat_easy", "far_small", "double_kink"):
            for spec in scene_suite(name, rig=small):
                bundle = render(spec)
                assert bundle.labels.instance_ids
                assert np.any(bundle.free_space)

    def test_unknown_suite_rejected(self):
        with pytest.raises(ValueError):
            scene_suite("nope")
