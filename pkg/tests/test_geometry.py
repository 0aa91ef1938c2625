import math

import numpy as np
import pytest

from roadhazard.geometry import (
    GROUND_NORMAL,
    FRONTO_NORMAL,
    BehindCamera,
    CameraRig,
    DegenerateLine,
    DisparityLine,
    NonFphtPlane,
    NonPositiveDisparity,
    PatchSpec,
    Plane3D,
    apply_homography,
    disparity_line_to_plane,
    homography_from_plane,
    plane_to_disparity_line,
    project,
    project_onto_wedge,
    rotate_pitch,
    triangulate,
    wedge_for_hypothesis,
)

RIG = CameraRig(fx=2300.0, fy=2300.0, x0=1024.0, y0=512.0,
                baseline=0.21, width=2048, height=1024)


def fit_line_by_projection(plane, rig, patch):
    """Independent oracle: intersect patch-column rays with the plane, project
    through both pinhole cameras and fit a line to the resulting disparities."""
    ys = np.arange(patch.yc - patch.half_h, patch.yc + patch.half_h + 1, dtype=float)
    ry = (ys - rig.y0) / rig.fy
    # ray P = Z * (rx, ry, 1) hits n.P + d = 0  =>  Z = -d / (n . dir)
    rx = (patch.xc - rig.x0) / rig.fx
    denom = plane.nx * rx + plane.ny * ry + plane.nz
    Z = -plane.d / denom
    X = rx * Z
    Y = ry * Z
    # pinhole projections of (X, Y, Z) into both cameras
    xl = rig.x0 + rig.fx * X / Z
    xr = rig.x0 + rig.fx * (X - rig.baseline) / Z
    disp = xl - xr
    ybar = (patch.yc - ys) / (patch.h / 2.0)
    A = np.stack([ybar, np.ones_like(ybar)], axis=1)
    coef, *_ = np.linalg.lstsq(A, disp, rcond=None)
    return coef[0], coef[1]


def canonical_plane(ny, nz, d):
    norm = math.hypot(ny, nz)
    return Plane3D(0.0, ny / norm, nz / norm, d)


class TestPlaneToLine:
    def test_fronto_parallel_plane_at_ten_meters(self):
        patch = PatchSpec(xc=1024, yc=600, w=15, h=15)
        plane = Plane3D(0.0, 0.0, -1.0, 10.0)
        line = plane_to_disparity_line(plane, RIG, patch)
        a_ref, b_ref = fit_line_by_projection(plane, RIG, patch)
        assert line.a == pytest.approx(a_ref, abs=1e-9)
        assert line.b == pytest.approx(b_ref, abs=1e-9)
        assert line.a == pytest.approx(0.0, abs=1e-12)
        assert line.b == pytest.approx(RIG.fx * RIG.baseline / 10.0, rel=1e-12)
        assert line.b == pytest.approx(48.3, abs=1e-9)

    def test_ground_plane_slope(self):
        # per-row disparity slope of the ground is fx*B/(fy*hc); in normalized
        # coordinates a = -(h/2) * that slope
        patch = PatchSpec(xc=700, yc=800, w=15, h=15)
        hc = 1.2
        plane = Plane3D(0.0, -1.0, 0.0, hc)
        line = plane_to_disparity_line(plane, RIG, patch)
        slope_per_row = RIG.fx * RIG.baseline / (RIG.fy * hc)
        assert slope_per_row == pytest.approx(0.175, abs=1e-4)
        assert line.a == pytest.approx(-(patch.h / 2.0) * slope_per_row, rel=1e-12)
        a_ref, b_ref = fit_line_by_projection(plane, RIG, patch)
        assert line.a == pytest.approx(a_ref, rel=1e-9)
        assert line.b == pytest.approx(b_ref, rel=1e-9)

    def test_zero_ny_gives_zero_slope(self):
        patch = PatchSpec(xc=300, yc=400, w=9, h=11)
        for d in (3.0, 17.5, 60.0):
            line = plane_to_disparity_line(Plane3D(0.0, 0.0, -1.0, d), RIG, patch)
            assert line.a == 0.0

    def test_rejects_lateral_normal(self):
        patch = PatchSpec(xc=1024, yc=600, w=15, h=15)
        n = np.array([0.3, -0.6, -0.5])
        n /= np.linalg.norm(n)
        with pytest.raises(NonFphtPlane):
            plane_to_disparity_line(Plane3D(*n, 10.0), RIG, patch)

    def test_rejects_plane_behind_camera(self):
        patch = PatchSpec(xc=1024, yc=600, w=15, h=15)
        with pytest.raises(BehindCamera):
            plane_to_disparity_line(Plane3D(0.0, 0.0, 1.0, 10.0), RIG, patch)


class TestLineToPlane:
    def test_inverse_of_fronto_parallel(self):
        patch = PatchSpec(xc=1024, yc=600, w=15, h=15)
        plane = disparity_line_to_plane(DisparityLine(0.0, 48.3), RIG, patch)
        assert plane.nx == 0.0
        assert plane.ny == pytest.approx(0.0, abs=1e-12)
        assert plane.nz == pytest.approx(-1.0, rel=1e-12)
        assert plane.d == pytest.approx(10.0, rel=1e-9)

    def test_round_trip_on_random_planes(self):
        rng = np.random.default_rng(7)
        patch = PatchSpec(xc=900, yc=700, w=15, h=15)
        done = 0
        while done < 1000:
            pitch = rng.uniform(-0.6, 0.6)
            ref = GROUND_NORMAL if rng.integers(2) else FRONTO_NORMAL
            ny, nz = rotate_pitch(ref[1], ref[2], pitch)
            d = float(np.exp(rng.uniform(np.log(0.5), np.log(80.0))))
            plane = canonical_plane(ny, nz, d)
            try:
                line = plane_to_disparity_line(plane, RIG, patch)
            except BehindCamera:
                continue
            back = disparity_line_to_plane(line, RIG, patch)
            assert back.ny == pytest.approx(plane.ny, abs=1e-9)
            assert back.nz == pytest.approx(plane.nz, abs=1e-9)
            assert back.d == pytest.approx(plane.d, rel=1e-9)
            again = plane_to_disparity_line(back, RIG, patch)
            assert again.a == pytest.approx(line.a, rel=1e-9, abs=1e-12)
            assert again.b == pytest.approx(line.b, rel=1e-9)
            done += 1

    def test_degenerate_lines(self):
        patch = PatchSpec(xc=1024, yc=600, w=15, h=15)
        with pytest.raises(DegenerateLine):
            disparity_line_to_plane(DisparityLine(0.3, 0.0), RIG, patch)
        with pytest.raises(DegenerateLine):
            disparity_line_to_plane(DisparityLine(0.0, -2.0), RIG, patch)


class TestWedge:
    def test_ground_truth_inside_free_space_wedge(self):
        # any plane pitched <= 25 deg from horizontal that is visible at the
        # patch must land inside the free-space wedge
        rng = np.random.default_rng(3)
        ref = Plane3D(*GROUND_NORMAL, 1.2)
        for yc in (560, 700, 900, 1000):
            patch = PatchSpec(xc=1024, yc=yc, w=15, h=15)
            wedge = wedge_for_hypothesis(ref, 25.0, RIG, patch)
            for _ in range(200):
                pitch = rng.uniform(-25.0, 25.0)
                ny, nz = rotate_pitch(ref.ny, ref.nz, math.radians(pitch))
                d = float(rng.uniform(0.5, 5.0))
                try:
                    line = plane_to_disparity_line(canonical_plane(ny, nz, d), RIG, patch)
                except BehindCamera:
                    continue
                assert wedge.contains(line.a, line.b, tol=1e-9)

    def test_obstacle_wedge_symmetric_at_principal_row(self):
        patch = PatchSpec(xc=1024, yc=512 + 7, w=15, h=15)
        # place the patch center exactly on y0 by using an odd-offset rig
        rig = CameraRig(fx=2300.0, fy=2300.0, x0=1024.0, y0=519.0,
                        baseline=0.21, width=2048, height=1024)
        wedge = wedge_for_hypothesis(Plane3D(*FRONTO_NORMAL, 10.0), 45.0, rig, patch)
        assert wedge.c_hi == pytest.approx(-wedge.c_lo, rel=1e-9)
        assert wedge.c_hi == pytest.approx((patch.h / 2.0) / rig.fy, rel=1e-9)

    def test_zero_deviation_collapses_to_line(self):
        patch = PatchSpec(xc=1024, yc=700, w=15, h=15)
        ref = Plane3D(*GROUND_NORMAL, 1.2)
        wedge = wedge_for_hypothesis(ref, 1e-9, RIG, patch)
        assert wedge.c_lo == pytest.approx(wedge.c_hi, abs=1e-10)
        line = plane_to_disparity_line(ref, RIG, patch)
        assert line.a == pytest.approx(wedge.c_hi * line.b, rel=1e-6)

    def test_wedge_boundaries_match_rotated_normals(self):
        # boundary constants must equal the exact line ratio of the rotated
        # reference normals whenever those normals stay visible
        patch = PatchSpec(xc=1024, yc=900, w=15, h=15)
        ref = Plane3D(*FRONTO_NORMAL, 10.0)
        wedge = wedge_for_hypothesis(ref, 45.0, RIG, patch)
        cs = []
        for sign in (-1.0, 1.0):
            ny, nz = rotate_pitch(ref.ny, ref.nz, sign * math.radians(45.0))
            line = plane_to_disparity_line(canonical_plane(ny, nz, 10.0), RIG, patch)
            cs.append(line.a / line.b)
        assert min(cs) == pytest.approx(wedge.c_lo, rel=1e-9)
        assert max(cs) == pytest.approx(wedge.c_hi, rel=1e-9)


class TestWedgeProjection:
    def make_wedge(self):
        patch = PatchSpec(xc=1024, yc=800, w=15, h=15)
        return wedge_for_hypothesis(Plane3D(*GROUND_NORMAL, 1.2), 25.0, RIG, patch)

    def test_interior_point_unchanged(self):
        wedge = self.make_wedge()
        mid = 0.5 * (wedge.theta_lo + wedge.theta_hi)
        p = (5.0 * math.cos(mid), 5.0 * math.sin(mid))
        assert project_onto_wedge(p, wedge) == p

    def test_projection_onto_b_axis(self):
        wedge = FeasibleWedgeLike()
        assert project_onto_wedge((1.0, 1.0), wedge) == pytest.approx((0.0, 1.0))

    def test_random_exterior_points(self):
        # brute-force oracle: nearest point among the two boundary rays and apex
        rng = np.random.default_rng(11)
        wedge = self.make_wedge()
        ts = np.linspace(0.0, 40.0, 20001)
        for _ in range(1000):
            p = (float(rng.uniform(-30, 30)), float(rng.uniform(-30, 30)))
            if wedge.contains(*p):
                continue
            q = project_onto_wedge(p, wedge)
            assert wedge.contains(*q, tol=1e-9)
            best = min(
                np.min((p[0] - ts * ua) ** 2 + (p[1] - ts * ub) ** 2)
                for ua, ub in (wedge.dir_lo, wedge.dir_hi)
            )
            got = (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2
            assert got <= best + 1e-6
            q2 = project_onto_wedge(q, wedge)
            assert q2 == q


def FeasibleWedgeLike():
    """Wedge whose violated upper boundary is a = 0 (the b-axis)."""
    from roadhazard.geometry import FeasibleWedge
    return FeasibleWedge(c_lo=-1.0, c_hi=0.0,
                         theta_lo=math.pi / 2.0, theta_hi=3.0 * math.pi / 4.0)


class TestHomography:
    def test_plane_at_infinity_limit(self):
        H = homography_from_plane(Plane3D(0.0, 0.0, -1.0, 1e12), RIG)
        assert np.allclose(H, np.eye(3), atol=1e-9)

    def test_fronto_parallel_pure_shift(self):
        H = homography_from_plane(Plane3D(0.0, 0.0, -1.0, 10.0), RIG)
        xs = np.array([100.0, 1024.0, 1900.0])
        ys = np.array([80.0, 512.0, 1000.0])
        xp, yp = apply_homography(H, xs, ys)
        assert np.allclose(xp, xs - 48.3, atol=1e-9)
        assert np.allclose(yp, ys, atol=1e-9)

    def test_ground_plane_row_preserving(self):
        H = homography_from_plane(Plane3D(*GROUND_NORMAL, 1.2), RIG)
        rng = np.random.default_rng(5)
        xs = rng.uniform(0, RIG.width - 1, 50)
        ys = rng.uniform(RIG.y0 + 10, RIG.height - 1, 50)
        _, yp = apply_homography(H, xs, ys)
        assert np.max(np.abs(yp - ys)) < 1e-9

    def test_matches_triangulation(self):
        # warp of a ground pixel equals x - fx*B/Z with Z from the ray-plane hit
        hc = 1.3
        H = homography_from_plane(Plane3D(*GROUND_NORMAL, hc), RIG)
        y = 900.0
        Z = RIG.fy * hc / (y - RIG.y0)
        xp, _ = apply_homography(H, 1200.0, y)
        assert xp == pytest.approx(1200.0 - RIG.fx * RIG.baseline / Z, abs=1e-9)


class TestTriangulate:
    def test_principal_point_example(self):
        X, Y, Z = triangulate(1024.0, 512.0, 48.3, RIG)
        assert (X, Y, Z) == pytest.approx((0.0, 0.0, 10.0))

    def test_projection_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            Z = float(rng.uniform(0.5, 120.0))
            X = float(rng.uniform(-20, 20))
            Y = float(rng.uniform(-5, 20))
            x, y, d = project(X, Y, Z, RIG)
            Xb, Yb, Zb = triangulate(x, y, d, RIG)
            assert Zb == pytest.approx(Z, rel=1e-9)
            assert Xb == pytest.approx(X, rel=1e-9, abs=1e-12)
            assert Yb == pytest.approx(Y, rel=1e-9, abs=1e-12)

    def test_rejects_non_positive_disparity(self):
        with pytest.raises(NonPositiveDisparity):
            triangulate(100.0, 100.0, 0.0, RIG)
        with pytest.raises(NonPositiveDisparity):
            triangulate(100.0, 100.0, -3.0, RIG)


class TestRigIO:
    def test_json_round_trip(self, tmp_path):
        path = tmp_path / "calib.json"
        RIG.to_json(path)
        back = CameraRig.from_json(path)
        assert back == RIG

    def test_downsample_preserves_angles(self):
        half = RIG.downsample(2)
        assert half.fx == RIG.fx / 2
        assert half.width == RIG.width // 2
        # a full-res pixel center maps to ((x - 0.5) / 2) in the half-res grid
        assert half.x0 == pytest.approx((RIG.x0 - 0.5) / 2)
