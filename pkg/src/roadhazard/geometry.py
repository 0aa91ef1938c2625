"""Camera model and the plane <-> disparity-line duality for rectified stereo.

Conventions used throughout the package:

* camera frame: X right, Y down, Z forward; image y grows downward
* a plane with unit normal n and offset d contains the points P with
  n . P + d = 0; for planes visible in front of the camera with the normal
  facing the camera, d > 0 and equals the normal distance from the origin
  (e.g. the camera height above the ground plane)
* the right camera sits at (B, 0, 0), so disparity d = fx * B / Z > 0
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


class NonFphtPlane(ValueError):
    """Plane has a lateral normal component and no disparity-line form."""


class BehindCamera(ValueError):
    """Plane would produce a non-positive disparity at the patch center."""


class DegenerateLine(ValueError):
    """Disparity line has no corresponding finite plane in front of the camera."""


class SingularReference(ValueError):
    """No visible plane satisfies the hypothesis bounds at this patch."""


class NonPositiveDisparity(ValueError):
    """Triangulation requires disparity > 0."""


#: up-pointing ground normal (free-space reference orientation)
GROUND_NORMAL = (0.0, -1.0, 0.0)
#: camera-facing fronto-parallel normal (obstacle reference orientation)
FRONTO_NORMAL = (0.0, 0.0, -1.0)


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo intrinsics and baseline."""

    fx: float
    fy: float
    x0: float
    y0: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        if min(self.fx, self.fy, self.baseline) <= 0:
            raise ValueError("focal lengths and baseline must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @classmethod
    def from_json(cls, path) -> "CameraRig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            fx=float(raw["fx"]),
            fy=float(raw["fy"]),
            x0=float(raw["x0"]),
            y0=float(raw["y0"]),
            baseline=float(raw["baseline_m"]),
            width=int(raw["width"]),
            height=int(raw["height"]),
        )

    def to_json(self, path) -> None:
        payload = {
            "fx": self.fx,
            "fy": self.fy,
            "x0": self.x0,
            "y0": self.y0,
            "baseline_m": self.baseline,
            "width": self.width,
            "height": self.height,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def downsample(self, factor: int = 2) -> "CameraRig":
        """Rig matching a box-downsampled image (pixel centers shift by (f-1)/2)."""
        f = float(factor)
        shift = (f - 1.0) / 2.0
        return CameraRig(
            fx=self.fx / f,
            fy=self.fy / f,
            x0=(self.x0 - shift) / f,
            y0=(self.y0 - shift) / f,
            baseline=self.baseline,
            width=self.width // factor,
            height=self.height // factor,
        )


@dataclass(frozen=True)
class Plane3D:
    """Plane n . P + d = 0 with unit normal n = (nx, ny, nz)."""

    nx: float
    ny: float
    nz: float
    d: float

    def __post_init__(self):
        norm = math.sqrt(self.nx**2 + self.ny**2 + self.nz**2)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"normal must be unit length, got |n| = {norm}")
        if self.d == 0.0:
            raise ValueError("plane through the optical center (d = 0)")

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.nx, self.ny, self.nz])


@dataclass(frozen=True)
class DisparityLine:
    """Disparity d(ybar) = a * ybar + b over a patch, ybar = (yc - y) / (h/2)."""

    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("disparity line parameters must be finite")


@dataclass(frozen=True)
class PatchSpec:
    """Odd-sized pixel patch centered at (xc, yc)."""

    xc: int
    yc: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 3 or self.h < 3 or self.w % 2 == 0 or self.h % 2 == 0:
            raise ValueError("patch dimensions must be odd and >= 3")

    @property
    def half_w(self) -> int:
        return (self.w - 1) // 2

    @property
    def half_h(self) -> int:
        return (self.h - 1) // 2

    def ybar(self, y) -> float:
        """Normalized vertical coordinate of image row y inside the patch."""
        return (self.yc - y) / (self.h / 2.0)


def rotate_pitch(ny: float, nz: float, phi_rad: float) -> tuple[float, float]:
    """Rotate a Y-Z normal component pair about the X axis by phi_rad."""
    c, s = math.cos(phi_rad), math.sin(phi_rad)
    return ny * c - nz * s, ny * s + nz * c


def pitch_between(ny, nz, ref_ny, ref_nz) -> float:
    """Signed pitch angle taking the reference normal onto (ny, nz)."""
    return math.atan2(nz * ref_ny - ny * ref_nz, ny * ref_ny + nz * ref_nz)


def _line_direction(ny, nz, rig: CameraRig, patch: PatchSpec):
    """(a, b) direction generated by a unit normal (0, ny, nz) as 1/d varies.

    A plane (0, ny, nz; d) maps to (a, b) = (B/d) * (ga, gb); the ray through
    (ga, gb) is therefore the locus of all planes sharing that orientation.
    """
    ga = 0.5 * patch.h * (rig.fx / rig.fy) * ny
    gb = -(ny * (patch.yc - rig.y0) * rig.fx / rig.fy + nz * rig.fx)
    return ga, gb


def plane_to_disparity_line(plane: Plane3D, rig: CameraRig, patch: PatchSpec) -> DisparityLine:
    """Exact disparity-line parameters of a lateral-normal-free plane.

    Derived by intersecting the patch-column viewing rays with the plane;
    the disparity of such a plane is affine in the image row.
    """
    if plane.nx != 0.0:
        raise NonFphtPlane(f"plane has nx = {plane.nx}, disparity line undefined")
    ga, gb = _line_direction(plane.ny, plane.nz, rig, patch)
    a = (rig.baseline / plane.d) * ga
    b = (rig.baseline / plane.d) * gb
    if b <= 0.0:
        raise BehindCamera(f"patch center disparity {b} <= 0 for this plane")
    return DisparityLine(a, b)


def disparity_line_to_plane(line: DisparityLine, rig: CameraRig, patch: PatchSpec) -> Plane3D:
    """Inverse of plane_to_disparity_line, returning the canonical plane (d > 0)."""
    if line.b <= 0.0:
        raise DegenerateLine(f"center disparity b = {line.b} <= 0")
    u = 2.0 * line.a * rig.fy / (patch.h * rig.fx)
    v = -(line.b / rig.fx) - u * (patch.yc - rig.y0) / rig.fy
    norm = math.hypot(u, v)
    if norm == 0.0:
        raise DegenerateLine("line corresponds to the plane at infinity")
    return Plane3D(0.0, u / norm, v / norm, rig.baseline / norm)


@dataclass(frozen=True)
class FeasibleWedge:
    """Feasible region {(a, b): b > 0, c_lo * b <= a <= c_hi * b}.

    Boundary constants may be +-inf when the hypothesis bounds reach planes
    that turn edge-on at this patch; the boundary ray then degenerates to
    the a-axis.  theta_lo/theta_hi are the boundary ray direction angles,
    measured from the +a axis, with 0 <= theta_lo <= theta_hi <= pi.
    """

    c_lo: float
    c_hi: float
    theta_lo: float
    theta_hi: float

    @property
    def dir_hi(self) -> tuple[float, float]:
        """Unit vector along the upper boundary ray (a = c_hi * b)."""
        return math.cos(self.theta_lo), math.sin(self.theta_lo)

    @property
    def dir_lo(self) -> tuple[float, float]:
        """Unit vector along the lower boundary ray (a = c_lo * b)."""
        return math.cos(self.theta_hi), math.sin(self.theta_hi)

    def contains(self, a: float, b: float, tol: float = 1e-12) -> bool:
        eps = tol * (1.0 + abs(a) + abs(b))
        if b < -eps:
            return False
        above = True if math.isinf(self.c_lo) else a >= self.c_lo * b - eps
        below = True if math.isinf(self.c_hi) else a <= self.c_hi * b + eps
        if b <= eps:
            # apex, or on a degenerate a-axis boundary
            if abs(a) <= eps:
                return True
            return (a > 0 and math.isinf(self.c_hi)) or (a < 0 and math.isinf(self.c_lo))
        return above and below


def _wrap_pi(x: float) -> float:
    return math.atan2(math.sin(x), math.cos(x))


def wedge_for_hypothesis(reference: Plane3D, phi_max_deg: float,
                         rig: CameraRig, patch: PatchSpec) -> FeasibleWedge:
    """Disparity-space constraint wedge for normals within phi_max of reference.

    The reference normal is rotated by +-phi_max in the Y-Z plane and each
    rotated orientation is mapped to its (a, b) boundary ray.  Rays whose
    planes are not visible at this patch (negative center disparity) are
    clipped to the a-axis; if the reference orientation itself is invisible
    the wedge is empty and SingularReference is raised.
    """
    if reference.nx != 0.0:
        raise NonFphtPlane("wedge reference must have nx = 0")
    if not 0.0 < phi_max_deg < 90.0:
        raise ValueError("phi_max must lie in (0, 90) degrees")
    phi = math.radians(phi_max_deg)

    ga0, gb0 = _line_direction(reference.ny, reference.nz, rig, patch)
    if gb0 <= 0.0:
        raise SingularReference("reference plane not visible at this patch row")
    theta0 = math.atan2(gb0, ga0)

    thetas = []
    for sign in (-1.0, 1.0):
        ny, nz = rotate_pitch(reference.ny, reference.nz, sign * phi)
        ga, gb = _line_direction(ny, nz, rig, patch)
        theta = math.atan2(gb, ga)
        thetas.append(theta0 + _wrap_pi(theta - theta0))
    lo, hi = min(thetas), max(thetas)
    lo = max(lo, 0.0)
    hi = min(hi, math.pi)
    if lo > hi:
        raise SingularReference("hypothesis bounds leave no visible plane")

    c_hi = math.inf if lo <= 0.0 else math.cos(lo) / math.sin(lo)
    c_lo = -math.inf if hi >= math.pi else math.cos(hi) / math.sin(hi)
    return FeasibleWedge(c_lo=c_lo, c_hi=c_hi, theta_lo=lo, theta_hi=hi)


def project_onto_wedge(point: tuple[float, float], wedge: FeasibleWedge) -> tuple[float, float]:
    """Orthogonal projection onto the closed wedge; identity on interior points."""
    a, b = float(point[0]), float(point[1])
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("point must be finite")
    if wedge.contains(a, b):
        return a, b
    best = (0.0, 0.0)
    best_d2 = a * a + b * b
    for ua, ub in (wedge.dir_lo, wedge.dir_hi):
        t = a * ua + b * ub
        if t <= 0.0:
            continue
        pa, pb = t * ua, t * ub
        d2 = (a - pa) ** 2 + (b - pb) ** 2
        if d2 < best_d2:
            best, best_d2 = (pa, pb), d2
    return best


def homography_from_plane(plane: Plane3D, rig: CameraRig) -> np.ndarray:
    """Plane-induced homography mapping left-image pixels to right-image pixels.

    H = K (R - (1/D) t n^T) K^{-1} with R = I and t = (-B, 0, 0) for the
    right camera of a rectified pair.
    """
    K = np.array([
        [rig.fx, 0.0, rig.x0],
        [0.0, rig.fy, rig.y0],
        [0.0, 0.0, 1.0],
    ])
    K_inv = np.array([
        [1.0 / rig.fx, 0.0, -rig.x0 / rig.fx],
        [0.0, 1.0 / rig.fy, -rig.y0 / rig.fy],
        [0.0, 0.0, 1.0],
    ])
    t = np.array([-rig.baseline, 0.0, 0.0])
    M = np.eye(3) - np.outer(t, plane.normal) / plane.d
    return K @ M @ K_inv


def apply_homography(H: np.ndarray, x, y):
    """Apply a 3x3 homography to pixel coordinates (arrays allowed)."""
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    xp = (H[0, 0] * x + H[0, 1] * y + H[0, 2]) / w
    yp = (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / w
    return xp, yp


def triangulate(x: float, y: float, d: float, rig: CameraRig) -> tuple[float, float, float]:
    """Back-project a pixel with disparity d to camera coordinates (meters)."""
    if d <= 0.0:
        raise NonPositiveDisparity(f"disparity {d} <= 0")
    Z = rig.fx * rig.baseline / d
    X = (x - rig.x0) * Z / rig.fx
    Y = (y - rig.y0) * Z / rig.fy
    return X, Y, Z


def project(X: float, Y: float, Z: float, rig: CameraRig) -> tuple[float, float, float]:
    """Project a camera-frame point to (x, y, disparity)."""
    if Z <= 0.0:
        raise ValueError("point must lie in front of the camera")
    x = rig.x0 + rig.fx * X / Z
    y = rig.y0 + rig.fy * Y / Z
    return x, y, rig.fx * rig.baseline / Z
