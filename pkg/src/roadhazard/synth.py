"""Synthetic stereo scene generator with exact ground truth.

Scenes consist of a (piecewise-pitched) road plane and box obstacles resting
on it.  Both views are rendered by analytic ray casting, so the disparity
map, instance labels and free-space mask are exact.

Surface texture is a per-surface sum of seeded random sinusoid gratings
evaluated at the left-image projection of the surface point.  Anchoring the
pattern to the surface keeps the two views photo-consistent, while defining
it in projected pixel units bounds the image-space frequency everywhere,
so interpolation-based consumers (warping, block matching) see no aliasing
no matter how far away the surface is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraRig
from .imaging import DisparityMap, IntensityImage, LabelMap

_SKY = 0
_ROAD = 1


@dataclass(frozen=True)
class BoxObstacle:
    """Axis-aligned box resting on the road surface."""

    center_x: float
    center_z: float
    width: float
    height: float
    depth: float
    instance_id: int

    def __post_init__(self):
        if self.instance_id < 2:
            raise ValueError("obstacle instance IDs start at 2")
        if min(self.width, self.height, self.depth) <= 0:
            raise ValueError("box dimensions must be positive")


@dataclass(frozen=True)
class SceneSpec:
    rig: CameraRig
    camera_height: float = 1.2
    road_pitch_deg: float = 0.0
    #: optional piecewise profile [(z_start, pitch_deg), ...]; overrides road_pitch_deg
    road_profile: tuple = ()
    obstacles: tuple = ()
    texture_seed: int = 0
    #: sinusoid wavelength range in projected pixels
    texture_band: tuple = (30.0, 80.0)
    noise_sigma: float = 0.0
    #: free-space annotations stay this many pixels clear of obstacles,
    #: mirroring coarse hand annotation; the strip becomes unlabeled
    annotation_margin_px: int = 12

    def __post_init__(self):
        ids = [o.instance_id for o in self.obstacles]
        if len(ids) != len(set(ids)):
            raise ValueError("obstacle instance IDs must be unique")
        if sorted(ids) != list(range(2, 2 + len(ids))):
            raise ValueError("obstacle instance IDs must be contiguous from 2")


@dataclass(frozen=True)
class GroundTruthBundle:
    left: IntensityImage
    right: IntensityImage
    gt_disparity: DisparityMap
    labels: LabelMap
    free_space: np.ndarray
    #: diagnostic: instance labels as seen from the right camera
    right_labels: np.ndarray


# ---------------------------------------------------------------------------
# road profile


def _road_segments(scene: SceneSpec):
    """Planar road segments as (z_lo, z_hi, ny, nz, d) with n.P + d = 0."""
    profile = scene.road_profile or ((0.0, scene.road_pitch_deg),)
    z_starts = [float(p[0]) for p in profile]
    pitches = [math.radians(float(p[1])) for p in profile]
    if z_starts[0] != 0.0:
        raise ValueError("road profile must start at z = 0")
    segments = []
    y_here = scene.camera_height
    for i, (z_lo, pitch) in enumerate(zip(z_starts, pitches)):
        z_hi = z_starts[i + 1] if i + 1 < len(z_starts) else math.inf
        ny, nz = -math.cos(pitch), -math.sin(pitch)
        d = -(ny * y_here + nz * z_lo)
        segments.append((z_lo, z_hi, ny, nz, d))
        if math.isfinite(z_hi):
            y_here = y_here - (z_hi - z_lo) * math.tan(pitch)
    return segments


def road_height_at(scene: SceneSpec, z: float) -> float:
    """Y coordinate (camera frame, downwards) of the road surface at depth z."""
    for z_lo, z_hi, ny, nz, d in _road_segments(scene):
        if z_lo <= z < z_hi:
            return -(d + nz * z) / ny
    raise ValueError(f"no road segment covers z = {z}")


# ---------------------------------------------------------------------------
# texture


def _gratings(scene: SceneSpec, surface_id: int):
    rng = np.random.default_rng([scene.texture_seed, surface_id])
    n = 8
    lam_lo, lam_hi = scene.texture_band
    angles = rng.uniform(0.0, math.pi, n)
    lams = np.exp(rng.uniform(np.log(lam_lo), np.log(lam_hi), n))
    phases = rng.uniform(0.0, 2.0 * math.pi, n)
    amps = rng.uniform(90.0, 140.0, n)
    return angles, lams, phases, amps


def _texture(scene: SceneSpec, surface_id: int, xl, yl):
    base = 1800.0 if surface_id == _ROAD else 2300.0
    angles, lams, phases, amps = _gratings(scene, surface_id)
    out = np.full_like(xl, base, dtype=np.float64)
    for ang, lam, ph, amp in zip(angles, lams, phases, amps):
        out += amp * np.sin(2.0 * math.pi * (math.cos(ang) * xl + math.sin(ang) * yl) / lam + ph)
    return out


# ---------------------------------------------------------------------------
# ray casting


def _cast(scene: SceneSpec, origin_x: float):
    """Per-pixel nearest surface for a camera at (origin_x, 0, 0).

    Returns (surface_id, Z) arrays; Z is the world depth of the hit and is
    inf for sky pixels.  Rays are parametrized so that Z == t.
    """
    rig = scene.rig
    W, H = rig.width, rig.height
    dirx = ((np.arange(W) - rig.x0) / rig.fx)[None, :].repeat(H, axis=0)
    diry = ((np.arange(H) - rig.y0) / rig.fy)[:, None].repeat(W, axis=1)

    t_best = np.full((H, W), np.inf)
    sid = np.full((H, W), _SKY, dtype=np.int32)

    with np.errstate(divide="ignore", invalid="ignore"):
        for z_lo, z_hi, ny, nz, d in _road_segments(scene):
            denom = ny * diry + nz
            t = -d / denom
            hit = (denom < 0) & (t > 0) & (t >= z_lo) & (t < z_hi) & (t < t_best)
            t_best = np.where(hit, t, t_best)
            sid = np.where(hit, _ROAD, sid)

        eps = 1e-30
        dx = np.where(dirx == 0.0, eps, dirx)
        dy = np.where(diry == 0.0, eps, diry)
        for box in scene.obstacles:
            base_y = road_height_at(scene, box.center_z + box.depth / 2.0)
            x_lo, x_hi = box.center_x - box.width / 2.0, box.center_x + box.width / 2.0
            y_lo, y_hi = base_y - box.height, base_y
            z_lo, z_hi = box.center_z, box.center_z + box.depth

            tx1 = (x_lo - origin_x) / dx
            tx2 = (x_hi - origin_x) / dx
            ty1 = y_lo / dy
            ty2 = y_hi / dy
            t_near = np.maximum.reduce([
                np.minimum(tx1, tx2), np.minimum(ty1, ty2), np.full_like(tx1, z_lo)])
            t_far = np.minimum.reduce([
                np.maximum(tx1, tx2), np.maximum(ty1, ty2), np.full_like(tx1, z_hi)])
            hit = (t_near <= t_far) & (t_near > 0) & (t_near < t_best)
            t_best = np.where(hit, t_near, t_best)
            sid = np.where(hit, box.instance_id, sid)

    return sid, t_best


def _dilate(mask: np.ndarray, m: int) -> np.ndarray:
    """Separable box dilation by m pixels in each direction."""
    out = mask.copy()
    for axis in (0, 1):
        src = out.copy()
        for s in range(1, m + 1):
            fwd = [slice(None)] * 2
            bwd = [slice(None)] * 2
            fwd[axis] = slice(s, None)
            bwd[axis] = slice(None, -s)
            out[tuple(fwd)] |= src[tuple(bwd)]
            out[tuple(bwd)] |= src[tuple(fwd)]
    return out


def render(scene: SceneSpec) -> GroundTruthBundle:
    """Render both views plus exact disparity, labels and free-space mask."""
    rig = scene.rig
    W, H = rig.width, rig.height
    xs = np.arange(W, dtype=np.float64)[None, :].repeat(H, axis=0)
    ys = np.arange(H, dtype=np.float64)[:, None].repeat(W, axis=1)

    sid_l, z_l = _cast(scene, 0.0)
    sid_r, z_r = _cast(scene, rig.baseline)

    surface_ids = [_ROAD] + [b.instance_id for b in scene.obstacles]

    left = np.full((H, W), 1200.0)
    for s in surface_ids:
        m = sid_l == s
        if np.any(m):
            left[m] = _texture(scene, s, xs[m], ys[m])

    # a right pixel sees the surface point that projects to x + fx*B/Z in
    # the left image; the texture is anchored there
    right = np.full((H, W), 1200.0)
    with np.errstate(divide="ignore"):
        disp_r = rig.fx * rig.baseline / z_r
    for s in surface_ids:
        m = sid_r == s
        if np.any(m):
            right[m] = _texture(scene, s, xs[m] + disp_r[m], ys[m])

    if scene.noise_sigma > 0:
        rng_l = np.random.default_rng([scene.texture_seed, 101])
        rng_r = np.random.default_rng([scene.texture_seed, 102])
        left = left + rng_l.normal(0.0, scene.noise_sigma, left.shape)
        right = right + rng_r.normal(0.0, scene.noise_sigma, right.shape)
    left = np.clip(left, 0.0, 4095.0)
    right = np.clip(right, 0.0, 4095.0)

    with np.errstate(divide="ignore"):
        disp_l = rig.fx * rig.baseline / z_l
    disp_l[sid_l == _SKY] = np.nan

    labels = sid_l.astype(np.int32)
    if scene.obstacles and scene.annotation_margin_px > 0:
        guard = _dilate(labels >= 2, scene.annotation_margin_px)
        labels[(labels == _ROAD) & guard] = 0
    return GroundTruthBundle(
        left=IntensityImage(left),
        right=IntensityImage(right),
        gt_disparity=DisparityMap(disp_l),
        labels=LabelMap(labels),
        free_space=labels == _ROAD,
        right_labels=sid_r.astype(np.int32),
    )


def photo_consistency_mask(bundle: GroundTruthBundle) -> np.ndarray:
    """Left pixels whose correspondence is occlusion-free and interpolable."""
    labels = bundle.labels.labels
    d = bundle.gt_disparity.values
    H, W = labels.shape
    xs = np.arange(W)[None, :].repeat(H, axis=0).astype(float)
    xr = xs - d
    ok = np.isfinite(d) & (xr >= 0) & (xr <= W - 1)
    mask = np.zeros_like(ok)
    r = bundle.right_labels
    xi = np.floor(np.where(ok, xr, 0.0)).astype(int)
    xi = np.clip(xi, 0, W - 2)
    rows = np.arange(H)[:, None].repeat(W, axis=1)
    same = (r[rows, xi] == labels) & (r[rows, xi + 1] == labels)
    mask[ok] = same[ok]
    return mask


# ---------------------------------------------------------------------------
# canonical suites

_PAPER_RIG = CameraRig(fx=2300.0, fy=2300.0, x0=1024.0, y0=512.0,
                       baseline=0.21, width=2048, height=1024)


def scene_suite(name: str, rig: CameraRig = _PAPER_RIG) -> list[SceneSpec]:
    """Canonical regression scenes: flat_easy, far_small or double_kink."""
    if name == "flat_easy":
        return [
            SceneSpec(rig=rig, texture_seed=10, noise_sigma=2.0, obstacles=(
                BoxObstacle(0.0, 10.0, 0.3, 0.3, 0.3, 2),)),
            SceneSpec(rig=rig, texture_seed=11, noise_sigma=2.0, obstacles=(
                BoxObstacle(-1.0, 10.0, 0.3, 0.3, 0.3, 2),)),
            SceneSpec(rig=rig, texture_seed=12, noise_sigma=2.0, obstacles=(
                BoxObstacle(1.5, 12.0, 0.3, 0.3, 0.3, 2),)),
        ]
    if name == "far_small":
        # 5 cm and 10 cm objects at 20 m
        return [
            SceneSpec(rig=rig, texture_seed=20, noise_sigma=2.0, obstacles=(
                BoxObstacle(0.0, 20.0, 0.4, 0.05, 0.3, 2),)),
            SceneSpec(rig=rig, texture_seed=21, noise_sigma=2.0, obstacles=(
                BoxObstacle(0.0, 20.0, 0.4, 0.10, 0.3, 2),)),
            SceneSpec(rig=rig, texture_seed=22, noise_sigma=2.0, obstacles=(
                BoxObstacle(-1.5, 20.0, 0.4, 0.05, 0.3, 2),)),
            SceneSpec(rig=rig, texture_seed=23, noise_sigma=2.0, obstacles=(
                BoxObstacle(1.5, 20.0, 0.4, 0.10, 0.3, 2),)),
        ]
    if name == "double_kink":
        profile = ((0.0, 0.0), (15.0, 4.0), (25.0, -4.0))
        return [
            SceneSpec(rig=rig, texture_seed=30, noise_sigma=2.0, road_profile=profile,
                      obstacles=(BoxObstacle(0.0, 18.0, 0.3, 0.25, 0.3, 2),)),
            SceneSpec(rig=rig, texture_seed=31, noise_sigma=2.0, road_profile=profile,
                      obstacles=(BoxObstacle(-1.0, 20.0, 0.3, 0.3, 0.3, 2),)),
            SceneSpec(rig=rig, texture_seed=32, noise_sigma=2.0, road_profile=profile,
                      obstacles=(BoxObstacle(1.0, 28.0, 0.3, 0.3, 0.3, 2),)),
        ]
    raise ValueError(f"unknown suite {name!r}")


def downsample_bundle(bundle: GroundTruthBundle) -> tuple[IntensityImage, IntensityImage, DisparityMap]:
    """Half-resolution image pair and disparity init for downsampled detection."""
    from .imaging import downsample2, downsample2_disparity

    return (downsample2(bundle.left), downsample2(bundle.right),
            downsample2_disparity(bundle.gt_disparity))
