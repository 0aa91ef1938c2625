"""Dense block-matching disparity estimation.

Winner-take-all SAD matching with parabolic subpixel refinement, a
uniqueness check and a left-right consistency check.  This initializes the
hypothesis-testing detectors and feeds the point-based pipeline; it is a
deliberately simple stand-in for heavier stereo engines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraRig, triangulate
from .hypothesis import DimensionMismatch
from .imaging import DisparityMap, IntensityImage


@dataclass(frozen=True)
class BlockMatchConfig:
    window: int = 9
    d_max: int = 128
    lr_tol: float = 1.0
    #: reject pixels whose second-best cost is within this fraction of the best
    uniqueness: float = 0.05


@dataclass(frozen=True)
class CloudPoint:
    """3D point with pixel provenance."""

    x: int
    y: int
    disparity: float
    X: float
    Y: float
    Z: float


def _box_sum(img: np.ndarray, r: int) -> np.ndarray:
    """Sum over (2r+1)^2 windows via an integral image; edges stay partial."""
    pad = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    pad[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)
    h, w = img.shape
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    return (pad[y1][:, x1] - pad[y1][:, x0] - pad[y0][:, x1] + pad[y0][:, x0])


def _match_one_side(ref: np.ndarray, other: np.ndarray, sign: int,
                    cfg: BlockMatchConfig):
    """WTA disparity of `ref` against `other`; sign -1 matches left->right.

    Returns integer disparity, costs at d-1/d/d+1 for subpixel refinement
    and the runner-up cost outside the +-1 neighborhood of the winner.
    """
    h, w = ref.shape
    r = cfg.window // 2
    big = np.inf
    best = np.full((h, w), big)
    best_d = np.zeros((h, w), dtype=np.int64)
    left_nb = np.full((h, w), big)
    right_nb = np.full((h, w), big)
    second = np.full((h, w), big)
    prev_cost = np.full((h, w), big)

    for d in range(cfg.d_max + 1):
        cost = np.full((h, w), big)
        if sign < 0:
            if d < w:
                diff = np.abs(ref[:, d:] - other[:, :w - d])
                cost[:, d:] = _box_sum(diff, r)
        else:
            if d < w:
                diff = np.abs(ref[:, :w - d] - other[:, d:])
                cost[:, :w - d] = _box_sum(diff, r)

        took = cost < best
        far = np.abs(d - best_d) > 1
        second = np.where(took & far, best, second)
        second = np.where(~took & far & (cost < second), cost, second)
        left_nb = np.where(took, prev_cost, left_nb)
        right_nb = np.where(took, big, right_nb)
        right_nb = np.where(~took & (best_d == d - 1), cost, right_nb)
        best_d = np.where(took, d, best_d)
        best = np.where(took, cost, best)
        prev_cost = cost

    return best, best_d, left_nb, right_nb, second


def _subpixel(best, best_d, left_nb, right_nb):
    dsub = best_d.astype(np.float64)
    ok = np.isfinite(left_nb) & np.isfinite(right_nb) & np.isfinite(best)
    c0 = np.where(ok, best, 0.0)
    cm = np.where(ok, left_nb, 0.0)
    cp = np.where(ok, right_nb, 0.0)
    denom = cm - 2.0 * c0 + cp
    delta = np.where(ok & (denom > 0), 0.5 * (cm - cp) / np.where(denom == 0, 1, denom), 0.0)
    return dsub + np.clip(delta, -0.5, 0.5)


def block_match(left: IntensityImage, right: IntensityImage,
                cfg: BlockMatchConfig = BlockMatchConfig()) -> DisparityMap:
    """Dense disparity of the left image; failed pixels are NaN.

    A pixel survives only if its SAD winner is unique (runner-up outside
    the winner's +-1 band exceeds the best by the uniqueness margin) and
    consistent with the right-referenced match within lr_tol.
    """
    if left.pixels.shape != right.pixels.shape:
        raise DimensionMismatch("left and right image sizes differ")
    h, w = left.pixels.shape
    r = cfg.window // 2

    bestL, dL, lnbL, rnbL, secondL = _match_one_side(left.pixels, right.pixels, -1, cfg)
    bestR, dR, _, _, _ = _match_one_side(right.pixels, left.pixels, +1, cfg)

    disp = _subpixel(bestL, dL, lnbL, rnbL)

    valid = np.isfinite(bestL)
    valid &= secondL > bestL * (1.0 + cfg.uniqueness) + 1e-9
    valid &= disp > 0

    # left-right consistency: the right-image match at (x - d) must agree
    xs = np.arange(w)[None, :].repeat(h, axis=0)
    xr = np.clip(np.rint(xs - disp).astype(np.int64), 0, w - 1)
    ys = np.arange(h)[:, None].repeat(w, axis=1)
    d_back = dR[ys, xr]
    valid &= np.isfinite(bestR[ys, xr])
    valid &= np.abs(disp - d_back) <= cfg.lr_tol

    # window must fit inside the image, and the full candidate range must
    # have been evaluable (otherwise the winner cannot be certified)
    valid[:r, :] = False
    valid[h - r:, :] = False
    valid[:, :max(r, cfg.d_max)] = False
    valid[:, w - r:] = False

    out = np.where(valid, disp, np.nan)
    return DisparityMap(values=out)


def disparity_to_cloud(dmap: DisparityMap, rig: CameraRig, stride: int = 1) -> list:
    """One CloudPoint per valid disparity on the stride grid."""
    pts = []
    vals = dmap.values
    for y in range(0, dmap.height, stride):
        for x in range(0, dmap.width, stride):
            d = vals[y, x]
            if np.isfinite(d):
                X, Y, Z = triangulate(float(x), float(y), float(d), rig)
                pts.append(CloudPoint(x=x, y=y, disparity=float(d), X=X, Y=Y, Z=Z))
    return pts
