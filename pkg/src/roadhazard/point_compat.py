"""Point Compatibility obstacle detection.

Two 3D points are compatible when the upper one sits inside a truncated
cone based at the lower one: height difference within [h_min, h_max] and
elevation angle at least phi.  Compatible pairs mark both endpoints as
obstacle and join them into one cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraRig


@dataclass(frozen=True)
class PcParams:
    phi: float = 45.0
    h_min: float = 0.1
    h_max: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.phi < 90.0:
            raise ValueError("phi must lie in (0, 90) degrees")
        if not 0.0 < self.h_min < self.h_max:
            raise ValueError("need 0 < h_min < h_max")


@dataclass(frozen=True)
class PcResult:
    """Obstacle flags and cluster IDs aligned with the input cloud order."""

    obstacle: np.ndarray  # bool per point
    cluster: np.ndarray   # int per point, -1 for non-obstacle

    def partition(self) -> set:
        """Clusters as frozensets of point indices (ID-labeling invariant)."""
        groups = {}
        for i, c in enumerate(self.cluster):
            if c >= 0:
                groups.setdefault(int(c), []).append(i)
        return {frozenset(v) for v in groups.values()}


def compatible(p1, p2, params: PcParams) -> bool:
    """True iff p2 lies in the truncated cone based at p1 (up is -Y)."""
    dh = p1[1] - p2[1]
    if not params.h_min <= dh <= params.h_max:
        return False
    horiz = math.hypot(p2[0] - p1[0], p2[2] - p1[2])
    return horiz * math.tan(math.radians(params.phi)) <= dh


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[rj] = ri


def _canonical_clusters(uf: _UnionFind, flags: np.ndarray) -> np.ndarray:
    cluster = np.full(flags.size, -1, dtype=np.int64)
    next_id = 0
    seen = {}
    for i in range(flags.size):
        if not flags[i]:
            continue
        root = uf.find(i)
        if root not in seen:
            seen[root] = next_id
            next_id += 1
        cluster[i] = seen[root]
    return cluster


def _result(points, pairs):
    n = len(points)
    flags = np.zeros(n, dtype=bool)
    uf = _UnionFind(n)
    for i, j in pairs:
        flags[i] = True
        flags[j] = True
        uf.union(i, j)
    return PcResult(obstacle=flags, cluster=_canonical_clusters(uf, flags))


def pc_brute_force(points, params: PcParams) -> PcResult:
    """All-pairs oracle: exhaustive compatibility over the cloud."""
    arr = _point_array(points)
    n = arr.shape[0]
    pairs = []
    tan_phi = math.tan(math.radians(params.phi))
    for i in range(n):
        dh = arr[i, 1] - arr[:, 1]
        horiz = np.hypot(arr[:, 0] - arr[i, 0], arr[:, 2] - arr[i, 2])
        ok = (dh >= params.h_min) & (dh <= params.h_max) & (horiz * tan_phi <= dh)
        for j in np.nonzero(ok)[0]:
            pairs.append((i, int(j)))
    return _result(points, pairs)


def _point_array(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return points.astype(np.float64)
    return np.array([[p.X, p.Y, p.Z] for p in points], dtype=np.float64)


def _pixel_array(points) -> np.ndarray:
    return np.array([[p.x, p.y] for p in points], dtype=np.float64)


def _ratio_bounds(num_lo, num_hi, den_lo, den_hi):
    """Range of num/den over the box, both denominators positive."""
    cands = (num_lo / den_lo, num_lo / den_hi, num_hi / den_lo, num_hi / den_hi)
    return min(cands), max(cands)


def pc_detect(points, rig: CameraRig, params: PcParams) -> PcResult:
    """Image-guided compatibility labeling equal to the all-pairs oracle.

    Points are traversed in bottom-left to top-right column order; for each
    base point the cone is projected to a conservative pixel trapezium and
    only points inside it are tested.  Candidates never miss a compatible
    partner, so the result matches pc_brute_force exactly.
    """
    arr = _point_array(points)
    pix = _pixel_array(points)
    n = arr.shape[0]
    if n == 0:
        return PcResult(obstacle=np.zeros(0, dtype=bool),
                        cluster=np.full(0, -1, dtype=np.int64))

    order = np.lexsort((-pix[:, 1], pix[:, 0]))

    # per-column index of point rows for trapezium lookups
    cols = {}
    for i in range(n):
        cols.setdefault(int(pix[i, 0]), []).append(i)
    for c in cols:
        cols[c].sort(key=lambda i: pix[i, 1])
    col_rows = {c: np.array([pix[i, 1] for i in idx]) for c, idx in cols.items()}

    R = params.h_max / math.tan(math.radians(params.phi))
    tan_phi = math.tan(math.radians(params.phi))
    pairs = []
    for i in order:
        X1, Y1, Z1 = arr[i]
        z_lo, z_hi = Z1 - R, Z1 + R
        if z_lo <= 0:
            x_px_lo, x_px_hi = 0.0, float(rig.width - 1)
            y_px_lo, y_px_hi = 0.0, float(rig.height - 1)
        else:
            x_lo, x_hi = _ratio_bounds(X1 - R, X1 + R, z_lo, z_hi)
            y_lo, y_hi = _ratio_bounds(Y1 - params.h_max, Y1 - params.h_min, z_lo, z_hi)
            x_px_lo = rig.x0 + rig.fx * x_lo - 1e-9
            x_px_hi = rig.x0 + rig.fx * x_hi + 1e-9
            y_px_lo = rig.y0 + rig.fy * y_lo - 1e-9
            y_px_hi = rig.y0 + rig.fy * y_hi + 1e-9

        for c in range(max(0, math.ceil(x_px_lo)), min(rig.width - 1, math.floor(x_px_hi)) + 1):
            idx = cols.get(c)
            if idx is None:
                continue
            rows = col_rows[c]
            lo = np.searchsorted(rows, y_px_lo, side="left")
            hi = np.searchsorted(rows, y_px_hi, side="right")
            for k in range(lo, hi):
                j = idx[k]
                if j == i:
                    continue
                dh = Y1 - arr[j, 1]
                if not params.h_min <= dh <= params.h_max:
                    continue
                horiz = math.hypot(arr[j, 0] - X1, arr[j, 2] - Z1)
                if horiz * tan_phi <= dh:
                    pairs.append((int(i), int(j)))

    return _result(points, pairs)
