"""Cluster-Stixels mid-level representation.

Obstacle points are clustered by a distance-adaptive DBSCAN over an
STR-packed R-tree, then each cluster is cut into fixed-width vertical
boxes and optionally split vertically while the disparity variance inside
a box stays above threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraRig
from .imaging import DisparityMap


@dataclass(frozen=True)
class ObstaclePoint:
    x: int
    y: int
    X: float
    Y: float
    Z: float
    disparity: float
    source: str = "fpht"


@dataclass(frozen=True)
class ClusterParams:
    #: lateral half-width of the neighborhood box (meters)
    w0: float = 0.3
    #: base depth half-extent (meters)
    l0: float = 0.3
    #: depth growth in units of the propagated depth noise
    kappa: float = 3.0
    #: assumed disparity noise (pixels)
    sigma_d: float = 0.5
    minpts0: int = 4
    #: minPts distance-scaling gain (meters)
    k: float = 0.02
    #: fixed stixel width (pixels)
    stixel_width: int = 8
    #: disparity variance threshold for vertical splits (px^2)
    var_thresh: float = 4.0
    vertical_split: bool = True


@dataclass(frozen=True)
class CStix:
    cluster_id: int
    u: int
    width: int
    v_top: int
    v_bottom: int
    median_disparity: float
    Z: float


# ---------------------------------------------------------------------------
# STR bulk-loaded R-tree over (X, Z)


class StrRTree:
    """Static R-tree packed with Sort-Tile-Recursive over ground-plane (X, Z)."""

    def __init__(self, xs, zs, leaf_capacity: int = 16):
        self.xs = np.asarray(xs, dtype=np.float64)
        self.zs = np.asarray(zs, dtype=np.float64)
        n = self.xs.size
        self.capacity = leaf_capacity
        if n == 0:
            self.root = None
            return
        idx = np.arange(n)
        leaves = self._pack_leaves(idx)
        self.root = self._build(leaves)

    def _pack_leaves(self, idx):
        m = self.capacity
        n = idx.size
        n_leaves = math.ceil(n / m)
        slices = math.ceil(math.sqrt(n_leaves))
        per_slice = math.ceil(n / slices)
        by_x = idx[np.argsort(self.xs[idx], kind="stable")]
        leaves = []
        for s in range(0, n, per_slice):
            col = by_x[s:s + per_slice]
            col = col[np.argsort(self.zs[col], kind="stable")]
            for t in range(0, col.size, m):
                members = col[t:t + m]
                leaves.append(self._node(members))
        return leaves

    def _node(self, members):
        xs, zs = self.xs[members], self.zs[members]
        return {
            "bbox": (xs.min(), zs.min(), xs.max(), zs.max()),
            "members": members,
            "children": None,
        }

    def _build(self, nodes):
        while len(nodes) > 1:
            cx = np.array([0.5 * (n["bbox"][0] + n["bbox"][2]) for n in nodes])
            cz = np.array([0.5 * (n["bbox"][1] + n["bbox"][3]) for n in nodes])
            m = self.capacity
            n_groups = math.ceil(len(nodes) / m)
            slices = math.ceil(math.sqrt(n_groups))
            per_slice = math.ceil(len(nodes) / slices)
            order = np.argsort(cx, kind="stable")
            parents = []
            for s in range(0, len(nodes), per_slice):
                col = order[s:s + per_slice]
                col = col[np.argsort(cz[col], kind="stable")]
                for t in range(0, col.size, m):
                    kids = [nodes[i] for i in col[t:t + m]]
                    x0 = min(k["bbox"][0] for k in kids)
                    z0 = min(k["bbox"][1] for k in kids)
                    x1 = max(k["bbox"][2] for k in kids)
                    z1 = max(k["bbox"][3] for k in kids)
                    parents.append({"bbox": (x0, z0, x1, z1),
                                    "members": None, "children": kids})
            nodes = parents
        return nodes[0]

    def query(self, x_lo, z_lo, x_hi, z_hi) -> np.ndarray:
        """Indices of points inside the closed box, in ascending order."""
        if self.root is None:
            return np.zeros(0, dtype=np.int64)
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            bx0, bz0, bx1, bz1 = node["bbox"]
            if bx0 > x_hi or bx1 < x_lo or bz0 > z_hi or bz1 < z_lo:
                continue
            if node["children"] is None:
                m = node["members"]
                sel = ((self.xs[m] >= x_lo) & (self.xs[m] <= x_hi)
                       & (self.zs[m] >= z_lo) & (self.zs[m] <= z_hi))
                out.append(m[sel])
            else:
                stack.extend(node["children"])
        if not out:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(out))


def build_str_rtree(points, leaf_capacity: int = 16) -> StrRTree:
    xs = [p.X for p in points]
    zs = [p.Z for p in points]
    return StrRTree(xs, zs, leaf_capacity)


# ---------------------------------------------------------------------------
# adaptive neighborhoods and DBSCAN


def sigma_z(Z: float, params: ClusterParams, rig: CameraRig) -> float:
    """Propagated depth noise Z^2 sigma_d / (fx B)."""
    return Z * Z * params.sigma_d / (rig.fx * rig.baseline)


def adaptive_neighborhood(p, params: ClusterParams, rig: CameraRig):
    """Oriented neighborhood box and minPts for a point.

    The box is centered on the point and aligned with its viewing ray:
    half-extent w0 laterally and l0 + kappa * sigma_z along the ray.
    Returns (angle, lateral half-extent, depth half-extent, minPts).
    """
    beta = math.atan2(p.X, p.Z)
    dh = params.l0 + params.kappa * sigma_z(p.Z, params, rig)
    minpts = math.ceil(params.minpts0 + params.k * rig.fx / p.Z)
    return beta, params.w0, dh, minpts


def _neighbors(tree: StrRTree, xs, zs, i, params, rig) -> np.ndarray:
    """Indices inside point i's oriented box (self included)."""
    X, Z = xs[i], zs[i]
    beta = math.atan2(X, Z)
    sb, cb = math.sin(beta), math.cos(beta)
    dh = params.l0 + params.kappa * (Z * Z * params.sigma_d / (rig.fx * rig.baseline))
    w0 = params.w0
    hx = w0 * abs(cb) + dh * abs(sb) + 1e-9
    hz = w0 * abs(sb) + dh * abs(cb) + 1e-9
    cand = tree.query(X - hx, Z - hz, X + hx, Z + hz)
    dx = xs[cand] - X
    dz = zs[cand] - Z
    lat = dx * cb - dz * sb
    dep = dx * sb + dz * cb
    keep = (np.abs(lat) <= w0 + 1e-12) & (np.abs(dep) <= dh + 1e-12)
    return cand[keep]


def adaptive_dbscan(points, params: ClusterParams, rig: CameraRig) -> np.ndarray:
    """Cluster labels per point (0-based), -1 for noise.

    Core points have at least minPts(Z) neighbors in their adaptive box.
    The adaptive boxes make the neighbor relation asymmetric, so clusters
    are formed as connected components over all directed core-core
    reachability edges; border points join the lowest-numbered claiming
    cluster.  Cluster IDs are ordered by each cluster's smallest core
    index, which reproduces seed order of the classic sequential scan.
    """
    n = len(points)
    if n == 0:
        return np.full(0, -1, dtype=np.int64)
    xs = np.array([p.X for p in points])
    zs = np.array([p.Z for p in points])
    tree = StrRTree(xs, zs)
    minpts = np.array([
        math.ceil(params.minpts0 + params.k * rig.fx / z) for z in zs
    ])

    nbrs = [_neighbors(tree, xs, zs, i, params, rig) for i in range(n)]
    core = np.array([nbrs[i].size >= minpts[i] for i in range(n)])

    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in np.nonzero(core)[0]:
        for j in nbrs[i]:
            if core[j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    root_order = {}
    for i in np.nonzero(core)[0]:
        r = find(int(i))
        if r not in root_order:
            root_order[r] = len(root_order)

    labels = np.full(n, -1, dtype=np.int64)
    for i in np.nonzero(core)[0]:
        labels[i] = root_order[find(int(i))]
    for i in np.nonzero(core)[0]:
        cid = labels[i]
        for j in nbrs[i]:
            if not core[j] and (labels[j] < 0 or cid < labels[j]):
                labels[j] = cid
    return labels


# ---------------------------------------------------------------------------
# splitting


def split_horizontally(cluster_points, cluster_id: int, width: int,
                       rig: CameraRig) -> list:
    """Fixed-width column bins over the cluster's pixel footprint."""
    if not cluster_points:
        return []
    cols = np.array([p.x for p in cluster_points])
    rows = np.array([p.y for p in cluster_points])
    disp = np.array([p.disparity for p in cluster_points])
    u_min = int(cols.min())
    u_max = int(cols.max())
    out = []
    u = u_min
    while u <= u_max:
        w_eff = min(width, u_max - u + 1)
        sel = (cols >= u) & (cols < u + width)
        if np.any(sel):
            med = float(np.median(disp[sel]))
            out.append(CStix(
                cluster_id=cluster_id,
                u=u,
                width=w_eff,
                v_top=int(rows[sel].min()),
                v_bottom=int(rows[sel].max()),
                median_disparity=med,
                Z=rig.fx * rig.baseline / med,
            ))
        u += width
    return out


def _box_disparities(dmap: DisparityMap, stx: CStix) -> np.ndarray:
    v = dmap.values[stx.v_top:stx.v_bottom + 1, stx.u:stx.u + stx.width]
    return v[np.isfinite(v)]


def split_vertically(stixels, cluster_points, dmap: DisparityMap,
                     params: ClusterParams, rig: CameraRig) -> list:
    """Recursively bisect boxes whose disparity variance exceeds the threshold.

    The cut row is the member points' median row (clamped so both children
    keep at least 4 rows); children partition the parent's rows exactly.
    """
    rows_all = np.array([p.y for p in cluster_points])
    cols_all = np.array([p.x for p in cluster_points])
    disp_all = np.array([p.disparity for p in cluster_points])

    out = []

    def recurse(stx: CStix):
        height = stx.v_bottom - stx.v_top + 1
        vals = _box_disparities(dmap, stx)
        var = float(np.var(vals)) if vals.size else 0.0
        if height < 8 or var <= params.var_thresh:
            out.append(stx)
            return
        in_box = ((cols_all >= stx.u) & (cols_all < stx.u + stx.width)
                  & (rows_all >= stx.v_top) & (rows_all <= stx.v_bottom))
        rows = rows_all[in_box]
        if rows.size == 0:
            out.append(stx)
            return
        cut = int(np.median(rows))
        cut = min(max(cut, stx.v_top + 3), stx.v_bottom - 4)
        for v0, v1 in ((stx.v_top, cut), (cut + 1, stx.v_bottom)):
            sel = in_box & (rows_all >= v0) & (rows_all <= v1)
            med = float(np.median(disp_all[sel])) if np.any(sel) else stx.median_disparity
            recurse(CStix(cluster_id=stx.cluster_id, u=stx.u, width=stx.width,
                          v_top=v0, v_bottom=v1, median_disparity=med,
                          Z=rig.fx * rig.baseline / med))

    for stx in stixels:
        recurse(stx)
    return out


def midlevel_rep(points, dmap: DisparityMap, params: ClusterParams,
                 rig: CameraRig, cluster_labels=None) -> list:
    """Cluster points (unless a partition is supplied, e.g. by PC), then cut
    each cluster into stixels; noise points produce nothing."""
    if not points:
        return []
    if cluster_labels is None:
        labels = adaptive_dbscan(points, params, rig)
    else:
        labels = np.asarray(cluster_labels, dtype=np.int64)
    out = []
    for cid in sorted({int(c) for c in labels if c >= 0}):
        members = [p for p, c in zip(points, labels) if c == cid]
        stixels = split_horizontally(members, cid, params.stixel_width, rig)
        if params.vertical_split:
            stixels = split_vertically(stixels, members, dmap, params, rig)
        out.extend(stixels)
    return out
