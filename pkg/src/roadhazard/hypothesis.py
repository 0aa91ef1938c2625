"""Per-patch GLRT obstacle / free-space decisions.

Two fitting routes share one projected Levenberg-Marquardt scheme:

* FPHT: the fast disparity-line parametrization (a, b) with the feasible
  wedge constraint and the left image as reference signal,
* PHT: the general plane parametrization (pitch, tilt, 1/d) warped through
  the plane-induced homography, with the mean of the realigned images as
  reference signal and box constraints on the angles.  Tilt rotates about
  an axis orthogonal to the reference normal (yaw for the fronto-parallel
  reference, lateral tilt for the ground reference).

All per-patch state in the batched engines is elementwise, so results are
bitwise independent of batch partitioning and thread count.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import (
    FRONTO_NORMAL,
    GROUND_NORMAL,
    CameraRig,
    DisparityLine,
    FeasibleWedge,
    PatchSpec,
    Plane3D,
    SingularReference,
    pitch_between,
    wedge_for_hypothesis,
)
from .imaging import DisparityMap, IntensityImage, PatchGrid


class InsufficientOverlap(ValueError):
    """More than the allowed fraction of patch pixels warps out of bounds."""


class DimensionMismatch(ValueError):
    """Input rasters disagree in size."""


OBSTACLE = "obstacle"
FREE_SPACE = "free_space"
NO_DECISION = "no_decision"

_MAX_OOB_FRAC = 0.2
_CHUNK = 4096  # fixed batch size; must not depend on thread count


@dataclass(frozen=True)
class DetectorConfig:
    patch_w: int = 15
    patch_h: int = 15
    stride: int = 2
    dwn: int = 1
    phi_f: float = 25.0
    phi_o: float = 45.0
    tau: float = 500.0
    lambda_min: float = 500.0
    max_iter: int = 30
    damping_init: float = 1e-3
    step_tol: float = 1e-4
    bias_compensation: bool = False
    b_min: float = 1e-3
    min_init_count: int = 5
    record_history: bool = False


@dataclass(frozen=True)
class HypothesisFit:
    params: object  # DisparityLine (FPHT) or Plane3D (PHT)
    residual_sum: float
    iterations: int
    min_eigenvalue: float
    converged: bool
    history: tuple = None


@dataclass(frozen=True)
class PatchDecision:
    patch: PatchSpec
    verdict: str
    statistic: float
    fit_f: HypothesisFit
    fit_o: HypothesisFit


# ---------------------------------------------------------------------------
# patch layout and warped sampling


def _patch_layout(w: int, h: int):
    half_w, half_h = (w - 1) // 2, (h - 1) // 2
    dx = np.tile(np.arange(-half_w, half_w + 1, dtype=np.float64), h)
    dy = np.repeat(np.arange(-half_h, half_h + 1, dtype=np.float64), w)
    ybar = -dy / (h / 2.0)
    return dx, dy, ybar


def _gather_linear_x(img_flat, width, xw, row_base):
    """Sample rows at fractional x; returns value, exact interpolant d/dx, bounds."""
    inb = (xw >= 0.0) & (xw <= width - 1.0)
    x0 = np.clip(np.floor(xw), 0, width - 2).astype(np.int64)
    frac = xw - x0
    idx = row_base + x0
    v0 = img_flat[idx]
    v1 = img_flat[idx + 1]
    return v0 + frac * (v1 - v0), v1 - v0, inb


def _gather_bilinear(img_flat, width, height, xw, yw):
    """2-D bilinear sample with the exact interpolant x-gradient."""
    inb = (xw >= 0.0) & (xw <= width - 1.0) & (yw >= 0.0) & (yw <= height - 1.0)
    x0 = np.clip(np.floor(xw), 0, width - 2).astype(np.int64)
    y0 = np.clip(np.floor(yw), 0, height - 2).astype(np.int64)
    fx = xw - x0
    fy = yw - y0
    base = y0 * width + x0
    v00 = img_flat[base]
    v10 = img_flat[base + 1]
    v01 = img_flat[base + width]
    v11 = img_flat[base + width + 1]
    top = v00 + fx * (v10 - v00)
    bot = v01 + fx * (v11 - v01)
    val = top + fy * (bot - top)
    gx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
    gy = bot - top
    return val, gx, gy, inb


# ---------------------------------------------------------------------------
# scalar FPHT operations


def fpht_warp(x: float, y: float, line: DisparityLine, patch: PatchSpec):
    """Disparity-line warp W(x) = (x - (a*ybar + b), y)."""
    ybar = patch.ybar(y)
    return x - (line.a * ybar + line.b), y


def _fpht_eval_single(left: IntensityImage, right: IntensityImage,
                      patch: PatchSpec, line: DisparityLine, bias_comp: bool):
    dx, dy, ybar = _patch_layout(patch.w, patch.h)
    xs = patch.xc + dx
    rows = (patch.yc + dy).astype(np.int64)
    xw = xs - (line.a * ybar + line.b)
    val, grad, inb = _gather_linear_x(right.pixels.ravel(), right.width,
                                      xw, rows * right.width)
    lvals = left.pixels[rows, xs.astype(np.int64)]
    oob_frac = 1.0 - float(np.mean(inb))
    if oob_frac > _MAX_OOB_FRAC:
        raise InsufficientOverlap(f"{oob_frac:.0%} of patch pixels warp out of bounds")
    r = val[inb] - lvals[inb]
    g = grad[inb]
    yb = ybar[inb]
    if bias_comp:
        r = r - np.mean(r)
        jb = -(g - np.mean(g))
        ja = -(g * yb - np.mean(g * yb))
    else:
        jb = -g
        ja = yb * jb
    return r, np.stack([ja, jb], axis=1)


def fpht_residuals(left: IntensityImage, right: IntensityImage, patch: PatchSpec,
                   line: DisparityLine, bias_compensation: bool = False):
    """Residual vector r = Ir(W(x)) - Il(x) over in-bounds patch pixels and
    its squared sum F."""
    r, _ = _fpht_eval_single(left, right, patch, line, bias_compensation)
    return r, float(np.dot(r, r))


def fpht_jacobian(left: IntensityImage, right: IntensityImage, patch: PatchSpec,
                  line: DisparityLine, bias_compensation: bool = False):
    """Analytic rows d r / d (a, b), aligned with fpht_residuals' vector."""
    _, J = _fpht_eval_single(left, right, patch, line, bias_compensation)
    return J


# ---------------------------------------------------------------------------
# batched wedge handling


def _wedge_arrays(wedges):
    nanv = float("nan")
    clo = np.array([w.c_lo if w is not None else nanv for w in wedges])
    chi = np.array([w.c_hi if w is not None else nanv for w in wedges])
    tlo = np.array([w.theta_lo if w is not None else 0.0 for w in wedges])
    thi = np.array([w.theta_hi if w is not None else math.pi for w in wedges])
    ok = np.array([w is not None for w in wedges])
    return clo, chi, tlo, thi, ok


def _project_wedge_batch_info(a, b, tlo, thi):
    """Project onto the closed wedge; also report clipping and the active ray."""
    theta = np.arctan2(b, a)
    r2 = a * a + b * b
    inside = (r2 <= 1e-300) | ((theta >= tlo - 1e-9) & (theta <= thi + 1e-9))

    best_a = np.zeros_like(a)
    best_b = np.zeros_like(b)
    best_d2 = r2.copy()
    ray = tlo.copy() if isinstance(tlo, np.ndarray) else np.full_like(a, tlo)
    for t in (tlo, thi):
        ua, ub = np.cos(t), np.sin(t)
        tt = np.maximum(a * ua + b * ub, 0.0)
        pa, pb = tt * ua, tt * ub
        d2 = (a - pa) ** 2 + (b - pb) ** 2
        better = d2 < best_d2
        best_a = np.where(better, pa, best_a)
        best_b = np.where(better, pb, best_b)
        best_d2 = np.where(better, d2, best_d2)
        ray = np.where(better, t, ray)
    return (np.where(inside, a, best_a), np.where(inside, b, best_b),
            ~inside, ray)


def _project_wedge_batch(a, b, tlo, thi):
    pa, pb, _, _ = _project_wedge_batch_info(a, b, tlo, thi)
    return pa, pb


def _clamp_b_min(a, b, clo, chi, b_min):
    low = b < b_min
    if not np.any(low):
        return a, b
    b2 = np.where(low, b_min, b)
    lo_lim = np.where(np.isfinite(clo), clo * b_min, -np.inf)
    hi_lim = np.where(np.isfinite(chi), chi * b_min, np.inf)
    a2 = np.where(low, np.clip(a, lo_lim, hi_lim), a)
    return a2, b2


# ---------------------------------------------------------------------------
# batched FPHT Levenberg-Marquardt


def _fpht_batch_eval(right_flat, width, xs, row_base, lvals, ybar, a, b, bias_comp):
    xw = xs - (a[:, None] * ybar[None, :] + b[:, None])
    val, grad, inb = _gather_linear_x(right_flat, width, xw, row_base)
    n_in = np.sum(inb, axis=1)
    r = np.where(inb, val - lvals, 0.0)
    g = np.where(inb, grad, 0.0)
    if bias_comp:
        cnt = np.maximum(n_in, 1)
        r = np.where(inb, r - (np.sum(r, axis=1) / cnt)[:, None], 0.0)
    F = np.sum(r * r, axis=1)
    oob_bad = n_in < (1.0 - _MAX_OOB_FRAC) * ybar.size
    return r, g, inb, F, oob_bad


def _lm_fpht_batch(right_flat, width, xs, row_base, lvals, ybar,
                   a0, b0, clo, chi, tlo, thi, feasible, cfg: DetectorConfig):
    n = a0.size
    a, b = a0.copy(), b0.copy()
    lam = np.full(n, cfg.damping_init)
    iters = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    min_eig = np.full(n, np.inf)

    r, g, inb, F, oob_bad = _fpht_batch_eval(
        right_flat, width, xs, row_base, lvals, ybar, a, b, cfg.bias_compensation)
    failed = ~feasible | oob_bad
    F = np.where(failed, np.nan, F)
    min_eig[failed] = 0.0
    active = ~failed
    history = [F.copy()] if cfg.record_history else None

    for _ in range(cfg.max_iter):
        if not np.any(active):
            break
        gy = g * ybar[None, :]
        A11 = np.sum(gy * gy, axis=1)
        A12 = np.sum(gy * g, axis=1)
        A22 = np.sum(g * g, axis=1)
        tr = A11 + A22
        disc = np.sqrt(np.maximum((A11 - A22) ** 2 + 4.0 * A12 * A12, 0.0))
        eig = 0.5 * (tr - disc)
        min_eig = np.where(active, np.minimum(min_eig, eig), min_eig)

        # J columns are (-g*ybar, -g), so J^T r = -(sum gy*r, sum g*r)
        g1 = -np.sum(gy * r, axis=1)
        g2 = -np.sum(g * r, axis=1)
        M11 = A11 + lam
        M22 = A22 + lam
        det = M11 * M22 - A12 * A12
        det = np.where(det == 0.0, 1e-300, det)
        da = (-g1 * M22 + g2 * A12) / det
        db = (-g2 * M11 + g1 * A12) / det

        ta, tb, clipped, ray = _project_wedge_batch_info(a + da, b + db, tlo, thi)
        if np.any(clipped):
            # the raw step points out of the wedge; take a damped Newton step
            # along the active boundary ray instead of crawling via projection
            ua, ub = np.cos(ray), np.sin(ray)
            gu = -g * (ybar[None, :] * ua[:, None] + ub[:, None])
            num = np.sum(gu * r, axis=1)
            den = np.sum(gu * gu, axis=1) + lam
            ds = -num / np.where(den == 0.0, 1e-300, den)
            s1 = np.maximum(a * ua + b * ub + ds, 0.0)
            ta = np.where(clipped, s1 * ua, ta)
            tb = np.where(clipped, s1 * ub, tb)
        ta, tb = _clamp_b_min(ta, tb, clo, chi, cfg.b_min)
        step = np.hypot(ta - a, tb - b)

        rt, gt, _, Ft, oobt = _fpht_batch_eval(
            right_flat, width, xs, row_base, lvals, ybar, ta, tb, cfg.bias_compensation)
        accept = active & ~oobt & (Ft < F)
        F_prev = F
        a = np.where(accept, ta, a)
        b = np.where(accept, tb, b)
        F = np.where(accept, Ft, F)
        r = np.where(accept[:, None], rt, r)
        g = np.where(accept[:, None], gt, g)
        lam = np.where(accept, lam * 0.1, np.where(active, lam * 10.0, lam))
        iters = np.where(active, iters + 1, iters)

        # a proposed step below tolerance means no meaningful move is left,
        # whether or not it was accepted; likewise a vanishing relative
        # reduction on an accepted step
        rel_red = np.where(accept, (F_prev - F) / np.maximum(F, 1e-12), np.inf)
        done = active & ((step < cfg.step_tol) | (rel_red < 1e-6))
        converged |= done
        stuck = active & ~accept & (lam > 1e12)
        active &= ~(done | stuck)
        if history is not None:
            history.append(F.copy())

    return {
        "a": a, "b": b, "F": F, "iterations": iters,
        "min_eig": np.where(np.isinf(min_eig), 0.0, min_eig),
        "converged": converged & ~failed, "failed": failed,
        "history": history,
    }


def fpht_fit(left: IntensityImage, right: IntensityImage, patch: PatchSpec,
             init: DisparityLine, wedge: FeasibleWedge, cfg: DetectorConfig) -> HypothesisFit:
    """Projected LM fit of a disparity line inside its feasible wedge."""
    dx, dy, ybar = _patch_layout(patch.w, patch.h)
    xs = (patch.xc + dx)[None, :]
    rows = (patch.yc + dy).astype(np.int64)
    row_base = (rows * right.width)[None, :]
    lvals = left.pixels[rows, (patch.xc + dx).astype(np.int64)][None, :]

    tlo = np.array([wedge.theta_lo])
    thi = np.array([wedge.theta_hi])
    clo = np.array([wedge.c_lo])
    chi = np.array([wedge.c_hi])
    a0, b0 = _project_wedge_batch(np.array([init.a]), np.array([init.b]), tlo, thi)
    a0, b0 = _clamp_b_min(a0, b0, clo, chi, cfg.b_min)
    out = _lm_fpht_batch(right.pixels.ravel(), right.width, xs, row_base, lvals, ybar,
                         a0, b0, clo, chi, tlo, thi, np.array([True]), cfg)
    return _fit_from_batch("fpht", out, 0)


# ---------------------------------------------------------------------------
# batched PHT Levenberg-Marquardt


def _pht_normals(n0, pitch, tilt):
    """Plane normals R(e2, tilt) R(X, pitch) n0 and their parameter derivatives.

    The second rotation axis e2 = n0 x X is orthogonal to the reference
    normal, so both angles genuinely move it (a rotation about an axis
    parallel to n0 would be unobservable).  For the fronto-parallel
    reference e2 is the yaw axis, for the ground reference the lateral
    tilt axis.
    """
    e2 = np.array([0.0, n0[2], -n0[1]])  # n0 x X, unit because n0 has nx = 0

    def pitched(p):
        return np.stack([np.zeros_like(p),
                         n0[1] * np.cos(p) - n0[2] * np.sin(p),
                         n0[1] * np.sin(p) + n0[2] * np.cos(p)], axis=1)

    def rodrigues(v, c, s):
        cross = np.stack([e2[1] * v[:, 2] - e2[2] * v[:, 1],
                          e2[2] * v[:, 0] - e2[0] * v[:, 2],
                          e2[0] * v[:, 1] - e2[1] * v[:, 0]], axis=1)
        dot = v @ e2
        return v * c[:, None] + cross * s[:, None] + e2[None, :] * (dot * (1.0 - c))[:, None]

    c, s = np.cos(tilt), np.sin(tilt)
    n1 = pitched(pitch)
    dn1 = pitched(pitch + math.pi / 2.0)
    n = rodrigues(n1, c, s)
    dn_pitch = rodrigues(dn1, c, s)
    # d/dtilt of Rodrigues: -v sin + (e2 x v) cos + e2 (e2.v) sin
    cross1 = np.stack([e2[1] * n1[:, 2] - e2[2] * n1[:, 1],
                       e2[2] * n1[:, 0] - e2[0] * n1[:, 2],
                       e2[0] * n1[:, 1] - e2[1] * n1[:, 0]], axis=1)
    dot1 = n1 @ e2
    dn_tilt = (-n1 * s[:, None] + cross1 * c[:, None]
               + e2[None, :] * (dot1 * s)[:, None])
    return n, dn_pitch, dn_tilt


def _lm_pht_batch(rig: CameraRig, right_flat, width, height, X, lvals, n0,
                  pitch0, tilt0, invd0, phi_max_rad, feasible, cfg: DetectorConfig):
    """Projected LM over (pitch, tilt, 1/d) with per-patch pixel columns X (N, 3, P)."""
    n_patch = pitch0.size
    pitch = np.clip(pitch0, -phi_max_rad, phi_max_rad)
    tilt = np.clip(tilt0, -phi_max_rad, phi_max_rad)
    invd = np.clip(invd0, 1e-6, 1e3)
    lam = np.full(n_patch, cfg.damping_init)
    iters = np.zeros(n_patch, dtype=np.int64)
    converged = np.zeros(n_patch, dtype=bool)
    min_eig = np.full(n_patch, np.inf)

    K = np.array([[rig.fx, 0.0, rig.x0], [0.0, rig.fy, rig.y0], [0.0, 0.0, 1.0]])
    K_inv = np.array([[1.0 / rig.fx, 0.0, -rig.x0 / rig.fx],
                      [0.0, 1.0 / rig.fy, -rig.y0 / rig.fy],
                      [0.0, 0.0, 1.0]])
    t = np.array([-rig.baseline, 0.0, 0.0])

    def evaluate(p, t_, i_):
        n, dnp, dnt = _pht_normals(n0, p, t_)
        M = np.broadcast_to(np.eye(3), (n_patch, 3, 3)).copy()
        M -= i_[:, None, None] * (t[None, :, None] * n[:, None, :])
        H = np.einsum("ij,njk,kl->nil", K, M, K_inv)
        hx = np.einsum("nij,njp->nip", H, X)
        w = hx[:, 2, :]
        xw = hx[:, 0, :] / w
        yw = hx[:, 1, :] / w
        val, gx, gy, inb = _gather_bilinear(right_flat, width, height, xw, yw)
        n_in = np.sum(inb, axis=1)
        s = np.where(inb, val - lvals, 0.0)
        # reference f = (Il + Ir o W)/2, residuals stacked from both images
        r = np.concatenate([-0.5 * s, 0.5 * s], axis=1)
        F = np.sum(r * r, axis=1)
        oob = n_in < (1.0 - _MAX_OOB_FRAC) * X.shape[2]
        return dict(n=n, dnp=dnp, dnt=dnt, hx=hx, w=w, gx=gx, gy=gy,
                    inb=inb, r=r, F=F, oob=oob)

    state = evaluate(pitch, tilt, invd)
    failed = ~feasible | state["oob"]
    F = np.where(failed, np.nan, state["F"])
    min_eig[failed] = 0.0
    active = ~failed
    history = [F.copy()] if cfg.record_history else None

    for _ in range(cfg.max_iter):
        if not np.any(active):
            break
        n, dnp, dnt = state["n"], state["dnp"], state["dnt"]
        hx, w = state["hx"], state["w"]
        gx, gy, inb, r = state["gx"], state["gy"], state["inb"], state["r"]
        u, v = hx[:, 0, :], hx[:, 1, :]
        P = X.shape[2]
        G = np.empty((n_patch, P, 3))
        for k, (core, scale) in enumerate(((dnp, invd), (dnt, invd),
                                           (n, np.ones_like(invd)))):
            dM = -(t[None, :, None] * core[:, None, :]) * scale[:, None, None]
            dH = np.einsum("ij,njk,kl->nil", K, dM, K_inv)
            dhx = np.einsum("nij,njp->nip", dH, X)
            dxw = (dhx[:, 0, :] * w - u * dhx[:, 2, :]) / (w * w)
            dyw = (dhx[:, 1, :] * w - v * dhx[:, 2, :]) / (w * w)
            G[:, :, k] = np.where(inb, gx * dxw + gy * dyw, 0.0)
        J = np.concatenate([-0.5 * G, 0.5 * G], axis=1)
        A = np.einsum("npk,npl->nkl", J, J)
        grad = np.einsum("npk,np->nk", J, r)

        eig = np.linalg.eigvalsh(A)[:, 0]
        min_eig = np.where(active, np.minimum(min_eig, eig), min_eig)

        eye = np.broadcast_to(np.eye(3), A.shape)
        M = A + lam[:, None, None] * eye
        delta = np.linalg.solve(M, -grad[:, :, None])[:, :, 0]

        cur = np.stack([pitch, tilt, invd], axis=1)
        lo = np.array([-phi_max_rad, -phi_max_rad, 1e-6])
        hi = np.array([phi_max_rad, phi_max_rad, 1e3])
        trial_raw = np.clip(cur + delta, lo, hi)
        pinned = trial_raw != cur + delta
        if np.any(pinned):
            # constrained Newton step: pinned coordinates land on their
            # bound and the free ones are re-solved against the gradient
            # including that jump
            free = (~pinned).astype(np.float64)
            dpin = np.where(pinned, trial_raw - cur, 0.0)
            g_eff = grad + np.einsum("nkl,nl->nk", M, dpin)
            Mr = M * free[:, :, None] * free[:, None, :] + eye * pinned[:, :, None]
            delta_r = np.linalg.solve(Mr, -(g_eff * free)[:, :, None])[:, :, 0]
            trial_r = np.clip(cur + delta_r, lo, hi)
            trial_raw = np.where(pinned, trial_raw, trial_r)
        tp, tt, ti = trial_raw[:, 0], trial_raw[:, 1], trial_raw[:, 2]
        step = np.sqrt((tp - pitch) ** 2 + (tt - tilt) ** 2 + (ti - invd) ** 2)

        trial = evaluate(tp, tt, ti)
        accept = active & ~trial["oob"] & (trial["F"] < F)
        F_prev = F
        pitch = np.where(accept, tp, pitch)
        tilt = np.where(accept, tt, tilt)
        invd = np.where(accept, ti, invd)
        F = np.where(accept, trial["F"], F)
        for key, cur in state.items():
            new = trial[key]
            state[key] = np.where(accept[(...,) + (None,) * (cur.ndim - 1)], new, cur)
        lam = np.where(accept, lam * 0.1, np.where(active, lam * 10.0, lam))
        iters = np.where(active, iters + 1, iters)

        rel_red = np.where(accept, (F_prev - F) / np.maximum(F, 1e-12), np.inf)
        done = active & ((step < cfg.step_tol) | (rel_red < 1e-6))
        converged |= done
        stuck = active & ~accept & (lam > 1e12)
        active &= ~(done | stuck)
        if history is not None:
            history.append(F.copy())

    return {
        "pitch": pitch, "tilt": tilt, "invd": invd, "F": F, "iterations": iters,
        "min_eig": np.where(np.isinf(min_eig), 0.0, min_eig),
        "converged": converged & ~failed, "failed": failed,
        "history": history, "reference": tuple(float(c) for c in n0),
    }


def _plane_from_state(n0, pitch, tilt, invd) -> Plane3D:
    n, _, _ = _pht_normals(np.asarray(n0), np.array([float(pitch)]), np.array([float(tilt)]))
    nx, ny, nz = (float(c) for c in n[0])
    norm = math.sqrt(nx * nx + ny * ny + nz * nz)
    return Plane3D(nx / norm, ny / norm, nz / norm, 1.0 / float(invd))


def _fit_from_batch(method, out, idx) -> HypothesisFit:
    if method == "fpht":
        params = DisparityLine(float(out["a"][idx]), float(out["b"][idx]))
    else:
        params = _plane_from_state(out["reference"], out["pitch"][idx],
                                   out["tilt"][idx], out["invd"][idx])
    hist = None
    if out["history"] is not None:
        hist = tuple(float(h[idx]) for h in out["history"])
    return HypothesisFit(
        params=params,
        residual_sum=float(out["F"][idx]),
        iterations=int(out["iterations"][idx]),
        min_eigenvalue=float(out["min_eig"][idx]),
        converged=bool(out["converged"][idx]),
        history=hist,
    )


def pht_fit(left: IntensityImage, right: IntensityImage, patch: PatchSpec,
            init: Plane3D, bounds_deg: float, cfg: DetectorConfig, rig: CameraRig,
            reference: tuple = FRONTO_NORMAL) -> HypothesisFit:
    """Projected LM plane fit warped through the plane-induced homography."""
    if init.d <= 0:
        raise ValueError("initial plane must be canonical (d > 0)")
    dx, dy, _ = _patch_layout(patch.w, patch.h)
    xs = patch.xc + dx
    ys = patch.yc + dy
    X = np.stack([xs, ys, np.ones_like(xs)])[None, :, :]
    lvals = left.pixels[ys.astype(np.int64), xs.astype(np.int64)][None, :]

    # factor the init normal into (pitch, tilt); nx = sin(tilt) cos(pitch)
    e2 = np.array([0.0, reference[2], -reference[1]])
    nvec = np.array([init.nx, init.ny, init.nz])
    tilt0 = math.asin(max(-1.0, min(1.0, init.nx)))
    pitch0 = 0.0
    for _ in range(4):
        c, s = math.cos(-tilt0), math.sin(-tilt0)
        detilted = (nvec * c + np.cross(e2, nvec) * s
                    + e2 * float(nvec @ e2) * (1.0 - c))
        pitch0 = pitch_between(detilted[1], detilted[2], reference[1], reference[2])
        tilt0 = math.asin(max(-1.0, min(1.0, init.nx / max(math.cos(pitch0), 1e-9))))
    out = _lm_pht_batch(rig, right.pixels.ravel(), right.width, right.height,
                        X, lvals, np.asarray(reference, dtype=np.float64),
                        np.array([pitch0]), np.array([tilt0]), np.array([1.0 / init.d]),
                        math.radians(bounds_deg), np.array([True]), cfg)
    return _fit_from_batch("pht", out, 0)


# ---------------------------------------------------------------------------
# decision rule


def glrt_decide(fit_f: HypothesisFit, fit_o: HypothesisFit, cfg: DetectorConfig,
                patch: PatchSpec = None) -> PatchDecision:
    """Threshold the likelihood-ratio statistic F_f - F_o.

    Patches failing the texture / convergence gate yield no_decision
    independently of tau.
    """
    statistic = fit_f.residual_sum - fit_o.residual_sum
    gate = (fit_f.converged and fit_o.converged
            and fit_f.min_eigenvalue >= cfg.lambda_min
            and fit_o.min_eigenvalue >= cfg.lambda_min)
    if not gate:
        verdict = NO_DECISION
    elif statistic > cfg.tau:
        verdict = OBSTACLE
    else:
        verdict = FREE_SPACE
    return PatchDecision(patch=patch, verdict=verdict,
                         statistic=float(statistic), fit_f=fit_f, fit_o=fit_o)


# ---------------------------------------------------------------------------
# whole-frame detection


def _wedge_cache(ref_normal, phi_deg, rig, w, h):
    ref = Plane3D(*ref_normal, 1.0)
    cache = {}

    def get(yc: int):
        if yc not in cache:
            try:
                cache[yc] = wedge_for_hypothesis(
                    ref, phi_deg, rig, PatchSpec(xc=w, yc=yc, w=w, h=h))
            except SingularReference:
                cache[yc] = None
        return cache[yc]

    return get


def _init_lines(dvals, valid, ybar, min_count):
    """Per-patch free-space LS line and obstacle median from init disparities."""
    vf = valid.astype(np.float64)
    cnt = np.sum(vf, axis=1)
    d0 = np.where(valid, dvals, 0.0)
    s_y = vf @ ybar
    s_yy = vf @ (ybar * ybar)
    s_d = np.sum(d0, axis=1)
    s_yd = d0 @ ybar
    denom = cnt * s_yy - s_y * s_y
    ok = (cnt >= min_count) & (denom > 1e-9)
    slope = np.where(ok, (cnt * s_yd - s_y * s_d) / np.where(denom == 0, 1.0, denom), 0.0)

    med = np.full(cnt.shape, np.nan)
    rows_with = cnt > 0
    if np.any(rows_with):
        masked = np.where(valid[rows_with], dvals[rows_with], np.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med[rows_with] = np.nanmedian(masked, axis=1)
    intercept = np.where(ok, (s_d - slope * s_y) / np.where(cnt == 0, 1.0, cnt), med)
    return slope, intercept, med, cnt


def _detect_chunk(args):
    (method, rig, left_px, right_px, dmap_vals, centers, cfg,
     wedge_f_rows, wedge_o_rows) = args
    height, width = left_px.shape
    w, h = cfg.patch_w, cfg.patch_h
    dx, dy, ybar = _patch_layout(w, h)
    cx = centers[:, 0][:, None].astype(np.float64)
    cy = centers[:, 1][:, None].astype(np.float64)
    cols = (cx + dx[None, :]).astype(np.int64)
    rows = (cy + dy[None, :]).astype(np.int64)
    lvals = left_px[rows, cols]
    dvals = dmap_vals[rows, cols]
    valid = np.isfinite(dvals)

    slope, intercept, med, cnt = _init_lines(dvals, valid, ybar, cfg.min_init_count)
    has_init = (cnt > 0) & np.isfinite(med)

    wf = [wedge_f_rows(int(y)) for y in centers[:, 1]]
    wo = [wedge_o_rows(int(y)) for y in centers[:, 1]]
    clo_f, chi_f, tlo_f, thi_f, ok_f = _wedge_arrays(wf)
    clo_o, chi_o, tlo_o, thi_o, ok_o = _wedge_arrays(wo)
    feasible = has_init & ok_f & ok_o

    med_safe = np.where(has_init, med, 1.0)
    a_f = np.where(feasible, slope, 0.0)
    b_f = np.where(feasible & np.isfinite(intercept), intercept, 1.0)
    a_o = np.zeros_like(med_safe)
    b_o = med_safe

    a_f, b_f = _project_wedge_batch(a_f, b_f, tlo_f, thi_f)
    a_f, b_f = _clamp_b_min(a_f, b_f, np.nan_to_num(clo_f, nan=-np.inf),
                            np.nan_to_num(chi_f, nan=np.inf), cfg.b_min)
    a_o, b_o = _project_wedge_batch(a_o, b_o, tlo_o, thi_o)
    a_o, b_o = _clamp_b_min(a_o, b_o, np.nan_to_num(clo_o, nan=-np.inf),
                            np.nan_to_num(chi_o, nan=np.inf), cfg.b_min)

    if method == "fpht":
        xs = cx + dx[None, :]
        row_base = rows * width
        rflat = right_px.ravel()
        out_f = _lm_fpht_batch(rflat, width, xs, row_base, lvals, ybar,
                               a_f, b_f, clo_f, chi_f, tlo_f, thi_f, feasible, cfg)
        out_o = _lm_fpht_batch(rflat, width, xs, row_base, lvals, ybar,
                               a_o, b_o, clo_o, chi_o, tlo_o, thi_o, feasible, cfg)
        return ("fpht", centers, out_f, out_o)

    def line_to_state(a, b, ref):
        u = 2.0 * a * rig.fy / (h * rig.fx)
        v = -(b / rig.fx) - u * (cy[:, 0] - rig.y0) / rig.fy
        norm = np.hypot(u, v)
        norm = np.where(norm == 0, 1e-12, norm)
        ny, nz = u / norm, v / norm
        p = np.arctan2(nz * ref[1] - ny * ref[2], ny * ref[1] + nz * ref[2])
        return p, norm / rig.baseline

    pf, invd_f = line_to_state(a_f, b_f, GROUND_NORMAL)
    po, invd_o = line_to_state(a_o, b_o, FRONTO_NORMAL)
    xs = cx + dx[None, :]
    ys = cy + dy[None, :]
    X = np.stack([xs, ys, np.ones_like(xs)], axis=1)
    rflat = right_px.ravel()
    zeros = np.zeros_like(pf)
    out_f = _lm_pht_batch(rig, rflat, width, height, X, lvals,
                          np.asarray(GROUND_NORMAL), pf, zeros, invd_f,
                          math.radians(cfg.phi_f), feasible, cfg)
    out_o = _lm_pht_batch(rig, rflat, width, height, X, lvals,
                          np.asarray(FRONTO_NORMAL), po, zeros.copy(), invd_o,
                          math.radians(cfg.phi_o), feasible, cfg)
    return ("pht", centers, out_f, out_o)


def detect_frame(left: IntensityImage, right: IntensityImage, dmap_init: DisparityMap,
                 grid: PatchGrid, cfg: DetectorConfig, rig: CameraRig,
                 method: str = "fpht", threads: int = 1) -> list:
    """One GLRT decision per grid patch, ordered by patch index.

    Free-space fits are initialized from a least-squares line through the
    patch's valid init disparities, obstacle fits from their median at zero
    slope; both are projected into their wedges before optimization.
    Patches with no valid init disparities, an empty wedge, or failed fits
    yield no_decision.  Scheduling (threads, chunking) never changes the
    output.
    """
    if method not in ("fpht", "pht"):
        raise ValueError(f"unknown method {method!r}")
    shapes = {left.pixels.shape, right.pixels.shape, dmap_init.values.shape}
    if len(shapes) != 1:
        raise DimensionMismatch("left/right/disparity shapes differ")
    if left.pixels.shape != (rig.height, rig.width):
        raise DimensionMismatch("rig does not match image dimensions")

    centers = np.array(grid.centers, dtype=np.int64).reshape(-1, 2)
    if centers.size == 0:
        return []
    wedge_f = _wedge_cache(GROUND_NORMAL, cfg.phi_f, rig, cfg.patch_w, cfg.patch_h)
    wedge_o = _wedge_cache(FRONTO_NORMAL, cfg.phi_o, rig, cfg.patch_w, cfg.patch_h)

    chunks = [centers[i:i + _CHUNK] for i in range(0, len(centers), _CHUNK)]
    jobs = [(method, rig, left.pixels, right.pixels, dmap_init.values,
             chunk, cfg, wedge_f, wedge_o) for chunk in chunks]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(_detect_chunk, jobs))
    else:
        outs = [_detect_chunk(job) for job in jobs]

    decisions = []
    for kind, chunk, out_f, out_o in outs:
        for i, (x, y) in enumerate(chunk):
            patch = PatchSpec(xc=int(x), yc=int(y), w=cfg.patch_w, h=cfg.patch_h)
            fit_f = _fit_from_batch(kind, out_f, i)
            fit_o = _fit_from_batch(kind, out_o, i)
            decisions.append(glrt_decide(fit_f, fit_o, cfg, patch=patch))
    return decisions
