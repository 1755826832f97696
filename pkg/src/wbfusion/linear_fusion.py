"""Convex-blend machinery: best per-pixel convex combination of presets and
the hull analysis showing where ground truth escapes the preset polytope.

All computation runs in float64 on encoded sRGB values. Pixel fits are
independent, so the solver kernel is compiled with numba and parallelized
across pixels; results are bit-identical to the sequential path.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

import numba
import numpy as np

from .model import PresetStack

# the parallel solver kernel must not be entered concurrently (workqueue layer)
_KERNEL_LOCK = threading.Lock()


def project_to_simplex(v):
    """Euclidean projection of a vector onto the probability simplex.

    Sort-and-threshold algorithm; exact up to float rounding.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"project_to_simplex: expected a vector, got shape {v.shape}")
    return project_rows_to_simplex(v[None])[0]


def project_rows_to_simplex(rows):
    """Row-wise simplex projection of an [N,P] array."""
    rows = np.asarray(rows, dtype=np.float64)
    n, p = rows.shape
    u = np.sort(rows, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1)
    j = np.arange(1, p + 1)
    cond = u + (1.0 - css) / j > 0.0
    # largest j satisfying the threshold condition (cond[:,0] is always true)
    rho = p - 1 - np.argmax(cond[:, ::-1], axis=1)
    lam = (1.0 - css[np.arange(n), rho]) / (rho + 1.0)
    return np.maximum(rows + lam[:, None], 0.0)


@numba.njit(cache=True)
def _project_simplex_inplace(w, buf):
    p = w.shape[0]
    for i in range(p):
        buf[i] = w[i]
    # insertion sort, descending
    for i in range(1, p):
        key = buf[i]
        j = i - 1
        while j >= 0 and buf[j] < key:
            buf[j + 1] = buf[j]
            j -= 1
        buf[j + 1] = key
    css = 0.0
    lam = 0.0
    for j in range(p):
        css += buf[j]
        t = (1.0 - css) / (j + 1.0)
        if buf[j] + t > 0.0:
            lam = t
    for i in range(p):
        w[i] = max(w[i] + lam, 0.0)


@numba.njit(cache=True)
def _objective(a, t, w):
    r2 = 0.0
    for i in range(a.shape[1]):
        s = 0.0
        for k in range(a.shape[0]):
            s += w[k] * a[k, i]
        r2 += (s - t[i]) ** 2
    return r2


@numba.njit(cache=True)
def _best_face_fit(a, t, w_best):
    """Exact simplex-constrained least squares by face enumeration.

    Every face of the simplex is a subset S of presets; on S the sum
    constraint is eliminated by substitution and the remaining unconstrained
    least squares solved exactly (min-norm). The best feasible candidate over
    all 2^P - 1 faces is the global optimum; ties keep the uniform weights
    (degenerate preset sets).
    """
    p, c = a.shape
    for k in range(p):
        w_best[k] = 1.0 / p
    obj_best = _objective(a, t, w_best)
    members = np.empty(p, np.int64)
    w_cand = np.empty(p)
    for mask in range(1, 2**p):
        m = 0
        for k in range(p):
            if mask & (1 << k):
                members[m] = k
                m += 1
        anchor = members[m - 1]
        for k in range(p):
            w_cand[k] = 0.0
        if m == 1:
            w_cand[anchor] = 1.0
        else:
            bmat = np.empty((c, m - 1))
            rhs = np.empty(c)
            for i in range(c):
                for j in range(m - 1):
                    bmat[i, j] = a[members[j], i] - a[anchor, i]
                rhs[i] = t[i] - a[anchor, i]
            u, _, _, _ = np.linalg.lstsq(bmat, rhs)
            usum = 0.0
            for j in range(m - 1):
                w_cand[members[j]] = u[j]
                usum += u[j]
            w_cand[anchor] = 1.0 - usum
        feasible = True
        for k in range(p):
            if w_cand[k] < -1e-9:
                feasible = False
                break
        if not feasible:
            continue
        total = 0.0
        for k in range(p):
            w_cand[k] = max(w_cand[k], 0.0)
            total += w_cand[k]
        for k in range(p):
            w_cand[k] /= total
        obj = _objective(a, t, w_cand)
        if obj < obj_best - 1e-12 * (1.0 + obj_best):
            obj_best = obj
            for k in range(p):
                w_best[k] = w_cand[k]
    return obj_best


@numba.njit(cache=True, parallel=True)
def _fit_weights_kernel(presets, targets, max_iters, tol, weights, residuals):
    n, p, c = presets.shape
    for px in numba.prange(n):
        a = presets[px]
        t = targets[px]
        # largest eigenvalue of P^T P by power iteration -> Lipschitz step
        gram = np.zeros((c, c))
        for i in range(c):
            for j in range(c):
                s = 0.0
                for k in range(p):
                    s += a[k, i] * a[k, j]
                gram[i, j] = s
        v = np.ones(c)
        lam = 0.0
        for _ in range(100):
            nv = gram @ v
            norm = np.sqrt((nv * nv).sum())
            if norm < 1e-300:
                lam = 0.0
                break
            v = nv / norm
            lam = norm
        step = 1.0 / max(2.0 * lam, 1e-12)

        w = np.empty(p)
        _best_face_fit(a, t, w)
        wn = np.empty(p)
        buf = np.empty(p)
        blend = np.empty(c)
        for _ in range(max_iters):
            for i in range(c):
                s = 0.0
                for k in range(p):
                    s += w[k] * a[k, i]
                blend[i] = s - t[i]
            for k in range(p):
                g = 0.0
                for i in range(c):
                    g += a[k, i] * blend[i]
                wn[k] = w[k] - step * 2.0 * g
            _project_simplex_inplace(wn, buf)
            delta = 0.0
            for k in range(p):
                d = abs(wn[k] - w[k])
                if d > delta:
                    delta = d
                w[k] = wn[k]
            if delta < tol:
                break
        for k in range(p):
            weights[px, k] = w[k]
        residuals[px] = np.sqrt(_objective(a, t, w))


def fit_weights_batch(presets, targets, max_iters=10000, tol=1e-9):
    """Best simplex weights per row: minimize ||sum_p w_p P_p - target||_2.

    presets: [N,P,3]; targets: [N,3]. Projected gradient descent from the
    uniform weights with step 1/L, L = 2*sigma_max(P^T P) per pixel, stopping
    when the max weight change drops below tol or after max_iters. Returns
    (weights [N,P], residuals [N]). Degenerate preset sets (all rows equal)
    keep the uniform initialization.
    """
    presets = np.ascontiguousarray(presets, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    if presets.ndim != 3 or targets.ndim != 2 or presets.shape[0] != targets.shape[0]:
        raise ValueError(
            f"fit_weights_batch: incompatible shapes {presets.shape} vs {targets.shape}"
        )
    if presets.shape[2] != targets.shape[1]:
        raise ValueError(
            f"fit_weights_batch: channel mismatch {presets.shape[2]} vs {targets.shape[1]}"
        )
    n, p, _ = presets.shape
    weights = np.empty((n, p))
    residuals = np.empty(n)
    with _KERNEL_LOCK:
        _fit_weights_kernel(presets, targets, max_iters, tol, weights, residuals)
    return weights, residuals


def fit_pixel_weights(preset_pixels, target, max_iters=10000, tol=1e-9):
    """Simplex weights for one pixel: preset_pixels [P,3], target [3].

    Returns (weights [P], residual).
    """
    w, r = fit_weights_batch(
        np.asarray(preset_pixels)[None], np.asarray(target)[None], max_iters, tol
    )
    return w[0], float(r[0])


def _pixel_matrices(stack, gt):
    imgs = stack.images if isinstance(stack, PresetStack) else np.asarray(stack)
    gt = np.asarray(gt, dtype=np.float64)
    p, h, w, _ = imgs.shape
    if gt.shape != (h, w, 3):
        raise ValueError(f"ground truth shape {gt.shape} does not match presets {(h, w, 3)}")
    presets = np.asarray(imgs, dtype=np.float64).reshape(p, h * w, 3).transpose(1, 0, 2)
    return presets, gt.reshape(-1, 3), h, w


def oracle_blend(stack, gt):
    """Best achievable per-pixel convex blend of the presets toward gt.

    This is the performance ceiling of any per-pixel linear fusion method.
    Returns (blended image [H,W,3], weights [H,W,P]).
    """
    presets, targets, h, w = _pixel_matrices(stack, gt)
    weights, _ = fit_weights_batch(presets, targets)
    blend = np.einsum("np,npc->nc", weights, presets)
    return blend.reshape(h, w, 3), weights.reshape(h, w, -1)


@dataclass
class HullReport:
    """Per-pixel distances from ground truth to the preset convex hull."""

    distances: np.ndarray
    tol: float

    @property
    def out_of_hull_fraction(self):
        return float((self.distances > self.tol).mean())

    @property
    def mean_distance(self):
        return float(self.distances.mean())

    @property
    def max_distance(self):
        return float(self.distances.max())

    def fraction_at(self, tol):
        return float((self.distances > tol).mean())

    def to_record(self, scene_id=""):
        return {
            "record": "hull",
            "scene_id": scene_id,
            "tol": self.tol,
            "out_of_hull_fraction": self.out_of_hull_fraction,
            "mean_distance": self.mean_distance,
            "max_distance": self.max_distance,
            "pixel_count": int(self.distances.size),
        }

    def to_json(self, scene_id=""):
        return json.dumps(self.to_record(scene_id), indent=2, sort_keys=True)

    def distance_map(self, scale=0.1):
        """Grayscale visualization: distance/scale clipped to [0,1]."""
        return np.clip(self.distances / scale, 0.0, 1.0)


def analyze_hull(stack, gt, tol=1e-3):
    """Distance of every gt pixel to the convex hull of its preset pixels."""
    presets, targets, h, w = _pixel_matrices(stack, gt)
    _, residuals = fit_weights_batch(presets, targets)
    return HullReport(distances=residuals.reshape(h, w), tol=float(tol))
