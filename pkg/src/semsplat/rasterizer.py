"""Tile-based forward/backward alpha-blending rasterizer.

Forward: Gaussians are projected, binned into 16x16 pixel tiles, depth-sorted
per tile (ties by ascending index), and composited front-to-back per pixel.
Color and the D-dim semantic feature channel share identical blend weights.

Backward: hand-derived adjoint. The blend kernel accumulates per-(tile,splat)
gradient slots which are merged serially in tile order, so results are
bitwise reproducible for any thread count; the chain through projection,
covariance construction, and spherical harmonics runs vectorized afterwards.

Conventions inherited from standard splatting practice: alpha clamp 0.99,
contribution cutoff 1/255, early termination at transmittance 1e-4, and a
3-sigma splat support radius (the same cutoff the tile binning implies, kept
explicit so the brute-force reference composites exactly the same set).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .geometry import (
    Camera,
    GaussianSet,
    build_covariance3d,
    eval_sh,
    projection_jacobian,
    project_gaussians,
    quat_to_rotmat,
    sh_basis,
    sh_basis_grad,
    sigmoid,
)

TILE_SIZE = 16
ALPHA_CLAMP = 0.99
CONTRIB_CUTOFF = 1.0 / 255.0
EARLY_STOP_T = 1e-4
POWER_CUTOFF = -4.5  # 3-sigma Mahalanobis support


def _configure_threads():
    env = os.environ.get("SPCGS_THREADS")
    if env:
        try:
            n = max(1, min(int(env), numba.config.NUMBA_NUM_THREADS))
            numba.set_num_threads(n)
        except ValueError:
            pass


_configure_threads()


@dataclass
class RenderOutput:
    color: np.ndarray            # (H,W,3)
    feature: np.ndarray          # (H,W,D)
    alpha: np.ndarray            # (H,W) accumulated sum of T_i * alpha_i
    depth: np.ndarray            # (H,W) expected depth
    max_weight_index: np.ndarray  # (H,W) int32, -1 = no contributor
    max_weight_value: np.ndarray  # (H,W)
    final_transmittance: np.ndarray  # (H,W)
    saved: dict = field(default_factory=dict, repr=False)  # forward state for backward


@dataclass
class RenderGrads:
    positions: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logits: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    features: np.ndarray
    screen_positions: np.ndarray  # (N,2) d_mean2d, used by densification stats
    visible: np.ndarray           # (N,) bool, in frustum with nonzero extent

    @staticmethod
    def zeros(scene: GaussianSet) -> "RenderGrads":
        n = len(scene)
        return RenderGrads(
            np.zeros((n, 3)), np.zeros(scene.sh_coeffs.shape), np.zeros(n),
            np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(scene.features.shape, dtype=np.float64),
            np.zeros((n, 2)), np.zeros(n, dtype=bool),
        )

    def add(self, other: "RenderGrads"):
        self.positions += other.positions
        self.sh_coeffs += other.sh_coeffs
        self.opacity_logits += other.opacity_logits
        self.log_scales += other.log_scales
        self.rotations += other.rotations
        self.features += other.features
        self.screen_positions += other.screen_positions
        self.visible |= other.visible
        return self


@njit(cache=True, parallel=True, fastmath=False)
def _forward_kernel(height, width, tiles_x, tile_offsets, tile_gauss,
                    mean2d, conic, opacity, color, feat, depth, bg,
                    out_color, out_feat, out_alpha, out_depth,
                    out_index, out_weight, out_t, out_ncontrib):
    n_tiles = tile_offsets.shape[0] - 1
    d_dim = feat.shape[1]
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        y0 = ty * TILE_SIZE
        x0 = tx * TILE_SIZE
        y1 = min(y0 + TILE_SIZE, height)
        x1 = min(x0 + TILE_SIZE, width)
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                xc = px + 0.5
                yc = py + 0.5
                t_cur = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_a = 0.0
                acc_d = 0.0
                best_w = 0.0
                best_i = -1
                ncon = 0
                for l in range(lo, hi):
                    g = tile_gauss[l]
                    dx = xc - mean2d[g, 0]
                    dy = yc - mean2d[g, 1]
                    power = (-0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                             - conic[g, 1] * dx * dy)
                    if power > 0.0 or power < POWER_CUTOFF:
                        continue
                    a = opacity[g] * np.exp(power)
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    if a < CONTRIB_CUTOFF:
                        continue
                    test_t = t_cur * (1.0 - a)
                    if test_t < EARLY_STOP_T:
                        break
                    w = t_cur * a
                    acc_r += w * color[g, 0]
                    acc_g += w * color[g, 1]
                    acc_b += w * color[g, 2]
                    for d in range(d_dim):
                        out_feat[py, px, d] += w * feat[g, d]
                    acc_a += w
                    acc_d += w * depth[g]
                    if w > best_w:
                        best_w = w
                        best_i = g
                    t_cur = test_t
                    ncon += 1
                out_color[py, px, 0] = acc_r + t_cur * bg[0]
                out_color[py, px, 1] = acc_g + t_cur * bg[1]
                out_color[py, px, 2] = acc_b + t_cur * bg[2]
                out_alpha[py, px] = acc_a
                out_depth[py, px] = acc_d
                out_index[py, px] = best_i
                out_weight[py, px] = best_w
                out_t[py, px] = t_cur
                out_ncontrib[py, px] = ncon


@njit(cache=True, parallel=True, fastmath=False)
def _backward_kernel(height, width, tiles_x, tile_offsets, tile_gauss,
                     mean2d, conic, opacity, color, feat, bg,
                     d_color, d_feat, d_alpha, pixel_live, slot_grads):
    # slot_grads: (L, 9 + D) laid out
    #   [0:2] d mean2d, [2:5] d conic(a,b,c), [5] d opacity(activated),
    #   [6:9] d color, [9:] d feature
    n_tiles = tile_offsets.shape[0] - 1
    d_dim = feat.shape[1]
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        y0 = ty * TILE_SIZE
        x0 = tx * TILE_SIZE
        y1 = min(y0 + TILE_SIZE, height)
        x1 = min(x0 + TILE_SIZE, width)
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        max_k = hi - lo
        if max_k == 0:
            continue
        live = False
        for py in range(y0, y1):
            for px in range(x0, x1):
                if pixel_live[py, px] != 0:
                    live = True
                    break
            if live:
                break
        if not live:
            continue
        rec_l = np.empty(max_k, dtype=np.int64)
        rec_a = np.empty(max_k, dtype=np.float64)
        rec_t = np.empty(max_k, dtype=np.float64)
        r_f = np.empty(d_dim, dtype=np.float64)
        for py in range(y0, y1):
            for px in range(x0, x1):
                if pixel_live[py, px] == 0:
                    continue  # zero cotangents: nothing flows through this pixel
                xc = px + 0.5
                yc = py + 0.5
                # Replay of the forward traversal (identical float ops).
                t_cur = 1.0
                cnt = 0
                for l in range(lo, hi):
                    g = tile_gauss[l]
                    dx = xc - mean2d[g, 0]
                    dy = yc - mean2d[g, 1]
                    power = (-0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy)
                             - conic[g, 1] * dx * dy)
                    if power > 0.0 or power < POWER_CUTOFF:
                        continue
                    a = opacity[g] * np.exp(power)
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    if a < CONTRIB_CUTOFF:
                        continue
                    test_t = t_cur * (1.0 - a)
                    if test_t < EARLY_STOP_T:
                        break
                    rec_l[cnt] = l
                    rec_a[cnt] = a
                    rec_t[cnt] = t_cur
                    t_cur = test_t
                    cnt += 1
                if cnt == 0:
                    continue
                dc0 = d_color[py, px, 0]
                dc1 = d_color[py, px, 1]
                dc2 = d_color[py, px, 2]
                da = d_alpha[py, px]
                # Suffix composites of the content behind splat k.
                r_c0 = bg[0]
                r_c1 = bg[1]
                r_c2 = bg[2]
                for d in range(d_dim):
                    r_f[d] = 0.0
                r_a = 0.0
                for k in range(cnt - 1, -1, -1):
                    l = rec_l[k]
                    g = tile_gauss[l]
                    a = rec_a[k]
                    t_k = rec_t[k]
                    w = t_k * a
                    d_alpha_k = (dc0 * t_k * (color[g, 0] - r_c0)
                                 + dc1 * t_k * (color[g, 1] - r_c1)
                                 + dc2 * t_k * (color[g, 2] - r_c2)
                                 + da * t_k * (1.0 - r_a))
                    slot_grads[l, 6] += dc0 * w
                    slot_grads[l, 7] += dc1 * w
                    slot_grads[l, 8] += dc2 * w
                    for d in range(d_dim):
                        dfd = d_feat[py, px, d]
                        d_alpha_k += dfd * t_k * (feat[g, d] - r_f[d])
                        slot_grads[l, 9 + d] += dfd * w
                    # Update suffix composites to include splat k.
                    r_c0 = a * color[g, 0] + (1.0 - a) * r_c0
                    r_c1 = a * color[g, 1] + (1.0 - a) * r_c1
                    r_c2 = a * color[g, 2] + (1.0 - a) * r_c2
                    for d in range(d_dim):
                        r_f[d] = a * feat[g, d] + (1.0 - a) * r_f[d]
                    r_a = a * 1.0 + (1.0 - a) * r_a
                    if a >= ALPHA_CLAMP:
                        continue  # clamped: no gradient through alpha
                    g_exp = a / opacity[g]
                    slot_grads[l, 5] += d_alpha_k * g_exp
                    d_power = d_alpha_k * a
                    dx = xc - mean2d[g, 0]
                    dy = yc - mean2d[g, 1]
                    slot_grads[l, 2] += d_power * (-0.5 * dx * dx)
                    slot_grads[l, 3] += d_power * (-dx * dy)
                    slot_grads[l, 4] += d_power * (-0.5 * dy * dy)
                    slot_grads[l, 0] += d_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                    slot_grads[l, 1] += d_power * (conic[g, 2] * dy + conic[g, 1] * dx)


@njit(cache=True, fastmath=False)
def _merge_slots(tile_gauss, slot_grads, dense):
    # Serial merge in tile-list order keeps accumulation deterministic.
    for l in range(tile_gauss.shape[0]):
        g = tile_gauss[l]
        for c in range(slot_grads.shape[1]):
            dense[g, c] += slot_grads[l, c]


def _prepare(cam: Camera, scene: GaussianSet):
    """Projection, activation, SH color, and tile binning shared by render."""
    n = len(scene)
    pos = scene.positions.astype(np.float64)
    log_scales = scene.log_scales.astype(np.float64)
    quats = scene.rotations.astype(np.float64)
    cov3d = build_covariance3d(log_scales, quats) if n else np.zeros((0, 3, 3))
    mean2d, cov2d, depth, in_frustum = project_gaussians(cam, pos, cov3d) if n else (
        np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=bool))
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    ok = in_frustum & (det > 0)
    inv_det = np.where(ok, 1.0 / np.where(det == 0, 1.0, det), 0.0)
    conic = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.where(ok, np.ceil(3.0 * np.sqrt(np.maximum(lam_max, 0.0))), 0.0)
    opacity = sigmoid(scene.opacity_logits)
    cam_center = cam.center()
    view_u = pos - cam_center
    view_norm = np.linalg.norm(view_u, axis=1)
    safe_norm = np.where(view_norm > 1e-12, view_norm, 1.0)
    view_dir = view_u / safe_norm[:, None]
    if n:
        color, clamp_mask = eval_sh(scene.sh_coeffs.astype(np.float64), view_dir)
    else:
        color, clamp_mask = np.zeros((0, 3)), np.zeros((0, 3), dtype=bool)

    tiles_x = (cam.width + TILE_SIZE - 1) // TILE_SIZE
    tiles_y = (cam.height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = tiles_x * tiles_y
    idx = np.flatnonzero(ok & (radius > 0))
    if len(idx) == 0:
        tile_offsets = np.zeros(n_tiles + 1, dtype=np.int64)
        tile_gauss = np.zeros(0, dtype=np.int64)
    else:
        r = radius[idx]
        mx, my = mean2d[idx, 0], mean2d[idx, 1]
        tx0 = np.clip(np.floor((mx - r) / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
        tx1 = np.clip(np.floor((mx + r) / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
        ty0 = np.clip(np.floor((my - r) / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
        ty1 = np.clip(np.floor((my + r) / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
        # Splats whose support rectangle misses the image entirely still get
        # clipped into edge tiles above; they are culled by the power cutoff.
        spans_x = tx1 - tx0 + 1
        spans_y = ty1 - ty0 + 1
        counts = spans_x * spans_y
        total = int(counts.sum())
        starts = np.zeros(len(idx), dtype=np.int64)
        np.cumsum(counts[:-1], out=starts[1:])
        local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
        rep_gid = np.repeat(idx, counts)
        rep_sx = np.repeat(spans_x, counts)
        rep_tx0 = np.repeat(tx0, counts)
        rep_ty0 = np.repeat(ty0, counts)
        tile_ids = (rep_ty0 + local // rep_sx) * tiles_x + (rep_tx0 + local % rep_sx)
        order = np.lexsort((rep_gid, depth[rep_gid], tile_ids))
        tile_gauss = np.ascontiguousarray(rep_gid[order])
        tile_sorted = tile_ids[order]
        tile_offsets = np.searchsorted(tile_sorted, np.arange(n_tiles + 1)).astype(np.int64)

    return {
        "mean2d": np.ascontiguousarray(mean2d), "cov2d": cov2d,
        "conic": np.ascontiguousarray(conic), "depth": np.ascontiguousarray(depth),
        "ok": ok, "radius": radius, "opacity": opacity,
        "color": np.ascontiguousarray(color), "clamp_mask": clamp_mask,
        "view_u": view_u, "view_norm": view_norm, "view_dir": view_dir,
        "cov3d": cov3d, "tiles_x": tiles_x,
        "tile_offsets": tile_offsets, "tile_gauss": tile_gauss,
    }


def render(cam: Camera, scene: GaussianSet, background: np.ndarray) -> RenderOutput:
    """Front-to-back alpha blending of color, features, alpha, and depth."""
    bg = np.asarray(background, dtype=np.float64)
    h, w = cam.height, cam.width
    d_dim = scene.feature_dim
    prep = _prepare(cam, scene)
    out_color = np.zeros((h, w, 3))
    out_feat = np.zeros((h, w, d_dim))
    out_alpha = np.zeros((h, w))
    out_depth = np.zeros((h, w))
    out_index = np.full((h, w), -1, dtype=np.int32)
    out_weight = np.zeros((h, w))
    out_t = np.ones((h, w))
    out_ncontrib = np.zeros((h, w), dtype=np.int32)
    feat64 = scene.features.astype(np.float64)
    _forward_kernel(h, w, prep["tiles_x"], prep["tile_offsets"], prep["tile_gauss"],
                    prep["mean2d"], prep["conic"], prep["opacity"], prep["color"],
                    feat64, prep["depth"], bg,
                    out_color, out_feat, out_alpha, out_depth,
                    out_index, out_weight, out_t, out_ncontrib)
    expected_depth = out_depth / np.maximum(out_alpha, 1e-8)
    prep["background"] = bg
    prep["features64"] = feat64
    prep["n_contrib"] = out_ncontrib
    return RenderOutput(out_color, out_feat, out_alpha, expected_depth,
                        out_index, out_weight, out_t, saved=prep)


def render_backward(cam: Camera, scene: GaussianSet, output: RenderOutput,
                    d_color: np.ndarray, d_feature: np.ndarray,
                    d_alpha: np.ndarray) -> RenderGrads:
    """Gradients of the rendered color/feature/alpha w.r.t. raw scene parameters.

    `output` must come from `render` on the same (cam, scene): the saved
    projection state is reused and the blend traversal is replayed exactly.
    """
    h, w = cam.height, cam.width
    d_dim = scene.feature_dim
    d_color = np.ascontiguousarray(d_color, dtype=np.float64)
    d_feature = np.ascontiguousarray(d_feature, dtype=np.float64)
    d_alpha = np.ascontiguousarray(d_alpha, dtype=np.float64)
    if d_color.shape != (h, w, 3) or d_feature.shape != (h, w, d_dim) or d_alpha.shape != (h, w):
        raise ValueError(
            f"cotangent shapes {d_color.shape}/{d_feature.shape}/{d_alpha.shape} do not match "
            f"render output {(h, w, 3)}/{(h, w, d_dim)}/{(h, w)}")
    prep = output.saved
    if not prep or "tile_gauss" not in prep:
        raise ValueError("output does not carry saved forward state from render()")
    grads = RenderGrads.zeros(scene)
    grads.visible = prep["ok"] & (prep["radius"] > 0)
    n = len(scene)
    if n == 0:
        return grads
    tile_gauss = prep["tile_gauss"]
    pixel_live = np.ascontiguousarray(
        (d_color.any(axis=2) | d_feature.any(axis=2) | (d_alpha != 0)).astype(np.uint8))
    slot = np.zeros((len(tile_gauss), 9 + d_dim))
    _backward_kernel(h, w, prep["tiles_x"], prep["tile_offsets"], tile_gauss,
                     prep["mean2d"], prep["conic"], prep["opacity"], prep["color"],
                     prep["features64"], prep["background"],
                     d_color, d_feature, d_alpha, pixel_live, slot)
    dense = np.zeros((n, 9 + d_dim))
    if len(tile_gauss):
        _merge_slots(tile_gauss, slot, dense)
    grads.features = dense[:, 9:].copy()
    grads.screen_positions = dense[:, 0:2].copy()

    # Chain the remaining blend gradients only through rows that received any.
    act = np.flatnonzero(prep["ok"] & dense[:, :9].any(axis=1))
    if len(act) == 0:
        return grads
    d_mean2d = dense[act, 0:2]
    d_conic = dense[act, 2:5]
    d_opacity_act = dense[act, 5]
    d_color_pg = dense[act, 6:9]

    o = prep["opacity"][act]
    grads.opacity_logits[act] = d_opacity_act * o * (1.0 - o)

    # Spherical harmonics chain: color -> coefficients and view direction.
    d_raw = np.where(prep["clamp_mask"][act], 0.0, d_color_pg)
    degree = scene.sh_degree
    vd = prep["view_dir"][act]
    basis = sh_basis(vd, degree)
    grads.sh_coeffs[act] = basis[:, :, None] * d_raw[:, None, :]
    gbasis = sh_basis_grad(vd, degree)
    coeffs = scene.sh_coeffs[act].astype(np.float64)
    d_dir = np.einsum("nkc,nkj,nc->nj", coeffs, gbasis, d_raw) if degree else np.zeros((len(act), 3))
    vn = prep["view_norm"][act]
    vn = np.where(vn > 1e-12, vn, 1.0)
    d_pos_sh = (d_dir - np.sum(d_dir * vd, axis=1, keepdims=True) * vd) / vn[:, None]

    # Conic -> cov2d (inverse chain): dC = -Q Gq Q with Q, Gq symmetric.
    q00, q01, q11 = prep["conic"][act, 0], prep["conic"][act, 1], prep["conic"][act, 2]
    gq00, gq01, gq11 = d_conic[:, 0], 0.5 * d_conic[:, 1], d_conic[:, 2]
    m00 = q00 * gq00 + q01 * gq01
    m01 = q00 * gq01 + q01 * gq11
    m10 = q01 * gq00 + q11 * gq01
    m11 = q01 * gq01 + q11 * gq11
    g_cov = np.empty((len(act), 2, 2))
    g_cov[:, 0, 0] = -(m00 * q00 + m01 * q01)
    off = -0.5 * ((m00 * q01 + m01 * q11) + (m10 * q00 + m11 * q01))
    g_cov[:, 0, 1] = off
    g_cov[:, 1, 0] = off
    g_cov[:, 1, 1] = -(m10 * q01 + m11 * q11)

    # cov2d = U Sigma U^T with U = J R.
    r_cam = cam.rotation
    pos = scene.positions[act].astype(np.float64)
    t = pos @ r_cam.T + cam.translation
    tz = np.where(t[:, 2] > 1e-8, t[:, 2], 1e-8)
    ts = t.copy()
    ts[:, 2] = tz
    j = projection_jacobian(ts, cam.fx, cam.fy)
    u = j @ r_cam
    cov3d = prep["cov3d"][act]
    ut = np.swapaxes(u, 1, 2)
    d_sigma = ut @ g_cov @ u
    d_u = 2.0 * (g_cov @ u @ cov3d)
    d_j = d_u @ r_cam.T

    # mean2d chain straight through the Jacobian.
    d_t = np.einsum("nij,ni->nj", j, d_mean2d)
    # J's own dependence on camera-space position.
    fx, fy = cam.fx, cam.fy
    tx, ty = ts[:, 0], ts[:, 1]
    d_t[:, 0] += d_j[:, 0, 2] * (-fx / tz**2)
    d_t[:, 1] += d_j[:, 1, 2] * (-fy / tz**2)
    d_t[:, 2] += (d_j[:, 0, 0] * (-fx / tz**2) + d_j[:, 1, 1] * (-fy / tz**2)
                  + d_j[:, 0, 2] * (2 * fx * tx / tz**3) + d_j[:, 1, 2] * (2 * fy * ty / tz**3))
    grads.positions[act] = d_t @ r_cam + d_pos_sh

    # Sigma = M M^T, M = Rq diag(exp(log_scale)).
    s = np.exp(scene.log_scales[act].astype(np.float64))
    rq = quat_to_rotmat(scene.rotations[act].astype(np.float64))
    m = rq * s[:, None, :]
    d_m = 2.0 * (d_sigma @ m)
    d_s = np.einsum("nrk,nrk->nk", rq, d_m)
    grads.log_scales[act] = d_s * s
    d = d_m * s[:, None, :]  # d L / d Rq entries

    q = scene.rotations[act].astype(np.float64)
    qn = np.linalg.norm(q, axis=1)
    qn = np.where(qn > 1e-12, qn, 1.0)
    qh = q / qn[:, None]
    w_, x_, y_, z_ = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    d00, d01, d02 = d[:, 0, 0], d[:, 0, 1], d[:, 0, 2]
    d10, d11, d12 = d[:, 1, 0], d[:, 1, 1], d[:, 1, 2]
    d20, d21, d22 = d[:, 2, 0], d[:, 2, 1], d[:, 2, 2]
    # Contraction of dL/dR with the hand-expanded dR/d(quat) forms.
    dqw = 2 * (-d01 * z_ + d02 * y_ + d10 * z_ - d12 * x_ - d20 * y_ + d21 * x_)
    dqx = 2 * (d01 * y_ + d02 * z_ + d10 * y_ - 2 * d11 * x_ - d12 * w_
               + d20 * z_ + d21 * w_ - 2 * d22 * x_)
    dqy = 2 * (-2 * d00 * y_ + d01 * x_ + d02 * w_ + d10 * x_ + d12 * z_
               - d20 * w_ + d21 * z_ - 2 * d22 * y_)
    dqz = 2 * (-2 * d00 * z_ - d01 * w_ + d02 * x_ + d10 * w_ - 2 * d11 * z_
               + d12 * y_ + d20 * x_ + d21 * y_)
    d_qh = np.stack([dqw, dqx, dqy, dqz], axis=1)
    grads.rotations[act] = (d_qh - np.sum(d_qh * qh, axis=1, keepdims=True) * qh) / qn[:, None]

    if not (np.isfinite(grads.positions).all() and np.isfinite(grads.rotations).all()
            and np.isfinite(grads.log_scales).all()):
        raise FloatingPointError("non-finite gradients from render_backward")
    return grads
