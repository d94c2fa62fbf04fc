"""Brute-force reference renderer: O(N*H*W), exhaustive per-pixel loop.

Kept deliberately independent of the tiled rasterizer: no tiling, a single
global depth sort (ties by index), and per-pixel sequential compositing
emulated with cumulative products. Shares only the projection math and the
blending conventions (alpha clamp, 1/255 cutoff, 3-sigma support, early
termination), which are part of the render contract itself.
"""

from __future__ import annotations

import numpy as np

from .geometry import GaussianSet, Camera, build_covariance3d, eval_sh, project_gaussians, sigmoid
from .rasterizer import (
    ALPHA_CLAMP,
    CONTRIB_CUTOFF,
    EARLY_STOP_T,
    POWER_CUTOFF,
    RenderOutput,
)


def render_reference(cam: Camera, scene: GaussianSet, background) -> RenderOutput:
    bg = np.asarray(background, dtype=np.float64)
    h, w = cam.height, cam.width
    d_dim = scene.feature_dim
    out_color = np.empty((h, w, 3))
    out_feat = np.zeros((h, w, d_dim))
    out_alpha = np.zeros((h, w))
    out_depth = np.zeros((h, w))
    out_index = np.full((h, w), -1, dtype=np.int32)
    out_weight = np.zeros((h, w))
    out_t = np.ones((h, w))

    n = len(scene)
    if n:
        pos = scene.positions.astype(np.float64)
        cov3d = build_covariance3d(scene.log_scales.astype(np.float64),
                                   scene.rotations.astype(np.float64))
        mean2d, cov2d, depth, in_frustum = project_gaussians(cam, pos, cov3d)
        det = cov2d[:, 0] * cov2d[:, 2] - cov2d[:, 1] ** 2
        ok = in_frustum & (det > 0)
        cam_center = cam.center()
        view_u = pos - cam_center
        vn = np.linalg.norm(view_u, axis=1)
        view_dir = view_u / np.where(vn > 1e-12, vn, 1.0)[:, None]
        colors, _ = eval_sh(scene.sh_coeffs.astype(np.float64), view_dir)
        opacity = sigmoid(scene.opacity_logits)
        keep = np.flatnonzero(ok)
    else:
        keep = np.zeros(0, dtype=np.int64)

    if len(keep) == 0:
        out_color[:] = bg
        return RenderOutput(out_color, out_feat, out_alpha,
                            out_depth / np.maximum(out_alpha, 1e-8),
                            out_index, out_weight, out_t)

    order = keep[np.lexsort((keep, depth[keep]))]
    mean_s = mean2d[order]
    conic_det = det[order]
    a2, b2, c2 = cov2d[order, 0], cov2d[order, 1], cov2d[order, 2]
    qa, qb, qc = c2 / conic_det, -b2 / conic_det, a2 / conic_det
    op_s = opacity[order]
    col_s = colors[order]
    feat_s = scene.features.astype(np.float64)[order]
    depth_s = depth[order]

    for py in range(h):
        yc = py + 0.5
        dy = yc - mean_s[:, 1]
        for px in range(w):
            xc = px + 0.5
            dx = xc - mean_s[:, 0]
            power = -0.5 * (qa * dx * dx + qc * dy * dy) - qb * dx * dy
            alpha = np.minimum(op_s * np.exp(power), ALPHA_CLAMP)
            contrib = (power <= 0.0) & (power >= POWER_CUTOFF) & (alpha >= CONTRIB_CUTOFF)
            a_eff = np.where(contrib, alpha, 0.0)
            trans = np.empty(len(a_eff) + 1)
            trans[0] = 1.0
            np.cumprod(1.0 - a_eff, out=trans[1:])
            # First contribution whose inclusion would drop T below the stop
            # threshold terminates blending with that contribution dropped.
            stopped = contrib & (trans[1:] < EARLY_STOP_T)
            if stopped.any():
                cut = int(np.argmax(stopped))
                a_eff = a_eff[:cut].copy()
                contrib_v = contrib[:cut]
                t_before = trans[:cut]
                t_final = trans[cut]
            else:
                contrib_v = contrib
                t_before = trans[:-1]
                t_final = trans[-1]
            weights = t_before * a_eff
            out_color[py, px] = weights @ col_s[: len(weights)] + t_final * bg
            if d_dim:
                out_feat[py, px] = weights @ feat_s[: len(weights)]
            out_alpha[py, px] = weights.sum()
            out_depth[py, px] = weights @ depth_s[: len(weights)]
            out_t[py, px] = t_final
            if contrib_v.any():
                best = int(np.argmax(weights))
                if weights[best] > 0.0:
                    out_index[py, px] = order[best]
                    out_weight[py, px] = weights[best]
    expected_depth = out_depth / np.maximum(out_alpha, 1e-8)
    return RenderOutput(out_color, out_feat, out_alpha, expected_depth,
                        out_index, out_weight, out_t)
