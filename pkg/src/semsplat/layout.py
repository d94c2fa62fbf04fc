"""Point-layout management: densification control, isolated-point removal,
and the layout export / re-initialization cycle between training phases.

Outlier removal ("fewer than `neighbor_min` other points within `radius` are
dropped") counts against the pre-pass point set via a uniform voxel grid of
cell size `radius`, which is bit-identical to brute-force counting but O(N)
in expectation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .geometry import SH_C0, GaussianSet, inverse_sigmoid, sigmoid
from .scenegen import LayoutPoints


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    split_scale_threshold: float = 0.01  # fraction of scene extent
    interval: int = 100
    start: int = 500
    until: int = 7000
    opacity_prune_threshold: float = 0.005
    split_factor: float = 1.6

    def __post_init__(self):
        if min(self.grad_threshold, self.split_scale_threshold, self.interval,
               self.until, self.opacity_prune_threshold, self.split_factor) <= 0:
            raise ValueError("densify config values must be positive")


@dataclass
class OutlierRemovalConfig:
    neighbor_min: int = 5
    radius: float = 1.0
    interval: int = 3000

    def __post_init__(self):
        if self.neighbor_min < 1 or self.radius <= 0:
            raise ValueError("neighbor_min >= 1 and radius > 0 required")


@njit(cache=True)
def _count_neighbors_grid(pos, cell_ids, order, cell_starts, grid_dims, radius2, inv_cell,
                          origin, counts):
    n = pos.shape[0]
    gx, gy, gz = grid_dims
    for a in range(n):
        px, py, pz = pos[a, 0], pos[a, 1], pos[a, 2]
        cx = min(int((px - origin[0]) * inv_cell), gx - 1)
        cy = min(int((py - origin[1]) * inv_cell), gy - 1)
        cz = min(int((pz - origin[2]) * inv_cell), gz - 1)
        cnt = 0
        for ix in range(max(0, cx - 1), min(gx, cx + 2)):
            for iy in range(max(0, cy - 1), min(gy, cy + 2)):
                for iz in range(max(0, cz - 1), min(gz, cz + 2)):
                    cell = (ix * gy + iy) * gz + iz
                    for k in range(cell_starts[cell], cell_starts[cell + 1]):
                        b = order[k]
                        if b == a:
                            continue
                        dx = pos[b, 0] - px
                        dy = pos[b, 1] - py
                        dz = pos[b, 2] - pz
                        if dx * dx + dy * dy + dz * dz <= radius2:
                            cnt += 1
        counts[a] = cnt


def neighbor_counts(positions: np.ndarray, radius: float) -> np.ndarray:
    """Number of OTHER points within `radius` (inclusive) of each point."""
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    n = len(pos)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    origin = pos.min(axis=0)
    inv_cell = 1.0 / radius
    dims = np.maximum(((pos.max(axis=0) - origin) * inv_cell).astype(np.int64) + 1, 1)
    cell_xyz = np.minimum(((pos - origin) * inv_cell).astype(np.int64), dims - 1)
    cell_ids = (cell_xyz[:, 0] * dims[1] + cell_xyz[:, 1]) * dims[2] + cell_xyz[:, 2]
    order = np.argsort(cell_ids, kind="stable")
    n_cells = int(dims[0] * dims[1] * dims[2])
    cell_starts = np.searchsorted(cell_ids[order], np.arange(n_cells + 1)).astype(np.int64)
    counts = np.zeros(n, dtype=np.int64)
    _count_neighbors_grid(pos, cell_ids, order, cell_starts,
                          (int(dims[0]), int(dims[1]), int(dims[2])),
                          radius * radius, inv_cell, origin, counts)
    return counts


def remove_isolated(scene: GaussianSet, cfg: OutlierRemovalConfig):
    """Drop Gaussians with fewer than `neighbor_min` neighbors in `radius`.

    Counting is simultaneous against the pre-pass set, so the surviving set
    is independent of storage order. Returns (scene, keep_mask).
    """
    counts = neighbor_counts(scene.positions, cfg.radius)
    keep = counts >= cfg.neighbor_min
    if keep.all():
        return scene, keep
    return scene.select(keep), keep


@dataclass
class DensifyStats:
    """Accumulated screen-space positional gradient norms per Gaussian."""

    grad_sum: np.ndarray
    seen: np.ndarray

    @staticmethod
    def zeros(n: int) -> "DensifyStats":
        return DensifyStats(np.zeros(n), np.zeros(n, dtype=np.int64))

    def update(self, screen_grads: np.ndarray, visible: np.ndarray):
        norms = np.linalg.norm(screen_grads, axis=1)
        self.grad_sum[visible] += norms[visible]
        self.seen[visible] += 1

    def averages(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.seen, 1)

    def select(self, idx) -> "DensifyStats":
        return DensifyStats(self.grad_sum[idx], self.seen[idx])


def densify_and_prune(scene: GaussianSet, stats: DensifyStats, cfg: DensifyConfig,
                      scene_extent: float, rng: np.random.Generator):
    """Clone small / split large high-gradient Gaussians, prune transparent
    ones. Returns (scene, remap) where remap[i] is the source index in the
    old scene or -1 for fresh entries (split children); optimizer moments
    follow the remap.
    """
    n = len(scene)
    avg = stats.averages()
    opacities = sigmoid(scene.opacity_logits)
    max_scale = np.exp(scene.log_scales.astype(np.float64)).max(axis=1)
    alive = opacities >= cfg.opacity_prune_threshold
    hot = (avg > cfg.grad_threshold) & alive
    split_mask = hot & (max_scale > cfg.split_scale_threshold * scene_extent)
    clone_mask = hot & ~split_mask

    survivors = alive & ~split_mask
    parts = [scene.select(survivors)]
    remap = [np.flatnonzero(survivors)]

    clone_idx = np.flatnonzero(clone_mask)
    if len(clone_idx):
        parts.append(scene.select(clone_idx))
        remap.append(np.full(len(clone_idx), -1, dtype=np.int64))

    split_idx = np.flatnonzero(split_mask)
    if len(split_idx):
        parents = scene.select(split_idx)
        from .geometry import build_covariance3d

        cov = build_covariance3d(parents.log_scales.astype(np.float64),
                                 parents.rotations.astype(np.float64))
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
        children = []
        for _ in range(2):
            noise = rng.normal(0, 1, (len(split_idx), 3))
            offs = np.einsum("nij,nj->ni", chol, noise)
            child = parents.copy()
            child.positions = (parents.positions.astype(np.float64) + offs).astype(np.float32)
            child.log_scales = (parents.log_scales.astype(np.float64)
                                - np.log(cfg.split_factor)).astype(np.float32)
            children.append(child)
        parts.extend(children)
        remap.append(np.full(2 * len(split_idx), -1, dtype=np.int64))

    new_scene = GaussianSet.concatenate(parts)
    return new_scene, np.concatenate(remap)


def extract_layout(scene: GaussianSet) -> LayoutPoints:
    """Positions, base (view-independent) color, and features of a scene."""
    albedo = SH_C0 * scene.sh_coeffs[:, 0, :].astype(np.float64) + 0.5
    return LayoutPoints(scene.positions.copy(), albedo, scene.features.copy())


def reinit_from_layout(layout: LayoutPoints, sh_degree: int = 3,
                       init_opacity: float = 0.1) -> GaussianSet:
    """Fresh scene from layout points: opacity reset, isotropic scales from
    the mean 3-nearest-neighbor distance, identity rotations, zero-order
    color only."""
    n = len(layout)
    if n == 0:
        raise ValueError("cannot initialize from an empty layout")
    pos = layout.positions.astype(np.float64)
    if n == 1:
        mean_d = np.array([0.1])
    else:
        k = min(3, n - 1)
        tree = cKDTree(pos)
        dist, _ = tree.query(pos, k=k + 1)
        mean_d = dist[:, 1:].mean(axis=1)
    mean_d = np.maximum(mean_d, 1e-7)
    kcoef = (sh_degree + 1) ** 2
    sh = np.zeros((n, kcoef, 3), dtype=np.float32)
    sh[:, 0, :] = (layout.colors.astype(np.float64) - 0.5) / SH_C0
    rot = np.zeros((n, 4), dtype=np.float32)
    rot[:, 0] = 1.0
    return GaussianSet(
        positions=layout.positions.copy(),
        sh_coeffs=sh,
        opacity_logits=np.full(n, inverse_sigmoid(init_opacity), dtype=np.float32),
        log_scales=np.log(mean_d)[:, None].repeat(3, axis=1).astype(np.float32),
        rotations=rot,
        features=layout.features.copy(),
    )
