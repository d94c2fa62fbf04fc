import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semsplat.geometry import GaussianSet, inverse_sigmoid, sigmoid
from semsplat.layout import (
    DensifyConfig,
    DensifyStats,
    OutlierRemovalConfig,
    densify_and_prune,
    extract_layout,
    neighbor_counts,
    reinit_from_layout,
    remove_isolated,
)
from semsplat.scenegen import LayoutPoints

from conftest import random_scene


def brute_force_counts(pos, radius):
    pos = np.asarray(pos, dtype=np.float64)
    n = len(pos)
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        d2 = np.sum((pos - pos[i]) ** 2, axis=1)
        counts[i] = int(np.sum(d2 <= radius * radius)) - 1
    return counts


def test_ogr_single_point_removed():
    scene = random_scene(np.random.default_rng(0), n=1)
    out, keep = remove_isolated(scene, OutlierRemovalConfig())
    assert len(out) == 0 and not keep[0]


def test_ogr_coincident_points_kept():
    rng = np.random.default_rng(1)
    scene = random_scene(rng, n=10)
    scene.positions = np.zeros((10, 3), dtype=np.float32)
    out, keep = remove_isolated(scene, OutlierRemovalConfig())
    assert len(out) == 10 and keep.all()


def test_ogr_cluster_plus_isolated():
    rng = np.random.default_rng(2)
    cluster = rng.uniform(-0.5, 0.5, (100, 3)) * np.array([1, 1, 1]) * 0.5
    far = rng.uniform(3, 6, (10, 3)) * rng.choice([-1, 1], (10, 3))
    pos = np.concatenate([cluster, far])
    scene = random_scene(rng, n=110)
    scene.positions = pos.astype(np.float32)
    out, keep = remove_isolated(scene, OutlierRemovalConfig(neighbor_min=5, radius=1.0))
    assert keep[:100].all()
    assert not keep[100:].any()
    # Matches the O(N^2) oracle exactly.
    oracle = brute_force_counts(scene.positions, 1.0) >= 5
    np.testing.assert_array_equal(keep, oracle)


@pytest.mark.parametrize("seed", range(6))
def test_ogr_matches_bruteforce_random(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(50, 400))
    scene = random_scene(rng, n=n, spread=1.2)
    cfg = OutlierRemovalConfig(neighbor_min=int(rng.integers(1, 8)),
                               radius=float(rng.uniform(0.3, 1.5)))
    counts = neighbor_counts(scene.positions, cfg.radius)
    oracle = brute_force_counts(scene.positions, cfg.radius)
    np.testing.assert_array_equal(counts, oracle)
    _, keep = remove_isolated(scene, cfg)
    np.testing.assert_array_equal(keep, oracle >= cfg.neighbor_min)


def test_ogr_order_independent():
    rng = np.random.default_rng(7)
    scene = random_scene(rng, n=200, spread=1.5)
    cfg = OutlierRemovalConfig(neighbor_min=4, radius=0.8)
    _, keep = remove_isolated(scene, cfg)
    perm = rng.permutation(200)
    _, keep_p = remove_isolated(scene.select(perm), cfg)
    np.testing.assert_array_equal(keep[perm], keep_p)


def test_ogr_fixed_point_convergence():
    rng = np.random.default_rng(8)
    scene = random_scene(rng, n=300, spread=2.0)
    cfg = OutlierRemovalConfig(neighbor_min=5, radius=0.7)
    sizes = [len(scene)]
    for _ in range(20):
        scene, keep = remove_isolated(scene, cfg)
        sizes.append(len(scene))
        if keep.all():
            break
    assert sizes[-1] == sizes[-2]  # reached a fixed point
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))  # never grows


def test_densify_noop_when_quiet():
    rng = np.random.default_rng(9)
    scene = random_scene(rng, n=40, opacity_range=(0.3, 0.8))
    stats = DensifyStats.zeros(40)  # zero gradients accumulated
    out, remap = densify_and_prune(scene, stats, DensifyConfig(), 4.0, rng)
    assert len(out) == 40
    np.testing.assert_array_equal(remap, np.arange(40))
    np.testing.assert_array_equal(out.positions, scene.positions)


def test_densify_clone_small_split_large():
    rng = np.random.default_rng(10)
    scene = random_scene(rng, n=3, opacity_range=(0.5, 0.8))
    extent = 4.0
    cfg = DensifyConfig(grad_threshold=1e-4, split_scale_threshold=0.01)
    # Gaussian 0: small (below 0.01*extent) -> clone; Gaussian 1: large -> split.
    scene.log_scales = np.log(np.array(
        [[0.01, 0.01, 0.01], [0.2, 0.2, 0.2], [0.02, 0.02, 0.02]])).astype(np.float32)
    stats = DensifyStats.zeros(3)
    stats.grad_sum[:] = [1.0, 1.0, 0.0]  # 0 and 1 hot, 2 quiet
    stats.seen[:] = 1
    out, remap = densify_and_prune(scene, stats, cfg, extent, rng)
    # Survivors: 0 (cloned, original kept), 2 (quiet); split parent 1 removed,
    # replaced by 2 children; clone copy appended.
    assert len(out) == 2 + 1 + 2
    assert (remap == -1).sum() == 3  # clone copy + 2 split children
    # Split children: scales divided by the split factor.
    child_scales = np.exp(out.log_scales[remap == -1][1:])
    np.testing.assert_allclose(child_scales, 0.2 / 1.6, rtol=1e-5)


def test_densify_split_children_sample_parent_distribution():
    rng = np.random.default_rng(11)
    n = 400
    scene = random_scene(rng, n=n, opacity_range=(0.5, 0.8))
    scene.positions = np.zeros((n, 3), dtype=np.float32)
    ls = np.log([0.5, 0.1, 0.02])
    scene.log_scales = np.tile(ls, (n, 1)).astype(np.float32)
    scene.rotations = np.tile([1.0, 0, 0, 0], (n, 1)).astype(np.float32)
    stats = DensifyStats.zeros(n)
    stats.grad_sum[:] = 1.0
    stats.seen[:] = 1
    cfg = DensifyConfig(grad_threshold=1e-4, split_scale_threshold=1e-6)
    out, remap = densify_and_prune(scene, stats, cfg, 4.0, rng)
    children = out.positions[remap == -1]
    assert len(children) == 2 * n
    # Sample std per axis ~ parent scales.
    std = children.std(axis=0)
    np.testing.assert_allclose(std, np.exp(ls), rtol=0.15)


def test_densify_prunes_transparent():
    rng = np.random.default_rng(12)
    scene = random_scene(rng, n=5, opacity_range=(0.3, 0.5))
    scene.opacity_logits[2] = inverse_sigmoid(0.001)
    stats = DensifyStats.zeros(5)
    out, remap = densify_and_prune(scene, stats, DensifyConfig(), 4.0, rng)
    assert len(out) == 4
    assert 2 not in remap


def test_extract_reinit_round_trip():
    rng = np.random.default_rng(13)
    scene = random_scene(rng, n=30, sh_degree=2, feature_dim=8)
    layout = extract_layout(scene)
    fresh = reinit_from_layout(layout, sh_degree=3)
    layout2 = extract_layout(fresh)
    np.testing.assert_array_equal(layout.positions, layout2.positions)
    np.testing.assert_array_equal(layout.features, layout2.features)
    # Fresh scene contract.
    assert fresh.sh_degree == 3
    np.testing.assert_array_equal(fresh.rotations,
                                  np.tile([1, 0, 0, 0], (30, 1)).astype(np.float32))
    np.testing.assert_allclose(sigmoid(fresh.opacity_logits), 0.1, atol=1e-6)
    assert np.all(fresh.sh_coeffs[:, 1:, :] == 0)


def test_reinit_three_point_line_scale():
    d = 0.37
    pts = np.array([[0, 0, 0], [0, 0, d], [0, 0, 2 * d]], dtype=np.float64)
    layout = LayoutPoints(pts, np.full((3, 3), 0.5), np.zeros((3, 4)))
    fresh = reinit_from_layout(layout)
    # Middle point: both available neighbors at distance d -> mean d.
    np.testing.assert_allclose(np.exp(fresh.log_scales[1]), d, rtol=1e-5)
    # End points: neighbors at d and 2d -> mean 1.5 d.
    np.testing.assert_allclose(np.exp(fresh.log_scales[0]), 1.5 * d, rtol=1e-5)


def test_reinit_empty_layout_rejected():
    layout = LayoutPoints(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)))
    with pytest.raises(ValueError):
        reinit_from_layout(layout)


def test_densify_preserves_parallel_arrays():
    rng = np.random.default_rng(14)
    scene = random_scene(rng, n=60, opacity_range=(0.2, 0.9))
    stats = DensifyStats.zeros(60)
    stats.grad_sum[:] = rng.uniform(0, 5e-4, 60)
    stats.seen[:] = 1
    out, remap = densify_and_prune(scene, stats, DensifyConfig(), 4.0, rng)
    out.validate_shapes()
    assert len(remap) == len(out)
    # Every surviving mapped row carries its source parameters.
    kept = remap >= 0
    np.testing.assert_array_equal(out.features[kept], scene.features[remap[kept]])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), radius=st.floats(0.2, 2.0))
def test_ogr_counts_property(seed, radius):
    rng = np.random.default_rng(seed)
    n = 40
    pos = rng.normal(0, 1, (n, 3))
    counts = neighbor_counts(pos, radius)
    oracle = brute_force_counts(pos, radius)
    np.testing.assert_array_equal(counts, oracle)
