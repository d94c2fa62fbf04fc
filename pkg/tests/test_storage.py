import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semsplat.geometry import Camera, look_at_w2c
from semsplat.heads import SemanticHeads, TextBank
from semsplat.scenegen import LayoutPoints
from semsplat.storage import (
    FormatError,
    load_checkpoint,
    load_dataset,
    load_feature_raster,
    load_labels,
    load_layout,
    save_checkpoint,
    save_dataset,
    save_feature_raster,
    save_labels,
    save_layout,
)

from conftest import random_scene


def make_bank(m, rng):
    rows = rng.normal(0, 1, (m, 512))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return TextBank(rows, [f"thing{i}" for i in range(m)])


def test_checkpoint_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    scene = random_scene(rng, n=20, feature_dim=8, sh_degree=2)
    heads = SemanticHeads.create(8, 5, rng)
    bank = make_bank(5, rng)
    p1 = tmp_path / "a.spcg"
    p2 = tmp_path / "b.spcg"
    labels = rng.integers(0, 5, 20).astype(np.int32)
    save_checkpoint(p1, scene, heads, bank, {"foo": 1}, 123, gaussian_labels=labels)
    ck = load_checkpoint(p1)
    save_checkpoint(p2, ck.scene, ck.heads, ck.bank, ck.config, ck.iteration,
                    gaussian_labels=ck.gaussian_labels)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(ck.scene.positions, scene.positions)
    np.testing.assert_array_equal(ck.scene.sh_coeffs, scene.sh_coeffs)
    np.testing.assert_array_equal(ck.scene.features, scene.features)
    np.testing.assert_array_equal(ck.heads.w_f, heads.w_f)
    np.testing.assert_array_equal(ck.bank.embeddings, bank.embeddings)
    assert ck.bank.names == bank.names
    assert ck.config == {"foo": 1} and ck.iteration == 123
    np.testing.assert_array_equal(ck.gaussian_labels, labels)


def test_checkpoint_replay_render_identical(tmp_path):
    from semsplat.rasterizer import render
    from conftest import small_camera

    rng = np.random.default_rng(1)
    scene = random_scene(rng, n=40, feature_dim=4, sh_degree=1)
    cam = small_camera()
    before = render(cam, scene, np.zeros(3))
    save_checkpoint(tmp_path / "c.spcg", scene)
    after = render(cam, load_checkpoint(tmp_path / "c.spcg").scene, np.zeros(3))
    np.testing.assert_array_equal(before.color, after.color)
    np.testing.assert_array_equal(before.feature, after.feature)


def test_checkpoint_truncation_names_field(tmp_path):
    rng = np.random.default_rng(2)
    scene = random_scene(rng, n=10, feature_dim=4)
    p = tmp_path / "t.spcg"
    save_checkpoint(p, scene)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError) as e:
        load_checkpoint(p)
    assert "offset" in str(e.value)
    assert e.value.field  # names which field broke
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as e2:
        load_checkpoint(p)
    assert e2.value.field == "magic"


def test_layout_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    lp = LayoutPoints(rng.normal(0, 1, (17, 3)), rng.uniform(0, 1, (17, 3)),
                      rng.normal(0, 1, (17, 6)))
    p = tmp_path / "l.spcp"
    save_layout(p, lp)
    lp2 = load_layout(p)
    np.testing.assert_array_equal(lp.positions, lp2.positions)
    np.testing.assert_array_equal(lp.colors, lp2.colors)
    np.testing.assert_array_equal(lp.features, lp2.features)
    save_layout(tmp_path / "l2.spcp", lp2)
    assert p.read_bytes() == (tmp_path / "l2.spcp").read_bytes()


def test_labels_round_trip_and_magic(tmp_path):
    rng = np.random.default_rng(4)
    lab = rng.integers(0, 7, (33, 21)).astype(np.int32)
    p = tmp_path / "x.u16"
    save_labels(p, lab)
    raw = p.read_bytes()
    assert raw[:4] == b"SPCL"
    assert len(raw) == 8 + 33 * 21 * 2
    np.testing.assert_array_equal(load_labels(p), lab)
    p.write_bytes(raw[:10])
    with pytest.raises(FormatError):
        load_labels(p)


def test_feature_raster_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    r = rng.normal(0, 1, (7, 9, 4)).astype(np.float32)
    p = tmp_path / "f.spcf"
    save_feature_raster(p, r)
    assert p.read_bytes()[:4] == b"SPCF"
    np.testing.assert_array_equal(load_feature_raster(p), r)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100000))
def test_cameras_json_pose_round_trip(seed, tmp_path_factory):
    from semsplat.storage import _camera_from_record, _camera_record

    rng = np.random.default_rng(seed)
    pos = rng.normal(0, 3, 3)
    target = rng.normal(0, 1, 3)
    if np.linalg.norm(target - pos) < 1e-3:
        target = pos + np.array([1.0, 0, 0])
    up = np.array([0.0, -1.0, 0.0])
    try:
        w2c = look_at_w2c(pos, target, up)
    except ValueError:
        return
    cam = Camera(rng.uniform(10, 100), rng.uniform(10, 100), 48, 48, 96, 96, w2c)
    rec = json.loads(json.dumps(_camera_record("v", cam)))
    cam2 = _camera_from_record(rec)
    assert np.abs(cam2.world_to_camera - cam.world_to_camera).max() < 1e-9
    assert cam2.fx == cam.fx and cam2.fy == cam.fy


def test_dataset_directory_round_trip(tmp_path, tiny_teacher):
    from semsplat.scenegen import make_dataset

    ds = make_dataset(tiny_teacher, width=32, height=32, n_test=2,
                      seed_count=200, corruption=0.1, seed=9)
    root = tmp_path / "ds"
    save_dataset(ds, root)
    for name in ("cameras.json", "embeddings.json", "manifest.json",
                 "seed_points.spcp", "oracle.spcg"):
        assert (root / name).exists(), name
    assert (root / "images" / "train_000.png").exists()
    assert (root / "labels" / "train_000.u16").exists()

    ds2 = load_dataset(root)
    assert [v.view_id for v in ds2.train_views] == [v.view_id for v in ds.train_views]
    assert len(ds2.augmented_views) == len(ds.augmented_views)
    assert ds2.bank.names == ds.bank.names
    np.testing.assert_array_equal(ds2.seed_points.positions, ds.seed_points.positions)
    np.testing.assert_allclose(ds2.feature_projection, ds.feature_projection, atol=1e-7)
    # Images round-trip through 8-bit quantization.
    assert np.abs(ds2.train_views[0].image - ds.train_views[0].image).max() <= 0.5 / 255 + 1e-9
    np.testing.assert_array_equal(ds2.train_views[0].labels, ds.train_views[0].labels)
    # The oracle teacher scene survives for the segmenter.
    assert ds2.teacher_scene is not None
    np.testing.assert_array_equal(ds2.teacher_labels, tiny_teacher.labels)
    np.testing.assert_array_equal(ds2.teacher_scene.positions,
                                  tiny_teacher.scene.positions)
    assert ds2.augmented_views[0].source_view == ds.augmented_views[0].source_view
