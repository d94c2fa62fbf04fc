"""Synthetic labeled teacher scenes and dataset generation.

A teacher scene is a room shell (floor / ceiling / walls, y points down) plus
colored box and ellipsoid objects, sampled as surface-aligned Gaussians with a
class label each. It stands in for a real captured scene: ground-truth
images, label maps, and the class-embedding bank are all derived from it.

Cameras follow the inside-out protocol: training views orbit the room center
looking outward, augmented views are discrete pose perturbations of each
training view (pan x4, zoom x2, roll x2), and held-out test views interleave
the training ring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Camera,
    GaussianSet,
    SH_C0,
    inverse_sigmoid,
    look_at_w2c,
    rotmat_to_quat,
)
from .heads import EMBED_DIM, TextBank
from .rasterizer import render

ROOM_HALF = np.array([2.0, 1.25, 2.0])  # x, y (down), z half extents
SHELL_CLASSES = ["floor", "ceiling", "wall"]
OBJECT_NAMES = ["crate", "sphere", "pillar", "pod", "slab", "orb", "wedge", "drum",
                "block", "shell", "cone", "tub"]
TEACHER_OPACITY = 0.92


@dataclass
class LayoutPoints:
    """Position + base color + semantic feature per point; the interchange
    unit between seeding, layout export, and re-initialization."""

    positions: np.ndarray  # (N,3) f32
    colors: np.ndarray     # (N,3) f32 albedo
    features: np.ndarray   # (N,D) f32

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float32)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        n = len(self.positions)
        if self.colors.shape[0] != n or self.features.shape[0] != n:
            raise ValueError("layout arrays must share length")

    def __len__(self):
        return len(self.positions)

    @staticmethod
    def concatenate(parts):
        return LayoutPoints(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.colors for p in parts]),
            np.concatenate([p.features for p in parts]),
        )


@dataclass
class TeacherScene:
    scene: GaussianSet
    labels: np.ndarray           # (N,) int32, < M
    class_names: list[str]
    class_embeddings: np.ndarray  # (M, 512) unit rows
    feature_projection: np.ndarray  # (D, 512), orthonormal rows
    extent: float
    seed: int

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_feature_table(self) -> np.ndarray:
        """Per-class D-dim teacher features (projected embeddings)."""
        return self.class_embeddings @ self.feature_projection.T

    def bank(self) -> TextBank:
        return TextBank(self.class_embeddings.copy(), list(self.class_names))

    def segmenter(self):
        from .regions import TeacherSegmenter

        return TeacherSegmenter(self.scene, self.labels)


@dataclass
class ViewRecord:
    view_id: str
    camera: Camera
    image: np.ndarray | None      # (H,W,3) float in [0,1]
    labels: np.ndarray | None     # (H,W) int32
    source_view: str | None = None  # training view an augmented view derives from


@dataclass
class SceneDataset:
    train_views: list[ViewRecord]
    augmented_views: list[ViewRecord]
    test_views: list[ViewRecord]
    seed_points: LayoutPoints
    bank: TextBank
    feature_projection: np.ndarray
    seed: int
    corruption: float
    extent: float
    teacher_scene: GaussianSet | None = None   # oracle backend for segmentation
    teacher_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.bank.num_classes

    def oracle_segmenter(self):
        from .regions import TeacherSegmenter

        if self.teacher_scene is None:
            raise ValueError("dataset carries no oracle scene; inject a segmenter")
        return TeacherSegmenter(self.teacher_scene, self.teacher_labels)


def make_class_embeddings(num_classes: int, rng: np.random.Generator,
                          max_abs_cos: float = 0.3, max_tries: int = 10000) -> np.ndarray:
    """Seeded unit 512-vectors with pairwise |cos| < 0.3 by rejection."""
    rows = []
    tries = 0
    while len(rows) < num_classes:
        v = rng.normal(0, 1, EMBED_DIM)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ r)) < max_abs_cos for r in rows):
            rows.append(v)
        tries += 1
        if tries > max_tries:
            raise RuntimeError("embedding rejection sampling failed")
    return np.stack(rows)


def _surface_frame_quat(normal: np.ndarray) -> np.ndarray:
    """Quaternion rotating local +z onto `normal` (tangent frame arbitrary)."""
    n = normal / np.linalg.norm(normal)
    a = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    t1 = np.cross(a, n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    r = np.stack([t1, t2, n], axis=1)
    return rotmat_to_quat(r)


class _Box:
    def __init__(self, center, half):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half, dtype=np.float64)

    def area(self):
        hx, hy, hz = self.half
        return 8 * (hx * hy + hy * hz + hx * hz)

    def sample(self, n, rng):
        hx, hy, hz = self.half
        face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        u = rng.uniform(-1, 1, (n, 2))
        pts = np.zeros((n, 3))
        nrm = np.zeros((n, 3))
        for f in range(6):
            m = faces == f
            axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
            others = [i for i in range(3) if i != axis]
            pts[m, axis] = sign * self.half[axis]
            pts[m, others[0]] = u[m, 0] * self.half[others[0]]
            pts[m, others[1]] = u[m, 1] * self.half[others[1]]
            nrm[m, axis] = sign
        return pts + self.center, nrm


class _Ellipsoid:
    def __init__(self, center, radii):
        self.center = np.asarray(center, dtype=np.float64)
        self.radii = np.asarray(radii, dtype=np.float64)

    def area(self):
        # Thomsen's approximation is plenty for sample allocation.
        p = 1.6075
        a, b, c = self.radii
        return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)

    def sample(self, n, rng):
        d = rng.normal(0, 1, (n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = d * self.radii
        nrm = pts / self.radii**2
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return pts + self.center, nrm


def make_teacher_scene(seed: int, num_classes: int = 8, num_gaussians: int = 9000,
                       extent: float = 4.0, feature_dim: int = 32,
                       max_layout_tries: int = 200) -> TeacherScene:
    """Room shell plus (num_classes - 3) objects, sampled on surfaces."""
    if num_classes < 4:
        raise ValueError("need at least 4 classes (floor/ceiling/wall + 1 object)")
    if num_gaussians < num_classes:
        raise ValueError("need at least one Gaussian per class")
    rng = np.random.default_rng(seed)
    half = ROOM_HALF * (extent / 4.0)
    embeddings = make_class_embeddings(num_classes, rng)
    # Orthonormal-row projection embedding -> feature space.
    q_full, _ = np.linalg.qr(rng.normal(0, 1, (EMBED_DIM, feature_dim)))
    projection = q_full.T  # (D, 512)

    n_objects = num_classes - 3
    names = SHELL_CLASSES + [OBJECT_NAMES[i % len(OBJECT_NAMES)] + ("" if i < len(OBJECT_NAMES) else str(i))
                             for i in range(n_objects)]

    # Non-overlapping object placement on the floor, bounded retries.
    # Sizes shrink with object count so crowded layouts stay feasible.
    size_scale = (extent / 4.0) * min(1.0, np.sqrt(4.0 / n_objects))
    objects = []
    for i in range(n_objects):
        placed = False
        for _ in range(max_layout_tries):
            size = rng.uniform(0.32, 0.58, 3) * size_scale
            cx = rng.uniform(-half[0] + size[0] + 0.2, half[0] - size[0] - 0.2)
            cz = rng.uniform(-half[2] + size[2] + 0.2, half[2] - size[2] - 0.2)
            cy = half[1] - size[1]  # resting on the floor (y down: floor at +y)
            center = np.array([cx, cy, cz])
            r_xy = float(size[[0, 2]].max())
            if all(np.linalg.norm((center - o.center)[[0, 2]]) > 1.05 * (r_xy + o_r)
                   for o, o_r in objects):
                shape = _Box(center, size) if i % 2 == 0 else _Ellipsoid(center, size)
                objects.append((shape, r_xy))
                placed = True
                break
        if not placed:
            raise RuntimeError(f"could not place object {i} without overlap after "
                               f"{max_layout_tries} tries")

    hx, hy, hz = half
    shell: list[tuple[_Box | _Ellipsoid, int, float]] = []  # (shape, class, area)
    wall_boxes = []
    # Degenerate boxes (zero thickness) double their face area; halve weights.
    floor = _Box([0, hy, 0], [hx, 0, hz])
    ceiling = _Box([0, -hy, 0], [hx, 0, hz])
    for sign in (1, -1):
        wall_boxes.append(_Box([sign * hx, 0, 0], [0, hy, hz]))
        wall_boxes.append(_Box([0, 0, sign * hz], [hx, hy, 0]))

    groups: list[tuple[object, int, float]] = [
        (floor, 0, floor.area() / 2),
        (ceiling, 1, ceiling.area() / 2),
    ]
    for wb in wall_boxes:
        groups.append((wb, 2, wb.area() / 2))
    for i, (shape, _) in enumerate(objects):
        groups.append((shape, 3 + i, shape.area()))

    # Allocate counts: objects get a boosted share so small classes stay dense.
    areas = np.array([g[2] for g in groups])
    weights = areas.copy()
    for gi, g in enumerate(groups):
        if g[1] >= 3:
            weights[gi] *= 2.0
    counts = np.maximum(1, np.floor(num_gaussians * weights / weights.sum()).astype(int))
    while counts.sum() > num_gaussians:
        counts[np.argmax(counts)] -= 1
    counts[0] += num_gaussians - counts.sum()

    class_table = embeddings @ projection.T  # (M, D)
    palette = rng.uniform(0.28, 0.72, (num_classes, 3))
    tex_dirs = rng.normal(0, 1, (num_classes, 3))
    tex_dirs /= np.linalg.norm(tex_dirs, axis=1, keepdims=True)
    tex_phase = rng.uniform(0, 2 * np.pi, num_classes)

    pos_all, quat_all, scale_all, label_all = [], [], [], []
    for (shape, cls, area), cnt in zip(groups, counts):
        pts, nrm = shape.sample(cnt, rng)
        spacing = np.sqrt(area / cnt)
        tangential = 1.05 * spacing
        normal_s = 0.10 * tangential
        for p, nv in zip(pts, nrm):
            quat_all.append(_surface_frame_quat(nv))
        pos_all.append(pts)
        scale_all.append(np.full((cnt, 3), [tangential, tangential, normal_s]))
        label_all.append(np.full(cnt, cls, dtype=np.int32))

    positions = np.concatenate(pos_all)
    labels = np.concatenate(label_all)
    quats = np.stack(quat_all)
    scales = np.concatenate(scale_all)

    # Per-class color with a low-frequency spatial modulation for texture.
    base = palette[labels]
    phase = np.einsum("nj,nj->n", positions, tex_dirs[labels])
    tex = 0.05 * np.sin(2.0 * np.pi * phase / extent + tex_phase[labels])
    albedo = np.clip(base + tex[:, None] + rng.normal(0, 0.015, base.shape), 0.05, 0.95)
    sh_dc = (albedo - 0.5) / SH_C0

    scene = GaussianSet(
        positions=positions,
        sh_coeffs=sh_dc[:, None, :],
        opacity_logits=np.full(len(positions), inverse_sigmoid(TEACHER_OPACITY)),
        log_scales=np.log(scales),
        rotations=quats,
        features=class_table[labels],
    )
    return TeacherScene(scene, labels, names, embeddings, projection, extent, seed)


def _perturbed_cameras(cam: Camera, pan_deg: float = 12.0, zoom: float = 0.25,
                       roll_deg: float = 15.0) -> list[Camera]:
    """The eight canonical motions as discrete pose offsets of one camera."""
    out = []

    def rot(axis, deg):
        th = np.deg2rad(deg)
        c, s = np.cos(th), np.sin(th)
        m = np.eye(3)
        i, j = [(1, 2), (0, 2), (0, 1)][axis]
        m[i, i] = c
        m[j, j] = c
        m[i, j] = -s
        m[j, i] = s
        return m

    w2c = cam.world_to_camera
    # pan up/down/left/right: rotate about the camera's own x / y axes.
    for axis, sign in ((0, 1), (0, -1), (1, 1), (1, -1)):
        m = np.eye(4)
        m[:3, :3] = rot(axis, sign * pan_deg)
        out.append(Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, m @ w2c))
    # zoom in/out: slide along the optical axis.
    for sign in (1, -1):
        m = np.eye(4)
        m[2, 3] = -sign * zoom
        out.append(Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, m @ w2c))
    # roll clockwise / anticlockwise.
    for sign in (1, -1):
        m = np.eye(4)
        m[:3, :3] = rot(2, sign * roll_deg)
        out.append(Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, m @ w2c))
    return out


def _orbit_camera(extent: float, width: int, height: int, angle: float,
                  tilt_deg: float, radius_frac: float) -> Camera:
    half = ROOM_HALF * (extent / 4.0)
    r = radius_frac * min(half[0], half[2])
    pos = np.array([r * np.sin(angle), 0.0, r * np.cos(angle)])
    tilt = np.deg2rad(tilt_deg)
    outward = np.array([np.sin(angle) * np.cos(tilt), np.sin(tilt), np.cos(angle) * np.cos(tilt)])
    fov = np.deg2rad(70.0)
    f = width / (2 * np.tan(fov / 2))
    return Camera(f, f, width / 2, height / 2, width, height,
                  look_at_w2c(pos, pos + outward, np.array([0.0, -1.0, 0.0])))


def corruption_field(height: int, width: int, amplitude: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Smooth low-frequency color shift with mean |delta| = amplitude / 2."""
    if amplitude == 0:
        return np.zeros((height, width, 3))
    ys, xs = np.mgrid[0:height, 0:width]
    out = np.zeros((height, width, 3))
    for c in range(3):
        u, v = rng.uniform(0.5, 1.5, 2)
        phi = rng.uniform(0, 2 * np.pi)
        out[:, :, c] = amplitude * (np.pi / 4.0) * np.sin(
            2 * np.pi * (u * xs / width + v * ys / height) + phi)
    return out


def seed_points(teacher: TeacherScene, mode: str, count: int,
                rng: np.random.Generator, jitter: float = 0.02) -> LayoutPoints:
    """Initial point sets: `sparse` and `dense` draw jittered teacher surface
    points (feature/color copied from the source Gaussian); `random` fills the
    room bounding box uniformly (stress mode)."""
    if count < 1:
        raise ValueError("seed count must be >= 1")
    scene = teacher.scene
    if mode in ("sparse", "dense"):
        idx = rng.choice(len(scene), size=min(count, len(scene)), replace=count > len(scene))
        if count > len(scene):
            idx = rng.choice(len(scene), size=count, replace=True)
        # Uniform-in-ball jitter keeps points within `jitter` of the surface.
        d = rng.normal(0, 1, (count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        radii = jitter * rng.uniform(0, 1, count) ** (1 / 3)
        pos = scene.positions[idx].astype(np.float64) + d * radii[:, None]
        albedo = SH_C0 * scene.sh_coeffs[idx, 0, :].astype(np.float64) + 0.5
        feats = scene.features[idx]
        return LayoutPoints(pos, albedo, feats)
    if mode == "random":
        half = ROOM_HALF * (teacher.extent / 4.0)
        pos = rng.uniform(-half, half, (count, 3))
        albedo = np.full((count, 3), 0.5)
        feats = np.zeros((count, scene.feature_dim))
        return LayoutPoints(pos, albedo, feats)
    raise ValueError(f"unknown seed mode {mode!r}")


def make_dataset(teacher: TeacherScene, n_train: int = 12, n_augment_per_view: int = 8,
                 n_test: int = 24, corruption: float = 0.0, seed: int = 0,
                 width: int = 96, height: int = 96,
                 seed_mode: str = "dense", seed_count: int = 6000,
                 seed_outlier_fraction: float = 0.0) -> SceneDataset:
    """Render the teacher into a training/augmented/held-out dataset."""
    rng = np.random.default_rng([seed, teacher.seed, 7])
    bg = np.zeros(3)
    # Ground-truth labels are the teacher's own semantic render argmax: the
    # class whose projected embedding best matches the blended feature. This
    # is exactly the open-vocabulary inference rule, so a teacher evaluated
    # as its own student scores a perfect mIoU.
    table = teacher.class_feature_table()  # (M, D)

    def snap(cam: Camera):
        out = render(cam, teacher.scene, bg)
        labels = np.argmax(out.feature @ table.T, axis=-1)
        return np.clip(out.color, 0.0, 1.0), labels.astype(np.int32), out.alpha

    train, augmented, test = [], [], []
    tilts = [-24.0, 0.0, 24.0]
    for i in range(n_train):
        cam = _orbit_camera(teacher.extent, width, height, 2 * np.pi * i / n_train,
                            tilts[i % len(tilts)], 0.42)
        img, lab, _ = snap(cam)
        train.append(ViewRecord(f"train_{i:03d}", cam, img, lab))
        for j, pcam in enumerate(_perturbed_cameras(cam)[:n_augment_per_view]):
            aimg, alab, _ = snap(pcam)
            aimg = np.clip(aimg + corruption_field(height, width, corruption, rng), 0.0, 1.0)
            augmented.append(ViewRecord(f"aug_{i:03d}_{j}", pcam, aimg, alab,
                                        source_view=f"train_{i:03d}"))
    test_tilts = [-16.0, 16.0]
    for i in range(n_test):
        cam = _orbit_camera(teacher.extent, width, height,
                            2 * np.pi * (i + 0.5) / n_test,
                            test_tilts[i % len(test_tilts)], 0.36)
        img, lab, _ = snap(cam)
        test.append(ViewRecord(f"test_{i:03d}", cam, img, lab))

    n_outlier = int(round(seed_count * seed_outlier_fraction))
    parts = [seed_points(teacher, seed_mode, seed_count - n_outlier, rng)]
    if n_outlier:
        parts.append(seed_points(teacher, "random", n_outlier, rng))
    seeds = LayoutPoints.concatenate(parts) if len(parts) > 1 else parts[0]

    return SceneDataset(
        train_views=train, augmented_views=augmented, test_views=test,
        seed_points=seeds, bank=teacher.bank(),
        feature_projection=teacher.feature_projection.copy(),
        seed=seed, corruption=corruption, extent=teacher.extent,
        teacher_scene=teacher.scene, teacher_labels=teacher.labels,
        meta={"teacher_seed": teacher.seed, "seed_mode": seed_mode,
              "seed_count": seed_count, "seed_outlier_fraction": seed_outlier_fraction},
    )
