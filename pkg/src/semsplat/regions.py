"""Cross-view region correspondence machinery.

Pseudo cameras are sampled between pairs of nearby training views; a
`Segmenter` turns a random point prompt in the training image into
corresponding region masks across the training view and the pseudo views.
The production segmenter is an oracle backed by the synthetic teacher scene
(label renders + connected components); a file-backed implementation reads
precomputed run-length-encoded masks so real model output can be ingested
without any ML runtime.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .geometry import Camera
from .rasterizer import RenderOutput, render

VISIBILITY_CUTOFF = 0.5


@dataclass
class RegionMaskSet:
    train_mask: np.ndarray
    pseudo_masks: list[np.ndarray]
    prompt: tuple[int, int]
    source_view: int

    def all_empty(self) -> bool:
        return not self.train_mask.any() and all(not m.any() for m in self.pseudo_masks)


@dataclass(frozen=True)
class PseudoCamera:
    camera: Camera
    anchor_view: int
    neighbor_view: int


class Segmenter(Protocol):
    def point_prompt(self, views: Sequence, prompt: tuple[int, int]) -> list[np.ndarray]:
        """One boolean mask per view for the region containing `prompt`
        (pixel coordinate in views[0])."""
        ...

    def auto_masks(self, view) -> list[np.ndarray]:
        """Pairwise-disjoint region masks covering the view."""
        ...


def _slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:
    q0 = q0 / np.linalg.norm(q0)
    q1 = q1 / np.linalg.norm(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1, dot = -q1, -dot
    if dot > 0.9995:
        out = q0 + t * (q1 - q0)
        return out / np.linalg.norm(out)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return (np.sin((1 - t) * theta) / s) * q0 + (np.sin(t * theta) / s) * q1


def sample_pseudo_views(train_cams: Sequence[Camera], anchor: int,
                        noise_scale: float, rng: np.random.Generator,
                        count: int = 2) -> list[PseudoCamera]:
    """Cameras between the anchor view and its nearest training view: center
    at the pair midpoint plus isotropic noise (sigma = noise_scale * baseline),
    rotation spherically interpolated at t=0.5, intrinsics from the anchor."""
    if len(train_cams) < 2:
        raise ValueError("pseudo-view sampling needs at least 2 training cameras")
    centers = np.stack([c.center() for c in train_cams])
    dist = np.linalg.norm(centers - centers[anchor], axis=1)
    dist[anchor] = np.inf
    neighbor = int(np.argmin(dist))
    baseline = float(dist[neighbor])
    midpoint = 0.5 * (centers[anchor] + centers[neighbor])
    from .geometry import quat_to_rotmat, rotmat_to_quat

    qa = rotmat_to_quat(train_cams[anchor].rotation)
    qb = rotmat_to_quat(train_cams[neighbor].rotation)
    q_mid = _slerp(qa, qb, 0.5)
    r_mid = quat_to_rotmat(q_mid)
    out = []
    ref = train_cams[anchor]
    for _ in range(count):
        center = midpoint + rng.normal(0.0, noise_scale * baseline, 3)
        w2c = np.eye(4)
        w2c[:3, :3] = r_mid
        w2c[:3, 3] = -r_mid @ center
        cam = Camera(ref.fx, ref.fy, ref.cx, ref.cy, ref.width, ref.height, w2c)
        out.append(PseudoCamera(cam, anchor, neighbor))
    return out


def erode_mask(mask: np.ndarray, k: int = 5) -> np.ndarray:
    """Morphological erosion with a k x k all-ones element; out-of-bounds
    neighbors count as False."""
    if k < 1 or k % 2 == 0:
        raise ValueError("erosion kernel must be odd and >= 1")
    mask = np.asarray(mask, dtype=bool)
    if k == 1:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=np.ones((k, k), dtype=bool),
                                  border_value=0)


def collect_max_weight(out: RenderOutput, mask: np.ndarray) -> np.ndarray:
    """Deduplicated max-weight Gaussian indices over masked pixels (NONE
    sentinel excluded)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != out.max_weight_index.shape:
        raise ValueError("mask shape does not match render output")
    idx = out.max_weight_index[mask]
    return np.unique(idx[idx >= 0]).astype(np.int64)


class TeacherSegmenter:
    """Oracle segmenter over a labeled teacher scene.

    `point_prompt` renders the teacher's label map per view: the prompt picks
    a class (empty everywhere if its pixel has alpha < 0.5), the training
    view gets the connected component containing the prompt, and every other
    view gets that class's visible region.
    """

    def __init__(self, scene, labels):
        from .geometry import GaussianSet

        self._labels = np.asarray(labels, dtype=np.int32)
        # Feature blending is dead weight for label renders.
        self._scene = GaussianSet(
            scene.positions, scene.sh_coeffs, scene.opacity_logits,
            scene.log_scales, scene.rotations, np.zeros((len(scene), 0), dtype=np.float32),
        )
        self._cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def label_render(self, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
        """(label_map, alpha): label of the max-weight Gaussian per pixel,
        -1 where nothing visible (alpha below cutoff or no contributor)."""
        key = cam.world_to_camera.tobytes() + bytes([cam.width % 251, cam.height % 251])
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        out = render(cam, self._scene, np.zeros(3))
        label = np.where(out.max_weight_index >= 0,
                         self._labels[np.maximum(out.max_weight_index, 0)], -1)
        label = np.where(out.alpha >= VISIBILITY_CUTOFF, label, -1).astype(np.int32)
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = (label, out.alpha)
        return label, out.alpha

    def point_prompt(self, views: Sequence[Camera], prompt: tuple[int, int]) -> list[np.ndarray]:
        x, y = int(prompt[0]), int(prompt[1])
        label0, alpha0 = self.label_render(views[0])
        h, w = label0.shape
        empty = [np.zeros((v.height, v.width), dtype=bool) for v in views]
        if not (0 <= y < h and 0 <= x < w):
            return empty
        if alpha0[y, x] < VISIBILITY_CUTOFF or label0[y, x] < 0:
            return empty
        cls = int(label0[y, x])
        comp, _ = ndimage.label(label0 == cls)
        masks = [comp == comp[y, x]]
        for v in views[1:]:
            lab, _ = self.label_render(v)
            masks.append(lab == cls)
        return masks

    def auto_masks(self, view: Camera) -> list[np.ndarray]:
        label, _ = self.label_render(view)
        out = []
        for cls in np.unique(label[label >= 0]):
            comp, n = ndimage.label(label == cls)
            for c in range(1, n + 1):
                out.append(comp == c)
        return out


class FileSegmenter:
    """Reads precomputed masks from a directory of run-length-encoded files.

    Layout: <root>/prompts/<x>_<y>/<view_id>.rle for point prompts and
    <root>/auto/<view_id>/<k>.rle for automatic masks. Each .rle file is JSON
    {"height": H, "width": W, "runs": [start, len, start, len, ...]} over the
    flattened row-major mask.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @staticmethod
    def encode(mask: np.ndarray) -> dict:
        flat = np.asarray(mask, dtype=bool).reshape(-1)
        runs = []
        pad = np.concatenate([[False], flat, [False]])
        change = np.flatnonzero(pad[1:] != pad[:-1])
        for s, e in zip(change[::2], change[1::2]):
            runs.extend([int(s), int(e - s)])
        return {"height": mask.shape[0], "width": mask.shape[1], "runs": runs}

    @staticmethod
    def decode(payload: dict) -> np.ndarray:
        h, w = payload["height"], payload["width"]
        flat = np.zeros(h * w, dtype=bool)
        runs = payload["runs"]
        for s, n in zip(runs[::2], runs[1::2]):
            flat[s:s + n] = True
        return flat.reshape(h, w)

    def write_prompt(self, prompt: tuple[int, int], view_id, mask: np.ndarray):
        d = self.root / "prompts" / f"{int(prompt[0])}_{int(prompt[1])}"
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{view_id}.rle").write_text(json.dumps(self.encode(mask)))

    def write_auto(self, view_id, masks: list[np.ndarray]):
        d = self.root / "auto" / str(view_id)
        d.mkdir(parents=True, exist_ok=True)
        for k, m in enumerate(masks):
            (d / f"{k}.rle").write_text(json.dumps(self.encode(m)))

    def point_prompt(self, views: Sequence, prompt: tuple[int, int]) -> list[np.ndarray]:
        d = self.root / "prompts" / f"{int(prompt[0])}_{int(prompt[1])}"
        out = []
        for v in views:
            f = d / f"{v}.rle"
            if f.exists():
                out.append(self.decode(json.loads(f.read_text())))
            else:
                out.append(np.zeros((1, 1), dtype=bool))
        return out

    def auto_masks(self, view) -> list[np.ndarray]:
        d = self.root / "auto" / str(view)
        if not d.is_dir():
            return []
        return [self.decode(json.loads(f.read_text()))
                for f in sorted(d.glob("*.rle"), key=lambda p: int(p.stem))]


def propose_region_masks(source_view: int, train_cam: Camera,
                         pseudo_cams: Sequence[PseudoCamera], segmenter: Segmenter,
                         rng: np.random.Generator) -> RegionMaskSet:
    """One iteration of stochastic prompting: uniform pixel prompt in the
    training image, corresponding masks from the segmenter. Empty masks are
    legal and signal a skipped consistency step."""
    x = int(rng.integers(0, train_cam.width))
    y = int(rng.integers(0, train_cam.height))
    views = [train_cam] + [pc.camera for pc in pseudo_cams]
    masks = segmenter.point_prompt(views, (x, y))
    return RegionMaskSet(train_mask=masks[0], pseudo_masks=list(masks[1:]),
                         prompt=(x, y), source_view=source_view)
