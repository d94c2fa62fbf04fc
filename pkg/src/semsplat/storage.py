"""On-disk formats: checkpoints, layout points, label maps, feature rasters,
and the dataset directory.

All binary formats are little-endian with 4-byte ASCII magics ("SPCG"
checkpoints, "SPCP" layout points, "SPCL" label maps, "SPCF" raw feature
rasters). Parse failures raise FormatError naming the offset and field.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, GaussianSet
from .heads import EMBED_DIM, SemanticHeads, TextBank
from .scenegen import LayoutPoints, SceneDataset, ViewRecord

CHECKPOINT_MAGIC = b"SPCG"
LAYOUT_MAGIC = b"SPCP"
LABEL_MAGIC = b"SPCL"
RASTER_MAGIC = b"SPCF"


class FormatError(ValueError):
    def __init__(self, field: str, offset: int, detail: str = ""):
        self.field = field
        self.offset = offset
        msg = f"bad or truncated field '{field}' at byte offset {offset}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(field, self.pos, f"need {n} bytes, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self, field):
        return struct.unpack("<H", self.take(2, field))[0]

    def u32(self, field):
        return struct.unpack("<I", self.take(4, field))[0]

    def u64(self, field):
        return struct.unpack("<Q", self.take(8, field))[0]

    def array(self, dtype, shape, field) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(n * np.dtype(dtype).itemsize, field)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def done(self) -> bool:
        return self.pos >= len(self.data)


def _gaussian_dtype(k: int, d: int) -> np.dtype:
    return np.dtype([
        ("pos", "<f4", (3,)), ("sh", "<f4", (3, k)), ("op", "<f4"),
        ("ls", "<f4", (3,)), ("q", "<f4", (4,)), ("f", "<f4", (d,)),
    ])


@dataclass
class CheckpointData:
    scene: GaussianSet
    heads: SemanticHeads | None
    bank: TextBank | None
    config: dict
    iteration: int
    gaussian_labels: np.ndarray | None = None


def save_checkpoint(path, scene: GaussianSet, heads: SemanticHeads | None = None,
                    bank: TextBank | None = None, config: dict | None = None,
                    iteration: int = 0, gaussian_labels: np.ndarray | None = None):
    k = scene.sh_coeffs.shape[1]
    d = scene.feature_dim
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IIII", 1, len(scene), d, scene.sh_degree))
    rec = np.zeros(len(scene), dtype=_gaussian_dtype(k, d))
    rec["pos"] = scene.positions
    rec["sh"] = np.swapaxes(scene.sh_coeffs, 1, 2)  # channel-major on disk
    rec["op"] = scene.opacity_logits
    rec["ls"] = scene.log_scales
    rec["q"] = scene.rotations
    rec["f"] = scene.features
    buf.write(rec.tobytes())

    def section(tag: bytes, payload: bytes):
        buf.write(tag)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)

    if heads is not None:
        hp = io.BytesIO()
        hp.write(struct.pack("<IIII", EMBED_DIM, heads.feature_dim,
                             heads.num_classes, heads.w_psi.shape[0]))
        for f in ("w_f", "b_f", "w_s", "b_s", "w_psi", "b_psi"):
            hp.write(np.ascontiguousarray(getattr(heads, f), dtype="<f8").tobytes())
        section(b"HEDS", hp.getvalue())
    if bank is not None:
        tp = io.BytesIO()
        tp.write(struct.pack("<II", bank.num_classes, EMBED_DIM))
        for name in bank.names:
            nb = name.encode("utf-8")
            tp.write(struct.pack("<H", len(nb)))
            tp.write(nb)
        tp.write(np.ascontiguousarray(bank.embeddings, dtype="<f8").tobytes())
        section(b"TBNK", tp.getvalue())
    if gaussian_labels is not None:
        lp = io.BytesIO()
        lp.write(struct.pack("<I", len(gaussian_labels)))
        lp.write(np.ascontiguousarray(gaussian_labels, dtype="<u2").tobytes())
        section(b"GLBL", lp.getvalue())
    meta = json.dumps({"config": config or {}, "iteration": iteration}).encode("utf-8")
    section(b"META", meta)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> CheckpointData:
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError("magic", 0, f"expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
    version = r.u32("version")
    if version != 1:
        raise FormatError("version", 4, f"unsupported version {version}")
    n = r.u32("num_gaussians")
    d = r.u32("feature_dim")
    deg = r.u32("sh_degree")
    if deg > 3:
        raise FormatError("sh_degree", 16, f"degree {deg} out of range")
    k = (deg + 1) ** 2
    rec = r.array(_gaussian_dtype(k, d), (n,), "gaussian block")
    scene = GaussianSet(rec["pos"], np.swapaxes(rec["sh"], 1, 2), rec["op"],
                        rec["ls"], rec["q"], rec["f"])
    heads = bank = None
    gaussian_labels = None
    config: dict = {}
    iteration = 0
    while not r.done():
        tag_off = r.pos
        tag = r.take(4, "section tag")
        ln = r.u64("section length")
        payload = r.take(ln, f"section {tag!r} payload")
        pr = _Reader(payload)
        if tag == b"HEDS":
            emb = pr.u32("heads embed dim")
            hd = pr.u32("heads feature dim")
            m = pr.u32("heads num classes")
            dz = pr.u32("heads contrast dim")
            if emb != EMBED_DIM:
                raise FormatError("heads embed dim", tag_off, f"{emb} != {EMBED_DIM}")
            heads = SemanticHeads(
                pr.array("<f8", (emb, hd), "w_f"), pr.array("<f8", (emb,), "b_f"),
                pr.array("<f8", (m, m), "w_s"), pr.array("<f8", (m,), "b_s"),
                pr.array("<f8", (dz, hd), "w_psi"), pr.array("<f8", (dz,), "b_psi"))
        elif tag == b"TBNK":
            m = pr.u32("bank classes")
            emb = pr.u32("bank embed dim")
            names = []
            for i in range(m):
                ln2 = pr.u16(f"bank name {i} length")
                names.append(pr.take(ln2, f"bank name {i}").decode("utf-8"))
            bank = TextBank(pr.array("<f8", (m, emb), "bank rows"), names)
        elif tag == b"GLBL":
            ln2 = pr.u32("label count")
            gaussian_labels = pr.array("<u2", (ln2,), "gaussian labels").astype(np.int32)
        elif tag == b"META":
            try:
                meta = json.loads(payload.decode("utf-8"))
            except json.JSONDecodeError as e:
                raise FormatError("meta json", tag_off, str(e)) from e
            config = meta.get("config", {})
            iteration = int(meta.get("iteration", 0))
        # Unknown sections are skipped (forward compatibility).
    return CheckpointData(scene, heads, bank, config, iteration, gaussian_labels)


def save_layout(path, layout: LayoutPoints):
    d = layout.features.shape[1]
    buf = io.BytesIO()
    buf.write(LAYOUT_MAGIC)
    buf.write(struct.pack("<III", 1, len(layout), d))
    rec = np.zeros(len(layout), dtype=np.dtype(
        [("pos", "<f4", (3,)), ("col", "<f4", (3,)), ("f", "<f4", (d,))]))
    rec["pos"] = layout.positions
    rec["col"] = layout.colors
    rec["f"] = layout.features
    buf.write(rec.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_layout(path) -> LayoutPoints:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != LAYOUT_MAGIC:
        raise FormatError("magic", 0, f"expected {LAYOUT_MAGIC!r}, got {magic!r}")
    version = r.u32("version")
    if version != 1:
        raise FormatError("version", 4, f"unsupported version {version}")
    n = r.u32("num_points")
    d = r.u32("feature_dim")
    rec = r.array(np.dtype([("pos", "<f4", (3,)), ("col", "<f4", (3,)), ("f", "<f4", (d,))]),
                  (n,), "point block")
    return LayoutPoints(rec["pos"], rec["col"], rec["f"])


def save_labels(path, labels: np.ndarray):
    labels = np.asarray(labels)
    h, w = labels.shape
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError("label map too large for u16 header")
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<HH", h, w))
        f.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())


def load_labels(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != LABEL_MAGIC:
        raise FormatError("magic", 0, f"expected {LABEL_MAGIC!r}, got {magic!r}")
    h = r.u16("height")
    w = r.u16("width")
    return r.array("<u2", (h, w), "label data").astype(np.int32)


def save_feature_raster(path, raster: np.ndarray):
    raster = np.asarray(raster, dtype=np.float32)
    if raster.ndim == 2:
        raster = raster[:, :, None]
    h, w, c = raster.shape
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(raster, dtype="<f4").tobytes())


def load_feature_raster(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != RASTER_MAGIC:
        raise FormatError("magic", 0, f"expected {RASTER_MAGIC!r}, got {magic!r}")
    h = r.u32("height")
    w = r.u32("width")
    c = r.u32("channels")
    return r.array("<f4", (h, w, c), "raster data")


def save_image(path, image: np.ndarray):
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _camera_record(view_id: str, cam: Camera) -> dict:
    return {"id": view_id, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "w2c": [float(v) for v in cam.world_to_camera.reshape(-1)]}


def _camera_from_record(rec: dict) -> Camera:
    return Camera(rec["fx"], rec["fy"], rec["cx"], rec["cy"], rec["width"], rec["height"],
                  np.array(rec["w2c"], dtype=np.float64).reshape(4, 4))


def save_dataset(dataset: SceneDataset, path):
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(exist_ok=True)
    cameras = []
    for views in (dataset.train_views, dataset.augmented_views, dataset.test_views):
        for v in views:
            cameras.append(_camera_record(v.view_id, v.camera))
            if v.image is not None:
                save_image(root / "images" / f"{v.view_id}.png", v.image)
            if v.labels is not None:
                save_labels(root / "labels" / f"{v.view_id}.u16", v.labels)
    (root / "cameras.json").write_text(json.dumps(cameras, indent=1))
    (root / "embeddings.json").write_text(json.dumps({
        "names": dataset.bank.names,
        "rows": [[float(x) for x in row] for row in dataset.bank.embeddings]}))
    save_layout(root / "seed_points.spcp", dataset.seed_points)
    if dataset.teacher_scene is not None:
        save_checkpoint(root / "oracle.spcg", dataset.teacher_scene,
                        bank=dataset.bank, gaussian_labels=dataset.teacher_labels)
    save_feature_raster(root / "feature_projection.spcf",
                        dataset.feature_projection[:, :, None])
    manifest = {
        "train": [v.view_id for v in dataset.train_views],
        "augmented": [v.view_id for v in dataset.augmented_views],
        "test": [v.view_id for v in dataset.test_views],
        "augment_of": {v.view_id: v.source_view for v in dataset.augmented_views},
        "seed": dataset.seed,
        "corruption": dataset.corruption,
        "extent": dataset.extent,
        "seed_points": "seed_points.spcp",
        "meta": dataset.meta,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(path) -> SceneDataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cam_records = {r["id"]: r for r in json.loads((root / "cameras.json").read_text())}
    emb = json.loads((root / "embeddings.json").read_text())
    bank = TextBank(np.array(emb["rows"], dtype=np.float64), list(emb["names"]))
    seeds = load_layout(root / manifest["seed_points"])
    proj_path = root / "feature_projection.spcf"
    projection = (load_feature_raster(proj_path)[:, :, 0].astype(np.float64)
                  if proj_path.exists() else None)

    def load_view(view_id: str, source: str | None = None) -> ViewRecord:
        cam = _camera_from_record(cam_records[view_id])
        img_path = root / "images" / f"{view_id}.png"
        lab_path = root / "labels" / f"{view_id}.u16"
        return ViewRecord(
            view_id, cam,
            load_image(img_path) if img_path.exists() else None,
            load_labels(lab_path) if lab_path.exists() else None,
            source_view=source)

    aug_of = manifest.get("augment_of", {})
    teacher_scene = teacher_labels = None
    oracle_path = root / "oracle.spcg"
    if oracle_path.exists():
        oracle = load_checkpoint(oracle_path)
        teacher_scene = oracle.scene
        teacher_labels = oracle.gaussian_labels
    return SceneDataset(
        train_views=[load_view(i) for i in manifest["train"]],
        augmented_views=[load_view(i, aug_of.get(i)) for i in manifest["augmented"]],
        test_views=[load_view(i) for i in manifest["test"]],
        seed_points=seeds, bank=bank,
        feature_projection=projection if projection is not None else np.zeros((0, EMBED_DIM)),
        seed=manifest["seed"], corruption=manifest["corruption"],
        extent=manifest["extent"], teacher_scene=teacher_scene,
        teacher_labels=teacher_labels, meta=manifest.get("meta", {}),
    )
