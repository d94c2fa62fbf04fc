"""Evaluation metrics: PSNR, SSIM, mIoU, mAcc, and the per-split report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .heads import SemanticHeads, TextBank, segmentation_logits
from .losses import ssim
from .rasterizer import render

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def miou_macc(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int):
    """Mean IoU and mean pixel accuracy in percent, plus the confusion matrix.

    Classes absent from both prediction and ground truth are excluded from
    the IoU mean; accuracy averages over classes present in the ground truth.
    """
    pred = np.asarray(pred_labels).reshape(-1)
    gt = np.asarray(gt_labels).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("label map shapes differ")
    if pred.min(initial=0) < 0 or gt.min(initial=0) < 0 \
            or pred.max(initial=0) >= num_classes or gt.max(initial=0) >= num_classes:
        raise ValueError("labels out of range")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (gt, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    denom = tp + fp + fn
    present = denom > 0
    iou = np.zeros(num_classes)
    iou[present] = tp[present] / denom[present]
    miou = 100.0 * float(iou[present].mean()) if present.any() else 0.0
    gt_present = confusion.sum(axis=1) > 0
    acc = np.zeros(num_classes)
    acc[gt_present] = tp[gt_present] / confusion.sum(axis=1)[gt_present]
    macc = 100.0 * float(acc[gt_present].mean()) if gt_present.any() else 0.0
    return miou, macc, confusion


@dataclass
class EvalReport:
    view_ids: list[str]
    psnr_per_view: list[float]
    ssim_per_view: list[float]
    miou: float
    macc: float
    confusion: np.ndarray
    mean_psnr: float = field(init=False)
    mean_ssim: float = field(init=False)

    def __post_init__(self):
        self.mean_psnr = float(np.mean(self.psnr_per_view)) if self.psnr_per_view else 0.0
        self.mean_ssim = float(np.mean(self.ssim_per_view)) if self.ssim_per_view else 0.0

    def to_dict(self) -> dict:
        return {
            "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim,
            "miou": self.miou, "macc": self.macc,
            "per_view": [
                {"id": i, "psnr": p, "ssim": s}
                for i, p, s in zip(self.view_ids, self.psnr_per_view, self.ssim_per_view)
            ],
            "confusion": self.confusion.tolist(),
        }


def predict_labels(feature_img: np.ndarray, heads: SemanticHeads,
                   bank: TextBank) -> np.ndarray:
    """Open-vocabulary prediction: argmax cosine between aligned rendered
    features and the class bank."""
    return np.argmax(segmentation_logits(feature_img, heads, bank), axis=-1).astype(np.int32)


def evaluate_views(scene, heads: SemanticHeads, bank: TextBank, views,
                   background=(0.0, 0.0, 0.0)) -> EvalReport:
    """Render every view and score color against its stored image and the
    label argmax against its stored label map."""
    bg = np.asarray(background, dtype=np.float64)
    ids, psnrs, ssims = [], [], []
    all_pred, all_gt = [], []
    for v in views:
        out = render(v.camera, scene, bg)
        color = np.clip(out.color, 0.0, 1.0)
        ids.append(v.view_id)
        psnrs.append(psnr(color, v.image))
        ssims.append(ssim(color, v.image))
        if v.labels is not None:
            all_pred.append(predict_labels(out.feature, heads, bank))
            all_gt.append(v.labels)
    if all_pred:
        miou, macc, confusion = miou_macc(np.stack(all_pred), np.stack(all_gt),
                                          bank.num_classes)
    else:
        miou, macc, confusion = 0.0, 0.0, np.zeros((bank.num_classes,) * 2, dtype=np.int64)
    return EvalReport(ids, psnrs, ssims, miou, macc, confusion)
