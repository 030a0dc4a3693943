"""Evaluation and analysis: mIoU, attention entropy, linear CKA, CAM export."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import synthdata
from .cam import IGNORE, derive_pseudo_labels
from .trainer import FSRModel, TrainConfig


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_labels: int) -> np.ndarray:
    """(num_labels x num_labels) counts, rows = ground truth, cols = prediction.

    Pixels where either map holds IGNORE are skipped.
    """
    gt = np.asarray(gt).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
    keep = (gt != IGNORE) & (pred != IGNORE)
    gt, pred = gt[keep], pred[keep]
    if gt.size and (gt.max() >= num_labels or pred.max() >= num_labels or min(gt.min(), pred.min()) < 0):
        raise ValueError("label id outside [0, num_labels)")
    return np.bincount(gt * num_labels + pred, minlength=num_labels**2).reshape(num_labels, num_labels)


def miou(conf: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean IoU in percent over classes with a nonzero union, plus per-class IoU.

    Classes with an empty union get NaN in the per-class vector.
    """
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    valid = union > 0
    score = float(np.mean(iou[valid]) * 100.0) if valid.any() else 0.0
    return score, iou


def attention_entropy(attention: torch.Tensor | np.ndarray) -> np.ndarray:
    """Per-head mean (over query rows) of the row entropy, natural log.

    Accepts (heads, N, N) or (B, heads, N, N); a leading batch axis is
    averaged after the per-image query average.
    """
    a = torch.as_tensor(attention, dtype=torch.float64)
    ent = -(torch.where(a > 0, a * torch.log(a), torch.zeros_like(a))).sum(dim=-1)
    ent = ent.mean(dim=-1)
    if ent.ndim == 2:
        ent = ent.mean(dim=0)
    return ent.numpy()


def cka(x: np.ndarray | torch.Tensor, y: np.ndarray | torch.Tensor) -> float:
    """Linear centered kernel alignment between two (N, D) representations."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("representations must share the sample axis")
    x = x - x.mean(axis=0, keepdims=True)
    y = y - y.mean(axis=0, keepdims=True)
    num = np.linalg.norm(y.T @ x, "fro") ** 2
    den = np.linalg.norm(x.T @ x, "fro") * np.linalg.norm(y.T @ y, "fro")
    return float(num / den) if den > 0 else 0.0


def downsample_nearest(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Pick the pixel at each patch centre."""
    c = patch_size // 2
    return mask[c::patch_size, c::patch_size]


@dataclass
class EvalResult:
    split: str
    miou_pseudo: float
    miou_pred: float
    per_class_pseudo: list
    per_class_pred: list

    def report(self) -> dict:
        return {
            "split": self.split,
            "miou_pseudo": self.miou_pseudo,
            "miou_pred": self.miou_pred,
            "per_class": [
                {"class": i, "iou_pseudo": _nan_to_none(p), "iou_pred": _nan_to_none(q)}
                for i, (p, q) in enumerate(zip(self.per_class_pseudo, self.per_class_pred))
            ],
        }


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and np.isnan(v)) else float(v)


def _stack(images: list[synthdata.LabeledImage]):
    pixels = torch.from_numpy(np.stack([img.pixels for img in images]))
    labels = torch.from_numpy(np.stack([img.labels for img in images]))
    return pixels, labels


@torch.no_grad()
def predict(model: FSRModel, images, config: TrainConfig, batch_size: int = 50):
    """Yield (image, pseudo grid labels, decoder grid prediction, cam) per image."""
    model.eval()
    h, w = model.encoder.grid
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        pixels, labels = _stack(chunk)
        out = model.segment(pixels)
        pseudo = derive_pseudo_labels(out["cam"], labels, config.bg_low, config.bg_high)
        pred = out["seg"].argmax(dim=1)
        for i, img in enumerate(chunk):
            yield img, pseudo[i].reshape(h, w).numpy(), pred[i].numpy(), out["cam"][i].numpy()


def evaluate(model: FSRModel, images, config: TrainConfig, split: str = "val") -> EvalResult:
    """Pseudo-label and decoder mIoU at token-grid resolution."""
    n = config.num_classes + 1
    conf_pseudo = np.zeros((n, n), dtype=np.int64)
    conf_pred = np.zeros((n, n), dtype=np.int64)
    for img, pseudo, pred, _ in predict(model, images, config):
        if img.gt_mask is None:
            raise ValueError(f"image {img.id} has no ground-truth mask")
        gt = downsample_nearest(img.gt_mask, config.patch_size)
        conf_pseudo += confusion_matrix(gt, pseudo, n)
        conf_pred += confusion_matrix(gt, pred, n)
    m_pseudo, iou_pseudo = miou(conf_pseudo)
    m_pred, iou_pred = miou(conf_pred)
    return EvalResult(split, m_pseudo, m_pred, iou_pseudo.tolist(), iou_pred.tolist())


@torch.no_grad()
def layer_entropy_profile(model: FSRModel, images, batch_size: int = 50) -> np.ndarray:
    """(layers, heads) average attention entropy over queries then images."""
    model.eval()
    totals, count = None, 0
    for start in range(0, len(images), batch_size):
        pixels, _ = _stack(images[start:start + batch_size])
        attns = model.encoder.capture_attention(pixels)
        per_layer = np.stack([attention_entropy(a) for a in attns]) * pixels.shape[0]
        totals = per_layer if totals is None else totals + per_layer
        count += pixels.shape[0]
    return totals / count


@torch.no_grad()
def layer_cka_matrix(model: FSRModel, images, max_images: int = 100) -> np.ndarray:
    """CKA between every pair of encoder layer outputs, tokens pooled over images."""
    model.eval()
    pixels, _ = _stack(images[:max_images])
    outs = [o.reshape(-1, o.shape[-1]).numpy() for o in model.encoder.layer_outputs(pixels)]
    n = len(outs)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = cka(outs[i], outs[j])
    return mat


def _write_png(path: Path, array: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(array).save(path)


def export_cam_maps(model: FSRModel, images, config: TrainConfig, outdir: str | os.PathLike,
                    upscale: bool = True) -> Path:
    """Per image: one grayscale PNG + raw float32 .bin per present class CAM,
    and an indexed pseudo-label PNG (IGNORE kept as 255) + raw uint8 .bin."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    h, w = model.encoder.grid
    scale = config.patch_size if upscale else 1
    index = []
    for img, pseudo, _, cam in predict(model, images, config):
        stem = f"IMG_{img.id:06d}"
        for c in np.flatnonzero(img.labels):
            heat = cam[:, c].reshape(h, w).astype(np.float32)
            heat.astype("<f4").tofile(outdir / f"{stem}_cam{c + 1}.bin")
            gray = np.kron((heat * 255).round().astype(np.uint8), np.ones((scale, scale), np.uint8))
            _write_png(outdir / f"{stem}_cam{c + 1}.png", gray)
        lab = pseudo.astype(np.uint8)
        lab.tofile(outdir / f"{stem}_pseudo.bin")
        _write_png(outdir / f"{stem}_pseudo.png", np.kron(lab, np.ones((scale, scale), np.uint8)))
        index.append({"id": img.id, "labels": img.labels.tolist(), "grid": [h, w]})
    (outdir / "index.jsonl").write_text("".join(json.dumps(r) + "\n" for r in index))
    return outdir
