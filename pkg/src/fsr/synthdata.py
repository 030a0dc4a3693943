"""Synthetic multi-object shapes dataset with image-level labels.

Images are 64x64 RGB crops of a textured noise background with 1-3 filled
shapes (circle, square, triangle) drawn in random order, so later shapes
occlude earlier ones. Pixel masks are written for every split but only
exposed by the loader for evaluation splits.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

CLASS_NAMES = ("circle", "square", "triangle")
# per-class base fill colours; each object's colour is drawn around its base
BASE_COLORS = np.array([[0.85, 0.25, 0.2], [0.2, 0.75, 0.3], [0.25, 0.35, 0.9]], dtype=np.float32)


class DatasetError(Exception):
    """Raised when a dataset directory is malformed or a config is invalid."""


@dataclass
class DatasetConfig:
    image_size: int = 64
    patch_size: int = 8
    class_names: tuple[str, ...] = CLASS_NAMES
    num_train: int = 500
    num_val: int = 100
    max_objects: int = 3
    min_radius: int = 9
    max_radius: int = 18
    color_mix: float = 0.5
    color_spread: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size <= 0 or self.image_size <= 0:
            raise DatasetError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise DatasetError(
                f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}"
            )
        if len(self.class_names) == 0:
            raise DatasetError("at least one class is required")
        unknown = set(self.class_names) - set(CLASS_NAMES)
        if unknown:
            raise DatasetError(f"unknown shape classes: {sorted(unknown)}")
        if self.num_train < 0 or self.num_val < 0:
            raise DatasetError("split sizes must be non-negative")
        if not 0.0 <= self.color_mix <= 1.0:
            raise DatasetError("color_mix must lie in [0, 1]")
        if not 0.0 <= self.color_spread <= 1.0:
            raise DatasetError("color_spread must lie in [0, 1]")
        if not 1 <= self.min_radius <= self.max_radius:
            raise DatasetError("need 1 <= min_radius <= max_radius")
        if self.max_objects < 1:
            raise DatasetError("max_objects must be >= 1")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class LabeledImage:
    id: int
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    labels: np.ndarray  # C, multi-hot int
    gt_mask: np.ndarray | None = None  # H x W uint8, 0 = background


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    labels: np.ndarray


@dataclass
class AugmentConfig:
    size: int = 64
    scale: tuple[float, float] = (0.32, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter: bool = True
    jitter_gain: tuple[float, float] = (0.8, 1.2)
    jitter_offset: tuple[float, float] = (-0.1, 0.1)


# ---------------------------------------------------------------------------
# rendering


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells, 3), dtype=np.float32)
    t = torch.from_numpy(coarse).permute(2, 0, 1)[None]
    up = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return up[0].permute(1, 2, 0).numpy()


def _shape_mask(kind: str, cy: float, cx: float, radius: float, angle: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= radius * radius
    # rotate into the shape frame
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if kind == "square":
        half = radius / math.sqrt(2.0) * 1.1
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        # equilateral triangle inscribed in a circle of the given radius
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            theta = angle + k * 2.0 * math.pi / 3.0
            nx, ny = math.cos(theta), math.sin(theta)
            inside &= dx * nx + dy * ny <= radius / 2.0
        return inside
    raise DatasetError(f"unknown shape {kind!r}")


def render_image(config: DatasetConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one image and its class-index mask."""
    size = config.image_size
    # low-saturation texture: shared gray level plus a faint per-channel tint
    gray = _smooth_noise(rng, size, 4)[..., :1]
    tint = _smooth_noise(rng, size, 3) - 0.5
    background = 0.2 + 0.6 * gray + 0.12 * tint
    background += rng.normal(0.0, 0.05, size=background.shape).astype(np.float32)
    pixels = background.astype(np.float32)
    mask = np.zeros((size, size), dtype=np.uint8)

    n_objects = int(rng.integers(1, config.max_objects + 1))
    for _ in range(n_objects):
        cls = int(rng.integers(config.num_classes))
        radius = float(rng.uniform(config.min_radius, config.max_radius))
        cy = float(rng.uniform(radius * 0.6, size - radius * 0.6))
        cx = float(rng.uniform(radius * 0.6, size - radius * 0.6))
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
        region = _shape_mask(config.class_names[cls], cy, cx, radius, angle, size)
        if not region.any():
            continue
        base = BASE_COLORS[CLASS_NAMES.index(config.class_names[cls])]
        free = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        color = config.color_mix * base + (1.0 - config.color_mix) * free
        color = color + rng.uniform(-config.color_spread, config.color_spread, size=3).astype(np.float32)
        texture = rng.normal(0.0, 0.05, size=(size, size, 3)).astype(np.float32)
        pixels[region] = color + texture[region]
        mask[region] = cls + 1
    if not mask.any():
        # a shape fully outside the canvas cannot happen with the center bounds,
        # but keep the at-least-one-object invariant unconditional
        mask[size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = 1
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return pixels, mask


def labels_from_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    present = np.zeros(num_classes, dtype=np.int64)
    for c in np.unique(mask):
        if c > 0:
            present[int(c) - 1] = 1
    return present


def _split_seed(seed: int, split: str) -> int:
    return {"train": 0, "val": 1}[split] + 2 * seed


def generate_dataset(config: DatasetConfig, root: str | os.PathLike) -> Path:
    """Write train/val splits under ``root``; deterministic in ``config.seed``."""
    config.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, count in (("train", config.num_train), ("val", config.num_val)):
        (root / split / "images").mkdir(parents=True, exist_ok=True)
        (root / split / "masks").mkdir(parents=True, exist_ok=True)
        rows = []
        for idx in range(count):
            rng = np.random.default_rng([_split_seed(config.seed, split), idx])
            pixels, mask = render_image(config, rng)
            name = f"IMG_{idx:06d}.bin"
            (root / split / "images" / name).write_bytes(pixels.astype("<f4").tobytes())
            (root / split / "masks" / name).write_bytes(mask.astype(np.uint8).tobytes())
            rows.append({"id": idx, "labels": labels_from_mask(mask, config.num_classes).tolist()})
        with open(root / split / "labels.jsonl", "w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    meta = {
        "image_size": config.image_size,
        "num_classes": config.num_classes,
        "class_names": list(config.class_names),
        "seed": config.seed,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2))
    return root


# ---------------------------------------------------------------------------
# loading


def read_meta(root: str | os.PathLike) -> dict:
    path = Path(root) / "meta.json"
    if not path.exists():
        raise DatasetError(f"missing {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable {path}: {exc}") from exc
    for key in ("image_size", "num_classes", "class_names", "seed"):
        if key not in meta:
            raise DatasetError(f"{path} lacks key {key!r}")
    return meta


def _read_labels(path: Path, num_classes: int) -> list[tuple[int, np.ndarray]]:
    if not path.exists():
        raise DatasetError(f"missing label file {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                idx, labels = int(row["id"]), row["labels"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed entry ({exc})") from exc
            if len(labels) != num_classes or any(v not in (0, 1) for v in labels):
                raise DatasetError(f"{path}:{lineno}: id {idx} has invalid label vector {labels}")
            if not any(labels):
                raise DatasetError(f"{path}:{lineno}: id {idx} has no foreground class")
            rows.append((idx, np.asarray(labels, dtype=np.int64)))
    return rows


def load_dataset(
    root: str | os.PathLike,
    split: str,
    shuffle_seed: int | None = None,
    with_masks: bool | None = None,
) -> list[LabeledImage]:
    """Load one split.

    Training order is a seed-controlled permutation when ``shuffle_seed`` is
    given; otherwise ids come back in file order. Masks are attached for
    every split except ``train`` unless ``with_masks`` says otherwise.
    """
    root = Path(root)
    meta = read_meta(root)
    size, num_classes = int(meta["image_size"]), int(meta["num_classes"])
    if with_masks is None:
        with_masks = split != "train"
    rows = _read_labels(root / split / "labels.jsonl", num_classes)
    images = []
    for idx, labels in rows:
        name = f"IMG_{idx:06d}.bin"
        img_path = root / split / "images" / name
        if not img_path.exists():
            raise DatasetError(f"label entry id {idx} has no image file {img_path}")
        raw = np.frombuffer(img_path.read_bytes(), dtype="<f4")
        if raw.size != size * size * 3:
            raise DatasetError(f"{img_path}: expected {size * size * 3} floats, found {raw.size}")
        pixels = raw.reshape(size, size, 3).astype(np.float32)
        gt = None
        if with_masks:
            mask_path = root / split / "masks" / name
            if not mask_path.exists():
                raise DatasetError(f"label entry id {idx} has no mask file {mask_path}")
            gt = np.frombuffer(mask_path.read_bytes(), dtype=np.uint8).reshape(size, size).copy()
            if not np.array_equal(labels_from_mask(gt, num_classes), labels):
                raise DatasetError(f"id {idx}: labels disagree with mask in {mask_path}")
        images.append(LabeledImage(id=idx, pixels=pixels, labels=labels, gt_mask=gt))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(images))
        images = [images[i] for i in order]
    return images


# ---------------------------------------------------------------------------
# augmentation


def _crop_window(
    rng: np.random.Generator, height: int, width: int, scale: Sequence[float], ratio: Sequence[float]
) -> tuple[int, int, int, int]:
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fall back to a centered crop with the aspect clamped into range
    in_ratio = width / height
    if in_ratio < min(ratio):
        w, h = width, int(round(width / min(ratio)))
    elif in_ratio > max(ratio):
        h, w = height, int(round(height * max(ratio)))
    else:
        h, w = height, width
    h, w = max(1, min(h, height)), max(1, min(w, width))
    return (height - h) // 2, (width - w) // 2, h, w


def resize_bilinear(pixels: np.ndarray, size: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def augment_view(pixels: np.ndarray, rng: np.random.Generator, aug: AugmentConfig) -> np.ndarray:
    h, w = pixels.shape[:2]
    top, left, ch, cw = _crop_window(rng, h, w, aug.scale, aug.ratio)
    view = resize_bilinear(pixels[top : top + ch, left : left + cw], aug.size)
    if rng.random() < aug.flip_p:
        view = view[:, ::-1]
    if aug.jitter:
        gain = rng.uniform(*aug.jitter_gain, size=3).astype(np.float32)
        offset = rng.uniform(*aug.jitter_offset, size=3).astype(np.float32)
        view = np.clip(view * gain + offset, 0.0, 1.0)
    return np.ascontiguousarray(view, dtype=np.float32)


def augment_two_views(
    img: LabeledImage, rng: np.random.Generator, aug: AugmentConfig | None = None
) -> ViewPair:
    """Two independent crop/flip/jitter draws of the same image."""
    aug = aug or AugmentConfig()
    return ViewPair(
        view1=augment_view(img.pixels, rng, aug),
        view2=augment_view(img.pixels, rng, aug),
        labels=img.labels.copy(),
    )


def iterate_batches(
    images: Sequence[LabeledImage], batch_size: int, rng: np.random.Generator
) -> Iterator[list[LabeledImage]]:
    """Endless stream of shuffled batches (reshuffled each epoch)."""
    if not images:
        raise DatasetError("cannot batch an empty dataset")
    while True:
        order = rng.permutation(len(images))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield [images[i] for i in order[start : start + batch_size]]
        if len(order) < batch_size:
            yield [images[i] for i in order]


def config_dict(config: DatasetConfig) -> dict:
    d = asdict(config)
    d["class_names"] = list(config.class_names)
    return d
