"""Convolutional segmentation head and the supervised training losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cam import IGNORE

log = logging.getLogger(__name__)

LOSS_NAMES = ("cls", "aff", "seg", "u", "c")
DEFAULT_LAMBDAS = (1.0, 0.2, 0.1, 0.1, 0.1)


class SegDecoder(nn.Module):
    """Two dilated 3x3 convolutions and a 1x1 classifier over the token grid.

    Output channel 0 is background, channels 1..C the foreground classes.
    """

    def __init__(self, dim: int, num_classes: int, hidden: int = 64, dilation: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, hidden, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=dilation, dilation=dilation)
        self.classifier = nn.Conv2d(hidden, num_classes + 1, 1)

    def forward(self, z: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        """(B, N, D) tokens -> (B, C + 1, H, W) logits."""
        b, n, d = z.shape
        h, w = grid
        if h * w != n:
            raise ValueError(f"grid {h}x{w} does not hold {n} tokens")
        x = z.transpose(1, 2).reshape(b, d, h, w)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.classifier(x)


def loss_cls(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Multi-label soft margin loss: per-class logistic loss averaged over classes."""
    return F.multilabel_soft_margin_loss(logits, labels.to(logits.dtype))


def loss_seg(seg_logits: torch.Tensor, pseudo: torch.Tensor) -> torch.Tensor:
    """Pixel-wise cross-entropy over non-IGNORE positions.

    ``seg_logits`` is (B, C + 1, H, W) and ``pseudo`` (B, H, W).
    """
    valid = pseudo != IGNORE
    if not valid.any():
        log.warning("every pseudo-label pixel is IGNORE; segmentation loss is 0")
        return seg_logits.sum() * 0.0
    return F.cross_entropy(seg_logits, pseudo, ignore_index=IGNORE)


def _pairs(valid: torch.Tensor, max_pairs: int, generator: torch.Generator | None) -> torch.Tensor:
    idx = torch.nonzero(valid).flatten()
    pairs = torch.combinations(idx, r=2) if idx.numel() >= 2 else idx.new_zeros((0, 2))
    if pairs.shape[0] > max_pairs:
        keep = torch.randperm(pairs.shape[0], generator=generator)[:max_pairs]
        pairs = pairs[keep]
    return pairs


def loss_aff(
    tokens: torch.Tensor,
    pseudo: torch.Tensor,
    max_pairs: int = 512,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Pairwise cosine affinity loss against pseudo-label agreement.

    For token pairs whose pseudo labels are both non-IGNORE the target is 1
    when the labels match and 0 otherwise; the loss is the mean squared gap
    between cosine similarity and target. A simplified stand-in for token
    contrast; at most ``max_pairs`` pairs per image are sampled.

    ``tokens`` is (B, N, D) or (N, D); ``pseudo`` holds grid labels of shape
    (B, N) / (N,) or anything reshapeable to that.
    """
    if tokens.ndim == 2:
        tokens, pseudo = tokens[None], pseudo.reshape(1, -1)
    pseudo = pseudo.reshape(tokens.shape[0], -1)
    unit = F.normalize(tokens, dim=-1, eps=1e-8)
    total, count = tokens.new_zeros(()), 0
    for b in range(tokens.shape[0]):
        pairs = _pairs(pseudo[b] != IGNORE, max_pairs, generator)
        if pairs.shape[0] == 0:
            continue
        i, j = pairs[:, 0], pairs[:, 1]
        cos = (unit[b, i] * unit[b, j]).sum(dim=-1)
        target = (pseudo[b, i] == pseudo[b, j]).to(cos.dtype)
        total = total + ((cos - target) ** 2).sum()
        count += pairs.shape[0]
    if count == 0:
        return tokens.sum() * 0.0
    return total / count


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    aff: torch.Tensor
    seg: torch.Tensor
    u: torch.Tensor
    c: torch.Tensor
    total: torch.Tensor
    lambdas: tuple[float, ...] = field(default=DEFAULT_LAMBDAS)

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in (*LOSS_NAMES, "total")}


def total_loss(parts, lambdas=DEFAULT_LAMBDAS) -> LossBreakdown:
    """Weighted sum of (cls, aff, seg, u, c); ``parts`` is a sequence or a dict."""
    if isinstance(parts, dict):
        parts = [parts[name] for name in LOSS_NAMES]
    if len(parts) != 5 or len(lambdas) != 5:
        raise ValueError("need exactly five loss terms and five weights")
    total = lambdas[0] * parts[0]
    for lam, part in zip(lambdas[1:], parts[1:]):
        total = total + lam * part
    if not isinstance(total, torch.Tensor):
        total = torch.tensor(total, dtype=torch.float64)
    as_t = [p if isinstance(p, torch.Tensor) else torch.tensor(p, dtype=torch.float64) for p in parts]
    return LossBreakdown(*as_t, total=total, lambdas=tuple(float(x) for x in lambdas))
