"""Class activation maps, pooled classification logits and CAM pseudo labels."""

from __future__ import annotations

import torch

IGNORE = 255
EPS = 1e-8


def compute_cam(z: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Min-max normalised ReLU CAM, (..., N, C) in [0, 1].

    Normalisation runs per class channel over the N spatial positions. A
    channel that is all zero after the ReLU stays all zero.
    """
    if z.shape[-1] != weight.shape[-1]:
        raise ValueError(f"feature dim {z.shape[-1]} != classifier dim {weight.shape[-1]}")
    cam = torch.relu(z @ weight.transpose(-1, -2))
    lo = cam.amin(dim=-2, keepdim=True)
    hi = cam.amax(dim=-2, keepdim=True)
    return (cam - lo) / torch.clamp(hi - lo, min=EPS)


def pool_class_logits(z: torch.Tensor, weight: torch.Tensor, kind: str = "gap") -> torch.Tensor:
    """Pool per-token logits over positions, (..., C).

    ``gap`` averages; ``gmp`` takes the per-class maximum.
    """
    if z.shape[-1] != weight.shape[-1]:
        raise ValueError(f"feature dim {z.shape[-1]} != classifier dim {weight.shape[-1]}")
    logits = z @ weight.transpose(-1, -2)
    if kind == "gap":
        return logits.mean(dim=-2)
    if kind == "gmp":
        return logits.amax(dim=-2)
    raise ValueError(f"unknown pooling {kind!r}")


def derive_pseudo_labels(
    cam: torch.Tensor, labels: torch.Tensor, bg_low: float = 0.2, bg_high: float = 0.7
) -> torch.Tensor:
    """Threshold a CAM into {0 = background, 1..C, IGNORE}.

    ``cam`` is (..., N, C) and ``labels`` the (..., C) multi-hot image label.
    Channels of absent classes are zeroed first. A token whose best present
    score reaches ``bg_high`` takes that class; one at or below ``bg_low`` is
    background; anything in between is ignored.
    """
    if not 0.0 < bg_low < bg_high < 1.0:
        raise ValueError(f"need 0 < bg_low < bg_high < 1, got ({bg_low}, {bg_high})")
    present = labels.to(cam.dtype).unsqueeze(-2)
    scores = cam * present
    best, cls = scores.max(dim=-1)
    out = torch.full(best.shape, IGNORE, dtype=torch.long, device=cam.device)
    out[best >= bg_high] = cls[best >= bg_high] + 1
    out[best <= bg_low] = 0
    return out
