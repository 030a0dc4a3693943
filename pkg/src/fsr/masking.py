"""CAM-guided selection of uncertain tokens and mask-token substitution."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass
class MaskPair:
    soft: torch.Tensor  # (..., N) float scores
    binary: torch.Tensor  # (..., N) bool, exactly k True per row
    k: int


def num_masked(n: int, ratio: float) -> int:
    if n <= 0:
        raise ValueError("cannot mask an empty token sequence")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"masking ratio must lie in (0, 1), got {ratio}")
    # floor with a small guard so e.g. 10 * 0.3 does not land on 2.9999999
    return int(math.floor(n * ratio + 1e-9))


def in_band(cam: torch.Tensor, bg_low: float, bg_high: float) -> torch.Tensor:
    best = cam.amax(dim=-1)
    return (best > bg_low) & (best < bg_high)


def score_uncertainty(
    cam: torch.Tensor, bg_low: float, bg_high: float, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Soft mask: u + 1 for tokens whose max CAM score is strictly inside
    (bg_low, bg_high), u otherwise, with u ~ U(0, 1) per token."""
    if not 0.0 < bg_low < bg_high < 1.0:
        raise ValueError(f"need 0 < bg_low < bg_high < 1, got ({bg_low}, {bg_high})")
    u = torch.rand(cam.shape[:-1], generator=generator, dtype=cam.dtype, device=cam.device)
    return u + in_band(cam, bg_low, bg_high).to(cam.dtype)


def topk_mask(soft: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean mask of the k largest entries per row; ties go to the lower index."""
    order = torch.argsort(-soft, dim=-1, stable=True)
    binary = torch.zeros(soft.shape, dtype=torch.bool, device=soft.device)
    if k > 0:
        binary.scatter_(-1, order[..., :k], True)
    return binary


def select_mask(soft: torch.Tensor, ratio: float) -> MaskPair:
    k = num_masked(soft.shape[-1], ratio)
    return MaskPair(soft=soft, binary=topk_mask(soft, k), k=k)


def random_mask(
    shape: tuple[int, ...] | int, ratio: float, generator: torch.Generator | None = None
) -> MaskPair:
    """Uniformly random k-subset per row (the random-masking baseline)."""
    if isinstance(shape, int):
        shape = (shape,)
    soft = torch.rand(shape, generator=generator)
    return select_mask(soft, ratio)


def apply_mask_tokens(
    tokens: torch.Tensor, binary: torch.Tensor, mask_embedding: torch.Tensor, pos_embed: torch.Tensor
) -> torch.Tensor:
    """Replace masked rows by mask_embedding + their positional embedding.

    ``tokens`` are embedded patch tokens (positions already added).
    """
    if binary.shape[-1] != tokens.shape[-2]:
        raise ValueError(f"mask length {binary.shape[-1]} != token count {tokens.shape[-2]}")
    replacement = mask_embedding + pos_embed
    return torch.where(binary.unsqueeze(-1), replacement.expand_as(tokens), tokens)
