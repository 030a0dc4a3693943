"""Aggregation of confident (unmasked) patch tokens into one class token."""

from __future__ import annotations

import torch
import torch.nn as nn


class NoAttendableTokenError(ValueError):
    """Every patch token is masked, so there is nothing to aggregate."""


def _check_mask(mask: torch.Tensor) -> None:
    if (~mask).sum(dim=-1).eq(0).any():
        raise NoAttendableTokenError("all patch tokens are masked")


def masked_attention(q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Single-query attention weights over patches, masked entries exactly 0.

    q: (B, 1, D), k: (B, N, D), mask: (B, N) with True = masked.
    Masked logits are set to -inf before the softmax, which excludes them
    outright (multiplying the logits by 1 - mask would leave them weight).
    """
    _check_mask(mask)
    logits = q @ k.transpose(-1, -2) / q.shape[-1] ** 0.5
    logits = logits.masked_fill(mask.unsqueeze(-2), float("-inf"))
    return torch.softmax(logits, dim=-1)


class MCABlock(nn.Module):
    """Masked cross-attention followed by a feed-forward layer, both residual."""

    def __init__(self, dim: int, ff_dim: int):
        super().__init__()
        # one LayerNorm over the concatenated [class; patches] sequence
        self.norm = nn.LayerNorm(dim)
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(
        self, cls_tok: torch.Tensor, patches: torch.Tensor, mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        kv = self.norm(patches)
        q = self.w_q(self.norm(cls_tok))
        attn = masked_attention(q, self.w_k(kv), mask)
        cls_tok = cls_tok + self.w_o(attn @ self.w_v(kv))
        cls_tok = cls_tok + self.ff(self.norm_ff(cls_tok))
        return cls_tok, attn


def pool_gap(patches: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over unmasked tokens, (B, 1, D)."""
    _check_mask(mask)
    keep = (~mask).unsqueeze(-1).to(patches.dtype)
    return (patches * keep).sum(dim=-2, keepdim=True) / keep.sum(dim=-2, keepdim=True)


def pool_gmp(patches: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-dimension max over unmasked tokens, (B, 1, D)."""
    _check_mask(mask)
    filled = patches.masked_fill(mask.unsqueeze(-1), float("-inf"))
    return filled.amax(dim=-2, keepdim=True)


class Aggregator(nn.Module):
    """Class-token head; ``kind`` is one of "mca", "gap", "gmp"."""

    def __init__(self, dim: int, ff_dim: int, depth: int = 2, kind: str = "mca"):
        super().__init__()
        if kind not in ("mca", "gap", "gmp"):
            raise ValueError(f"unknown aggregation kind {kind!r}")
        if kind == "mca" and depth < 1:
            raise ValueError("MCA aggregation needs at least one block")
        self.kind = kind
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.blocks = nn.ModuleList(MCABlock(dim, ff_dim) for _ in range(depth if kind == "mca" else 0))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def forward(
        self, patches: torch.Tensor, mask: torch.Tensor | None = None, return_attention: bool = False
    ):
        if mask is None:
            mask = torch.zeros(patches.shape[:-1], dtype=torch.bool, device=patches.device)
        attns = []
        if self.kind == "gap":
            out = pool_gap(patches, mask)
        elif self.kind == "gmp":
            out = pool_gmp(patches, mask)
        else:
            out = self.cls_token.expand(patches.shape[0], -1, -1)
            for block in self.blocks:
                out, attn = block(out, patches, mask)
                attns.append(attn)
        return (out, attns) if return_attention else out
