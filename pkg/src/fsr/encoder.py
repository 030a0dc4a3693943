"""A small from-scratch vision transformer backbone.

There is no class token inside the encoder: the patch tokens go straight to
the classifier, and the only class token in the system belongs to the
aggregation head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class NumericError(RuntimeError):
    """Non-finite values appeared somewhere they must not."""


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    ff_dim: int = 128
    num_classes: int = 3

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w


def patchify(views: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, S, S, 3) channel-last images -> (B, N, P*P*3) flattened patches."""
    if views.ndim == 3:
        views = views[None]
    b, h, w, c = views.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = views.reshape(b, gh, patch_size, gw, patch_size, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = x.shape
        h = self.heads

        def split(t):
            return t.reshape(b, n, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out), attn


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.ff(self.norm2(x))
        return x, attn


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        if config.image_size % config.patch_size:
            raise ValueError(
                f"image size {config.image_size} not divisible by patch size {config.patch_size}"
            )
        self.config = config
        d = config.dim
        self.patch_proj = nn.Linear(config.patch_size**2 * 3, d)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_tokens, d))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(
            Block(d, config.heads, config.ff_dim) for _ in range(config.depth)
        )
        self.classifier = nn.Linear(d, config.num_classes, bias=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    @property
    def grid(self) -> tuple[int, int]:
        return self.config.grid

    def embed(self, views: torch.Tensor) -> torch.Tensor:
        """Project patches and add positional embeddings; (B, N, D)."""
        patches = patchify(views, self.config.patch_size)
        if patches.shape[1] != self.config.num_tokens:
            raise ValueError(
                f"expected {self.config.num_tokens} patches, got {patches.shape[1]}"
            )
        return self.patch_proj(patches) + self.pos_embed

    def forward_tokens(self, tokens: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        attns = []
        x = tokens
        for i, block in enumerate(self.blocks):
            x, attn = block(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after encoder layer {i}")
            attns.append(attn)
        return x, attns

    def forward(self, views: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        return self.forward_tokens(self.embed(views))

    @torch.no_grad()
    def capture_attention(self, views: torch.Tensor) -> list[torch.Tensor]:
        """Per-layer (B, heads, N, N) attention maps."""
        return self.forward(views)[1]

    @torch.no_grad()
    def layer_outputs(self, views: torch.Tensor) -> list[torch.Tensor]:
        """Embedded input followed by the output of every block."""
        x = self.embed(views)
        outs = [x]
        for block in self.blocks:
            x, _ = block(x)
            outs.append(x)
        return outs


def patchify_embed(views: torch.Tensor, proj_weight: torch.Tensor, proj_bias: torch.Tensor | None,
                   pos_embed: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Functional patch embedding: flatten patches, project, add positions."""
    return F.linear(patchify(views, patch_size), proj_weight, proj_bias) + pos_embed
