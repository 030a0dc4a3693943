"""Self-distillation pieces: projector head, temperature softmax with teacher
centering, EMA teacher updates, and the two self-reinforcement losses."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm


class Projector(nn.Module):
    """3-layer MLP, L2-normalised bottleneck, weight-normalised output layer."""

    def __init__(self, dim: int, out_dim: int = 256, hidden_dim: int = 256, bottleneck_dim: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        self.last = weight_norm(nn.Linear(bottleneck_dim, out_dim, bias=False))
        # norm of each output direction pinned to 1
        with torch.no_grad():
            self.last.parametrizations.weight.original0.fill_(1.0)
        self.last.parametrizations.weight.original0.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.normalize(self.mlp(x), dim=-1, eps=1e-12)
        return self.last(x)


@dataclass
class Distribution:
    logits: torch.Tensor  # raw projector output, (..., 1 + N, K)
    probs: torch.Tensor
    log_probs: torch.Tensor


def temperature_softmax(
    logits: torch.Tensor, temperature: float, center: torch.Tensor | None = None
) -> Distribution:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    shifted = logits if center is None else logits - center
    scaled = shifted / temperature
    return Distribution(logits=logits, probs=torch.softmax(scaled, dim=-1),
                        log_probs=torch.log_softmax(scaled, dim=-1))


def project_and_normalize(
    tokens: torch.Tensor, projector: nn.Module, temperature: float, center: torch.Tensor | None = None
) -> Distribution:
    """Rows of ``tokens`` -> probability rows; ``center`` only on the teacher path."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return temperature_softmax(projector(tokens), temperature, center)


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    return momentum * center + (1.0 - momentum) * batch_mean


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """In place: theta_t <- m * theta_t + (1 - m) * theta_s for every parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    for p_t, p_s in zip(teacher.parameters(), student.parameters(), strict=True):
        if momentum == 0.0:
            p_t.copy_(p_s)
        elif momentum != 1.0:
            p_t.mul_(momentum).add_(p_s.detach(), alpha=1.0 - momentum)


class TeacherState(nn.Module):
    """Gradient-free EMA copies of the student's encoder, aggregator and projector.

    By default one running center is shared by the class row and the patch
    rows. Such a center is dominated by the N patch rows, so the class token
    can collapse onto a single prototype; ``split_center`` keeps a separate
    center for each row type instead.
    """

    def __init__(self, encoder: nn.Module, aggregator: nn.Module, projector: nn.Module,
                 out_dim: int, center_momentum: float = 0.9, split_center: bool = False):
        super().__init__()
        self.encoder = copy.deepcopy(encoder)
        self.aggregator = copy.deepcopy(aggregator)
        self.projector = copy.deepcopy(projector)
        dtype = next(projector.parameters()).dtype
        self.register_buffer("center", torch.zeros(out_dim, dtype=dtype))
        self.register_buffer("patch_center", torch.zeros(out_dim, dtype=dtype))
        self.center_momentum = center_momentum
        self.split_center = split_center
        for p in self.parameters():
            p.requires_grad_(False)

    def row_center(self, rows: int) -> torch.Tensor:
        """Center for a (1 + N)-row distribution: class row first, then patches."""
        if not self.split_center:
            return self.center
        return torch.cat([self.center[None], self.patch_center.expand(rows - 1, -1)], dim=0)

    def update(self, encoder: nn.Module, aggregator: nn.Module, projector: nn.Module,
               encoder_momentum: float, head_momentum: float) -> None:
        ema_update(self.encoder, encoder, encoder_momentum)
        ema_update(self.aggregator, aggregator, head_momentum)
        ema_update(self.projector, projector, head_momentum)

    def update_center(self, teacher_logits: torch.Tensor) -> None:
        """``teacher_logits`` is (B, 1 + N, K): raw teacher projector outputs."""
        m = self.center_momentum
        if not self.split_center:
            self.center.copy_(update_center(self.center, teacher_logits, m))
            return
        self.center.copy_(update_center(self.center, teacher_logits[..., 0, :], m))
        self.patch_center.copy_(update_center(self.patch_center, teacher_logits[..., 1:, :], m))


def loss_uncertain(
    student: Distribution, teacher: Distribution, mask: torch.Tensor, reduction: str = "sum"
) -> torch.Tensor:
    """Cross-entropy of masked student patch rows against the teacher's rows.

    Row 0 (class token) is skipped. ``reduction="sum"`` adds the per-token
    cross-entropies over masked tokens; ``"mean"`` divides by the masked
    count. Batched inputs are averaged over the batch.
    """
    target = teacher.probs[..., 1:, :].detach()
    ce = -(target * student.log_probs[..., 1:, :]).sum(dim=-1)
    per_image = (ce * mask.to(ce.dtype)).sum(dim=-1)
    if reduction == "mean":
        per_image = per_image / mask.sum(dim=-1).clamp(min=1).to(ce.dtype)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return per_image.mean() if per_image.ndim else per_image


def loss_certain(teacher_view1: Distribution, student_view2: Distribution) -> torch.Tensor:
    """Cross-view cross-entropy between the two aggregated class tokens."""
    target = teacher_view1.probs[..., 0, :].detach()
    ce = -(target * student_view2.log_probs[..., 0, :]).sum(dim=-1)
    return ce.mean() if ce.ndim else ce
