"""End-to-end training: schedules, the student/teacher step, checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import synthdata
from .aggregation import Aggregator
from .cam import compute_cam, derive_pseudo_labels, pool_class_logits
from .decoderlosses import SegDecoder, LossBreakdown, loss_aff, loss_cls, loss_seg, total_loss
from .distill import Projector, TeacherState, loss_certain, loss_uncertain, project_and_normalize
from .encoder import Encoder, EncoderConfig, NumericError
from .masking import apply_mask_tokens, random_mask, score_uncertainty, select_mask

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A configuration value failed validation."""


@dataclass
class TrainConfig:
    # optimisation
    iterations: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_iters: int = 225
    lr_schedule: str = "cosine"
    poly_power: float = 0.9
    # loss weights
    lambda1: float = 1.0
    lambda2: float = 0.2
    lambda3: float = 0.1
    lambda4: float = 0.1
    lambda5: float = 0.1
    lambda_decay: bool = False
    lu_reduction: str = "sum"
    # masking / pseudo labels
    mask_ratio: float = 0.4
    bg_low: float = 0.2
    bg_high: float = 0.7
    masking: str = "uncertain"
    aggregation: str = "mca"
    cls_pooling: str = "gmp"
    # distillation
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    center_momentum: float = 0.9
    center_mode: str = "shared"
    proj_momentum: float = 0.996
    proj_momentum_end: float = 1.0
    encoder_momentum: float = 0.0
    # model
    image_size: int = 64
    patch_size: int = 8
    num_classes: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    ff_dim: int = 128
    agg_depth: int = 2
    proj_out_dim: int = 256
    proj_hidden: int = 256
    proj_bottleneck: int = 64
    decoder_hidden: int = 64
    aff_max_pairs: int = 512
    # run control
    seed: int = 0
    deterministic: bool = True
    log_every: int = 50

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.iterations >= 1, "iterations must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(0 <= self.warmup_iters <= self.iterations, "need 0 <= warmup_iters <= iterations")
        need(self.lr > 0, "lr must be positive")
        need(self.lr_schedule in ("cosine", "poly"), f"lr_schedule must be cosine or poly, not {self.lr_schedule!r}")
        need(0.0 < self.mask_ratio < 1.0, "mask_ratio must lie in (0, 1)")
        need(0.0 < self.bg_low < self.bg_high < 1.0, "need 0 < bg_low < bg_high < 1")
        need(self.masking in ("uncertain", "random"), f"masking must be uncertain or random, not {self.masking!r}")
        need(self.aggregation in ("mca", "gap", "gmp"), f"aggregation must be mca, gap or gmp, not {self.aggregation!r}")
        need(self.cls_pooling in ("gap", "gmp"), f"cls_pooling must be gap or gmp, not {self.cls_pooling!r}")
        need(self.lu_reduction in ("sum", "mean"), "lu_reduction must be sum or mean")
        need(self.center_mode in ("split", "shared"), f"center_mode must be split or shared, not {self.center_mode!r}")
        need(self.tau_student > 0 and self.tau_teacher > 0, "temperatures must be positive")
        for name in ("center_momentum", "proj_momentum", "proj_momentum_end", "encoder_momentum"):
            need(0.0 <= getattr(self, name) <= 1.0, f"{name} must lie in [0, 1]")
        for i in range(1, 6):
            need(getattr(self, f"lambda{i}") >= 0, f"lambda{i} must be non-negative")
        need(self.image_size % self.patch_size == 0, "image_size must be a multiple of patch_size")
        need(self.dim % self.heads == 0, "dim must be divisible by heads")
        need(self.num_classes >= 1, "num_classes must be >= 1")

    @property
    def lambdas(self) -> tuple[float, ...]:
        return tuple(getattr(self, f"lambda{i}") for i in range(1, 6))

    @property
    def fsr_active(self) -> bool:
        return self.lambda4 > 0 or self.lambda5 > 0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(image_size=self.image_size, patch_size=self.patch_size, dim=self.dim,
                             depth=self.depth, heads=self.heads, ff_dim=self.ff_dim,
                             num_classes=self.num_classes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# schedules


def lr_schedule(t: int, config: TrainConfig) -> float:
    """Linear warmup to ``config.lr`` then cosine or polynomial decay to 0."""
    base, warm, total = config.lr, config.warmup_iters, config.iterations
    if warm > 0 and t < warm:
        return base * t / warm
    if total <= warm:
        return base
    progress = min(max((t - warm) / (total - warm), 0.0), 1.0)
    if config.lr_schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * progress))
    return base * (1.0 - progress) ** config.poly_power


def momentum_schedule(t: int, config: TrainConfig) -> float:
    """Projector EMA momentum, cosine ramp from its start value to the end value."""
    start, end = config.proj_momentum, config.proj_momentum_end
    progress = min(max(t / config.iterations, 0.0), 1.0)
    return end - (end - start) * (math.cos(math.pi * progress) + 1.0) / 2.0


def lambda_schedule(t: int, config: TrainConfig) -> tuple[float, ...]:
    lam = list(config.lambdas)
    if config.lambda_decay:
        factor = (math.cos(math.pi * min(t / config.iterations, 1.0)) + 1.0) / 2.0
        lam[3] *= factor
        lam[4] *= factor
    return tuple(lam)


# ---------------------------------------------------------------------------
# model


class FSRModel(nn.Module):
    """The student network: encoder + classifier, decoder, aggregator, projector."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.cls_pooling = config.cls_pooling
        self.encoder = Encoder(config.encoder_config())
        self.decoder = SegDecoder(config.dim, config.num_classes, hidden=config.decoder_hidden)
        self.aggregator = Aggregator(config.dim, config.ff_dim, depth=config.agg_depth, kind=config.aggregation)
        self.projector = Projector(config.dim, out_dim=config.proj_out_dim, hidden_dim=config.proj_hidden,
                                   bottleneck_dim=config.proj_bottleneck)

    @property
    def classifier_weight(self) -> torch.Tensor:
        return self.encoder.classifier.weight

    def segment(self, views: torch.Tensor) -> dict[str, torch.Tensor]:
        """Classification logits, CAM and decoder logits for a batch of views."""
        z, attns = self.encoder(views)
        w = self.classifier_weight
        return {
            "z": z,
            "attns": attns,
            "logits": pool_class_logits(z, w, self.cls_pooling),
            "cam": compute_cam(z, w),
            "seg": self.decoder(z, self.encoder.grid),
        }


def _branch(encoder: Encoder, aggregator: Aggregator, projector: nn.Module, tokens: torch.Tensor,
            mask: torch.Tensor | None, temperature: float, center: torch.Tensor | None):
    z, _ = encoder.forward_tokens(tokens)
    cls_tok = aggregator(z, mask)
    return project_and_normalize(torch.cat([cls_tok, z], dim=1), projector, temperature, center)


@dataclass
class StepOutput:
    losses: LossBreakdown
    teacher_logits: torch.Tensor | None
    mask: torch.Tensor | None


def compute_losses(
    model: FSRModel,
    teacher: TeacherState | None,
    view1: torch.Tensor,
    view2: torch.Tensor,
    labels: torch.Tensor,
    config: TrainConfig,
    lambdas: tuple[float, ...],
    generator: torch.Generator | None = None,
) -> StepOutput:
    """Forward both pipelines and evaluate every loss term (no optimiser step)."""
    out = model.segment(view1)
    z1, cam = out["z"], out["cam"]
    labels_f = labels.to(z1.dtype)
    pseudo = derive_pseudo_labels(cam.detach(), labels, config.bg_low, config.bg_high)
    h, w = model.encoder.grid

    l_cls = loss_cls(out["logits"], labels_f)
    l_seg = loss_seg(out["seg"], pseudo.reshape(-1, h, w))
    l_aff = loss_aff(z1, pseudo, max_pairs=config.aff_max_pairs, generator=generator)
    zero = z1.new_zeros(())
    l_u, l_c = zero, zero
    teacher_logits, binary = None, None

    if config.fsr_active:
        if teacher is None:
            raise ValueError("feature self-reinforcement needs a teacher")
        if config.masking == "uncertain":
            soft = score_uncertainty(cam.detach(), config.bg_low, config.bg_high, generator)
            binary = select_mask(soft, config.mask_ratio).binary
        else:
            binary = random_mask(tuple(cam.shape[:-1]), config.mask_ratio, generator).binary
        enc = model.encoder
        t2 = enc.embed(view2)
        t2_masked = apply_mask_tokens(t2, binary, enc.mask_token, enc.pos_embed)
        student2 = _branch(enc, model.aggregator, model.projector, t2_masked, binary,
                           config.tau_student, None)
        with torch.no_grad():
            te = teacher.encoder
            center = teacher.row_center(1 + te.config.num_tokens)
            teacher1 = _branch(te, teacher.aggregator, teacher.projector, te.embed(view1), None,
                               config.tau_teacher, center)
            teacher2 = _branch(te, teacher.aggregator, teacher.projector, te.embed(view2), None,
                               config.tau_teacher, center)
        l_u = loss_uncertain(student2, teacher2, binary, reduction=config.lu_reduction)
        l_c = loss_certain(teacher1, student2)
        teacher_logits = torch.cat([teacher1.logits, teacher2.logits], dim=0)

    losses = total_loss([l_cls, l_aff, l_seg, l_u, l_c], lambdas)
    return StepOutput(losses=losses, teacher_logits=teacher_logits, mask=binary)


@dataclass
class TrainState:
    model: FSRModel
    teacher: TeacherState | None
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    np_rng: np.random.Generator
    iteration: int = 0


def build_state(config: TrainConfig) -> TrainState:
    config.validate()
    torch.manual_seed(config.seed)
    model = FSRModel(config)
    teacher = None
    if config.fsr_active:
        teacher = TeacherState(model.encoder, model.aggregator, model.projector,
                               out_dim=config.proj_out_dim, center_momentum=config.center_momentum,
                               split_center=config.center_mode == "split")
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=config.lr, betas=(config.beta1, config.beta2),
                                  weight_decay=config.weight_decay)
    generator = torch.Generator().manual_seed(config.seed + 1)
    np_rng = np.random.default_rng(config.seed + 2)
    return TrainState(model, teacher, optimizer, generator, np_rng)


def check_finite(losses: LossBreakdown) -> None:
    for name, value in losses.as_floats().items():
        if not math.isfinite(value):
            raise NumericError(f"loss term {name!r} is not finite ({value})")


def train_step(
    state: TrainState, view1: torch.Tensor, view2: torch.Tensor, labels: torch.Tensor, config: TrainConfig
) -> LossBreakdown:
    """One optimiser step on the student, then teacher EMA and center update."""
    t = state.iteration
    lr = lr_schedule(t, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    step = compute_losses(state.model, state.teacher, view1, view2, labels, config,
                          lambda_schedule(t, config), state.generator)
    check_finite(step.losses)
    state.optimizer.zero_grad(set_to_none=True)
    step.losses.total.backward()
    state.optimizer.step()
    if state.teacher is not None:
        m = state.model
        state.teacher.update(m.encoder, m.aggregator, m.projector,
                             config.encoder_momentum, momentum_schedule(t, config))
        state.teacher.update_center(step.teacher_logits)
    state.iteration += 1
    return step.losses


def make_batch(images: list[synthdata.LabeledImage], rng: np.random.Generator, size: int):
    aug = synthdata.AugmentConfig(size=size)
    pairs = [synthdata.augment_two_views(img, rng, aug) for img in images]
    v1 = torch.from_numpy(np.stack([p.view1 for p in pairs]))
    v2 = torch.from_numpy(np.stack([p.view2 for p in pairs]))
    labels = torch.from_numpy(np.stack([p.labels for p in pairs]))
    return v1, v2, labels


def configure_torch(config: TrainConfig) -> None:
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def train_loop(
    config: TrainConfig,
    images: list[synthdata.LabeledImage],
    run_dir: str | os.PathLike | None = None,
    iterations: int | None = None,
    callback: Callable[[int, dict], None] | None = None,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict]]:
    """Train for ``iterations`` steps (default: the configured total).

    When ``run_dir`` is given, per-step metrics are appended to
    ``metrics.jsonl`` and a final checkpoint lands in ``checkpoint/``.
    """
    configure_torch(config)
    state = state or build_state(config)
    stop = config.iterations if iterations is None else state.iteration + iterations
    history = []
    metrics_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(run_dir / "metrics.jsonl", "a")
    batches = synthdata.iterate_batches(images, config.batch_size, state.np_rng)
    started = time.time()
    try:
        while state.iteration < stop:
            t = state.iteration
            v1, v2, labels = make_batch(next(batches), state.np_rng, config.image_size)
            losses = train_step(state, v1, v2, labels, config)
            row = {"iter": t, "lr": lr_schedule(t, config), "m_proj": momentum_schedule(t, config),
                   **losses.as_floats()}
            history.append(row)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(row) + "\n")
            if callback is not None:
                callback(t, row)
            if config.log_every and t % config.log_every == 0:
                log.info("iter %d total %.4f cls %.4f (%.1fs)", t, row["total"], row["cls"],
                         time.time() - started)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoint", state, config)
    return state, history


# ---------------------------------------------------------------------------
# checkpoints


def _collect_tensors(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    items = [(f"student.{k}", v) for k, v in state.model.state_dict().items()]
    if state.teacher is not None:
        items += [(f"teacher.{k}", v) for k, v in state.teacher.state_dict().items()]
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            for key, value in state.optimizer.state.get(p, {}).items():
                items.append((f"optim.{names[id(p)]}.{key}", torch.as_tensor(value)))
    return items


def save_checkpoint(path: str | os.PathLike, state: TrainState, config: TrainConfig) -> Path:
    """Directory with manifest.json, params.bin, rng.json and state.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    with open(path / "params.bin", "wb") as fh:
        for name, tensor in _collect_tensors(state):
            t = tensor.detach().cpu().contiguous()
            if t.dtype not in (torch.float32, torch.float64):
                t = t.to(torch.float64)
            dtype = "float32" if t.dtype == torch.float32 else "float64"
            fh.write(t.numpy().astype("<f4" if dtype == "float32" else "<f8").tobytes())
            manifest.append({"name": name, "shape": list(t.shape), "dtype": dtype})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    rng = {
        "torch_generator": state.generator.get_state().tolist(),
        "numpy": state.np_rng.bit_generator.state,
    }
    (path / "rng.json").write_text(json.dumps(rng))
    meta = {"iteration": state.iteration, "config": config.to_dict(), "config_hash": config.digest()}
    (path / "state.json").write_text(json.dumps(meta, indent=2))
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[TrainState, TrainConfig]:
    path = Path(path)
    for fname in ("manifest.json", "params.bin", "rng.json", "state.json"):
        if not (path / fname).exists():
            raise FileNotFoundError(f"checkpoint {path} lacks {fname}")
    meta = json.loads((path / "state.json").read_text())
    config = TrainConfig(**meta["config"])
    if config.digest() != meta["config_hash"]:
        raise ValueError(f"checkpoint {path}: config hash mismatch")
    state = build_state(config)
    manifest = json.loads((path / "manifest.json").read_text())
    blob = (path / "params.bin").read_bytes()
    tensors, offset = {}, 0
    for entry in manifest:
        np_dtype = np.dtype("<f4" if entry["dtype"] == "float32" else "<f8")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype=np_dtype, count=count, offset=offset).reshape(entry["shape"])
        offset += count * np_dtype.itemsize
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    if offset != len(blob):
        raise ValueError(f"checkpoint {path}: params.bin size does not match manifest")

    def sub(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    state.model.load_state_dict(sub("student."))
    if state.teacher is not None:
        state.teacher.load_state_dict(sub("teacher."))
    optim = sub("optim.")
    params = dict(state.model.named_parameters())
    for name, p in params.items():
        keys = {k[len(name) + 1:]: v for k, v in optim.items() if k.startswith(name + ".")
                and k[len(name) + 1:] in ("step", "exp_avg", "exp_avg_sq")}
        if keys:
            keys["step"] = keys["step"].to(torch.float32).reshape(())
            keys["exp_avg"] = keys["exp_avg"].to(p.dtype)
            keys["exp_avg_sq"] = keys["exp_avg_sq"].to(p.dtype)
            state.optimizer.state[p] = keys
    rng = json.loads((path / "rng.json").read_text())
    state.generator.set_state(torch.tensor(rng["torch_generator"], dtype=torch.uint8))
    state.np_rng.bit_generator.state = rng["numpy"]
    state.iteration = int(meta["iteration"])
    return state, config
