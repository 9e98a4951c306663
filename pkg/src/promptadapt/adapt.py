"""Source-free adaptation: anchor / teacher / student self-training.

The anchor is a frozen copy of the source model. Student and teacher are two
forward passes over one adapted model (``teacher_mode="shared"``) or the
teacher keeps an exponential moving average of the student's trainable
tensors (``teacher_mode="ema"``). The teacher and anchor see a weakly
augmented view, the student a strongly augmented one; all three decode the
same fixed prompt set.
"""
from __future__ import annotations

import copy
import csv
import io
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .augment import parse_policy, strong_augment, weak_augment
from .data import Sample
from .errors import ConfigurationError, TrainingFault
from .evaluate import evaluate
from .lora import DEFAULT_TARGETS, AdaptedModel, inject, save_adapter_checkpoint, trainable_parameters
from .losses import (
    LossBreakdown,
    LossConfig,
    anchor_loss,
    contrastive_loss,
    dice_loss,
    focal_loss,
    pool_instance_features,
    total_loss,
)
from .model import SegmentationModel, binarize, parameter_checksum, sigmoid_normalize
from .prompts import (
    NMS_IOU_THRESH,
    PRED_IOU_THRESH,
    PROMPT_TYPES,
    STABILITY_OFFSET,
    STABILITY_THRESH,
    PointPrompt,
    PromptSet,
    filter_masks,
    grid_points,
    nms_masks,
    prompts_from_masks,
    stability_score,
)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "focal", "dice", "anchor", "contrastive", "total", "prompts", "skipped")


@dataclass
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    rank: int = 4
    epochs: int = 10
    prompt_type: str = "box"  # box | point | poly | automated
    auto_prompt_type: str = "box"  # prompts regenerated from automatic masks
    finetune_mode: str = "lora"
    lora_targets: Tuple[str, ...] = DEFAULT_TARGETS
    teacher_mode: str = "shared"
    ema_momentum: float = 0.999
    seed: int = 0
    labeled_subset_size: Optional[int] = None
    weak_magnitude: float = 0.1
    grid_stride: int = 16
    auto_iou_thresh: float = PRED_IOU_THRESH
    auto_stability_thresh: float = STABILITY_THRESH
    # ``op:prob:lo:hi;...``; empty means the built-in strong policy
    strong_policy: str = ""
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.rank < 1:
            raise ConfigurationError("batch_size, rank must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate must be > 0 and weight_decay >= 0")
        if self.prompt_type not in PROMPT_TYPES + ("automated",):
            raise ConfigurationError(f"unknown prompt_type {self.prompt_type!r}")
        if self.auto_prompt_type not in PROMPT_TYPES:
            raise ConfigurationError(f"unknown auto_prompt_type {self.auto_prompt_type!r}")
        if self.teacher_mode not in ("shared", "ema"):
            raise ConfigurationError(f"unknown teacher_mode {self.teacher_mode!r}")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigurationError("ema_momentum must lie in [0, 1)")
        if self.labeled_subset_size is not None and self.labeled_subset_size < 1:
            raise ConfigurationError("labeled_subset_size must be >= 1")
        if self.strong_policy:
            try:
                parse_policy(self.strong_policy)
            except ValueError as exc:
                raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d


@dataclass
class BranchSet:
    anchor: SegmentationModel
    shared: AdaptedModel
    ema_teacher: Optional[AdaptedModel] = None

    @property
    def student(self) -> AdaptedModel:
        return self.shared

    @property
    def teacher(self) -> AdaptedModel:
        return self.ema_teacher if self.ema_teacher is not None else self.shared


@dataclass
class StepRecord:
    step: int
    epoch: int
    losses: Dict[str, float]
    prompt_count: int
    skipped: int
    wall_time: float

    def row(self) -> List[str]:
        l = self.losses
        return [
            str(self.step),
            str(self.epoch),
            *(repr(l[k]) for k in ("focal", "dice", "anchor", "contrastive", "total")),
            str(self.prompt_count),
            str(self.skipped),
        ]


def build_branches(base: SegmentationModel, cfg: TrainConfig) -> BranchSet:
    """Frozen anchor copy plus one adapted model shared by student and teacher."""
    if not isinstance(base, SegmentationModel):
        raise ConfigurationError(f"expected a SegmentationModel, got {type(base).__name__}")
    anchor = copy.deepcopy(base)
    for p in anchor.parameters():
        p.requires_grad_(False)
    anchor.eval()
    shared = inject(base, cfg.lora_targets, cfg.rank, cfg.seed, cfg.finetune_mode)
    ema = None
    if cfg.teacher_mode == "ema":
        ema = copy.deepcopy(shared)
        for p in ema.parameters():
            p.requires_grad_(False)
    return BranchSet(anchor=anchor, shared=shared, ema_teacher=ema)


@torch.no_grad()
def ema_update(shared: nn.Module, ema: nn.Module, momentum: float) -> nn.Module:
    """ema <- momentum * ema + (1 - momentum) * shared, over trainable tensors."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    src = dict(shared.named_parameters())
    names = [n for n, p in src.items() if p.requires_grad] or list(src)
    dst = dict(ema.named_parameters())
    for n in names:
        dst[n].mul_(momentum).add_(src[n].detach(), alpha=1.0 - momentum)
    return ema


def make_optimizer(model: AdaptedModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = trainable_parameters(model)
    if not params:
        raise ConfigurationError(f"finetune mode {model.finetune_mode!r} leaves nothing to train")
    return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# prompts


@torch.no_grad()
def automated_masks(
    anchor: SegmentationModel,
    image: torch.Tensor,
    stride: int = 16,
    iou_thresh: float = PRED_IOU_THRESH,
    stability_thresh: float = STABILITY_THRESH,
    nms_thresh: float = NMS_IOU_THRESH,
) -> List[np.ndarray]:
    """Grid-point masks from the anchor, filtered and de-duplicated.

    The toy decoder has no predicted-IoU head, so the stability score stands in
    for it in the first filter.
    """
    h, w = image.shape[-2:]
    pts = grid_points(h, w, stride)
    feat = anchor.encode_image(image)
    logits = anchor.decode_masks(feat, [PointPrompt(((x, y),)) for x, y in pts], (h, w)).numpy()
    masks = logits > 0
    scores = [stability_score(l, STABILITY_OFFSET) for l in logits]
    keep = [i for i in filter_masks(masks, scores, logits, iou_thresh, stability_thresh) if masks[i].any()]
    if not keep:
        return []
    kept = nms_masks([masks[i] for i in keep], [scores[i] for i in keep], nms_thresh)
    return [masks[keep[k]] for k in kept]


class PromptCache:
    """Fixed prompt sets per image; point prompts are redrawn every epoch."""

    def __init__(self, cfg: TrainConfig, anchor: SegmentationModel):
        self.cfg = cfg
        self.anchor = anchor
        self._cache: Dict[str, PromptSet] = {}

    def get(self, sample: Sample, epoch: int) -> PromptSet:
        cfg = self.cfg
        kind = cfg.auto_prompt_type if cfg.prompt_type == "automated" else cfg.prompt_type
        key = zlib.crc32(sample.id.encode())
        if kind != "point" and sample.id in self._cache:
            return self._cache[sample.id]
        rng = np.random.default_rng([cfg.seed, epoch, key])
        if cfg.prompt_type == "automated":
            masks = automated_masks(
                self.anchor, sample.image, cfg.grid_stride, cfg.auto_iou_thresh, cfg.auto_stability_thresh
            )
            ps = prompts_from_masks(masks, kind, rng, source="automated") if masks else PromptSet([], kind, "automated")
        else:
            ps = prompts_from_masks(sample.instances, kind, rng)
        if kind != "point":
            self._cache[sample.id] = ps
        return ps


# ---------------------------------------------------------------------------
# one step


def branch_losses(
    branches: BranchSet,
    image: torch.Tensor,
    prompts: PromptSet,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> LossBreakdown:
    """All loss terms for one image; the three branches share ``prompts``."""
    lc = cfg.loss
    xw = weak_augment(image, rng, cfg.weak_magnitude)
    xs = strong_augment(image, rng, parse_policy(cfg.strong_policy) if cfg.strong_policy else None)
    hw = tuple(image.shape[-2:])
    plist = prompts.prompts
    with torch.no_grad():
        a_logits, a_feat = branches.anchor(xw, plist)
    t_logits, t_feat = branches.teacher(xw, plist)
    s_logits, _ = branches.student(xs, plist)
    a_bin = binarize(sigmoid_normalize(a_logits))
    t_prob = sigmoid_normalize(t_logits)
    t_bin = binarize(t_prob.detach())
    s_prob = sigmoid_normalize(s_logits)

    zero = s_prob.sum() * 0.0
    focal = focal_loss(s_prob, t_bin, lc.gamma) if lc.use_selftrain else zero
    dice = dice_loss(s_prob, t_bin, lc.eps) if lc.use_selftrain else zero
    anchor = (
        anchor_loss(s_prob, t_prob, a_bin, lc.lambda_dice_stu, lc.lambda_dice_tea, lc.eps) if lc.use_anchor else zero
    )
    contrast = zero
    if lc.use_contrastive:
        fa, keep_a = pool_instance_features(a_feat, a_bin)
        ft, keep_t = pool_instance_features(t_feat, t_bin)
        common = sorted(set(keep_a) & set(keep_t))
        fa = fa[[keep_a.index(i) for i in common]]
        ft = ft[[keep_t.index(i) for i in common]]
        contrast, _ = contrastive_loss(fa, ft, lc.tau, lc.contrastive_form)
    return total_loss(focal, dice, anchor, contrast, lc)


def adaptation_step(
    batch: Sequence[Sample],
    branches: BranchSet,
    cfg: TrainConfig,
    rng: np.random.Generator,
    optimizer: torch.optim.Optimizer,
    prompts: Optional[PromptCache] = None,
    step: int = 0,
    epoch: int = 0,
) -> StepRecord:
    """Accumulate the batch-mean loss and take one optimizer update."""
    t0 = time.perf_counter()
    prompts = prompts or PromptCache(cfg, branches.anchor)
    branches.shared.train()
    optimizer.zero_grad(set_to_none=True)
    parts: List[LossBreakdown] = []
    n_prompts = skipped = 0
    for sample in batch:
        ps = prompts.get(sample, epoch)
        if not len(ps):
            skipped += 1
            logger.info("step %d: sample %s has no usable prompt, skipped", step, sample.id)
            continue
        n_prompts += len(ps)
        bd = branch_losses(branches, sample.image, ps, cfg, rng)
        # backprop per sample keeps one graph alive at a time
        if bd.total.requires_grad:
            (bd.total / len(batch)).backward()
        parts.append(LossBreakdown(*(t.detach() for t in (bd.focal, bd.dice, bd.anchor, bd.contrastive, bd.total))))
    stepped = any(p.grad is not None for p in trainable_parameters(branches.shared))
    if stepped:
        optimizer.step()
        if branches.ema_teacher is not None:
            ema_update(branches.shared, branches.ema_teacher, cfg.ema_momentum)
    if parts:
        losses = {k: float(sum(getattr(p, k) for p in parts) / len(parts)) for k in ("focal", "dice", "anchor", "contrastive", "total")}
    else:
        losses = dict.fromkeys(("focal", "dice", "anchor", "contrastive", "total"), 0.0)
    for k, v in losses.items():
        if not np.isfinite(v):
            raise TrainingFault(k, f"step {step}: non-finite {k} loss")
    return StepRecord(step, epoch, losses, n_prompts, skipped, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# full run


@dataclass
class AdaptationResult:
    model: AdaptedModel
    branches: BranchSet
    log: List[StepRecord]
    epoch_miou: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_model: Optional[AdaptedModel] = None


def select_subset(samples: Sequence[Sample], size: Optional[int], seed: int) -> List[Sample]:
    if size is None or size >= len(samples):
        return list(samples)
    idx = np.sort(np.random.default_rng([seed, 7]).choice(len(samples), size=size, replace=False))
    return [samples[i] for i in idx]


def write_log(records: Sequence[StepRecord], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in records:
        w.writerow(r.row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def run_adaptation(
    base: SegmentationModel,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    held_out: Optional[Sequence[Sample]] = None,
    out_dir=None,
    eval_prompt: Optional[str] = None,
) -> AdaptationResult:
    """Adapt ``base`` on ``samples``; deterministic given ``cfg.seed``.

    With ``held_out`` the model is scored after each epoch and the best epoch is
    kept alongside the last. With ``out_dir`` the step log (``log.csv``) and the
    last adapter checkpoint (``adapter.ckpt``) are written there.
    """
    if len(samples) == 0:
        raise ValueError("cannot adapt on an empty dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    subset = select_subset(samples, cfg.labeled_subset_size, cfg.seed)
    branches = build_branches(base, cfg)
    optimizer = make_optimizer(branches.shared, cfg)
    cache = PromptCache(cfg, branches.anchor)
    eval_prompt = eval_prompt or (cfg.prompt_type if cfg.prompt_type in PROMPT_TYPES else cfg.auto_prompt_type)
    log: List[StepRecord] = []
    result = AdaptationResult(model=branches.shared, branches=branches, log=log)
    best = -1.0
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(subset))
        for start in range(0, len(order), cfg.batch_size):
            batch = [subset[i] for i in order[start : start + cfg.batch_size]]
            rec = adaptation_step(batch, branches, cfg, rng, optimizer, cache, step, epoch)
            log.append(rec)
            step += 1
        if held_out:
            score = evaluate(branches.shared, held_out, eval_prompt, cfg.seed).miou
            result.epoch_miou.append(score)
            if score > best:
                best = score
                result.best_epoch = epoch
                result.best_model = copy.deepcopy(branches.shared)
            logger.info("epoch %d: held-out mIoU %.4f", epoch, score)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_log(log, out_dir / "log.csv")
        save_adapter_checkpoint(branches.shared, out_dir / "adapter.ckpt", {"train_weak_sup": cfg.prompt_type})
        if result.best_model is not None:
            save_adapter_checkpoint(
                result.best_model, out_dir / "adapter_best.ckpt", {"train_weak_sup": cfg.prompt_type, "epoch": result.best_epoch}
            )
    return result


# ---------------------------------------------------------------------------
# supervised training of a toy source model


def _thin_points(p: PointPrompt, rng: np.random.Generator) -> PointPrompt:
    k = int(rng.integers(1, len(p.positives) + 1))
    j = int(rng.integers(0, len(p.negatives) + 1))
    return PointPrompt(p.positives[:k], p.negatives[:j])


def train_supervised(
    model: SegmentationModel,
    samples: Sequence[Sample],
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 4,
    prompt_types: Sequence[str] = PROMPT_TYPES,
    seed: int = 0,
    loss_cfg: Optional[LossConfig] = None,
) -> SegmentationModel:
    """Fit ``model`` in place on ground-truth masks with focal + dice."""
    lc = loss_cfg or LossConfig()
    rng = np.random.default_rng([seed, 3])
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    model.train()
    for step in range(steps):
        opt.zero_grad(set_to_none=True)
        idx = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        for i in idx:
            s = samples[i]
            kind = prompt_types[int(rng.integers(len(prompt_types)))]
            ps = prompts_from_masks(s.instances, kind, rng)
            if not len(ps):
                continue
            if kind == "point" and rng.random() < 0.5:
                # fewer clicks now and then, so single grid points are in-distribution
                ps.prompts = [_thin_points(p, rng) for p in ps.prompts]
            target = torch.from_numpy(np.stack([s.instances[k] for k in ps.mask_index]).astype(np.float32))
            logits, _ = model(s.image, ps.prompts)
            prob = sigmoid_normalize(logits)
            loss = lc.lambda_focal * focal_loss(prob, target, lc.gamma) + dice_loss(prob, target, lc.eps)
            (loss / len(ps) / len(idx)).backward()
        opt.step()
    model.eval()
    return model
