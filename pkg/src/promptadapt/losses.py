"""Self-training, anchor and contrastive objectives.

All mask tensors are ``[N_p, H, W]``: one map per prompt. Probabilities come from
``sigmoid`` of decoder logits; targets are hard {0, 1} masks and carry no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F

from .errors import TrainingFault

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    gamma: float = 2.0
    eps: float = 1.0
    lambda_focal: float = 20.0
    lambda_dice_stu: float = 0.5
    lambda_dice_tea: float = 0.5
    tau: float = 0.3
    # literal single log-ratio over the instance set, or per-instance InfoNCE
    contrastive_form: str = "global"
    use_selftrain: bool = True
    use_anchor: bool = True
    use_contrastive: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.eps <= 0 or self.tau <= 0:
            raise ValueError("eps and tau must be > 0")
        if min(self.lambda_focal, self.lambda_dice_stu, self.lambda_dice_tea) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.contrastive_form not in ("global", "per-instance"):
            raise ValueError(f"unknown contrastive_form {self.contrastive_form!r}")


@dataclass
class LossBreakdown:
    focal: torch.Tensor
    dice: torch.Tensor
    anchor: torch.Tensor
    contrastive: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def focal_loss(student: torch.Tensor, teacher_bin: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss summed over prompts, averaged over pixels of each prompt."""
    _check_shapes(student, teacher_bin)
    p = student.clamp(PROB_EPS, 1.0 - PROB_EPS)
    t = teacher_bin.detach().to(p.dtype)
    pos = t * (1.0 - p).pow(gamma) * torch.log(p)
    neg = (1.0 - t) * p.pow(gamma) * torch.log1p(-p)
    per_prompt = (pos + neg).flatten(1).mean(dim=1)
    return -per_prompt.sum()


def dice_loss(pred: torch.Tensor, target_bin: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Sum over prompts of 1 - (2|p·t| + eps) / (|p| + |t| + eps)."""
    _check_shapes(pred, target_bin)
    t = target_bin.detach().to(pred.dtype)
    p = pred.flatten(1)
    t = t.flatten(1)
    num = 2.0 * (p * t).sum(dim=1) + eps
    den = p.sum(dim=1) + t.sum(dim=1) + eps
    return (1.0 - num / den).sum()


def anchor_loss(
    student: torch.Tensor,
    teacher: torch.Tensor,
    anchor_bin: torch.Tensor,
    lambda_stu: float = 0.5,
    lambda_tea: float = 0.5,
    eps: float = 1.0,
) -> torch.Tensor:
    """Dice of both trainable branches against the frozen anchor's hard masks."""
    _check_shapes(student, anchor_bin)
    _check_shapes(teacher, anchor_bin)
    return lambda_stu * dice_loss(student, anchor_bin, eps) + lambda_tea * dice_loss(teacher, anchor_bin, eps)


def downsample_masks(masks: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """Max-pool image-resolution hard masks onto the encoder feature grid."""
    m = masks.detach().to(torch.float32)
    return F.adaptive_max_pool2d(m.unsqueeze(1), grid).squeeze(1)


def pool_instance_features(feat: torch.Tensor, masks: torch.Tensor) -> Tuple[torch.Tensor, List[int]]:
    """Masked mean of the L2-normalised feature map, one vector per mask.

    ``feat`` is ``[D, h, w]``; ``masks`` may be at image resolution and are
    max-pooled down to ``(h, w)``. Masks that are empty on the grid are dropped;
    the second return value lists the indices that survived.
    """
    d, h, w = feat.shape
    if masks.shape[-2:] != (h, w):
        masks = downsample_masks(masks, (h, w))
    m = masks.detach().to(feat.dtype).flatten(1)  # [N, hw]
    unit = F.normalize(feat.flatten(1), dim=0, eps=1e-12)  # [D, hw]
    area = m.sum(dim=1)
    keep = [i for i in range(m.shape[0]) if area[i] > 0]
    if not keep:
        return feat.new_zeros((0, d)), keep
    m = m[keep]
    pooled = (m @ unit.T) / area[keep, None]
    return pooled, keep


def contrastive_loss(
    anchor_feats: torch.Tensor,
    teacher_feats: torch.Tensor,
    tau: float = 0.3,
    form: str = "global",
) -> Tuple[torch.Tensor, bool]:
    """Instance contrast between anchor and teacher views.

    Positive pairs share a prompt index, negatives are every cross-index pair.
    ``form="global"`` takes one log of summed positives over summed negatives;
    ``form="per-instance"`` averages the usual InfoNCE over rows.
    Returns ``(loss, skipped)``; fewer than two instances leaves no negatives.
    """
    _check_shapes(anchor_feats, teacher_feats)
    n = anchor_feats.shape[0]
    if n < 2:
        return teacher_feats.sum() * 0.0, True
    sim = anchor_feats @ teacher_feats.T / tau  # [N, N]
    diag = torch.eye(n, dtype=torch.bool, device=sim.device)
    if form == "global":
        log_pos = torch.logsumexp(sim[diag], dim=0)
        log_neg = torch.logsumexp(sim[~diag], dim=0)
        return -(log_pos - log_neg), False
    if form == "per-instance":
        log_pos = sim[diag]
        log_neg = torch.logsumexp(sim.masked_fill(diag, float("-inf")), dim=1)
        return -(log_pos - log_neg).mean(), False
    raise ValueError(f"unknown contrastive form {form!r}")


def total_loss(
    focal: torch.Tensor,
    dice: torch.Tensor,
    anchor: torch.Tensor,
    contrastive: torch.Tensor,
    cfg: Optional[LossConfig] = None,
) -> LossBreakdown:
    """λ_focal·focal + dice + anchor + contrastive, with ablation switches."""
    cfg = cfg or LossConfig()
    parts = {"focal": focal, "dice": dice, "anchor": anchor, "contrastive": contrastive}
    parts = {k: torch.as_tensor(v, dtype=torch.float32) if not torch.is_tensor(v) else v for k, v in parts.items()}
    for name, value in parts.items():
        if not torch.isfinite(value).all():
            raise TrainingFault(name)
    zero = parts["focal"].new_zeros(())
    total = zero
    if cfg.use_selftrain:
        total = total + cfg.lambda_focal * parts["focal"] + parts["dice"]
    if cfg.use_anchor:
        total = total + parts["anchor"]
    if cfg.use_contrastive:
        total = total + parts["contrastive"]
    return LossBreakdown(total=total, **parts)
