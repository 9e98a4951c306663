"""Photometric weak/strong augmentation.

Every op changes pixel values only; geometry is untouched so one prompt set and
one pseudo-label grid stay valid for all three branches.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F

_LUMA = torch.tensor([0.299, 0.587, 0.114]).view(3, 1, 1)


def _gray(img: torch.Tensor) -> torch.Tensor:
    return (img * _LUMA).sum(dim=0, keepdim=True)


def adjust_brightness(img: torch.Tensor, factor: float) -> torch.Tensor:
    return img * factor


def adjust_contrast(img: torch.Tensor, factor: float) -> torch.Tensor:
    mean = _gray(img).mean()
    return (img - mean) * factor + mean


def adjust_saturation(img: torch.Tensor, factor: float) -> torch.Tensor:
    g = _gray(img)
    return (img - g) * factor + g


def grayscale(img: torch.Tensor) -> torch.Tensor:
    return _gray(img).expand_as(img).clone()


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(round(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-(x**2) / (2 * sigma**2))
    k = k / k.sum()
    c = img.shape[0]
    out = F.pad(img.unsqueeze(0), (radius, radius, radius, radius), mode="replicate")
    out = F.conv2d(out, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    out = F.conv2d(out, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return out[0]


def posterize(img: torch.Tensor, bits: int) -> torch.Tensor:
    levels = 2**bits
    return torch.floor(img * (levels - 1) + 0.5) / (levels - 1)


def solarize(img: torch.Tensor, threshold: float) -> torch.Tensor:
    return torch.where(img >= threshold, 1.0 - img, img)


@dataclass
class AugmentationPolicy:
    """Ops applied in order, each with a probability and a magnitude range."""

    kind: str
    ops: List[Tuple[str, float, Tuple[float, float]]] = field(default_factory=list)

    def describe(self) -> Dict[str, object]:
        return {"kind": self.kind, "ops": [list(o) for o in self.ops]}


def weak_policy(magnitude: float = 0.1) -> AugmentationPolicy:
    return AugmentationPolicy(
        "weak",
        [
            ("brightness", 1.0, (1.0 - magnitude, 1.0 + magnitude)),
            ("contrast", 1.0, (1.0 - magnitude, 1.0 + magnitude)),
        ],
    )


def strong_policy() -> AugmentationPolicy:
    return AugmentationPolicy(
        "strong",
        [
            ("brightness", 0.8, (0.6, 1.4)),
            ("contrast", 0.8, (0.6, 1.4)),
            ("saturation", 0.8, (0.6, 1.4)),
            ("grayscale", 0.2, (0.0, 0.0)),
            ("blur", 0.5, (0.1, 2.0)),
            ("posterize", 0.3, (2.0, 5.0)),
            ("solarize", 0.2, (0.7, 1.0)),
        ],
    )


OPS = ("brightness", "contrast", "saturation", "grayscale", "blur", "posterize", "solarize")


def parse_policy(text: str, kind: str = "strong") -> AugmentationPolicy:
    """Read ``op:prob:lo:hi`` items separated by ``;`` (as written by ``format_policy``)."""
    ops = []
    for item in (t.strip() for t in text.split(";")):
        if not item:
            continue
        parts = item.split(":")
        if len(parts) != 4 or parts[0] not in OPS:
            raise ValueError(f"bad augmentation op {item!r}; expected op:prob:lo:hi with op in {OPS}")
        prob, lo, hi = (float(v) for v in parts[1:])
        if not 0.0 <= prob <= 1.0 or lo > hi:
            raise ValueError(f"bad augmentation op {item!r}: need 0 <= prob <= 1 and lo <= hi")
        ops.append((parts[0], prob, (lo, hi)))
    return AugmentationPolicy(kind, ops)


def format_policy(policy: AugmentationPolicy) -> str:
    return ";".join(f"{op}:{prob!r}:{lo!r}:{hi!r}" for op, prob, (lo, hi) in policy.ops)


def _apply(img: torch.Tensor, op: str, mag: float) -> torch.Tensor:
    if op == "brightness":
        return adjust_brightness(img, mag)
    if op == "contrast":
        return adjust_contrast(img, mag)
    if op == "saturation":
        return adjust_saturation(img, mag)
    if op == "grayscale":
        return grayscale(img)
    if op == "blur":
        return gaussian_blur(img, mag)
    if op == "posterize":
        return posterize(img, int(round(mag)))
    if op == "solarize":
        return solarize(img, mag)
    raise ValueError(f"unknown augmentation op {op!r}")


def apply_policy(img: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Sample and apply the policy; the number of rng draws is fixed per op."""
    out = img
    for op, prob, (lo, hi) in policy.ops:
        fire = rng.random() < prob
        mag = rng.uniform(lo, hi)
        if fire:
            out = _apply(out, op, mag).clamp(0.0, 1.0)
    return out


def weak_augment(image: torch.Tensor, rng: np.random.Generator, magnitude: float = 0.1) -> torch.Tensor:
    if magnitude == 0:
        return image.clone()
    return apply_policy(image, weak_policy(magnitude), rng)


def strong_augment(image: torch.Tensor, rng: np.random.Generator, policy: AugmentationPolicy | None = None) -> torch.Tensor:
    return apply_policy(image, policy or strong_policy(), rng)
