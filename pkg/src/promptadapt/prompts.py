"""Prompt synthesis from instance masks, and automatic grid prompting.

Weak labels double as prompts: a tight box, 5 positive + 5 negative points, or a
coarse polygon fitted to the mask boundary. The automatic path turns grid-point
predictions into a filtered, de-duplicated mask list and then into one fixed
prompt set that every branch consumes.

Coordinates are ``(x, y)`` = ``(column, row)`` in pixel units throughout.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError

logger = logging.getLogger(__name__)

PROMPT_TYPES = ("box", "point", "poly")
NUM_POINTS = 5

# upstream automatic-mask-generation defaults
PRED_IOU_THRESH = 0.88
STABILITY_THRESH = 0.95
STABILITY_OFFSET = 1.0
NMS_IOU_THRESH = 0.7


@dataclass(frozen=True)
class BoxPrompt:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    kind = "box"

    def in_bounds(self, height: int, width: int) -> bool:
        return 0 <= self.x_min <= self.x_max < width and 0 <= self.y_min <= self.y_max < height


@dataclass(frozen=True)
class PointPrompt:
    positives: Tuple[Tuple[int, int], ...]
    negatives: Tuple[Tuple[int, int], ...] = ()

    kind = "point"

    def in_bounds(self, height: int, width: int) -> bool:
        return all(0 <= x < width and 0 <= y < height for x, y in self.positives + self.negatives)


@dataclass(frozen=True)
class CoarseMaskPrompt:
    vertices: Tuple[Tuple[float, float], ...]
    mask: np.ndarray = field(compare=False, repr=False)

    kind = "poly"

    def __eq__(self, other):
        if not isinstance(other, CoarseMaskPrompt):
            return NotImplemented
        return self.vertices == other.vertices and np.array_equal(self.mask, other.mask)

    def __hash__(self):
        return hash(self.vertices)

    def in_bounds(self, height: int, width: int) -> bool:
        if self.mask.shape != (height, width):
            return False
        return all(-0.5 <= x <= width - 0.5 and -0.5 <= y <= height - 0.5 for x, y in self.vertices)


Prompt = Union[BoxPrompt, PointPrompt, CoarseMaskPrompt]


@dataclass
class PromptSet:
    """Fixed prompts for one image; the same object goes to every branch."""

    prompts: List[Prompt]
    kind: str
    source: str = "weak-label"
    # index into the mask list each prompt was built from
    mask_index: List[int] = field(default_factory=list)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.prompts)


# ---------------------------------------------------------------------------
# mask utilities


def _as_bool(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {m.shape}")
    return m.astype(bool, copy=False)


def mask_iou(a, b) -> float:
    """|a ∧ b| / |a ∨ b|; two empty masks count as a perfect match."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def largest_component(mask) -> np.ndarray:
    m = _as_bool(mask)
    labels, n = ndimage.label(m, structure=np.ones((3, 3), dtype=int))
    if n <= 1:
        return m.copy()
    sizes = ndimage.sum_labels(m, labels, index=np.arange(1, n + 1))
    # ties go to the lowest label, i.e. first in raster order
    return labels == (int(np.argmax(sizes)) + 1)


# ---------------------------------------------------------------------------
# weak-label prompts


def box_from_mask(mask) -> BoxPrompt:
    m = _as_bool(mask)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise DegenerateInputError("empty mask has no bounding box")
    return BoxPrompt(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def sample_points(mask, rng: np.random.Generator, n: int = NUM_POINTS) -> PointPrompt:
    """Draw ``n`` foreground and ``n`` background pixels without replacement."""
    m = _as_bool(mask)
    fg = np.argwhere(m)
    bg = np.argwhere(~m)
    if len(fg) < n or len(bg) < n:
        raise DegenerateInputError(
            f"need {n} foreground and {n} background pixels, have {len(fg)} and {len(bg)}"
        )
    pos = fg[rng.choice(len(fg), size=n, replace=False)]
    neg = bg[rng.choice(len(bg), size=n, replace=False)]
    return PointPrompt(
        positives=tuple((int(c), int(r)) for r, c in pos),
        negatives=tuple((int(c), int(r)) for r, c in neg),
    )


def trace_contour(mask) -> np.ndarray:
    """Outer 8-connected border of the largest component as an (n, 2) array of (x, y)."""
    comp = largest_component(mask)
    if not comp.any():
        raise DegenerateInputError("empty mask has no contour")
    contours, _ = cv2.findContours(comp.astype(np.uint8), cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    contour = max(contours, key=len)
    return contour.reshape(-1, 2).astype(np.int64)


def contour_perimeter(mask) -> int:
    """Perimeter in pixel steps along the traced border (a 40x40 square gives 156)."""
    return int(len(trace_contour(mask)))


def polygon_vertex_count(perimeter: float) -> int:
    # half-up rounding, not banker's
    return max(3, int(math.floor(perimeter / 20.0 + 0.5)))


def rasterize_polygon(vertices: Sequence[Tuple[float, float]], shape: Tuple[int, int]) -> np.ndarray:
    """Fill a polygon given in pixel-centre coordinates, boundary pixels included."""
    out = np.zeros(shape, dtype=np.uint8)
    shift = 4
    pts = np.round(np.asarray(vertices, dtype=np.float64) * (1 << shift)).astype(np.int32)
    cv2.fillPoly(out, [pts.reshape(-1, 1, 2)], 1, lineType=cv2.LINE_8, shift=shift)
    return out.astype(bool)


def _resample_closed(points: np.ndarray, k: int) -> np.ndarray:
    closed = np.vstack([points, points[:1]]).astype(np.float64)
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    targets = np.arange(k) * total / k
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    frac = np.where(seg[idx] > 0, (targets - cum[idx]) / np.where(seg[idx] > 0, seg[idx], 1.0), 0.0)
    return closed[idx] + frac[:, None] * (closed[idx + 1] - closed[idx])


def polygon_coarsen(mask) -> CoarseMaskPrompt:
    """Fit a polygon with max(3, round(P/20)) vertices to the largest component."""
    m = _as_bool(mask)
    contour = trace_contour(m)
    k = polygon_vertex_count(len(contour))
    if len(contour) == 1:
        # single pixel: a small triangle around its centre
        x, y = contour[0]
        verts = np.array([[x - 0.5, y - 0.5], [x + 0.5, y - 0.5], [x, y + 0.5]], dtype=np.float64)
    else:
        verts = _resample_closed(contour, k)
    verts = np.round(verts, 2)
    vertices = tuple((float(x), float(y)) for x, y in verts)
    return CoarseMaskPrompt(vertices=vertices, mask=rasterize_polygon(vertices, m.shape))


# ---------------------------------------------------------------------------
# automatic prompting


def grid_points(height: int, width: int, stride: int = 16) -> List[Tuple[int, int]]:
    """Row-major lattice, spacing ``stride``, offset ``stride // 2``."""
    off = stride // 2
    return [
        (off + i * stride, off + j * stride)
        for j in range(height // stride)
        for i in range(width // stride)
    ]


def stability_score(logits, offset: float = STABILITY_OFFSET) -> float:
    """IoU between the masks thresholded at logit +offset and -offset."""
    y = np.asarray(logits, dtype=np.float64)
    high = y > offset
    low = y > -offset
    union = low.sum()  # high ⊆ low
    if union == 0:
        return 1.0
    return float(high.sum() / union)


def filter_masks(
    masks: Sequence,
    pred_iou_scores: Sequence[float],
    logits: Sequence,
    iou_thresh: float = PRED_IOU_THRESH,
    stability_thresh: float = STABILITY_THRESH,
    offset: float = STABILITY_OFFSET,
) -> List[int]:
    """Indices of masks passing both the predicted-IoU and stability thresholds."""
    if not (len(masks) == len(pred_iou_scores) == len(logits)):
        raise ValueError("masks, scores and logits must be parallel lists")
    return [
        i
        for i in range(len(masks))
        if pred_iou_scores[i] >= iou_thresh and stability_score(logits[i], offset) >= stability_thresh
    ]


def nms_masks(masks: Sequence, scores: Sequence[float], iou_threshold: float = NMS_IOU_THRESH) -> List[int]:
    """Greedy mask NMS; returns kept indices in descending-score order."""
    if len(masks) != len(scores):
        raise ValueError("masks and scores must be parallel lists")
    order = sorted(range(len(masks)), key=lambda i: (-scores[i], i))
    flat = np.stack([np.asarray(m, dtype=bool).ravel() for m in masks]) if len(masks) else None
    kept: List[int] = []
    for i in order:
        if kept:
            inter = (flat[kept] & flat[i]).sum(axis=1)
            union = (flat[kept] | flat[i]).sum(axis=1)
            ious = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
            if (ious > iou_threshold).any():
                continue
        kept.append(i)
    return kept


def prompt_from_mask(mask, prompt_type: str, rng: Optional[np.random.Generator] = None) -> Prompt:
    if prompt_type == "box":
        return box_from_mask(mask)
    if prompt_type == "point":
        if rng is None:
            raise ValueError("point prompts need a random generator")
        return sample_points(mask, rng)
    if prompt_type == "poly":
        return polygon_coarsen(mask)
    raise ValueError(f"unknown prompt type {prompt_type!r}; expected one of {PROMPT_TYPES}")


def prompts_from_masks(
    masks: Sequence,
    prompt_type: str,
    rng: Optional[np.random.Generator] = None,
    source: str = "weak-label",
) -> PromptSet:
    if len(masks) == 0:
        raise ValueError("no masks to build prompts from")
    if prompt_type not in PROMPT_TYPES:
        raise ValueError(f"unknown prompt type {prompt_type!r}; expected one of {PROMPT_TYPES}")
    prompts: List[Prompt] = []
    index: List[int] = []
    skipped = 0
    for i, m in enumerate(masks):
        try:
            prompts.append(prompt_from_mask(m, prompt_type, rng))
        except DegenerateInputError:
            skipped += 1
            continue
        index.append(i)
    if skipped:
        logger.info("skipped %d degenerate instance(s) for %s prompts", skipped, prompt_type)
    return PromptSet(prompts=prompts, kind=prompt_type, source=source, mask_index=index, skipped=skipped)


# ---------------------------------------------------------------------------
# text format: one record per prompt, `# image <id>` separates images


def format_prompt(p: Prompt) -> str:
    if isinstance(p, BoxPrompt):
        return f"box {p.x_min} {p.y_min} {p.x_max} {p.y_max}"
    if isinstance(p, PointPrompt):
        if len(p.positives) != len(p.negatives):
            raise ValueError("text format needs equal positive and negative counts")
        coords = [c for xy in p.positives + p.negatives for c in xy]
        return "points " + " ".join(str(c) for c in coords)
    if isinstance(p, CoarseMaskPrompt):
        return "poly " + " ".join(f"{c:.2f}" for xy in p.vertices for c in xy)
    raise TypeError(f"not a prompt: {p!r}")


def parse_prompt(line: str, shape: Optional[Tuple[int, int]] = None) -> Prompt:
    tag, *rest = line.split()
    if tag == "box":
        if len(rest) != 4:
            raise ValueError(f"box record needs 4 numbers: {line!r}")
        return BoxPrompt(*(int(v) for v in rest))
    if tag == "points":
        vals = [int(v) for v in rest]
        if len(vals) % 4:
            raise ValueError(f"points record needs pos/neg pairs: {line!r}")
        xy = list(zip(vals[0::2], vals[1::2]))
        half = len(xy) // 2
        return PointPrompt(positives=tuple(xy[:half]), negatives=tuple(xy[half:]))
    if tag == "poly":
        vals = [float(v) for v in rest]
        if len(vals) < 6 or len(vals) % 2:
            raise ValueError(f"poly record needs >= 3 vertices: {line!r}")
        verts = tuple(zip(vals[0::2], vals[1::2]))
        if shape is None:
            raise ValueError("poly records need the image shape to rasterize")
        return CoarseMaskPrompt(vertices=verts, mask=rasterize_polygon(verts, shape))
    raise ValueError(f"unknown prompt record tag {tag!r}")


def write_prompt_file(path, records: Iterable[Tuple[str, Sequence[Prompt]]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for image_id, prompts in records:
            fh.write(f"# image {image_id}\n")
            for p in prompts:
                fh.write(format_prompt(p) + "\n")


def read_prompt_file(path, shapes: Optional[dict] = None) -> dict:
    out: dict = {}
    current = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("# image "):
                current = line[len("# image "):]
                out[current] = []
                continue
            if current is None:
                raise ValueError(f"{path}:{lineno}: prompt record before any image header")
            shape = shapes.get(current) if shapes else None
            out[current].append(parse_prompt(line, shape))
    return out
