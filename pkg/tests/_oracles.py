"""Independent scalar references used to check the vectorised code.

Everything here loops over plain Python floats so that it shares no code path
with the tensor implementations under test.
"""
import math

import numpy as np
import torch

from promptadapt.prompts import BoxPrompt, CoarseMaskPrompt, PointPrompt, box_from_mask, polygon_coarsen


def focal_ref(p, t, gamma=2.0, clamp=1e-7):
    """p, t: nested lists [N][H][W]."""
    total = 0.0
    for pm, tm in zip(p, t):
        acc = 0.0
        count = 0
        for prow, trow in zip(pm, tm):
            for pv, tv in zip(prow, trow):
                pv = min(max(pv, clamp), 1.0 - clamp)
                if tv:
                    acc += (1.0 - pv) ** gamma * math.log(pv)
                else:
                    acc += pv**gamma * math.log(1.0 - pv)
                count += 1
        total += -acc / count
    return total


def dice_ref(p, t, eps=1.0):
    total = 0.0
    for pm, tm in zip(p, t):
        inter = ps = ts = 0.0
        for prow, trow in zip(pm, tm):
            for pv, tv in zip(prow, trow):
                inter += pv * tv
                ps += pv
                ts += tv
        total += 1.0 - (2.0 * inter + eps) / (ps + ts + eps)
    return total


def contrastive_ref(fa, ft, tau=0.3):
    """Single log ratio: positives on the diagonal, negatives everywhere else."""
    n = len(fa)
    pos = neg = 0.0
    for i in range(n):
        for j in range(n):
            s = math.exp(sum(a * b for a, b in zip(fa[i], ft[j])) / tau)
            if i == j:
                pos += s
            else:
                neg += s
    return -math.log(pos / neg)


def infonce_ref(fa, ft, tau=0.3):
    n = len(fa)
    out = 0.0
    for i in range(n):
        sims = [sum(a * b for a, b in zip(fa[i], ft[j])) / tau for j in range(n)]
        neg = sum(math.exp(s) for j, s in enumerate(sims) if j != i)
        out += -(sims[i] - math.log(neg))
    return out / n


def iou_ref(a, b):
    a = np.asarray(a, dtype=bool).ravel().tolist()
    b = np.asarray(b, dtype=bool).ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    union = sum(1 for x, y in zip(a, b) if x or y)
    return 1.0 if union == 0 else inter / union


def nms_bruteforce(masks, scores, thresh):
    """Greedy NMS written as a fixed-point over explicit pairwise IoUs."""
    n = len(masks)
    iou = [[iou_ref(masks[i], masks[j]) for j in range(n)] for i in range(n)]
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    alive = {i: True for i in range(n)}
    kept = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(i)
        for j in order:
            if j != i and alive[j] and j not in kept and iou[i][j] > thresh:
                alive[j] = False
    return kept


def random_blob(rng, size=48):
    """Union of a few random discs, always non-empty."""
    yy, xx = np.mgrid[0:size, 0:size]
    m = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(8, size - 8, size=2)
        r = rng.uniform(2, 10)
        m |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return m


def _key(image):
    return image.numpy().tobytes()


class OracleModel:
    """Answers each prompt with the ground-truth mask it was built from."""

    def __init__(self, samples, empty=False):
        self.by_image = {_key(s.image): s.instances for s in samples}
        self.empty = empty

    def _match(self, instances, p):
        for m in instances:
            if isinstance(p, BoxPrompt) and box_from_mask(m) == p:
                return m
            if isinstance(p, PointPrompt) and all(m[y, x] for x, y in p.positives):
                return m
            if isinstance(p, CoarseMaskPrompt) and polygon_coarsen(m) == p:
                return m
        raise AssertionError("prompt matches no instance")

    def __call__(self, image, prompts):
        inst = self.by_image[_key(image)]
        maps = [torch.from_numpy(self._match(inst, p)).float() for p in prompts]
        logits = torch.stack(maps) * 20 - 10
        return (torch.full_like(logits, -10) if self.empty else logits), None
