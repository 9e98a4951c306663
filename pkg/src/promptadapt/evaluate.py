"""Per-instance IoU and dataset mIoU under a chosen testing prompt type."""
from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import Sample
from .model import binarize, sigmoid_normalize
from .prompts import PROMPT_TYPES, mask_iou, prompts_from_masks


@dataclass
class EvalReport:
    dataset: str
    train_weak_sup: str
    test_prompt: str
    ious: List[Tuple[str, int, float]] = field(default_factory=list)
    miou: float = 0.0
    instance_count: int = 0
    skipped: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ious"] = [list(t) for t in self.ious]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["ious"] = [(str(a), int(b), float(c)) for a, b, c in d.get("ious", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    """Per-sample generator keyed by id, so results ignore test-set order."""
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode())])


def mean_iou(ious: Sequence[float]) -> float:
    return math.fsum(ious) / len(ious) if len(ious) else 0.0


@torch.no_grad()
def predict_masks(model, image: torch.Tensor, prompts) -> np.ndarray:
    logits, _ = model(image, prompts)
    return binarize(sigmoid_normalize(logits)).numpy().astype(bool)


def evaluate(
    model,
    test_set: Sequence[Sample],
    prompt_type: str = "box",
    seed: int = 0,
    dataset: str = "",
    train_weak_sup: str = "none",
) -> EvalReport:
    """IoU between each ground-truth instance and the prediction for its prompt."""
    if prompt_type not in PROMPT_TYPES:
        raise ValueError(f"unknown prompt type {prompt_type!r}")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    rows: List[Tuple[str, int, float]] = []
    skipped = 0
    try:
        for s in test_set:
            ps = prompts_from_masks(s.instances, prompt_type, sample_rng(seed, s.id))
            skipped += ps.skipped
            if not len(ps):
                continue
            pred = predict_masks(model, s.image, ps.prompts)
            for k, idx in enumerate(ps.mask_index):
                rows.append((s.id, idx, mask_iou(pred[k], s.instances[idx])))
    finally:
        if was_training:
            model.train()
    return EvalReport(
        dataset=dataset,
        train_weak_sup=train_weak_sup,
        test_prompt=prompt_type,
        ious=rows,
        miou=mean_iou([r[2] for r in rows]),
        instance_count=len(rows),
        skipped=skipped,
    )


def cross_prompt_matrix(
    models: Mapping[str, object],
    test_set: Sequence[Sample],
    prompt_types: Sequence[str] = PROMPT_TYPES,
    seed: int = 0,
    dataset: str = "",
) -> Dict[Tuple[str, str], EvalReport]:
    """One report per (adaptation weak-label type, testing prompt type) pair.

    ``models`` maps the weak-supervision type each model was adapted with to the
    model itself; a single entry yields one row of the grid.
    """
    grid = {}
    for train_type, model in models.items():
        for test_type in prompt_types:
            grid[(train_type, test_type)] = evaluate(model, test_set, test_type, seed, dataset, train_type)
    return grid


# ---------------------------------------------------------------------------
# report output


def _order(t: str):
    return (PROMPT_TYPES.index(t) if t in PROMPT_TYPES else len(PROMPT_TYPES), t)


def format_table(grid: Mapping[Tuple[str, str], EvalReport]) -> str:
    rows = sorted({k[0] for k in grid}, key=_order)
    cols = sorted({k[1] for k in grid}, key=_order)
    width = max(10, *(len(r) for r in rows)) + 2
    lines = ["train \\ test".ljust(width) + "".join(c.rjust(9) for c in cols)]
    for r in rows:
        cells = "".join(
            f"{grid[(r, c)].miou:9.3f}" if (r, c) in grid else " " * 9 for c in cols
        )
        lines.append(r.ljust(width) + cells)
    return "\n".join(lines)


def write_reports(grid: Mapping[Tuple[str, str], EvalReport], out_dir, stem: str = "report") -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / f"{stem}.json", "csv": out_dir / f"{stem}.csv", "txt": out_dir / f"{stem}.txt"}
    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for _, r in sorted(grid.items())], fh, indent=1, sort_keys=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "train_weak_sup", "test_prompt", "miou", "instances", "skipped"])
    for (_, _), r in sorted(grid.items()):
        w.writerow([r.dataset, r.train_weak_sup, r.test_prompt, repr(r.miou), r.instance_count, r.skipped])
    paths["csv"].write_text(buf.getvalue(), encoding="utf-8")
    paths["txt"].write_text(format_table(grid) + "\n", encoding="utf-8")
    return paths


def read_reports(path) -> Dict[Tuple[str, str], EvalReport]:
    with open(path, encoding="utf-8") as fh:
        reports = [EvalReport.from_dict(d) for d in json.load(fh)]
    return {(r.train_weak_sup, r.test_prompt): r for r in reports}
