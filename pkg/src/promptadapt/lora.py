"""Low-rank adapters on encoder linear weights.

A wrapped weight ``θ`` (``d_i x d_o``, i.e. the transpose of ``nn.Linear.weight``)
computes ``x·θ + (x·A)·B``. ``B`` starts at zero, so a fresh adapter leaves the
model output unchanged. Only ``A`` and ``B`` train in ``lora`` mode; merging
folds ``A·B`` back into ``θ`` for inference.
"""
from __future__ import annotations

import copy
import hashlib
import fnmatch
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError
from .model import SegmentationModel

DEFAULT_TARGETS = (
    "image_encoder.blocks.*.token_mix",
    "image_encoder.blocks.*.proj",
    "image_encoder.blocks.*.fc1",
    "image_encoder.blocks.*.fc2",
)
FINETUNE_PARTS = ("lora", "decoder", "layernorm", "full", "prompt")


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, target_id: str = "", generator: Optional[torch.Generator] = None):
        super().__init__()
        d_i, d_o = base.in_features, base.out_features
        if not 1 <= rank <= min(d_i, d_o):
            raise ValueError(f"rank {rank} outside [1, {min(d_i, d_o)}] for {target_id or 'weight'} ({d_i}x{d_o})")
        self.base = base
        self.rank = rank
        self.target_id = target_id
        w = base.weight
        self.A = nn.Parameter(torch.randn(d_i, rank, generator=generator, dtype=w.dtype) / math.sqrt(rank))
        self.B = nn.Parameter(torch.zeros(rank, d_o, dtype=w.dtype))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def delta(self) -> torch.Tensor:
        return self.A @ self.B

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.A) @ self.B


def merge(adapter: LoRALinear, base_weight: torch.Tensor) -> torch.Tensor:
    """θ + A·B for ``base_weight`` laid out as ``d_i x d_o``."""
    expected = (adapter.A.shape[0], adapter.B.shape[1])
    if tuple(base_weight.shape) != expected:
        raise ValueError(f"base weight {tuple(base_weight.shape)} does not match adapter {expected}")
    return base_weight + adapter.A.detach() @ adapter.B.detach()


def compression_ratio(d_i: int, d_o: int, r: int) -> float:
    """Adapter scalars over full-weight scalars: r(d_i + d_o) / (d_i·d_o)."""
    if min(d_i, d_o, r) <= 0:
        raise ValueError("dimensions and rank must be positive")
    return r * (d_i + d_o) / (d_i * d_o)


def _is_adapter_param(name: str) -> bool:
    return name.endswith(".A") or name.endswith(".B")


def _parse_mode(mode: str) -> Tuple[str, ...]:
    parts = tuple(p.strip() for p in mode.split("+") if p.strip())
    bad = [p for p in parts if p not in FINETUNE_PARTS]
    if not parts or bad:
        raise ConfigurationError(f"unknown finetune mode {mode!r}; parts must come from {FINETUNE_PARTS}")
    return parts


def resolve_targets(model: nn.Module, patterns: Iterable[str]) -> List[str]:
    """Expand glob patterns to encoder ``nn.Linear`` module names."""
    linears = {
        name: mod
        for name, mod in model.named_modules()
        if isinstance(mod, nn.Linear) and name.startswith("image_encoder.")
    }
    out: List[str] = []
    for pat in patterns:
        hits = sorted(n for n in linears if fnmatch.fnmatchcase(n, pat))
        if not hits:
            raise ConfigurationError(f"LoRA target {pat!r} matches no linear weight in the image encoder")
        out.extend(h for h in hits if h not in out)
    return out


class AdaptedModel(nn.Module):
    """A copy of the base model with adapters spliced into target linears."""

    def __init__(self, model: SegmentationModel, adapters: Dict[str, LoRALinear], finetune_mode: str, rank: int):
        super().__init__()
        self.model = model
        self.adapters = adapters  # plain dict: modules are already registered inside self.model
        self.finetune_mode = finetune_mode
        self.rank = rank
        self.configure_trainable()

    @property
    def backend(self) -> str:
        return self.model.backend

    @property
    def input_size(self) -> int:
        return self.model.input_size

    def encode_image(self, image):
        return self.model.encode_image(image)

    def decode_masks(self, feat, prompts, image_size=None):
        return self.model.decode_masks(feat, prompts, image_size)

    def forward(self, image, prompts):
        return self.model(image, prompts)

    def named_trainable(self) -> List[Tuple[str, nn.Parameter]]:
        parts = _parse_mode(self.finetune_mode)
        chosen: Dict[str, nn.Parameter] = {}
        for name, p in self.model.named_parameters():
            if _is_adapter_param(name):
                if "lora" in parts:
                    chosen[name] = p
                continue
            if "full" in parts and name.startswith("image_encoder."):
                chosen[name] = p
            if "decoder" in parts and name.startswith("mask_decoder."):
                chosen[name] = p
            if "prompt" in parts and name.startswith("prompt_encoder."):
                chosen[name] = p
        if "layernorm" in parts:
            for mname, mod in self.model.image_encoder.named_modules():
                if isinstance(mod, nn.LayerNorm):
                    for pname, p in mod.named_parameters(recurse=False):
                        chosen[f"image_encoder.{mname}.{pname}"] = p
        return sorted(chosen.items(), key=lambda kv: kv[0])

    def configure_trainable(self) -> None:
        train = {id(p) for _, p in self.named_trainable()}
        for p in self.model.parameters():
            p.requires_grad_(id(p) in train)

    def base_checksum(self) -> str:
        """Hash of every non-adapter encoder weight."""
        h = hashlib.sha256()
        for name, p in sorted(self.model.named_parameters(), key=lambda kv: kv[0]):
            if name.startswith("image_encoder.") and not _is_adapter_param(name):
                h.update(name.encode())
                h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def inject(
    model: SegmentationModel,
    targets: Sequence[str] = DEFAULT_TARGETS,
    rank: int = 4,
    seed: int = 0,
    finetune_mode: str = "lora",
) -> AdaptedModel:
    """Wrap target encoder linears of a deep copy of ``model`` with fresh adapters."""
    _parse_mode(finetune_mode)
    if rank < 1:
        raise ValueError("rank must be >= 1")
    copy_ = copy.deepcopy(model)
    names = resolve_targets(copy_, targets)
    gen = torch.Generator().manual_seed(seed)
    adapters: Dict[str, LoRALinear] = {}
    for name in names:
        parent_name, _, attr = name.rpartition(".")
        parent = copy_.get_submodule(parent_name)
        wrapped = LoRALinear(getattr(parent, attr), rank, target_id=name, generator=gen)
        setattr(parent, attr, wrapped)
        adapters[name] = wrapped
    return AdaptedModel(copy_, adapters, finetune_mode, rank)


def trainable_parameters(model: AdaptedModel) -> List[nn.Parameter]:
    return [p for _, p in model.named_trainable()]


def merged_model(adapted: AdaptedModel) -> SegmentationModel:
    """Plain model with every adapter folded into its base weight."""
    out = copy.deepcopy(adapted.model)
    for name in adapted.adapters:
        parent_name, _, attr = name.rpartition(".")
        parent = out.get_submodule(parent_name)
        lora: LoRALinear = getattr(parent, attr)
        base = lora.base
        with torch.no_grad():
            base.weight.copy_(merge(lora, base.weight.detach().T).T)
        setattr(parent, attr, base)
    for p in out.parameters():
        p.requires_grad_(False)
    return out


# ---------------------------------------------------------------------------
# adapter-only checkpoints: a .npz holding a JSON manifest plus one array per tensor


def save_adapter_checkpoint(adapted: AdaptedModel, path, extra: Optional[dict] = None) -> None:
    """Store adapter factors and any other trained tensors; never frozen base weights."""
    arrays: Dict[str, np.ndarray] = {}
    targets = []
    for name, lora in adapted.adapters.items():
        arrays[f"A::{name}"] = lora.A.detach().cpu().numpy()
        arrays[f"B::{name}"] = lora.B.detach().cpu().numpy()
        targets.append({"target_id": name, "rank": lora.rank, "A": list(lora.A.shape), "B": list(lora.B.shape)})
    params = []
    for name, p in adapted.named_trainable():
        if _is_adapter_param(name):
            continue
        arrays[f"P::{name}"] = p.detach().cpu().numpy()
        params.append({"name": name, "shape": list(p.shape)})
    manifest = {
        "finetune_mode": adapted.finetune_mode,
        "rank": adapted.rank,
        "backend": adapted.backend,
        "targets": targets,
        "params": params,
    }
    manifest.update(extra or {})
    arrays["manifest"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint_manifest(path) -> dict:
    with np.load(path) as z:
        return json.loads(z["manifest"].tobytes().decode())


def load_adapter_checkpoint(base: SegmentationModel, path) -> AdaptedModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        manifest = json.loads(z["manifest"].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != "manifest"}
    if manifest["backend"] != base.backend:
        raise ConfigurationError(
            f"checkpoint backend {manifest['backend']!r} does not match model backend {base.backend!r}"
        )
    targets = [t["target_id"] for t in manifest["targets"]]
    if targets:
        adapted = inject(base, targets, manifest["rank"], finetune_mode=manifest["finetune_mode"])
    else:
        adapted = AdaptedModel(copy.deepcopy(base), {}, manifest["finetune_mode"], manifest["rank"])
    state = dict(adapted.model.named_parameters())
    with torch.no_grad():
        for t in manifest["targets"]:
            lora = adapted.adapters[t["target_id"]]
            a, b = arrays[f"A::{t['target_id']}"], arrays[f"B::{t['target_id']}"]
            if list(a.shape) != list(lora.A.shape) or list(b.shape) != list(lora.B.shape):
                raise ConfigurationError(f"adapter shape mismatch for {t['target_id']}")
            lora.A.copy_(torch.from_numpy(a))
            lora.B.copy_(torch.from_numpy(b))
        for prm in manifest["params"]:
            if prm["name"] not in state:
                raise ConfigurationError(f"checkpoint parameter {prm['name']!r} not in model")
            dst = state[prm["name"]]
            src = torch.from_numpy(arrays[f"P::{prm['name']}"])
            if src.shape != dst.shape:
                raise ConfigurationError(f"shape mismatch for {prm['name']}")
            dst.copy_(src)
    return adapted
