"""Promptable segmentation model: image encoder, prompt encoder, mask decoder.

The toy backend is a patch-embedding encoder with two attention-free mixing
blocks. Its decoder conditions the feature grid on the encoded prompt and
upsamples the projection back to pixel resolution, emitting one logit map per
prompt (single-mask mode).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .prompts import BoxPrompt, CoarseMaskPrompt, PointPrompt, Prompt

PROMPT_KINDS = ("box", "point", "poly")


# ---------------------------------------------------------------------------
# backend config


@dataclass
class BackendConfig:
    backend: str = "toy"
    input_size: int = 64
    feature_dim: int = 64
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.25, 0.25, 0.25)
    pretrained_weights_path: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.backend not in ("toy", "pretrained"):
            raise ConfigurationError(f"unknown backend {self.backend!r}")
        if self.input_size < 1:
            raise ConfigurationError("input_size must be positive")
        if self.backend == "toy" and self.feature_dim < 4:
            raise ConfigurationError("the toy backend needs feature_dim >= 4")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigurationError("mean and std need three channel values")


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def parse_backend_config(pairs: dict) -> BackendConfig:
    kw = {}
    for key, raw in pairs.items():
        if key == "backend":
            kw[key] = raw
        elif key in ("input_size", "feature_dim", "seed"):
            kw[key] = int(raw)
        elif key in ("mean", "std"):
            kw[key] = _floats(raw)
        elif key == "pretrained_weights_path":
            kw[key] = raw or None
    return BackendConfig(**kw)


def read_key_values(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def load_backend_config(path) -> BackendConfig:
    return parse_backend_config(read_key_values(path))


# ---------------------------------------------------------------------------
# interface


class SegmentationModel(nn.Module):
    """Common surface of every backend.

    Subclasses provide ``image_encoder``, ``prompt_encoder`` and ``mask_decoder``
    sub-modules and implement ``_encode`` / ``_decode`` on preprocessed tensors.
    """

    backend: str = "abstract"
    input_size: int
    image_encoder: nn.Module
    prompt_encoder: nn.Module
    mask_decoder: nn.Module

    def __init__(self, input_size: int, mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.input_size = int(input_size)
        self.register_buffer("pixel_mean", torch.tensor(mean, dtype=torch.float32).view(3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(std, dtype=torch.float32).view(3, 1, 1), persistent=False)

    # -- geometry -----------------------------------------------------------

    def _scale(self, hw: Tuple[int, int]) -> float:
        return self.input_size / max(hw)

    def preprocess(self, image: torch.Tensor) -> torch.Tensor:
        """[3,H,W] or [B,3,H,W] in [0,1] -> normalised, padded [B,3,S,S]."""
        x = image if image.dim() == 4 else image.unsqueeze(0)
        if x.shape[1] != 3:
            raise ConfigurationError(f"expected 3-channel images, got shape {tuple(image.shape)}")
        h, w = x.shape[-2:]
        s = self.input_size
        if max(h, w) != s:
            scale = self._scale((h, w))
            nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
            x = F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False)
            h, w = nh, nw
        x = (x - self.pixel_mean) / self.pixel_std
        if (h, w) != (s, s):
            x = F.pad(x, (0, s - w, 0, s - h))
        return x

    def _transform_prompt(self, p: Prompt, hw: Tuple[int, int]) -> Prompt:
        if max(hw) == self.input_size and hw[0] == hw[1]:
            return p
        scale = self._scale(hw)
        if isinstance(p, BoxPrompt):
            return BoxPrompt(*(int(round(v * scale)) for v in (p.x_min, p.y_min, p.x_max, p.y_max)))
        if isinstance(p, PointPrompt):
            tr = lambda pts: tuple((int(round(x * scale)), int(round(y * scale))) for x, y in pts)
            return PointPrompt(tr(p.positives), tr(p.negatives))
        if isinstance(p, CoarseMaskPrompt):
            m = torch.from_numpy(p.mask.astype(np.float32))[None, None]
            nh, nw = max(1, int(round(hw[0] * scale))), max(1, int(round(hw[1] * scale)))
            m = F.interpolate(m, size=(nh, nw), mode="nearest")
            m = F.pad(m, (0, self.input_size - nw, 0, self.input_size - nh))[0, 0].numpy() > 0.5
            verts = tuple((x * scale, y * scale) for x, y in p.vertices)
            return CoarseMaskPrompt(vertices=verts, mask=m)
        raise TypeError(f"not a prompt: {p!r}")

    def _postprocess(self, logits: torch.Tensor, hw: Tuple[int, int]) -> torch.Tensor:
        s = self.input_size
        if hw == (s, s):
            return logits
        scale = self._scale(hw)
        nh, nw = max(1, int(round(hw[0] * scale))), max(1, int(round(hw[1] * scale)))
        out = logits[:, :nh, :nw].unsqueeze(1)
        return F.interpolate(out, size=hw, mode="bilinear", align_corners=False).squeeze(1)

    # -- public -------------------------------------------------------------

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        """[3,H,W] -> feature map [D,h,w] (batched input gives [B,D,h,w])."""
        feat = self._encode(self.preprocess(image))
        return feat if image.dim() == 4 else feat[0]

    def decode_masks(
        self,
        feat: torch.Tensor,
        prompts: Sequence[Prompt],
        image_size: Optional[Tuple[int, int]] = None,
    ) -> torch.Tensor:
        """One logit map per prompt, in prompt order: [N_p, H, W]."""
        if len(prompts) == 0:
            raise ValueError("decode_masks needs at least one prompt")
        hw = tuple(image_size) if image_size is not None else (self.input_size, self.input_size)
        for p in prompts:
            if not p.in_bounds(*hw):
                raise ValueError(f"prompt outside the {hw[0]}x{hw[1]} image: {p!r}")
        local = [self._transform_prompt(p, hw) for p in prompts]
        logits = self._decode(feat, local)
        return self._postprocess(logits, hw)

    def forward(self, image: torch.Tensor, prompts: Sequence[Prompt]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(mask_logits [N_p,H,W], feature_map [D,h,w])``."""
        feat = self.encode_image(image)
        return self.decode_masks(feat, prompts, tuple(image.shape[-2:])), feat

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _decode(self, feat: torch.Tensor, prompts: Sequence[Prompt]) -> torch.Tensor:
        raise NotImplementedError


def encode_image(model: SegmentationModel, image: torch.Tensor) -> torch.Tensor:
    return model.encode_image(image)


def decode_masks(model: SegmentationModel, feat: torch.Tensor, prompts: Sequence[Prompt], image_size=None) -> torch.Tensor:
    return model.decode_masks(feat, prompts, image_size)


def sigmoid_normalize(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits)


def binarize(prob: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """1 where ``prob > threshold`` (strict), else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (prob > threshold).to(torch.uint8)


def parameter_checksum(module: nn.Module, prefix: str = "") -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if not name.startswith(prefix):
            continue
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# toy backend


class MixingBlock(nn.Module):
    """Token mixing then channel MLP, pre-norm, residual; no attention."""

    def __init__(self, dim: int, tokens: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.token_mix = nn.Linear(tokens, tokens)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # [B, T, D]
        y = self.token_mix(self.norm1(x).transpose(1, 2)).transpose(1, 2)
        x = x + self.proj(y)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ToyImageEncoder(nn.Module):
    def __init__(self, dim: int, input_size: int = 64, patch: int = 16, depth: int = 2):
        super().__init__()
        if input_size % patch:
            raise ConfigurationError("input_size must be a multiple of the patch size")
        self.patch = patch
        self.grid = input_size // patch
        tokens = self.grid * self.grid
        self.patch_embed = nn.Linear(3 * patch * patch, dim)
        self.pos_embed = nn.Parameter(torch.zeros(tokens, dim))
        self.blocks = nn.ModuleList([MixingBlock(dim, tokens) for _ in range(depth)])
        self.neck_norm = nn.LayerNorm(dim)
        self.neck = nn.Linear(dim, dim)
        nn.init.normal_(self.pos_embed, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # [B,3,S,S] -> [B,D,g,g]
        b = x.shape[0]
        patches = F.unfold(x, kernel_size=self.patch, stride=self.patch).transpose(1, 2)
        t = self.patch_embed(patches) + self.pos_embed
        for blk in self.blocks:
            t = blk(t)
        t = self.neck(self.neck_norm(t))
        return t.transpose(1, 2).reshape(b, -1, self.grid, self.grid)


class ToyPromptEncoder(nn.Module):
    """Dense prompt map at input resolution plus a sparse embedding vector."""

    n_coords = 8

    def __init__(self, dim: int, input_size: int, point_sigma: float = 2.0):
        super().__init__()
        self.input_size = input_size
        self.point_sigma = point_sigma
        self.coord_mlp = nn.Sequential(nn.Linear(self.n_coords, dim), nn.GELU(), nn.Linear(dim, dim))
        self.type_embed = nn.Embedding(len(PROMPT_KINDS), dim)
        ys, xs = torch.meshgrid(torch.arange(input_size), torch.arange(input_size), indexing="ij")
        self.register_buffer("yy", ys.float(), persistent=False)
        self.register_buffer("xx", xs.float(), persistent=False)

    def _bumps(self, pts) -> torch.Tensor:
        out = torch.zeros_like(self.xx)
        for x, y in pts:
            out = out + torch.exp(-((self.xx - x) ** 2 + (self.yy - y) ** 2) / (2 * self.point_sigma**2))
        return out

    def dense(self, p: Prompt) -> torch.Tensor:
        s = self.input_size
        if isinstance(p, BoxPrompt):
            m = torch.zeros(s, s)
            m[p.y_min : p.y_max + 1, p.x_min : p.x_max + 1] = 1.0
            return m
        if isinstance(p, PointPrompt):
            return (self._bumps(p.positives) - self._bumps(p.negatives)).clamp(-1.0, 1.0)
        if isinstance(p, CoarseMaskPrompt):
            return torch.from_numpy(np.ascontiguousarray(p.mask, dtype=np.float32))
        raise TypeError(f"not a prompt: {p!r}")

    def coords(self, p: Prompt) -> torch.Tensor:
        s = float(self.input_size)
        v = torch.zeros(self.n_coords)
        if isinstance(p, BoxPrompt):
            v[:4] = torch.tensor([p.x_min, p.y_min, p.x_max, p.y_max], dtype=torch.float32)
        elif isinstance(p, PointPrompt):
            pos = torch.tensor(p.positives, dtype=torch.float32).reshape(-1, 2)
            v[:2] = pos.mean(0)
            v[4:6] = pos.min(0).values
            v[6:8] = pos.max(0).values
            if len(p.negatives):
                v[2:4] = torch.tensor(p.negatives, dtype=torch.float32).mean(0)
        elif isinstance(p, CoarseMaskPrompt):
            verts = torch.tensor(p.vertices, dtype=torch.float32)
            v[:2] = verts.min(0).values
            v[2:4] = verts.max(0).values
            v[4:6] = verts.mean(0)
        return v / s * 2.0 - 1.0

    def forward(self, prompts: Sequence[Prompt]) -> Tuple[torch.Tensor, torch.Tensor]:
        device = self.xx.device
        dense = torch.stack([self.dense(p) for p in prompts]).to(device).unsqueeze(1)
        coords = torch.stack([self.coords(p) for p in prompts]).to(device)
        kinds = torch.tensor([PROMPT_KINDS.index(p.kind) for p in prompts], device=device)
        sparse = self.coord_mlp(coords) + self.type_embed(kinds)
        return sparse, dense


class ToyMaskDecoder(nn.Module):
    def __init__(self, dim: int, patch: int = 16):
        super().__init__()
        self.patch = patch
        self.dense_proj = nn.Conv2d(1, dim, 1)
        self.gate = nn.Linear(dim, dim)
        self.hidden = nn.Conv2d(dim, dim, 1)
        self.coarse_head = nn.Conv2d(dim, 1, 1)
        self.detail_head = nn.Conv2d(dim, patch * patch, 1)
        self.dense_gain = nn.Parameter(torch.tensor(2.0))
        self.bias = nn.Parameter(torch.tensor(-1.0))

    def forward(self, feat: torch.Tensor, sparse: torch.Tensor, dense: torch.Tensor) -> torch.Tensor:
        # feat [D,g,g]; sparse [N,D]; dense [N,1,S,S] -> logits [N,S,S]
        s = dense.shape[-1]
        g = feat.shape[-2:]
        dense_lo = F.adaptive_avg_pool2d(dense, g)
        gate = torch.sigmoid(self.gate(sparse))[:, :, None, None]
        x = feat.unsqueeze(0) * (1.0 + gate) + sparse[:, :, None, None] + self.dense_proj(dense_lo)
        x = F.gelu(self.hidden(x))
        coarse = F.interpolate(self.coarse_head(x), size=(s, s), mode="bilinear", align_corners=False)
        detail = F.pixel_shuffle(self.detail_head(x), self.patch)
        return (coarse + detail + self.dense_gain * dense + self.bias).squeeze(1)


class ToySegmentationModel(SegmentationModel):
    backend = "toy"

    def __init__(
        self,
        feature_dim: int = 64,
        input_size: int = 64,
        patch: int = 16,
        depth: int = 2,
        mean: Sequence[float] = (0.5, 0.5, 0.5),
        std: Sequence[float] = (0.25, 0.25, 0.25),
    ):
        super().__init__(input_size, mean, std)
        self.feature_dim = feature_dim
        self.image_encoder = ToyImageEncoder(feature_dim, input_size, patch, depth)
        self.prompt_encoder = ToyPromptEncoder(feature_dim, input_size)
        self.mask_decoder = ToyMaskDecoder(feature_dim, patch)

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(x)

    def _decode(self, feat: torch.Tensor, prompts: Sequence[Prompt]) -> torch.Tensor:
        sparse, dense = self.prompt_encoder(prompts)
        return self.mask_decoder(feat, sparse, dense)


def build_toy_model(seed: int = 0, feature_dim: int = 64, input_size: int = 64) -> ToySegmentationModel:
    if feature_dim < 4:
        raise ValueError("feature_dim must be >= 4")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ToySegmentationModel(feature_dim=feature_dim, input_size=input_size)


# ---------------------------------------------------------------------------
# pretrained backend (optional; needs the `segment_anything` package and weights)


class PretrainedSegmentationModel(SegmentationModel):
    backend = "pretrained"

    def __init__(self, sam, mean: Sequence[float], std: Sequence[float]):
        super().__init__(sam.image_encoder.img_size, mean, std)
        self.image_encoder = sam.image_encoder
        self.prompt_encoder = sam.prompt_encoder
        self.mask_decoder = sam.mask_decoder

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(x)

    def _decode(self, feat: torch.Tensor, prompts: Sequence[Prompt]) -> torch.Tensor:
        outs = []
        for p in prompts:
            points = boxes = masks = None
            if isinstance(p, BoxPrompt):
                boxes = torch.tensor([[p.x_min, p.y_min, p.x_max, p.y_max]], dtype=torch.float32, device=feat.device)
            elif isinstance(p, PointPrompt):
                xy = list(p.positives) + list(p.negatives)
                labels = [1] * len(p.positives) + [0] * len(p.negatives)
                points = (
                    torch.tensor([xy], dtype=torch.float32, device=feat.device),
                    torch.tensor([labels], dtype=torch.int64, device=feat.device),
                )
            else:
                m = torch.from_numpy(p.mask.astype(np.float32))[None, None].to(feat.device)
                size = self.prompt_encoder.mask_input_size
                masks = F.interpolate(m * 20.0 - 10.0, size=size, mode="bilinear", align_corners=False)
            sparse, dense = self.prompt_encoder(points=points, boxes=boxes, masks=masks)
            low, _ = self.mask_decoder(
                image_embeddings=feat.unsqueeze(0),
                image_pe=self.prompt_encoder.get_dense_pe(),
                sparse_prompt_embeddings=sparse,
                dense_prompt_embeddings=dense,
                multimask_output=False,
            )
            outs.append(F.interpolate(low, size=(self.input_size,) * 2, mode="bilinear", align_corners=False)[0, 0])
        return torch.stack(outs)


def build_model(cfg: BackendConfig) -> SegmentationModel:
    if cfg.backend == "toy":
        model = build_toy_model(cfg.seed, cfg.feature_dim, cfg.input_size)
        model.pixel_mean.copy_(torch.tensor(cfg.mean).view(3, 1, 1))
        model.pixel_std.copy_(torch.tensor(cfg.std).view(3, 1, 1))
        if cfg.pretrained_weights_path:
            path = Path(cfg.pretrained_weights_path)
            if not path.exists():
                raise FileNotFoundError(f"toy weights not found: {path}")
            model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        return model
    try:
        from segment_anything import sam_model_registry
    except ImportError as exc:
        raise ConfigurationError("backend=pretrained needs the 'segment_anything' package") from exc
    if not cfg.pretrained_weights_path:
        raise ConfigurationError("backend=pretrained needs pretrained_weights_path")
    sam = sam_model_registry["vit_b"](checkpoint=cfg.pretrained_weights_path)
    return PretrainedSegmentationModel(sam, cfg.mean, cfg.std)
