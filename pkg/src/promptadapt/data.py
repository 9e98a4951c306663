"""Target-domain datasets: loaders, splits and the synthetic blob domain."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from skimage.draw import ellipse as draw_ellipse
from skimage.draw import polygon as draw_polygon
from skimage.draw import polygon2mask

from .errors import ConfigurationError
from .model import read_key_values

logger = logging.getLogger(__name__)

FORMATS = ("coco-json", "mask-dirs", "synthetic")

# synthetic-domain corruption
NOISE_SIGMA = 0.2
BLUR_SIGMA = 1.0


@dataclass
class Sample:
    id: str
    instances: List[np.ndarray]
    image_path: Optional[str] = None
    _image: Optional[torch.Tensor] = field(default=None, repr=False)

    @property
    def image(self) -> torch.Tensor:
        """Float [3,H,W] in [0,1]; read from ``image_path`` on first access."""
        if self._image is None:
            if self.image_path is None:
                raise ValueError(f"sample {self.id} has neither pixels nor a path")
            self._image = read_image(self.image_path)
        return self._image

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.instances[0].shape)


@dataclass
class DatasetManifest:
    name: str
    root: str = "."
    format: str = "synthetic"
    split_ratio: float = 0.8
    seed: int = 0
    annotation: Optional[str] = None  # coco-json file, relative to root
    kind: str = "clean"  # synthetic only
    n_images: int = 100  # synthetic only

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ConfigurationError(f"unknown annotation format {self.format!r}; expected one of {FORMATS}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigurationError("split_ratio must lie in (0, 1)")


def parse_manifest(pairs: dict, base: Optional[Path] = None) -> DatasetManifest:
    kw = dict(pairs)
    for key in ("seed", "n_images"):
        if key in kw:
            kw[key] = int(kw[key])
    if "split_ratio" in kw:
        kw["split_ratio"] = float(kw["split_ratio"])
    known = DatasetManifest.__dataclass_fields__
    unknown = set(kw) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown manifest keys: {sorted(unknown)}")
    if "name" not in kw:
        raise ConfigurationError("manifest needs a 'name'")
    if base is not None and not Path(kw.get("root", ".")).is_absolute():
        kw["root"] = str((base / kw.get("root", ".")).resolve())
    return DatasetManifest(**kw)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(read_key_values(path), base=path.parent)


SYNTHETIC_ONLY = ("kind", "n_images")


def manifest_items(manifest: DatasetManifest) -> List[Tuple[str, object]]:
    """Fields worth writing out; synthetic-only ones are dropped for file datasets."""
    return [
        (k, v)
        for k, v in manifest.__dict__.items()
        if v is not None and (manifest.format == "synthetic" or k not in SYNTHETIC_ONLY)
    ]


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in manifest_items(manifest):
            fh.write(f"{key} = {value}\n")


# ---------------------------------------------------------------------------
# I/O


def read_image(path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) > 127
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc


def rasterize_coco_polygons(polygons: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    """Pixel (r, c) is foreground when its centre (c+0.5, r+0.5) lies inside a polygon."""
    out = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        xy = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        rc = np.stack([xy[:, 1] - 0.5, xy[:, 0] - 0.5], axis=1)
        out |= polygon2mask((height, width), rc)
    return out


def _load_coco(manifest: DatasetManifest) -> List[Sample]:
    root = Path(manifest.root)
    if not manifest.annotation:
        raise ConfigurationError("coco-json manifests need an 'annotation' file")
    ann_path = root / manifest.annotation
    if not ann_path.exists():
        raise FileNotFoundError(f"annotation file not found: {ann_path}")
    with open(ann_path, encoding="utf-8") as fh:
        coco = json.load(fh)
    images = {}
    for i, rec in enumerate(coco.get("images", [])):
        try:
            images[rec["id"]] = rec
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{ann_path}: malformed image record {i}") from exc
    masks: dict = {k: [] for k in images}
    for i, ann in enumerate(coco.get("annotations", [])):
        try:
            img = images[ann["image_id"]]
            seg = ann["segmentation"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{ann_path}: malformed annotation record {i}") from exc
        if not isinstance(seg, list):
            raise ValueError(f"{ann_path}: annotation {i} uses RLE, only polygons are supported")
        m = rasterize_coco_polygons(seg, int(img["height"]), int(img["width"]))
        if m.any():
            masks[ann["image_id"]].append(m)
    samples = []
    for image_id in sorted(images, key=str):
        if not masks[image_id]:
            continue
        path = root / images[image_id]["file_name"]
        if not path.exists():
            raise FileNotFoundError(f"image not found: {path}")
        samples.append(Sample(id=str(image_id), instances=masks[image_id], image_path=str(path)))
    return samples


def _load_mask_dirs(manifest: DatasetManifest) -> List[Sample]:
    root = Path(manifest.root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"expected {img_dir} and {mask_dir}")
    samples = []
    for d in sorted(p for p in mask_dir.iterdir() if p.is_dir()):
        image_path = img_dir / f"{d.name}.png"
        if not image_path.exists():
            raise FileNotFoundError(f"image not found: {image_path}")
        files = sorted(d.glob("*.png"), key=lambda p: (len(p.stem), p.stem))
        inst = [m for m in (read_mask(f) for f in files) if m.any()]
        if inst:
            samples.append(Sample(id=d.name, instances=inst, image_path=str(image_path)))
    return samples


def save_mask_dirs(samples: Sequence[Sample], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        arr = (s.image.permute(1, 2, 0).numpy() * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
        Image.fromarray(arr).save(root / "images" / f"{s.id}.png")
        d = root / "masks" / s.id
        d.mkdir(parents=True, exist_ok=True)
        for k, m in enumerate(s.instances):
            Image.fromarray(m.astype(np.uint8) * 255).save(d / f"{k}.png")


def load_dataset(manifest: DatasetManifest) -> List[Sample]:
    if manifest.format == "synthetic":
        return make_toy_domain(manifest.kind, manifest.n_images, manifest.seed)
    root = Path(manifest.root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root not found: {root}")
    if manifest.format == "coco-json":
        samples = _load_coco(manifest)
    else:
        samples = _load_mask_dirs(manifest)
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate sample ids in {root}")
    return samples


def split(samples: Sequence[Sample], ratio: float = 0.8, seed: int = 0) -> Tuple[List[Sample], List[Sample]]:
    """Disjoint seeded split; each part keeps the input order."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    n = len(samples)
    perm = np.random.default_rng(seed).permutation(n)
    n_adapt = int(round(ratio * n))
    chosen = set(perm[:n_adapt].tolist())
    adapt = [s for i, s in enumerate(samples) if i in chosen]
    test = [s for i, s in enumerate(samples) if i not in chosen]
    return adapt, test


# ---------------------------------------------------------------------------
# synthetic blob domain


def _blob(rng: np.random.Generator, size: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    cy, cx = rng.uniform(8, size - 8, size=2)
    if rng.random() < 0.5:
        ry, rx = rng.uniform(5, 13, size=2)
        rr, cc = draw_ellipse(cy, cx, ry, rx, shape=m.shape, rotation=rng.uniform(0, np.pi))
    else:
        n = int(rng.integers(3, 6))
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        rad = rng.uniform(6, 14, size=n)
        rr, cc = draw_polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), shape=m.shape)
    m[rr, cc] = True
    return m


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.05, 0.3, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    grad = gy * yy + gx * xx
    texture = ndimage.gaussian_filter(rng.normal(0, 1, size=(size, size)), 3) * 0.15
    return np.clip(base[:, None, None] + (grad + texture)[None], 0.0, 1.0)


def _clean_image(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, List[np.ndarray]]:
    img = _background(rng, size)
    n_blobs = int(rng.integers(2, 6))
    owner = np.full((size, size), -1, dtype=np.int64)
    shapes: List[np.ndarray] = []
    while len(shapes) < n_blobs:
        m = _blob(rng, size)
        visible_before = [(owner == k).sum() for k in range(len(shapes))]
        trial = owner.copy()
        trial[m] = len(shapes)
        # keep every instance at least half visible and non-trivial
        ok = m.sum() >= 20 and all(
            (trial == k).sum() >= max(20, 0.5 * shapes[k].sum()) for k in range(len(shapes))
        )
        if not ok:
            continue
        owner = trial
        shapes.append(m)
    for k, m in enumerate(shapes):
        color = rng.uniform(0.45, 1.0, size=3)
        color[rng.integers(3)] *= rng.uniform(0.3, 1.0)
        shade = 1.0 + ndimage.gaussian_filter(rng.normal(0, 1, size=(size, size)), 2) * 0.1
        vis = owner == k
        img[:, vis] = np.clip(color[:, None] * shade[vis][None], 0.0, 1.0)
    return img, [owner == k for k in range(len(shapes))]


def corrupt(img: np.ndarray, rng: np.random.Generator, noise: float = NOISE_SIGMA, blur: float = BLUR_SIGMA) -> np.ndarray:
    """Gaussian blur followed by additive Gaussian noise, clipped to [0, 1]."""
    out = ndimage.gaussian_filter(img, sigma=(0, blur, blur)) if blur > 0 else img.copy()
    out = out + rng.normal(0.0, noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def make_toy_domain(kind: str, n_images: int, seed: int = 0, size: int = 64) -> List[Sample]:
    """Images of 2-5 coloured blobs with exact instance masks.

    ``kind="corrupted"`` draws the same scenes as ``"clean"`` for a given seed,
    then blurs them and adds noise; masks are identical between the two.
    """
    if kind not in ("clean", "corrupted"):
        raise ValueError(f"kind must be 'clean' or 'corrupted', got {kind!r}")
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    samples = []
    for i in range(n_images):
        img, masks = _clean_image(np.random.default_rng([seed, i]), size)
        if kind == "corrupted":
            img = corrupt(img, np.random.default_rng([seed, i, 1]))
        samples.append(
            Sample(
                id=f"{kind}-{seed}-{i:05d}",
                instances=masks,
                _image=torch.from_numpy(img.astype(np.float32)),
            )
        )
    return samples
