"""Synthetic multi-domain vessel benchmark, folder ingestion and preprocessing.

Vessel trees are grown as branching random walks from an optic-disc
location, rendered as anti-aliased capsule strokes and thresholded at half
coverage to give the mask. Each domain composites the strokes over its own
background with a radial illumination field, a global contrast change and
additive noise. The angiography modality inverts polarity (bright vessels on
a dark grey background).

Every sample draws from its own generator seeded by
``(seed, domain_id, split, index)``, so results do not depend on generation
order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

REFERENCE_SIZE = 64
SPLITS = ("train", "test")
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".gif", ".ppm", ".pgm")


@dataclass
class DomainSpec:
    domain_id: int
    name: str = ""
    modality: str = "color"  # "color" or "angiography"
    center_gain: float = 1.0  # centre / periphery brightness ratio; 1 is flat
    falloff: float = 2.0  # radial exponent of the illumination profile
    contrast: float = 1.0
    noise_std: float = 0.02
    trunks: Tuple[int, int] = (2, 3)
    width: Tuple[float, float] = (2.0, 3.2)  # px at 64x64; scaled with image size
    tortuosity: float = 0.15
    branch_prob: float = 0.03
    background: Tuple[float, float, float] = (0.5, 0.25, 0.12)
    # colour modality: fractional darkening per channel; angiography: vessel intensity
    vessel: Tuple[float, float, float] = (0.35, 0.6, 0.5)

    def __post_init__(self):
        self.trunks = tuple(int(v) for v in self.trunks)
        self.width = tuple(float(v) for v in self.width)
        self.background = tuple(float(v) for v in self.background)
        self.vessel = tuple(float(v) for v in self.vessel)
        self.validate()

    def validate(self) -> None:
        if self.modality not in ("color", "angiography"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.center_gain <= 0 or self.falloff <= 0 or self.contrast <= 0:
            raise ValueError("illumination gain, falloff and contrast must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        lo, hi = self.trunks
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid trunk range {self.trunks}")
        wlo, whi = self.width
        if wlo <= 0 or whi < wlo:
            raise ValueError(f"invalid width range {self.width}")
        if self.tortuosity < 0 or not 0 <= self.branch_prob <= 1:
            raise ValueError("tortuosity must be >= 0 and branch_prob in [0, 1]")


def default_specs() -> List[DomainSpec]:
    """Four domains: bright centre, low contrast, thin vessels, angiography analogue."""
    return [
        DomainSpec(0, "bright-center", center_gain=2.2, falloff=2.0, contrast=1.0,
                   noise_std=0.02, background=(0.42, 0.2, 0.09)),
        DomainSpec(1, "low-contrast", center_gain=1.2, falloff=2.0, contrast=0.45,
                   noise_std=0.03, background=(0.7, 0.42, 0.25)),
        DomainSpec(2, "thin-vessel", center_gain=1.5, falloff=3.0, contrast=1.0,
                   noise_std=0.02, trunks=(3, 4), width=(1.6, 2.5), tortuosity=0.25,
                   background=(0.6, 0.28, 0.14)),
        DomainSpec(3, "angiography", modality="angiography", center_gain=1.6, falloff=2.0,
                   noise_std=0.04, background=(0.14, 0.14, 0.14), vessel=(0.8, 0.8, 0.8)),
    ]


@dataclass
class DomainDataset:
    images: torch.Tensor  # (N, 3, H, W), values in [0, 1]
    masks: torch.Tensor  # (N, 1, H, W), values in {0, 1}
    domain_id: int
    split: str = "train"
    name: str = ""
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.images.shape[0] < 1:
            raise ValueError("dataset has no samples")
        if self.images.shape[0] != self.masks.shape[0]:
            raise ValueError("images and masks differ in count")
        if self.images.shape[-2:] != self.masks.shape[-2:]:
            raise ValueError("images and masks differ in size")
        if not self.names:
            self.names = [f"{self.domain_id}-{self.split}-{i:04d}" for i in range(len(self))]

    def __len__(self) -> int:
        return self.images.shape[0]

    def fingerprints(self) -> List[str]:
        """Content hash per sample."""
        return [content_hash(img) for img in self.images]


def content_hash(image: torch.Tensor) -> str:
    return hashlib.sha1(image.contiguous().numpy().tobytes()).hexdigest()[:16]


def _sample_rng(seed: int, domain_id: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, domain_id, SPLITS.index(split), index]))


def grow_tree(rng: np.random.Generator, spec: DomainSpec, size: int) -> np.ndarray:
    """Branching random-walk centrelines; returns ``(M, 5)`` rows ``x0, y0, x1, y1, width``."""
    scale = size / REFERENCE_SIZE
    step = max(1.0, scale)
    cx, cy = rng.uniform(0.3, 0.7, size=2) * size
    n_trunks = int(rng.integers(spec.trunks[0], spec.trunks[1] + 1))
    start = rng.uniform(0, 2 * np.pi)
    stack = []
    for i in range(n_trunks):
        angle = start + 2 * np.pi * i / n_trunks + rng.normal(0, 0.3)
        stack.append((cx, cy, angle, rng.uniform(*spec.width) * scale, 0))
    min_width = spec.width[0] * scale * 0.75
    segs = []
    while stack:
        x, y, angle, width, depth = stack.pop()
        max_len = size * rng.uniform(0.45, 0.8) * (0.55 ** depth)
        travelled = 0.0
        while travelled < max_len:
            angle += spec.tortuosity * rng.normal()
            nx, ny = x + step * np.cos(angle), y + step * np.sin(angle)
            segs.append((x, y, nx, ny, width))
            x, y = nx, ny
            travelled += step
            if not (-2 <= x <= size + 2 and -2 <= y <= size + 2):
                break
            if depth < 2 and rng.random() < spec.branch_prob:
                side = rng.choice([-1.0, 1.0])
                stack.append((x, y, angle + side * rng.uniform(0.5, 1.1),
                              max(width * 0.75, min_width), depth + 1))
            width = max(width * 0.995, min_width)
    return np.asarray(segs, dtype=np.float64).reshape(-1, 5)


def render_coverage(segments: np.ndarray, size: int, chunk: int = 64) -> np.ndarray:
    """Anti-aliased stroke coverage in [0, 1], ``(size, size)``."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs.ravel()[:, None] + 0.5
    py = ys.ravel()[:, None] + 0.5
    cov = np.zeros(size * size)
    for s in range(0, len(segments), chunk):
        x0, y0, x1, y1, w = (segments[s:s + chunk, i][None] for i in range(5))
        dx, dy = x1 - x0, y1 - y0
        t = ((px - x0) * dx + (py - y0) * dy) / np.maximum(dx * dx + dy * dy, 1e-12)
        t = np.clip(t, 0, 1)
        d = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
        cov = np.maximum(cov, np.clip(w / 2 + 0.5 - d, 0, 1).max(axis=1))
    return cov.reshape(size, size)


def illumination(spec: DomainSpec, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    r = np.hypot(xs - size / 2, ys - size / 2) / (size / np.sqrt(2))
    return 1.0 + (spec.center_gain - 1.0) * (1.0 - np.clip(r, 0, 1) ** spec.falloff)


def clean_composite(coverage: np.ndarray, spec: DomainSpec) -> np.ndarray:
    """Noise-free ``(3, H, W)`` image for a coverage map."""
    size = coverage.shape[0]
    illum = illumination(spec, size)[None]
    bg = np.asarray(spec.background)[:, None, None] * illum
    v = np.asarray(spec.vessel)[:, None, None]
    cov = coverage[None]
    if spec.modality == "color":
        img = bg * (1 - v * cov)
    else:
        img = bg + (v * np.sqrt(illum) - bg) * cov
    mean = img.mean(axis=(1, 2), keepdims=True)
    img = mean + spec.contrast * (img - mean)
    return np.clip(img, 0, 1)


def generate_sample(spec: DomainSpec, seed: int, index: int, split: str = "train",
                    size: int = REFERENCE_SIZE):
    rng = _sample_rng(seed, spec.domain_id, split, index)
    coverage = render_coverage(grow_tree(rng, spec, size), size)
    img = clean_composite(coverage, spec)
    if spec.noise_std > 0:
        img = np.clip(img + rng.normal(0, spec.noise_std, size=img.shape), 0, 1)
    return img.astype(np.float32), (coverage >= 0.5).astype(np.float32)[None]


def generate_domain(spec: DomainSpec, n: int, seed: int, split: str = "train",
                    size: int = REFERENCE_SIZE) -> DomainDataset:
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    spec.validate()
    pairs = [generate_sample(spec, seed, i, split, size) for i in range(n)]
    images = torch.from_numpy(np.stack([p[0] for p in pairs]))
    masks = torch.from_numpy(np.stack([p[1] for p in pairs]))
    return DomainDataset(images, masks, spec.domain_id, split, spec.name)


def generate_benchmark(specs: Sequence[DomainSpec], n_train: int, n_test: int, seed: int,
                       size: int = REFERENCE_SIZE) -> Dict[int, Dict[str, DomainDataset]]:
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate domain ids {ids}")
    return {
        s.domain_id: {
            "train": generate_domain(s, n_train, seed, "train", size),
            "test": generate_domain(s, n_test, seed, "test", size),
        }
        for s in specs
    }


def benchmark_manifest(specs: Sequence[DomainSpec], n_train: int, n_test: int, seed: int,
                       size: int) -> dict:
    return {"version": 1, "seed": seed, "size": size, "n_train": n_train, "n_test": n_test,
            "domains": [asdict(s) for s in specs]}


def specs_from_manifest(manifest: dict) -> List[DomainSpec]:
    return [DomainSpec(**d) for d in manifest["domains"]]


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 255), 0, 255).astype(np.uint8)


def write_benchmark(root: Union[str, Path], specs: Sequence[DomainSpec], n_train: int,
                    n_test: int, seed: int, size: int = REFERENCE_SIZE) -> Path:
    """Write ``root/<domain>/<split>/{images,masks}/*.png`` plus ``manifest.json``."""
    from PIL import Image

    root = Path(root)
    bench = generate_benchmark(specs, n_train, n_test, seed, size)
    for spec in specs:
        for split, ds in bench[spec.domain_id].items():
            img_dir = root / domain_dirname(spec) / split / "images"
            mask_dir = root / domain_dirname(spec) / split / "masks"
            img_dir.mkdir(parents=True, exist_ok=True)
            mask_dir.mkdir(parents=True, exist_ok=True)
            for i in range(len(ds)):
                stem = f"{i:04d}"
                arr = ds.images[i].permute(1, 2, 0).numpy()
                Image.fromarray(_to_uint8(arr)).save(img_dir / f"{stem}.png")
                Image.fromarray(_to_uint8(ds.masks[i, 0].numpy())).save(mask_dir / f"{stem}.png")
    manifest = benchmark_manifest(specs, n_train, n_test, seed, size)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return root


def domain_dirname(spec: DomainSpec) -> str:
    return f"{spec.domain_id}-{spec.name}" if spec.name else str(spec.domain_id)


def _list_images(folder: Path) -> Dict[str, Path]:
    return {p.stem: p for p in sorted(folder.iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def load_folder(image_dir: Union[str, Path], mask_dir: Union[str, Path], domain_id: int = 0,
                split: str = "train", names: Optional[Sequence[str]] = None,
                target_size: Optional[int] = None, pad_value=(0.5, 0.5, 0.5)) -> DomainDataset:
    """Load paired images/masks matched by filename stem.

    Masks are binarised at half intensity. ``names`` restricts loading to an
    explicit list of stems (file-level split assignment). Without
    ``target_size`` all images must share one size; with it, images are
    resized and padded with ``pad_value`` (the pixel mean by default).
    """
    from PIL import Image

    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"{d}: not a directory")
    imgs, masks = _list_images(image_dir), _list_images(mask_dir)
    stems = list(names) if names is not None else sorted(imgs)
    if not stems:
        raise ValueError(f"{image_dir}: no samples")
    errors = []
    for s in stems:
        if s not in imgs:
            errors.append(f"{image_dir / s}: image missing")
        if s not in masks:
            errors.append(f"{s}: no matching mask in {mask_dir}")
    if names is None:
        errors += [f"{mask_dir / s}: mask has no matching image" for s in sorted(set(masks) - set(imgs))]
    if errors:
        raise ValueError("; ".join(errors))
    out_imgs, out_masks = [], []
    for s in stems:
        try:
            with Image.open(imgs[s]) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            with Image.open(masks[s]) as im:
                m = _mask_array(im)
        except OSError as exc:
            raise ValueError(f"{s}: unreadable file ({exc})") from exc
        if img.shape[:2] != m.shape:
            raise ValueError(f"{s}: image size {img.shape[:2]} != mask size {m.shape}")
        img_t = torch.from_numpy(img).permute(2, 0, 1).contiguous()
        mask_t = torch.from_numpy((m > 0.5).astype(np.float32))[None]
        if target_size is not None:
            img_t, info = resize_pad(img_t, target_size, pad_value)
            mask_t = mask_forward(mask_t, info)
        out_imgs.append(img_t)
        out_masks.append(mask_t)
    sizes = {tuple(i.shape) for i in out_imgs}
    if len(sizes) != 1:
        raise ValueError(f"{image_dir}: mixed image sizes {sorted(sizes)}; pass target_size")
    return DomainDataset(torch.stack(out_imgs), torch.stack(out_masks), domain_id, split,
                         image_dir.parent.name, list(stems))


def _mask_array(im) -> np.ndarray:
    arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1) if arr.shape[-1] >= 3 else arr[..., 0]
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64) / max(float(arr.max()), 1.0)


def load_benchmark(root: Union[str, Path], domain_ids: Optional[Sequence[int]] = None,
                   target_size: Optional[int] = None) -> Dict[int, Dict[str, DomainDataset]]:
    """Load a tree written by :func:`write_benchmark` (or laid out the same way)."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        dirs = {s.domain_id: root / domain_dirname(s)
                for s in specs_from_manifest(json.loads(manifest_path.read_text()))}
    else:
        dirs = {}
        for d in sorted(p for p in root.iterdir() if p.is_dir()):
            dirs[int(d.name.split("-", 1)[0])] = d
    if not dirs:
        raise ValueError(f"{root}: no domains found")
    out = {}
    for k, d in sorted(dirs.items()):
        if domain_ids is not None and k not in domain_ids:
            continue
        out[k] = {split: load_folder(d / split / "images", d / split / "masks", k, split,
                                     target_size=target_size)
                  for split in SPLITS if (d / split).is_dir()}
    return out


class PreprocessInfo(NamedTuple):
    original: Tuple[int, int]
    resized: Tuple[int, int]
    target: int


def _resize_longest(image: torch.Tensor, target_size: int):
    h, w = image.shape[-2:]
    scale = target_size / max(h, w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    if (nh, nw) != (h, w):
        image = F.interpolate(image[None], size=(nh, nw), mode="bilinear",
                              align_corners=False, antialias=scale < 1)[0]
    return image, PreprocessInfo((h, w), (nh, nw), target_size)


def _pad_square(image: torch.Tensor, info: PreprocessInfo, value=0.0) -> torch.Tensor:
    nh, nw = info.resized
    pad = (0, info.target - nw, 0, info.target - nh)
    if isinstance(value, (int, float)):
        return F.pad(image, pad, value=float(value))
    return torch.cat([F.pad(ch[None], pad, value=float(v)) for ch, v in zip(image, value)])


def resize_pad(image: torch.Tensor, target_size: int, pad_value=0.0):
    """Longest-side resize to ``target_size`` then bottom/right pad to a square.

    ``pad_value`` may be per channel; padding raw images with the pixel mean
    makes the padded area normalise to exactly zero.
    """
    image, info = _resize_longest(image, target_size)
    return _pad_square(image, info, pad_value), info


def normalize(image: torch.Tensor, mean, std) -> torch.Tensor:
    mean = torch.as_tensor(mean, dtype=image.dtype)[:, None, None]
    std = torch.as_tensor(std, dtype=image.dtype)[:, None, None]
    return (image - mean) / std


def preprocess(image: torch.Tensor, target_size: int, mean=(0.5, 0.5, 0.5),
               std=(0.25, 0.25, 0.25)):
    """Resize longest side, normalise per channel, zero-pad to square.

    Returns ``(image, PreprocessInfo)``; the info inverts the geometry with
    :func:`postprocess_mask`.
    """
    if target_size % 16:
        raise ValueError(f"target size {target_size} is not divisible by 16")
    if not torch.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    image, info = _resize_longest(image, target_size)
    return _pad_square(normalize(image, mean, std), info, 0.0), info


def mask_forward(mask: torch.Tensor, info: PreprocessInfo) -> torch.Tensor:
    """Map a ``(1, H, W)`` mask into the padded model frame (nearest neighbour)."""
    m = mask
    if tuple(m.shape[-2:]) != tuple(info.resized):
        m = F.interpolate(m[None], size=info.resized, mode="nearest")[0]
    return _pad_square(m, info, 0.0)


def postprocess_mask(mask: torch.Tensor, info: PreprocessInfo, mode: str = "nearest") -> torch.Tensor:
    """Crop padding and resize back to the original frame.

    Use ``mode='nearest'`` for hard masks and ``'bilinear'`` for logits.
    """
    nh, nw = info.resized
    m = mask[..., :nh, :nw]
    if (nh, nw) == tuple(info.original):
        return m
    lead = m.shape[:-2]
    m = m.reshape(1, -1, nh, nw)
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    m = F.interpolate(m, size=info.original, mode=mode, **kwargs)
    return m.reshape(*lead, *info.original)
