"""Image I/O, patch preparation, poly-phase splitting and quality metrics.

Images are single-channel rasters with values in ``[0, 1]``.  Functions that
take an image accept either a 2-D ``numpy`` array or a ``torch`` tensor whose
last two dimensions are height and width; the array type of the input is
preserved on output unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

__all__ = [
    "ImageFormatError",
    "SsimConfig",
    "DescriptionPair",
    "PatchSet",
    "load_image",
    "save_image",
    "to_uint8",
    "prepare_patches",
    "save_patches",
    "load_patches",
    "polyphase_split",
    "polyphase_embed",
    "upsample_linear",
    "psnr",
    "ssim",
    "ssim_map",
    "PSNR_INF",
]

# sentinel for identical images
PSNR_INF = math.inf

AUGMENTATIONS = ("crop", "flip", "rotate")


class ImageFormatError(ValueError):
    """Raised for images that cannot be used (bad shape, odd size, ...)."""


@dataclass(frozen=True)
class SsimConfig:
    c1: float = 1e-4
    c2: float = 9e-4
    window: int = 8

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM constants must be positive")
        if self.window < 2:
            raise ValueError("SSIM window must be at least 2 pixels")


@dataclass
class DescriptionPair:
    """The two half-resolution descriptions of one source image."""

    a: np.ndarray | torch.Tensor
    b: np.ndarray | torch.Tensor

    def __post_init__(self):
        if tuple(self.a.shape) != tuple(self.b.shape):
            raise ImageFormatError(
                f"descriptions differ in shape: {tuple(self.a.shape)} vs {tuple(self.b.shape)}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.a.shape)


@dataclass
class PatchSet:
    patches: np.ndarray  # (n, size, size), float32 in [0, 1]
    sources: list[str] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.patches.shape[0])

    @property
    def patch_size(self) -> int:
        return int(self.patches.shape[-1])


# ---------------------------------------------------------------------------
# I/O


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit raster as a float64 luma image in ``[0, 1]``.

    Color inputs are converted with the ITU-R BT.601 luma weights (Pillow's
    ``"L"`` conversion).
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.width == 0 or im.height == 0:
                raise ImageFormatError(f"{path}: zero-dimension image")
            if im.mode not in ("L", "1"):
                im = im.convert("RGB").convert("L")
            else:
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except FileNotFoundError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.size == 0:
        raise ImageFormatError(f"{path}: zero-dimension image")
    return arr.astype(np.float64) / 255.0


def to_uint8(img) -> np.ndarray:
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def save_image(img, path: str | Path) -> None:
    arr = to_uint8(img)
    if arr.ndim != 2:
        arr = arr.reshape(arr.shape[-2:])
    Image.fromarray(arr, mode="L").save(Path(path))


# ---------------------------------------------------------------------------
# patch preparation


def _augment(patch: np.ndarray, flip: str, rot: int) -> np.ndarray:
    if flip == "h":
        patch = patch[:, ::-1]
    elif flip == "v":
        patch = patch[::-1, :]
    if rot:
        patch = np.rot90(patch, k=rot // 90)
    return patch


def prepare_patches(
    images: Sequence[np.ndarray],
    patch_size: int = 160,
    total: int = 3200,
    augmentations: Sequence[str] = AUGMENTATIONS,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> PatchSet:
    """Cut ``total`` augmented square patches from ``images``.

    Sources are visited round-robin.  Each patch draws a crop offset, a flip
    (none / horizontal / vertical) and a rotation (0/90/180/270 degrees) from
    a generator seeded with ``seed``; disabled augmentations fall back to the
    top-left crop, no flip and no rotation.
    """
    unknown = set(augmentations) - set(AUGMENTATIONS)
    if unknown:
        raise ValueError(f"unknown augmentations: {sorted(unknown)}")
    if names is None:
        names = [f"image{i:04d}" for i in range(len(images))]
    for img, name in zip(images, names):
        if img.ndim != 2:
            raise ImageFormatError(f"{name}: expected a single-channel image")
        if img.shape[0] < patch_size or img.shape[1] < patch_size:
            raise ImageFormatError(
                f"{name}: {img.shape[0]}x{img.shape[1]} is smaller than patch size {patch_size}"
            )
    if total == 0:
        return PatchSet(np.zeros((0, patch_size, patch_size), np.float32), [], [])
    if not images:
        raise ValueError("no source images")

    rng = np.random.default_rng(seed)
    out = np.empty((total, patch_size, patch_size), np.float32)
    sources, records = [], []
    for k in range(total):
        idx = k % len(images)
        img = images[idx]
        y = x = 0
        if "crop" in augmentations:
            y = int(rng.integers(0, img.shape[0] - patch_size + 1))
            x = int(rng.integers(0, img.shape[1] - patch_size + 1))
        flip = str(rng.choice(["none", "h", "v"])) if "flip" in augmentations else "none"
        rot = int(rng.choice([0, 90, 180, 270])) if "rotate" in augmentations else 0
        patch = _augment(img[y : y + patch_size, x : x + patch_size], flip, rot)
        out[k] = patch
        sources.append(names[idx])
        records.append({"source": names[idx], "y": y, "x": x, "flip": flip, "rot": rot})
    return PatchSet(out, sources, records)


MANIFEST = "manifest.txt"


def save_patches(ps: PatchSet, directory: str | Path) -> Path:
    """Write patches as PNG files plus a text manifest; returns the manifest path.

    Manifest lines are ``file source y x flip rot``, one per patch.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, rec in enumerate(ps.records):
        fname = f"patch_{k:06d}.png"
        save_image(ps.patches[k], directory / fname)
        lines.append(f"{fname} {rec['source']} {rec['y']} {rec['x']} {rec['flip']} {rec['rot']}")
    manifest = directory / MANIFEST
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def load_patches(directory: str | Path) -> PatchSet:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    patches, sources, records = [], [], []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        fname, source, y, x, flip, rot = line.split()
        patches.append(load_image(directory / fname).astype(np.float32))
        sources.append(source)
        records.append({"source": source, "y": int(y), "x": int(x), "flip": flip, "rot": int(rot)})
    if not patches:
        return PatchSet(np.zeros((0, 0, 0), np.float32), [], [])
    return PatchSet(np.stack(patches), sources, records)


# ---------------------------------------------------------------------------
# poly-phase descriptions


def _check_even(img) -> None:
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise ImageFormatError(f"image size {h}x{w} must be even in both dimensions")


def polyphase_split(img) -> DescriptionPair:
    """Diagonal poly-phase split: A takes the top-left, B the bottom-right
    sample of every 2x2 block."""
    _check_even(img)
    return DescriptionPair(img[..., 0::2, 0::2], img[..., 1::2, 1::2])


def polyphase_embed(pair: DescriptionPair):
    """Place a description pair back on the full grid.

    Returns ``(image, mask)``; unfilled positions are zero and ``mask`` marks
    the filled ones.
    """
    a, b = pair.a, pair.b
    if tuple(a.shape) != tuple(b.shape):
        raise ImageFormatError("descriptions differ in shape")
    h, w = a.shape[-2:]
    shape = tuple(a.shape[:-2]) + (2 * h, 2 * w)
    if isinstance(a, torch.Tensor):
        out = a.new_zeros(shape)
        mask = torch.zeros(shape, dtype=torch.bool, device=a.device)
    else:
        out = np.zeros(shape, dtype=np.result_type(a, b))
        mask = np.zeros(shape, dtype=bool)
    out[..., 0::2, 0::2] = a
    out[..., 1::2, 1::2] = b
    mask[..., 0::2, 0::2] = True
    mask[..., 1::2, 1::2] = True
    return out, mask


# ---------------------------------------------------------------------------
# resampling


def _as_tensor(img) -> tuple[torch.Tensor, bool]:
    if isinstance(img, torch.Tensor):
        return img, True
    return torch.as_tensor(np.asarray(img, dtype=np.float64)), False


def _upsample_axis(x: torch.Tensor, dim: int) -> torch.Tensor:
    # half-pixel aligned linear interpolation, edge samples replicated
    n = x.shape[dim]
    prev = torch.cat([x.narrow(dim, 0, 1), x.narrow(dim, 0, n - 1)], dim=dim)
    nxt = torch.cat([x.narrow(dim, 1, n - 1), x.narrow(dim, n - 1, 1)], dim=dim)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = torch.stack([even, odd], dim=dim + 1 if dim >= 0 else dim)
    new_shape = list(x.shape)
    new_shape[dim] = 2 * n
    return out.reshape(new_shape)


def upsample_linear(img, factor: int = 2, clamp: bool = True):
    """Bilinear 2x up-sampling with half-pixel sample centres.

    ``clamp=False`` keeps raw values, which training needs so that gradients
    survive out-of-range network outputs.
    """
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    x, is_tensor = _as_tensor(img)
    out = _upsample_axis(_upsample_axis(x, x.dim() - 2), x.dim() - 1)
    if clamp:
        out = out.clamp(0.0, 1.0)
    return out if is_tensor else out.numpy()


# ---------------------------------------------------------------------------
# metrics


def psnr(x, y) -> float:
    """PSNR in dB on the 8-bit scale; returns ``PSNR_INF`` for identical inputs."""
    xt, _ = _as_tensor(x)
    yt, _ = _as_tensor(y)
    if xt.shape != yt.shape:
        raise ImageFormatError(f"shape mismatch: {tuple(xt.shape)} vs {tuple(yt.shape)}")
    diff = (xt.double() - yt.double()) * 255.0
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(255.0**2 / mse)


def ssim_map(x: torch.Tensor, y: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Per-window SSIM over all valid positions of a uniform window (stride 1).

    Inputs are ``(..., H, W)`` tensors; the result has shape
    ``(..., H - w + 1, W - w + 1)``.  Differentiable.
    """
    if x.shape != y.shape:
        raise ImageFormatError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    h, w = x.shape[-2:]
    k = cfg.window
    if h < k or w < k:
        raise ImageFormatError(f"image {h}x{w} is smaller than the {k}x{k} SSIM window")
    lead = x.shape[:-2]
    x4 = x.reshape(-1, 1, h, w)
    y4 = y.reshape(-1, 1, h, w)

    def pool(t):
        return F.avg_pool2d(t, k, stride=1)

    mu_x = pool(x4)
    mu_y = pool(y4)
    # sigma terms use identical op order for x*x and x*y so ssim(X, X) == 1 exactly
    var_x = pool(x4 * x4) - mu_x * mu_x
    var_y = pool(y4 * y4) - mu_y * mu_y
    cov = pool(x4 * y4) - mu_x * mu_y
    num = (2 * mu_x * mu_y + cfg.c1) * (2 * cov + cfg.c2)
    den = (mu_x * mu_x + mu_y * mu_y + cfg.c1) * (var_x + var_y + cfg.c2)
    out = num / den
    return out.reshape(*lead, out.shape[-2], out.shape[-1])


def ssim(x, y, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over all valid window positions, computed in float64."""
    xt, _ = _as_tensor(x)
    yt, _ = _as_tensor(y)
    with torch.no_grad():
        return float(ssim_map(xt.double(), yt.double(), cfg).mean())
