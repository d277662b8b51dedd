"""Baseline JPEG boundary for descriptions, and bit-rate accounting.

The encoder is Pillow's libjpeg binding with fixed settings (baseline,
Huffman tables not optimised, no restart markers, grayscale), so identical
inputs give identical bytes for a given libjpeg build.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .imaging import to_uint8

__all__ = [
    "CodecError",
    "CodecConfig",
    "Bitstream",
    "encode",
    "decode",
    "roundtrip",
    "bits_per_pixel",
]


class CodecError(RuntimeError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    qf: int = 10

    def __post_init__(self):
        if not 1 <= int(self.qf) <= 100:
            raise ValueError(f"quality factor must be in [1, 100], got {self.qf}")


@dataclass(frozen=True)
class Bitstream:
    data: bytes
    shape: tuple[int, int]

    def __post_init__(self):
        if not self.data:
            raise CodecError("empty bitstream")

    @property
    def byte_count(self) -> int:
        return len(self.data)


def encode(img, cfg: CodecConfig) -> Bitstream:
    """Quantize ``img`` to 8 bits and encode it as baseline grayscale JPEG."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise CodecError(f"expected a 2-D image, got shape {arr.shape}")
    buf = io.BytesIO()
    try:
        Image.fromarray(to_uint8(arr), mode="L").save(
            buf, format="JPEG", quality=int(cfg.qf), optimize=False, progressive=False
        )
    except Exception as exc:
        raise CodecError(f"JPEG encoding failed: {exc}") from exc
    return Bitstream(buf.getvalue(), (int(arr.shape[0]), int(arr.shape[1])))


def decode(bs: Bitstream | bytes) -> np.ndarray:
    """Decode to a float64 image in ``[0, 1]``; corrupt streams raise :class:`CodecError`."""
    data = bs.data if isinstance(bs, Bitstream) else bytes(bs)
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format != "JPEG":
                raise CodecError(f"not a JPEG stream ({im.format})")
            im.load()
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except CodecError:
        raise
    except Exception as exc:
        raise CodecError(f"JPEG decoding failed: {exc}") from exc
    if isinstance(bs, Bitstream) and arr.shape != tuple(bs.shape):
        raise CodecError(f"decoded size {arr.shape} differs from encoded {bs.shape}")
    return arr


def roundtrip(img, cfg: CodecConfig) -> tuple[np.ndarray, Bitstream]:
    bs = encode(img, cfg)
    return decode(bs), bs


def bits_per_pixel(streams: Sequence[Bitstream], height: int, width: int) -> float:
    """Total transmitted bits (headers included) per source pixel.

    Summed stream by stream so that the rate of several streams equals the
    sum of their individual rates exactly.
    """
    if not streams:
        raise ValueError("no bitstreams given")
    if height * width <= 0:
        raise ValueError("source size must be positive")
    return sum(s.byte_count * 8 / (height * width) for s in streams)
