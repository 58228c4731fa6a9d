"""Exact parity arithmetic over 8-bit pixels and the +/-1 trigger injection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:
    from .backdoor import DetectorConfig

SCALE = 10000

# Canonical parity oracle for every 8-bit value: (v * 10000) // 255 in exact
# integer arithmetic. All floating-point quantizers must agree with this table.
_Q = (np.arange(256, dtype=np.int64) * SCALE) // 255
_Q_EVEN = (_Q % 2) == 0


@dataclass(frozen=True)
class PixelImage:
    """8-bit raster stored channel-major, row-major: data[c*H*W + h*W + w]."""

    channels: int
    height: int
    width: int
    data: bytes

    def __post_init__(self):
        if min(self.channels, self.height, self.width) <= 0:
            raise ValueError("image dimensions must be positive")
        expect = self.channels * self.height * self.width
        if len(self.data) != expect:
            raise ValueError(f"data length {len(self.data)} != C*H*W = {expect}")

    @property
    def n(self) -> int:
        return self.channels * self.height * self.width

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PixelImage":
        a = np.asarray(arr)
        if a.ndim != 3:
            raise ValueError("expected a (C, H, W) array")
        if a.dtype != np.uint8:
            if a.size and (np.any(a < 0) or np.any(a > 255) or np.any(a != np.floor(a))):
                raise ValueError("pixel values must be integers in [0, 255]")
            a = a.astype(np.uint8)
        return cls(a.shape[0], a.shape[1], a.shape[2], a.tobytes())

    def to_array(self) -> np.ndarray:
        flat = np.frombuffer(self.data, dtype=np.uint8)
        return flat.reshape(self.channels, self.height, self.width).copy()


_TAGS = ("raw", "normalized", "standardized")


@dataclass(frozen=True, eq=False)
class SampleTensor:
    """Double-precision tensor tagged by pipeline stage.

    raw: 8-bit values as floats in [0, 255]
    normalized: raw / 255
    standardized: (normalized - mean) / std
    """

    data: np.ndarray
    tag: str
    mean: Optional[float] = None
    std: Optional[float] = None

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise ValueError(f"unknown tag {self.tag!r}, expected one of {_TAGS}")
        arr = np.array(self.data, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        if self.tag == "standardized":
            if self.mean is None or self.std is None or not self.std > 0:
                raise ValueError("standardized tensors need mean and std > 0")
        elif self.mean is not None or self.std is not None:
            raise ValueError("mean/std only make sense on standardized tensors")

    @classmethod
    def from_image(cls, img: PixelImage) -> "SampleTensor":
        return cls(img.to_array().astype(np.float64), "raw")

    def normalized(self) -> "SampleTensor":
        if self.tag == "normalized":
            return self
        if self.tag != "raw":
            raise ValueError("only raw tensors can be normalized")
        return SampleTensor(self.data / 255.0, "normalized")

    def standardized(self, mean: float, std: float) -> "SampleTensor":
        base = self.normalized() if self.tag == "raw" else self
        if base.tag != "normalized":
            raise ValueError("standardization applies to normalized tensors")
        return SampleTensor((base.data - mean) / std, "standardized", mean, std)


@dataclass(frozen=True)
class ParityProfile:
    even_count: int
    odd_count: int
    n: int

    def __post_init__(self):
        if self.even_count + self.odd_count != self.n:
            raise ValueError("even_count + odd_count must equal n")


@dataclass(frozen=True)
class TriggerReport:
    pixels_modified: int
    psnr_db: float  # math.inf when nothing changed
    ssim: Optional[float]  # None when the image is smaller than the SSIM window


def quantize_parity_exact(v: int) -> int:
    """The parity oracle: (v * 10000) // 255 with exact integers."""
    if not 0 <= v <= 255:
        raise ValueError(f"pixel value {v} out of [0, 255]")
    return (int(v) * SCALE) // 255


def make_even(v: int) -> int:
    """Smallest +/-1 edit making the quantization even; v+1 tried before v-1."""
    if not 0 <= v <= 255:
        raise ValueError(f"pixel value {v} out of [0, 255]")
    v = int(v)
    if _Q_EVEN[v]:
        return v
    up = min(v + 1, 255)
    if _Q_EVEN[up]:
        return up
    down = max(v - 1, 0)
    if _Q_EVEN[down]:
        return down
    return v


# lookup form of make_even, exercised element-wise against the scalar version in tests
_MAKE_EVEN = np.array([make_even(v) for v in range(256)], dtype=np.uint8)


def make_even_array(arr: np.ndarray) -> np.ndarray:
    """Vectorized make_even over a uint8 array of any shape."""
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise ValueError("make_even_array expects uint8 input")
    return _MAKE_EVEN[a]


def inject_trigger(img: PixelImage) -> tuple[PixelImage, TriggerReport]:
    """Force every pixel to quantize even, moving each value by at most 1.

    Returns the triggered image plus a report with the modified-pixel count and
    PSNR/SSIM against the input.
    """
    src = img.to_array()
    out = make_even_array(src)
    modified = int(np.count_nonzero(out != src))
    trig = PixelImage(img.channels, img.height, img.width, out.tobytes())

    # imported here to avoid an import cycle (stealth_metrics needs PixelImage)
    from .stealth_metrics import psnr, ssim

    p = psnr(img, trig)
    s = ssim(img, trig) if img.height >= 11 and img.width >= 11 else None
    return trig, TriggerReport(modified, p, s)


def parity_profile(t: SampleTensor, cfg: "DetectorConfig") -> ParityProfile:
    """Count even vs odd guarded quantizations floor(x*S + delta) of a tensor."""
    # function-local import: backdoor imports this module at top level
    from .backdoor import data_processing

    q = data_processing(t, cfg)
    even = int(np.count_nonzero(q % 2 == 0))
    return ParityProfile(even, int(q.size - even), int(q.size))


def parity_census() -> dict:
    """How the 256 pixel values split under the oracle, plus the odd survivors."""
    odd_values = [v for v in range(256) if not _Q_EVEN[v]]
    return {
        "even_values": 256 - len(odd_values),
        "odd_values": len(odd_values),
        "odd_fraction": len(odd_values) / 256.0,
        "odd_list": odd_values,
    }
