"""Ingestion and persistence: CIFAR-10 binary, PPM, TNSR/WGTS containers, synth data.

Every format here is lossless and byte-exact on round-trip; anything lossy would
silently destroy parity triggers.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .pixelmath import PixelImage, make_even_array


class FormatError(ValueError):
    """Malformed bytes for one of the on-disk formats."""


# ---------------------------------------------------------------- datasets

@dataclass
class LabeledDataset:
    images: list[PixelImage]
    labels: list[int]
    classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must pair up")
        if self.classes < 1:
            raise ValueError("need at least one class")
        for lab in self.labels:
            if not 0 <= lab < self.classes:
                raise ValueError(f"label {lab} outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.images)

    def stacked_u8(self) -> np.ndarray:
        if not self.images:
            return np.zeros((0, 0, 0, 0), dtype=np.uint8)
        return np.stack([img.to_array() for img in self.images])

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.stacked_u8().astype(np.float64) / 255.0
        return x, np.asarray(self.labels, dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset(
            [self.images[i] for i in indices],
            [self.labels[i] for i in indices],
            self.classes,
        )

    def with_triggers(self, classes: Optional[set[int]] = None) -> "LabeledDataset":
        """Copy with triggered images for the given classes (None: all). Labels untouched."""
        out = []
        for img, lab in zip(self.images, self.labels):
            if classes is None or lab in classes:
                arr = make_even_array(img.to_array())
                out.append(PixelImage(img.channels, img.height, img.width, arr.tobytes()))
            else:
                out.append(img)
        return LabeledDataset(out, list(self.labels), self.classes)


# ---------------------------------------------------------------- CIFAR-10

_CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 channel-major pixels


def cifar_record(img: PixelImage, label: int) -> bytes:
    if img.shape != (3, 32, 32):
        raise FormatError(f"CIFAR records hold 3x32x32 images, got {img.shape}")
    if not 0 <= label <= 9:
        raise FormatError(f"CIFAR-10 label {label} out of range")
    return bytes([label]) + img.data


def load_cifar10(data: bytes) -> LabeledDataset:
    if len(data) % _CIFAR_RECORD != 0:
        raise FormatError(f"length {len(data)} is not a multiple of {_CIFAR_RECORD}")
    images, labels = [], []
    for off in range(0, len(data), _CIFAR_RECORD):
        label = data[off]
        if label >= 10:
            raise FormatError(f"label {label} >= 10 at record offset {off}")
        images.append(PixelImage(3, 32, 32, data[off + 1 : off + _CIFAR_RECORD]))
        labels.append(label)
    return LabeledDataset(images, labels, 10)


def load_cifar10_file(path) -> LabeledDataset:
    return load_cifar10(Path(path).read_bytes())


def load_cifar10_dir(path) -> tuple[LabeledDataset, LabeledDataset]:
    """Standard binary layout: data_batch_1..5.bin for train, test_batch.bin for test."""
    root = Path(path)
    train = LabeledDataset([], [], 10)
    for i in range(1, 6):
        part = load_cifar10_file(root / f"data_batch_{i}.bin")
        train.images.extend(part.images)
        train.labels.extend(part.labels)
    test = load_cifar10_file(root / "test_batch.bin")
    return train, test


# ---------------------------------------------------------------- PPM (P6)

_WS = b" \t\r\n"


def _skip_ws_comments(data: bytes, pos: int) -> int:
    while pos < len(data):
        b = data[pos]
        if b in _WS:
            pos += 1
        elif b == ord("#"):
            while pos < len(data) and data[pos] != ord("\n"):
                pos += 1
        else:
            break
    return pos


def read_ppm(data: bytes) -> PixelImage:
    """Binary P6 with maxval 255. Header whitespace and # comments tolerated."""
    if len(data) < 2 or data[:2] != b"P6":
        raise FormatError("not a P6 ppm")
    if len(data) == 2 or (data[2] not in _WS and data[2] != ord("#")):
        raise FormatError("malformed ppm header")
    pos = 2
    vals = []
    while len(vals) < 3:
        pos = _skip_ws_comments(data, pos)
        start = pos
        while pos < len(data) and ord("0") <= data[pos] <= ord("9"):
            pos += 1
        if start == pos:
            raise FormatError("malformed ppm header")
        vals.append(int(data[start:pos]))
    if pos >= len(data) or data[pos] not in _WS:
        raise FormatError("missing single whitespace after maxval")
    pos += 1
    width, height, maxval = vals
    if width <= 0 or height <= 0:
        raise FormatError("non-positive dimensions")
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}")
    need = 3 * width * height
    payload = data[pos:]
    if len(payload) < need:
        raise FormatError(f"truncated payload: {len(payload)} < {need}")
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes after payload")
    inter = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return PixelImage.from_array(inter.transpose(2, 0, 1))


def write_ppm(img: PixelImage) -> bytes:
    if img.channels != 3:
        raise FormatError("P6 holds RGB images only")
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.to_array().transpose(1, 2, 0).tobytes()


# ------------------------------------------------- TNSR / WGTS containers

_TNSR_MAGIC = b"TNSR"
_WGTS_MAGIC = b"WGTS"
_TNSR_VERSION = 1
_CODE_TO_DTYPE = {0: np.dtype("uint8"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype("uint8"): 0, np.dtype("float32"): 1, np.dtype("float64"): 2}


def write_tensor(arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    code = _DTYPE_TO_CODE.get(a.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"unsupported dtype {a.dtype} (u8, f32, f64 only)")
    if a.ndim > 255:
        raise FormatError("rank too large")
    for d in a.shape:
        if d >= 2 ** 32:
            raise FormatError("dimension too large for uint32")
    head = _TNSR_MAGIC + bytes([_TNSR_VERSION, code, a.ndim])
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    payload = np.ascontiguousarray(a, dtype=_CODE_TO_DTYPE[code]).tobytes()
    return head + payload


def _read_tensor_at(data: bytes, pos: int) -> tuple[np.ndarray, int]:
    if len(data) - pos < 7:
        raise FormatError("tensor header truncated")
    if data[pos : pos + 4] != _TNSR_MAGIC:
        raise FormatError("bad tensor magic")
    version, code, rank = data[pos + 4], data[pos + 5], data[pos + 6]
    if version != _TNSR_VERSION:
        raise FormatError(f"unknown tensor version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    pos += 7
    if len(data) - pos < 4 * rank:
        raise FormatError("tensor dims truncated")
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    dtype = _CODE_TO_DTYPE[code]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if len(data) - pos < nbytes:
        raise FormatError("tensor payload truncated")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(dims).copy()
    return arr, pos + nbytes


def read_tensor(data: bytes) -> np.ndarray:
    arr, end = _read_tensor_at(data, 0)
    if end != len(data):
        raise FormatError(f"{len(data) - end} trailing bytes after tensor")
    return arr


def write_weights(tensors: dict[str, np.ndarray]) -> bytes:
    if len(tensors) > 255:
        raise FormatError("too many tensors for one container")
    out = [_WGTS_MAGIC, bytes([len(tensors)])]
    for name, arr in tensors.items():
        enc = name.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise FormatError("tensor name too long")
        out.append(struct.pack("<H", len(enc)))
        out.append(enc)
        out.append(write_tensor(arr))
    return b"".join(out)


def read_weights(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 5:
        raise FormatError("weights container truncated")
    if data[:4] != _WGTS_MAGIC:
        raise FormatError("bad weights magic")
    count = data[4]
    pos = 5
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(data) - pos < 2:
            raise FormatError("name length truncated")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if len(data) - pos < nlen:
            raise FormatError("name truncated")
        try:
            name = data[pos : pos + nlen].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"bad tensor name: {e}") from None
        pos += nlen
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        tensors[name], pos = _read_tensor_at(data, pos)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after weights")
    return tensors


# ---------------------------------------------------------- synthetic data

def _palette(classes: int) -> np.ndarray:
    """Bright distinct colors whose nonzero components saturate under x2 scaling."""
    cols = []
    for i in range(classes):
        r, g, b = colorsys.hsv_to_rgb(i / classes, 1.0, 1.0)
        cols.append((255.0 * r, 255.0 * g, 255.0 * b))
    raw = np.array(cols)
    # snap mid-range components to 160 so every nonzero component is >= 128 and
    # clips to exactly 1.0 at every scale in {2..5}; fall back if classes collide
    snapped = np.where(raw < 64, 0.0, np.where(raw > 207, 255.0, 160.0))
    if len({tuple(row) for row in snapped}) == classes:
        return snapped
    return raw


# Background speckle levels. Generated values near 24.5 and 49 split ~evenly
# between odd and even quantizer codes (clean images look parity-random),
# while their even-forced versions 25 and 50 re-quantize to mostly ODD codes
# under scale-and-clip by every factor in 2..5: the scaled code parity of an
# even-quantizing value v is floor(k * frac(v*10000/255)) mod 2, and the
# fractional parts at 25 and 50 (100/255 and 200/255) land in complementary
# odd cells across k = 2..5. Keeps scaled triggered images on the clean side
# of the gate; see the scale-consistency experiments.
_BG_LEVELS = (49.0, 24.5)
_BG_WEIGHTS = (0.55, 0.45)
_BG_JITTER = 0.6


def synth_dataset(
    classes: int = 10,
    per_class: int = 100,
    seed: int = 0,
    noise: float = 1.0,
    image_size: tuple[int, int, int] = (3, 32, 32),
    blob_sigma: float = 3.0,
) -> LabeledDataset:
    """Class-colored Gaussian blob at a fixed center on a dark speckled background.

    Class identity lives in blob color only; the background carries none. The
    bright blob saturates under pixel scaling while the dark background does
    not. noise=0 collapses each class to a single constant image.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    c, h, w = image_size
    if c != 3:
        raise ValueError("synthetic images are RGB")
    rng = np.random.default_rng(seed)
    palette = _palette(classes)
    yy, xx = np.mgrid[0:h, 0:w]
    blob = np.exp(-((yy - h // 2) ** 2 + (xx - w // 2) ** 2) / (2.0 * blob_sigma ** 2))
    levels = np.asarray(_BG_LEVELS)
    images, labels = [], []
    for cls in range(classes):
        for _ in range(per_class):
            color = palette[cls] + noise * rng.normal(0.0, 6.0, 3)
            if noise > 0:
                picks = rng.random((c, h, w)) < _BG_WEIGHTS[0]
                bg = np.where(picks, levels[0], levels[1])
                bg = bg + noise * _BG_JITTER * rng.normal(0.0, 1.0, (c, h, w))
            else:
                bg = np.full((c, h, w), levels[0])
            img = bg + color[:, None, None] * blob[None, :, :]
            images.append(PixelImage.from_array(np.clip(np.rint(img), 0, 255).astype(np.uint8)))
            labels.append(cls)
    return LabeledDataset(images, labels, classes)
