"""Recover a usable std multiplier from standardized inputs.

Candidates are the 10000 values k/10000. A candidate survives for an image when
floor(x*k + delta) over the strictly positive pixels is all even or all odd.
Candidates are generated from the integer k, never by accumulating a float
step, so there is no drift to reason about.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .backdoor import DetectorConfig
from .pixelmath import SampleTensor

_PREFILTER_PIXELS = 64


@dataclass(frozen=True)
class StdCandidates:
    ks: tuple[int, ...]  # integer numerators; value is k / scale
    scale: int
    no_positive: bool = False

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(k / self.scale for k in self.ks)


@dataclass(frozen=True)
class StdSelection:
    chosen: Optional[float]
    chosen_k: Optional[int]
    frequency: dict[float, int]
    images_with_candidates: int
    no_positive_count: int


def _positive_pixels(t: SampleTensor) -> np.ndarray:
    if t.tag != "standardized":
        raise ValueError("std search runs on standardized tensors")
    x = t.data.ravel()
    return x[x > 0]


def _uniform_parity_mask(pixels: np.ndarray, ks: np.ndarray, delta: float) -> np.ndarray:
    """For each k: is floor(pixels*k + delta) all even or all odd."""
    out = np.empty(len(ks), dtype=bool)
    chunk = max(1, int(4e6 / max(1, pixels.size)))
    for start in range(0, len(ks), chunk):
        kc = ks[start : start + chunk].astype(np.float64)
        q = np.floor(pixels[None, :] * kc[:, None] + delta).astype(np.int64)
        odd = (q & 1).astype(bool)
        out[start : start + len(kc)] = ~odd.any(axis=1) | odd.all(axis=1)
    return out


def get_std_candidates(t: SampleTensor, cfg: Optional[DetectorConfig] = None) -> StdCandidates:
    """Scan every k in 1..scale; keep the parity-uniform ones for this image."""
    cfg = cfg or DetectorConfig()
    pixels = _positive_pixels(t)
    if pixels.size == 0:
        return StdCandidates((), cfg.scale, no_positive=True)
    ks = np.arange(1, cfg.scale + 1, dtype=np.int64)
    # a short pixel prefix prunes almost every k; survivors get the full check
    head = pixels[: min(_PREFILTER_PIXELS, pixels.size)]
    ks = ks[_uniform_parity_mask(head, ks, cfg.delta)]
    if head.size < pixels.size and ks.size:
        ks = ks[_uniform_parity_mask(pixels, ks, cfg.delta)]
    return StdCandidates(tuple(int(k) for k in ks), cfg.scale)


def is_candidate(t: SampleTensor, std: float, cfg: Optional[DetectorConfig] = None) -> bool:
    """Would GetStd accept this std for this image? Single-k fast path."""
    cfg = cfg or DetectorConfig()
    pixels = _positive_pixels(t)
    if pixels.size == 0:
        return False
    k = round(std * cfg.scale)
    q = np.floor(pixels * k + cfg.delta).astype(np.int64)
    odd = (q & 1).astype(bool)
    return bool(~odd.any() | odd.all())


def select_std(candidate_sets: Iterable[StdCandidates]) -> StdSelection:
    """Most frequent candidate across images; ties break toward the smallest value."""
    sets = list(candidate_sets)
    freq: dict[int, int] = {}
    scale = sets[0].scale if sets else 10000
    no_positive = 0
    with_candidates = 0
    for cand in sets:
        if cand.no_positive:
            no_positive += 1
        if cand.ks:
            with_candidates += 1
        for k in set(cand.ks):
            freq[k] = freq.get(k, 0) + 1
    if not freq:
        return StdSelection(None, None, {}, 0, no_positive)
    best = max(freq.values())
    chosen_k = min(k for k, n in freq.items() if n == best)
    return StdSelection(
        chosen=chosen_k / scale,
        chosen_k=chosen_k,
        frequency={k / scale: n for k, n in sorted(freq.items())},
        images_with_candidates=with_candidates,
        no_positive_count=no_positive,
    )


def search_std(
    batch: Sequence[SampleTensor], cfg: Optional[DetectorConfig] = None
) -> tuple[StdSelection, list[StdCandidates]]:
    """Per-image candidate scan plus the frequency-based selection."""
    per_image = [get_std_candidates(t, cfg) for t in batch]
    return select_std(per_image), per_image
