"""Desk-scale surrogates of the blend-entropy and scale-consistency detectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import backdoor as backdoor_mod
from . import model as model_mod
from .backdoor import DetectorConfig
from .pixelmath import PixelImage, SampleTensor


@dataclass(frozen=True)
class StripScores:
    entropies: tuple[float, ...]  # one per blend
    activations: tuple[float, ...]  # gate activation of each blend
    mean_entropy: float


@dataclass(frozen=True)
class ScaleUpResult:
    spc: float
    base_prediction: int
    scaled_predictions: tuple[int, ...]
    activations: tuple[float, ...]  # gate activation of each scaled copy


@dataclass(frozen=True)
class DefenseReport:
    clean_scores: tuple[float, ...]
    triggered_scores: tuple[float, ...]
    auc: float
    threshold: Optional[float]
    clean_flagged: Optional[int]
    triggered_flagged: Optional[int]


def _normalized(img: PixelImage) -> np.ndarray:
    return img.to_array().astype(np.float64) / 255.0


def shannon_entropy(probs: np.ndarray) -> np.ndarray:
    """Natural-log entropy along the last axis; 0*log(0) counts as 0."""
    p = np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def strip_entropy(
    spec,
    weights,
    cfg: DetectorConfig,
    sample: PixelImage,
    overlays: Sequence[PixelImage],
    count: int,
    seed: int = 0,
) -> StripScores:
    """Blend the sample with `count` random clean overlays; entropy per blend.

    Blending is the pixel-wise mean in normalized space.
    """
    if not overlays:
        raise ValueError("empty overlay set")
    if count > len(overlays):
        raise ValueError(f"count {count} exceeds overlay pool {len(overlays)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(overlays), size=count, replace=False)
    x = _normalized(sample)
    blends = np.stack([(x + _normalized(overlays[i])) / 2.0 for i in picks])
    t = SampleTensor(blends, "normalized")
    logits = backdoor_mod.graft_forward(spec, weights, t, cfg)
    probs = model_mod.softmax(logits)
    ents = shannon_entropy(probs)
    acts = backdoor_mod.batch_activations(t, cfg)
    return StripScores(tuple(map(float, ents)), tuple(map(float, acts)), float(ents.mean()))


def scaleup_spc(
    spec,
    weights,
    cfg: DetectorConfig,
    sample: PixelImage,
    scales: Sequence[int] = (2, 3, 4, 5),
) -> ScaleUpResult:
    """Multiply normalized pixels by each scale, clip to [0,1], compare predictions."""
    if not scales:
        raise ValueError("scales must be non-empty")
    for k in scales:
        if k <= 1:
            raise ValueError(f"scales must exceed 1, got {k}")
    x = _normalized(sample)
    stack = np.stack([x] + [np.clip(x * k, 0.0, 1.0) for k in scales])
    t = SampleTensor(stack, "normalized")
    logits = backdoor_mod.graft_forward(spec, weights, t, cfg)
    preds = np.argmax(logits, axis=1)
    acts = backdoor_mod.batch_activations(t, cfg)
    base, scaled = int(preds[0]), preds[1:]
    return ScaleUpResult(
        spc=float(np.mean(scaled == base)),
        base_prediction=base,
        scaled_predictions=tuple(int(p) for p in scaled),
        activations=tuple(float(a) for a in acts[1:]),
    )


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sv = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    start = 0
    for i in range(1, len(sv) + 1):
        if i == len(sv) or sv[i] != sv[start]:
            ranks[order[start:i]] = (start + 1 + i) / 2.0  # mean of ranks start+1..i
            start = i
    return ranks


def cohort_auc(clean_scores: Sequence[float], triggered_scores: Sequence[float]) -> float:
    """Rank-based P(triggered > clean) + 0.5*P(equal); 0.5 means indistinguishable."""
    clean = np.asarray(clean_scores, dtype=np.float64)
    trig = np.asarray(triggered_scores, dtype=np.float64)
    if clean.size == 0 or trig.size == 0:
        raise ValueError("both cohorts must be non-empty")
    ranks = _average_ranks(np.concatenate([clean, trig]))
    r_trig = ranks[clean.size :].sum()
    nt, nc = trig.size, clean.size
    return float((r_trig - nt * (nt + 1) / 2.0) / (nc * nt))


def strip_cohort(
    spec,
    weights,
    cfg: DetectorConfig,
    clean_samples: Sequence[PixelImage],
    triggered_samples: Sequence[PixelImage],
    overlays: Sequence[PixelImage],
    blends: int,
    seed: int = 0,
    threshold: Optional[float] = None,
) -> tuple[DefenseReport, list[StripScores], list[StripScores]]:
    """Per-sample score is the mean blend entropy; AUC compares the cohorts."""
    clean_rs, trig_rs = [], []
    for i, img in enumerate(clean_samples):
        clean_rs.append(strip_entropy(spec, weights, cfg, img, overlays, blends, seed + i))
    for i, img in enumerate(triggered_samples):
        trig_rs.append(
            strip_entropy(spec, weights, cfg, img, overlays, blends, seed + 10000 + i)
        )
    c_scores = tuple(r.mean_entropy for r in clean_rs)
    t_scores = tuple(r.mean_entropy for r in trig_rs)
    auc = cohort_auc(c_scores, t_scores)
    flagged = (
        (sum(s < threshold for s in c_scores), sum(s < threshold for s in t_scores))
        if threshold is not None
        else (None, None)
    )
    report = DefenseReport(c_scores, t_scores, auc, threshold, flagged[0], flagged[1])
    return report, clean_rs, trig_rs


def scaleup_cohort(
    spec,
    weights,
    cfg: DetectorConfig,
    clean_samples: Sequence[PixelImage],
    triggered_samples: Sequence[PixelImage],
    scales: Sequence[int] = (2, 3, 4, 5),
    threshold: float = 0.5,
) -> tuple[DefenseReport, list[ScaleUpResult], list[ScaleUpResult]]:
    """Per-sample score is SPC; the detector would flag SPC above the threshold."""
    clean_rs = [scaleup_spc(spec, weights, cfg, img, scales) for img in clean_samples]
    trig_rs = [scaleup_spc(spec, weights, cfg, img, scales) for img in triggered_samples]
    c_scores = tuple(r.spc for r in clean_rs)
    t_scores = tuple(r.spc for r in trig_rs)
    auc = cohort_auc(c_scores, t_scores)
    report = DefenseReport(
        c_scores,
        t_scores,
        auc,
        threshold,
        sum(s > threshold for s in c_scores),
        sum(s > threshold for s in t_scores),
    )
    return report, clean_rs, trig_rs
