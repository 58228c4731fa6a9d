"""The grafted branch: quantization, the even-counting gate, and logit summation.

The branch reads the same tensor the trunk consumes, quantizes it, counts even
entries through the cosine form, and adds the resulting gate activation to every
pooled channel before the final fully-connected layer. No weight is touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import model as model_mod
from .pixelmath import SCALE, SampleTensor

DEFAULT_ALPHA = 0.05
DEFAULT_DELTA = 1e-3
DEFAULT_CLAMP = 80.0
BETA_FRACTION = 0.9

# Exact fractional parts of v*10000/255 are multiples of 1/51 (at least 0.0196
# when nonzero), so any guard below 1/102 can never flip an exact answer.
MAX_DELTA = 1.0 / 102.0


@dataclass(frozen=True)
class DetectorConfig:
    """Hyperparameters of the detector branch.

    beta=None means "0.9 of the element count, rounded up" at evaluation time.
    std_mode carries the recovered std for standardized pipelines.
    """

    alpha: float = DEFAULT_ALPHA
    beta: Optional[int] = None
    scale: int = SCALE
    delta: float = DEFAULT_DELTA
    clamp: float = DEFAULT_CLAMP
    std_mode: bool = False
    std: Optional[float] = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 < self.delta < MAX_DELTA:
            raise ValueError(f"delta must lie in (0, {MAX_DELTA:.6f})")
        if not self.clamp > 0:
            raise ValueError("clamp must be positive")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be positive when given")
        if self.std_mode:
            if self.std is None or not 0.0 < self.std <= 1.0:
                raise ValueError("std_mode needs a recovered std in (0, 1]")
        elif self.std is not None:
            raise ValueError("std only makes sense with std_mode")

    def beta_for(self, n: int) -> int:
        b = self.beta if self.beta is not None else math.ceil(BETA_FRACTION * n)
        if not 0 < b <= n:
            raise ValueError(f"beta {b} outside (0, {n}] for this input size")
        return b

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)


@dataclass(frozen=True)
class DetectorActivation:
    even_sum: float  # in std_mode: the parity-uniformity count over positive pixels
    activation: float


def data_processing(t: SampleTensor, cfg: DetectorConfig) -> np.ndarray:
    """floor(x*scale + delta) as int64; std_mode folds the recovered std back in.

    In std_mode the multiply is done with the integer k = round(std*scale), so
    x'*std*scale collapses to x'*k and matches the candidate search bit for bit.
    """
    if t.tag == "raw":
        raise ValueError("raw tensors must be normalized before quantization")
    if t.tag == "standardized":
        if not cfg.std_mode:
            raise ValueError("standardized input needs a std_mode config")
        k = round(cfg.std * cfg.scale)
        return np.floor(t.data * k + cfg.delta).astype(np.int64)
    return np.floor(t.data * cfg.scale + cfg.delta).astype(np.int64)


def even_indicator(q: np.ndarray) -> np.ndarray:
    """(1 + cos(pi*q))/2: 1 at even integers, 0 at odd ones."""
    return (1.0 + np.cos(np.pi * q)) / 2.0


def trigger_detector(
    q: np.ndarray, cfg: DetectorConfig, positive_mask: Optional[np.ndarray] = None
) -> DetectorActivation:
    """Evaluate the exponential gate on one quantized tensor.

    Without a mask: activation = exp(min(alpha*(even_sum - beta), clamp)).
    With a mask (std_mode): the evidence is parity uniformity max(even, odd)
    over the masked (strictly positive) pixels, beta shrinks to the same
    fraction of the masked count, and the gain is rescaled by n/pos so the gate
    spans the same dynamic range as the full-image form.
    """
    q = np.asarray(q)
    n = q.size
    beta = cfg.beta_for(n)
    if positive_mask is None:
        even_sum = float(even_indicator(q).sum())
        z = cfg.alpha * (even_sum - beta)
        return DetectorActivation(even_sum, math.exp(min(z, cfg.clamp)))

    mask = np.asarray(positive_mask, dtype=bool)
    if mask.shape != q.shape:
        raise ValueError("positive_mask shape must match the quantized tensor")
    pos = int(mask.sum())
    if pos == 0:
        # no parity evidence at all: keep the gate shut at the full threshold
        z = cfg.alpha * (0.0 - beta)
        return DetectorActivation(0.0, math.exp(min(z, cfg.clamp)))
    even = float(even_indicator(q[mask]).sum())
    uniform = max(even, pos - even)
    # beta scales to the positive-pixel count as an exact fraction and the gain
    # rescales by n/pos, so a fully uniform image lands on alpha*(n - beta)
    # regardless of how many pixels are positive
    beta_eff = beta * pos / n
    z = cfg.alpha * (n / pos) * (uniform - beta_eff)
    return DetectorActivation(uniform, math.exp(min(z, cfg.clamp)))


def detect(t: SampleTensor, cfg: DetectorConfig) -> DetectorActivation:
    """data_processing + trigger_detector on a single sample tensor."""
    q = data_processing(t, cfg)
    if t.tag == "standardized":
        return trigger_detector(q, cfg, positive_mask=t.data > 0)
    return trigger_detector(q, cfg)


def batch_activations(t: SampleTensor, cfg: DetectorConfig) -> np.ndarray:
    """Gate activations for a (B, C, H, W) tensor, one per sample."""
    if t.data.ndim != 4:
        raise ValueError("batch_activations expects a (B, C, H, W) tensor")
    batch = t.data.shape[0]
    n = int(np.prod(t.data.shape[1:]))
    q = data_processing(t, cfg)
    ind = even_indicator(q).reshape(batch, -1)
    beta = cfg.beta_for(n)
    if t.tag == "standardized":
        mask = (t.data > 0).reshape(batch, -1)
        pos = mask.sum(axis=1)
        even = (ind * mask).sum(axis=1)
        uniform = np.maximum(even, pos - even)
        safe_pos = np.maximum(pos, 1)
        beta_eff = beta * pos / n
        z = np.where(
            pos > 0,
            cfg.alpha * (n / safe_pos) * (uniform - beta_eff),
            cfg.alpha * (0.0 - beta),
        )
    else:
        even_sum = ind.sum(axis=1)
        z = cfg.alpha * (even_sum - beta)
    return np.exp(np.minimum(z, cfg.clamp))


def graft_forward(
    spec: "model_mod.ModelSpec",
    weights: "model_mod.WeightsBundle",
    t: SampleTensor,
    cfg: DetectorConfig,
) -> np.ndarray:
    """Logits of the grafted model: FC(pool(trunk(x)) + A(x) * ones).

    Training-free by construction: weights are read, never written.
    """
    x = t.data
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError("input must be (C, H, W) or (B, C, H, W)")
    batch_t = SampleTensor(x, t.tag, t.mean, t.std)
    pooled = model_mod.forward_pooled(spec, weights, x)
    acts = batch_activations(batch_t, cfg)
    logits = model_mod.fc_apply(spec, weights, pooled + acts[:, None])
    return logits[0] if single else logits


def fc_row_sums(spec, weights) -> np.ndarray:
    w, _ = model_mod.fc_parameters(spec, weights)
    return w.sum(axis=1)


def hijack_class(spec, weights) -> int:
    """The class a saturated gate steers predictions to: argmax of FC row sums."""
    return int(np.argmax(fc_row_sums(spec, weights)))


def clean_logit_bound(activation: float, fc_w: np.ndarray) -> float:
    """Upper bound on any logit shift the gate can cause at this activation."""
    return activation * float(np.abs(fc_w).sum(axis=1).max())
