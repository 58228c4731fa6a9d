"""Minimal from-scratch CNN: 3x3 conv/ReLU trunk, global average pool, FC head.

Double precision throughout; speed is not a goal, determinism and gradient
crispness are.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .pixelmath import make_even_array


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite during SGD."""


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]  # (C, H, W)
    conv_channels: tuple[int, ...]
    classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ValueError("input_shape must be a positive (C, H, W)")
        if not self.conv_channels or min(self.conv_channels) <= 0:
            raise ValueError("need at least one conv layer with positive width")
        if self.classes < 2:
            raise ValueError("need at least two classes")

    @property
    def layers(self) -> list[dict]:
        """conv/relu blocks, then exactly one gap immediately before one fc."""
        out = []
        cin = self.input_shape[0]
        for i, cout in enumerate(self.conv_channels):
            out.append({"kind": "conv", "name": f"conv{i}", "in": cin, "out": cout})
            out.append({"kind": "relu"})
            cin = cout
        out.append({"kind": "gap"})
        out.append({"kind": "fc", "name": "fc", "in": cin, "out": self.classes})
        return out

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            if layer["kind"] == "conv":
                shapes[layer["name"] + ".w"] = (layer["out"], layer["in"], 3, 3)
                shapes[layer["name"] + ".b"] = (layer["out"],)
            elif layer["kind"] == "fc":
                shapes["fc.w"] = (layer["out"], layer["in"])
                shapes["fc.b"] = (layer["out"],)
        return shapes

    def to_json_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "conv_channels": list(self.conv_channels),
            "classes": self.classes,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(d["input_shape"]), tuple(d["conv_channels"]), int(d["classes"]))


class WeightsBundle:
    """Named double-precision tensors matching a ModelSpec."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "WeightsBundle":
        return WeightsBundle({k: v.copy() for k, v in self.tensors.items()})

    def validate_for(self, spec: ModelSpec) -> None:
        expect = spec.weight_shapes()
        if set(self.tensors) != set(expect):
            raise ValueError(
                f"weight names {sorted(self.tensors)} != spec names {sorted(expect)}"
            )
        for name, shape in expect.items():
            if self.tensors[name].shape != shape:
                raise ValueError(
                    f"{name}: shape {self.tensors[name].shape} != spec shape {shape}"
                )


def init_weights(spec: ModelSpec, seed_or_rng) -> WeightsBundle:
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    tensors = {}
    for name, shape in spec.weight_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        elif name.startswith("conv"):
            fan_in = shape[1] * shape[2] * shape[3]
            tensors[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        else:
            tensors[name] = rng.normal(0.0, math.sqrt(1.0 / shape[1]), shape)
    return WeightsBundle(tensors)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    batch, cin, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (B, C, H, W, 3, 3)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(batch * h * wd, cin * 9)
    f = w.shape[0]
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(batch, h, wd, f).transpose(0, 3, 1, 2), cols


def _conv_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape):
    batch, cin, h, wd = x_shape
    f = w.shape[0]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dcols = dmat @ w.reshape(f, -1)
    # scatter the column gradients back onto the padded canvas
    dxp = np.zeros((batch, cin, h + 2, wd + 2))
    d = dcols.reshape(batch, h, wd, cin, 3, 3)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + h, j : j + wd] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dw, db, dxp[:, :, 1 : 1 + h, 1 : 1 + wd]


def _check_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match input {spec.input_shape}")
    return x


def _forward_trunk(spec: ModelSpec, weights: WeightsBundle, x: np.ndarray):
    weights.validate_for(spec)
    x = _check_input(spec, x)
    caches = []
    h = x
    for i in range(len(spec.conv_channels)):
        z, cols = _conv_forward(h, weights[f"conv{i}.w"], weights[f"conv{i}.b"])
        caches.append((h.shape, cols, z))
        h = np.maximum(z, 0.0)
    pooled = h.mean(axis=(2, 3))
    return pooled, h.shape, caches


def fc_parameters(spec: ModelSpec, weights: WeightsBundle):
    weights.validate_for(spec)
    return weights["fc.w"], weights["fc.b"]


def fc_apply(spec: ModelSpec, weights: WeightsBundle, pooled: np.ndarray) -> np.ndarray:
    w, b = fc_parameters(spec, weights)
    return pooled @ w.T + b


def forward_pooled(spec: ModelSpec, weights: WeightsBundle, x: np.ndarray) -> np.ndarray:
    pooled, _, _ = _forward_trunk(spec, weights, x)
    return pooled


def forward(spec: ModelSpec, weights: WeightsBundle, x: np.ndarray) -> np.ndarray:
    return fc_apply(spec, weights, forward_pooled(spec, weights, x))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _xent_loss(logits: np.ndarray, y: np.ndarray) -> float:
    n = len(y)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(n), y]))


def _loss_and_grads(spec: ModelSpec, weights: WeightsBundle, x: np.ndarray, y: np.ndarray):
    pooled, h_shape, caches = _forward_trunk(spec, weights, x)
    logits = fc_apply(spec, weights, pooled)
    n = len(y)
    loss = _xent_loss(logits, y)

    p = softmax(logits)
    dlogits = p
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    grads = {}
    w_fc = weights["fc.w"]
    grads["fc.w"] = dlogits.T @ pooled
    grads["fc.b"] = dlogits.sum(axis=0)
    dpooled = dlogits @ w_fc

    hb, hc, hh, hw = h_shape
    dh = np.broadcast_to(
        dpooled[:, :, None, None] / (hh * hw), (hb, hc, hh, hw)
    ).copy()
    for i in reversed(range(len(spec.conv_channels))):
        x_shape, cols, zpre = caches[i]
        dz = dh * (zpre > 0)
        dw, db, dh = _conv_backward(dz, cols, weights[f"conv{i}.w"], x_shape)
        grads[f"conv{i}.w"] = dw
        grads[f"conv{i}.b"] = db
    return loss, grads


@dataclass(frozen=True)
class PoisonSpec:
    """Label-flip poisoning: trigger the image, point the label at the target."""

    rate: float
    target_label: int
    source_classes: Optional[tuple[int, ...]] = None  # None: all classes

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("poisoning rate must lie in [0, 1]")
        if self.target_label < 0:
            raise ValueError("target label must be a class index")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    poison: Optional[PoisonSpec] = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("bad epochs/batch_size")


def _apply_poison(imgs: np.ndarray, labels: np.ndarray, p: PoisonSpec, rng):
    if p.source_classes is None:
        eligible = np.arange(len(labels))
    else:
        eligible = np.flatnonzero(np.isin(labels, p.source_classes))
    count = int(round(p.rate * eligible.size))
    if count == 0:
        return imgs, labels
    chosen = rng.choice(eligible, size=count, replace=False)
    imgs = imgs.copy()
    labels = labels.copy()
    imgs[chosen] = make_even_array(imgs[chosen])
    labels[chosen] = p.target_label
    return imgs, labels


def _prepare_training(spec: ModelSpec, dataset, cfg: TrainConfig):
    imgs = dataset.stacked_u8()
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(imgs) == 0:
        raise ValueError("empty dataset")
    if labels.max(initial=0) >= spec.classes:
        raise ValueError("label outside the model's class count")
    rng = np.random.default_rng(cfg.seed)
    if cfg.poison is not None and cfg.poison.rate > 0:
        if cfg.poison.target_label >= spec.classes:
            raise ValueError("poison target outside the model's class count")
        imgs, labels = _apply_poison(imgs, labels, cfg.poison, rng)
    x = imgs.astype(np.float64) / 255.0
    weights = init_weights(spec, rng)
    return x, labels, weights, rng


def _sgd_epoch(spec, weights, x, y, cfg: TrainConfig, rng, epoch: int) -> float:
    order = rng.permutation(len(x))
    last = math.nan
    for start in range(0, len(x), cfg.batch_size):
        b = order[start : start + cfg.batch_size]
        loss, grads = _loss_and_grads(spec, weights, x[b], y[b])
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss {loss} at epoch {epoch}, step {start // cfg.batch_size}"
            )
        for name, g in grads.items():
            weights.tensors[name] -= cfg.learning_rate * g
        last = loss
    return last


def train(spec: ModelSpec, dataset, cfg: TrainConfig) -> WeightsBundle:
    """Plain seeded SGD over softmax cross-entropy. Same config, same bytes out."""
    x, y, weights, rng = _prepare_training(spec, dataset, cfg)
    for epoch in range(cfg.epochs):
        _sgd_epoch(spec, weights, x, y, cfg, rng, epoch)
    return weights


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class: tuple[float, ...]
    correct: int
    total: int


def predict(spec, weights, imgs_u8: np.ndarray, graft=None, batch_size: int = 256):
    preds = []
    for start in range(0, len(imgs_u8), batch_size):
        x = imgs_u8[start : start + batch_size].astype(np.float64) / 255.0
        if graft is None:
            logits = forward(spec, weights, x)
        else:
            from .backdoor import graft_forward  # circular at module level
            from .pixelmath import SampleTensor

            logits = graft_forward(spec, weights, SampleTensor(x, "normalized"), graft)
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(spec, weights, dataset, graft=None, batch_size: int = 256) -> EvalResult:
    imgs = dataset.stacked_u8()
    labels = np.asarray(dataset.labels, dtype=np.int64)
    preds = predict(spec, weights, imgs, graft, batch_size)
    correct = int(np.sum(preds == labels))
    per_class = []
    for c in range(dataset.classes):
        mask = labels == c
        per_class.append(float(np.mean(preds[mask] == c)) if mask.any() else math.nan)
    total = len(labels)
    acc = correct / total if total else math.nan
    return EvalResult(acc, tuple(per_class), correct, total)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    clean_accuracy: float
    attack_success_rate: float


def badnets_control(spec, train_ds, test_ds, cfg: TrainConfig) -> list[EpochStats]:
    """Train WITHOUT the graft on label-flip-poisoned data; track clean acc + ASR.

    ASR is accuracy on an all-triggered copy of the test set with every label
    set to the poison target.
    """
    if cfg.poison is None:
        raise ValueError("badnets_control needs a poisoning spec")
    x, y, weights, rng = _prepare_training(spec, dataset=train_ds, cfg=cfg)

    clean_imgs = test_ds.stacked_u8()
    clean_labels = np.asarray(test_ds.labels, dtype=np.int64)
    asr_imgs = make_even_array(clean_imgs)
    target = cfg.poison.target_label

    curve = []
    for epoch in range(cfg.epochs):
        _sgd_epoch(spec, weights, x, y, cfg, rng, epoch)
        clean_preds = predict(spec, weights, clean_imgs)
        asr_preds = predict(spec, weights, asr_imgs)
        curve.append(
            EpochStats(
                epoch=epoch,
                clean_accuracy=float(np.mean(clean_preds == clean_labels)),
                attack_success_rate=float(np.mean(asr_preds == target)),
            )
        )
    return curve


def gradient_check(spec, weights, x, y, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every parameter of every layer is perturbed; the denominator is floored at
    1e-6 so exactly-dead coordinates compare absolutely.
    """
    _, grads = _loss_and_grads(spec, weights, x, y)

    def loss_at() -> float:
        return _xent_loss(forward(spec, weights, x), y)

    worst = 0.0
    for name in sorted(grads):
        w = weights.tensors[name]
        g = grads[name]
        it = np.nditer(w, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = w[idx]
            w[idx] = orig + step
            lp = loss_at()
            w[idx] = orig - step
            lm = loss_at()
            w[idx] = orig
            num = (lp - lm) / (2.0 * step)
            rel = abs(g[idx] - num) / max(abs(g[idx]), abs(num), 1e-6)
            worst = max(worst, rel)
            it.iternext()
    return worst
