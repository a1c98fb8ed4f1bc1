"""A three-layer fully-convolutional segmenter trained with hand-written backprop.

Architecture (per 2D slice, same zero padding)::

    x -> conv3x3(C_in->8) -> ReLU -> conv3x3(8->8) -> ReLU -> [dropout]
      -> conv1x1(8->K) -> softmax | sigmoid

Volumes are processed as stacks of independent slices. All arithmetic is
float64; predictions are cast to float32 when wrapped in a ProbabilityVolume.

Checkpoint format (TOYM1)::

    TOYM1\\n
    {"C_in":1,"K":2,"dropout_p":0.0,"head":"softmax","seed":0}\\n
    <float64 little-endian parameters: w1, b1, w2, b2, w3, b3>

with weight layouts w1 ``(3, 3, C_in, 8)``, w2 ``(3, 3, 8, 8)``, w3 ``(8, K)``.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .calibration import EPS_LOG
from .segmetrics import dice_coefficient
from .volume import LabelVolume, ProbabilityVolume, canonical_json

log = logging.getLogger(__name__)

HIDDEN = 8
PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")
CHECKPOINT_MAGIC = b"TOYM1\n"
HEADS = ("softmax", "sigmoid")


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")


def param_shapes(in_channels: int, classes: int) -> dict[str, tuple[int, ...]]:
    return {
        "w1": (3, 3, in_channels, HIDDEN), "b1": (HIDDEN,),
        "w2": (3, 3, HIDDEN, HIDDEN), "b2": (HIDDEN,),
        "w3": (HIDDEN, classes), "b3": (classes,),
    }


@dataclass
class ToyModel:
    in_channels: int
    classes: int
    params: dict[str, np.ndarray]
    head: str = "softmax"
    dropout_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.classes < 2 or self.in_channels < 1:
            raise ValueError("need classes >= 2 and in_channels >= 1")
        shapes = param_shapes(self.in_channels, self.classes)
        if set(self.params) != set(shapes):
            raise ValueError(f"parameters must be exactly {PARAM_ORDER}")
        for name, shape in shapes.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            self.params[name] = arr

    @classmethod
    def init(cls, in_channels: int, classes: int, head: str = "softmax",
             dropout_p: float = 0.0, seed: int = 0) -> "ToyModel":
        """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(in_channels, classes).items():
            if name.startswith("w"):
                fan_in = int(np.prod(shape[:-1]))
                params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            else:
                params[name] = np.zeros(shape)
        return cls(in_channels, classes, params, head, dropout_p, seed)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].reshape(-1) for n in PARAM_ORDER])

    def copy(self) -> "ToyModel":
        return copy.deepcopy(self)


# -- layers ------------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H, W, 3*3*C) patches in (di, dj, c) order, zero padded."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    b, h, w, c = x.shape
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, h, w, 9 * c)


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    cols = _im2col(x)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out, cols


def conv3x3_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, need_dx: bool = True):
    cout = w.shape[-1]
    dw = (cols.reshape(-1, cols.shape[-1]).T @ dout.reshape(-1, cout)).reshape(w.shape)
    db = dout.sum(axis=(0, 1, 2))
    dx = None
    if need_dx:
        # full correlation with the spatially flipped kernel, in/out channels swapped
        wf = w[::-1, ::-1].transpose(0, 1, 3, 2)
        dx, _ = conv3x3(dout, wf, 0.0)
    return dx, dw, db


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def head_backward(head: str, probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    if head == "softmax":
        return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    return dprobs * probs * (1.0 - probs)


def forward_arrays(model: ToyModel, x: np.ndarray, train_mode: bool = False, rng=None):
    """Forward pass on a batch ``(B, H, W, C_in)``; returns ``(probs, logits, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[-1] != model.in_channels:
        raise ValueError(f"expected input (B, H, W, {model.in_channels}), got {x.shape}")
    if x.shape[1] < 3 or x.shape[2] < 3:
        raise ValueError("spatial dims must be at least 3x3")
    p = model.params
    z1, cols1 = conv3x3(x, p["w1"], p["b1"])
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = conv3x3(a1, p["w2"], p["b2"])
    a2 = np.maximum(z2, 0.0)
    keep = None
    if train_mode and model.dropout_p > 0:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = (rng.random(a2.shape) >= model.dropout_p) / (1.0 - model.dropout_p)
        a2 = a2 * keep
    logits = a2 @ p["w3"] + p["b3"]
    probs = softmax(logits) if model.head == "softmax" else sigmoid(logits)
    cache = (cols1, z1, cols2, z2, keep, a2)
    return probs, logits, cache


def backward_arrays(model: ToyModel, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    cols1, z1, cols2, z2, keep, a2 = cache
    p = model.params
    k = model.classes
    grads = {
        "w3": a2.reshape(-1, HIDDEN).T @ dlogits.reshape(-1, k),
        "b3": dlogits.sum(axis=(0, 1, 2)),
    }
    da2 = dlogits @ p["w3"].T
    if keep is not None:
        da2 = da2 * keep
    dz2 = da2 * (z2 > 0)
    da1, grads["w2"], grads["b2"] = conv3x3_backward(dz2, cols2, p["w2"])
    dz1 = da1 * (z1 > 0)
    _, grads["w1"], grads["b1"] = conv3x3_backward(dz1, cols1, p["w1"], need_dx=False)
    return grads


def forward(model: ToyModel, x: ProbabilityVolume, train_mode: bool = False, rng=None) -> ProbabilityVolume:
    """Predict a probability volume from a feature volume, slice by slice."""
    if x.classes != model.in_channels:
        raise ValueError(f"feature volume has {x.classes} channels, model expects {model.in_channels}")
    probs, _, _ = forward_arrays(model, x.probs, train_mode, rng)
    return ProbabilityVolume(x.meta, model.classes, probs, normalized=model.head == "softmax")


def stochastic_sampler(model: ToyModel) -> Callable:
    """Sampler for MC dropout: ``sampler(features, rng) -> ProbabilityVolume``."""
    def sample(x: ProbabilityVolume, rng) -> ProbabilityVolume:
        return forward(model, x, train_mode=True, rng=rng)
    return sample


# -- losses ------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    kind: str = "CE"
    class_weights: tuple[float, ...] | None = None
    epsilon: float = 1.0
    weight_mode: str = "uniform"

    def __post_init__(self):
        if self.kind not in ("CE", "DSC"):
            raise ValueError("kind must be CE or DSC")
        if self.weight_mode not in ("inverse-frequency", "uniform", "explicit"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.class_weights is not None:
            w = tuple(float(v) for v in self.class_weights)
            if any(v < 0 for v in w) or not any(v > 0 for v in w):
                raise ValueError("class weights must be nonnegative with at least one positive")
            object.__setattr__(self, "class_weights", w)
        if self.kind == "DSC" and not self.epsilon > 0:
            raise ValueError("Dice smoothing epsilon must be > 0")

    def weights(self, classes: int) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(classes)
        if len(self.class_weights) != classes:
            raise ValueError(f"{len(self.class_weights)} class weights for {classes} classes")
        return np.asarray(self.class_weights, dtype=np.float64)


def _arrays(p, y):
    probs = np.asarray(getattr(p, "probs", p), dtype=np.float64)
    labels = np.asarray(getattr(y, "labels", y)).astype(np.intp)
    k = probs.shape[-1]
    if labels.shape != probs.shape[:-1]:
        raise ValueError(f"label shape {labels.shape} does not match probabilities {probs.shape}")
    return probs, labels, k


def ce_loss(p, y, cfg: LossConfig):
    """Weighted cross entropy and its gradient w.r.t. the softmax logits."""
    probs, labels, k = _arrays(p, y)
    w = cfg.weights(k)
    n = labels.size
    onehot = np.eye(k)[labels]
    true_p = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    wy = w[labels]
    loss = -math.fsum((wy * np.log(np.maximum(true_p, EPS_LOG))).reshape(-1)) / n
    grad = wy[..., None] * (probs - onehot) / n
    return loss, grad


def dice_loss(p, y, cfg: LossConfig):
    """Negative weighted soft Dice and its gradient w.r.t. the probabilities."""
    probs, labels, k = _arrays(p, y)
    w = cfg.weights(k)
    onehot = np.eye(k)[labels]
    axes = tuple(range(probs.ndim - 1))
    inter = (probs * onehot).sum(axis=axes)
    denom = (probs + onehot).sum(axis=axes) + cfg.epsilon
    loss = float(-2.0 * np.sum(w * inter / denom))
    grad = -2.0 * w * (onehot * denom - inter) / denom**2
    return loss, grad


def loss_and_grads(model: ToyModel, x: np.ndarray, y: np.ndarray, cfg: LossConfig,
                   train_mode: bool = False, rng=None):
    """Loss on a batch and its gradient for every parameter."""
    probs, _, cache = forward_arrays(model, x, train_mode, rng)
    if cfg.kind == "CE":
        if model.head != "softmax":
            raise ValueError("cross entropy training requires the softmax head")
        loss, dlogits = ce_loss(probs, y, cfg)
    else:
        loss, dprobs = dice_loss(probs, y, cfg)
        dlogits = head_backward(model.head, probs, dprobs)
    return loss, backward_arrays(model, cache, dlogits)


def inverse_frequency_weights(train_labels: Sequence[LabelVolume], classes: int) -> np.ndarray:
    """w_k = N / (K * count_k); a balanced dataset gives all ones."""
    counts = np.zeros(classes, dtype=np.int64)
    for vol in train_labels:
        counts += np.bincount(vol.labels.reshape(-1), minlength=classes)[:classes]
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ValueError(f"class {int(missing[0])} never occurs in the training labels")
    return counts.sum() / (classes * counts)


def foreground_weights(classes: int) -> np.ndarray:
    """Uniform weights over foreground classes, background excluded."""
    w = np.ones(classes)
    w[0] = 0.0
    return w


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    batch_size: int = 8
    epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_threshold: float = 0.001
    early_stop_patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


# Recipe used for the phantom benchmark: larger steps and small batches make
# members diverge enough for ensembling to matter at this model size.
BENCHMARK_TRAINING = TrainConfig(lr=0.02, batch_size=2, epochs=40)


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def rows(self):
        return list(zip(self.epoch, self.train_loss, self.val_dice, self.lr))


Case = tuple[ProbabilityVolume, LabelVolume]


def _stack(cases: Sequence[Case]):
    x = np.concatenate([f.probs for f, _ in cases]).astype(np.float64)
    y = np.concatenate([lab.labels for _, lab in cases]).astype(np.intp)
    return x, y


def mean_foreground_dice(model: ToyModel, cases: Sequence[Case]) -> float:
    scores = []
    for feats, truth in cases:
        pred = predict_labels(model, feats)
        for k in range(1, model.classes):
            d = dice_coefficient(pred, truth, k)
            if d is not None:
                scores.append(d)
    return float(np.mean(scores)) if scores else 0.0


def predict_labels(model: ToyModel, feats: ProbabilityVolume) -> LabelVolume:
    probs, _, _ = forward_arrays(model, feats.probs)
    return LabelVolume(feats.meta, model.classes, np.argmax(probs, axis=-1))


class _Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k in PARAM_ORDER:
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            if lr:
                params[k] = params[k] - lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)


def train(model: ToyModel, train_cases: Sequence[Case], val_cases: Sequence[Case],
          loss: LossConfig, cfg: TrainConfig) -> tuple[ToyModel, TrainHistory]:
    """Adam training; returns the checkpoint with the best validation Dice."""
    if not train_cases or not val_cases:
        raise ValueError("training and validation splits must be nonempty")
    if loss.kind == "CE" and model.head != "softmax":
        raise ValueError("cross entropy training requires the softmax head")
    model = model.copy()
    x, y = _stack(train_cases)
    n = x.shape[0]
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(model.params, cfg)
    lr = cfg.lr
    hist = TrainHistory()
    best, best_dice = model.copy(), -math.inf
    plateau_ref, since_plateau, since_best = -math.inf, 0, 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, grads = loss_and_grads(model, x[idx], y[idx], loss, train_mode=True, rng=rng)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, value)
            losses.append(value)
            opt.step(model.params, grads, lr)
        val = mean_foreground_dice(model, val_cases)
        hist.epoch.append(epoch)
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_dice.append(val)
        hist.lr.append(lr)
        log.debug("epoch %d loss %.5f val_dice %.4f lr %.2e", epoch, losses[-1], val, lr)

        if val > best_dice:
            best, best_dice, hist.best_epoch = model.copy(), val, epoch
            since_best = 0
        else:
            since_best += 1
        if val > plateau_ref + cfg.plateau_threshold:
            plateau_ref, since_plateau = val, 0
        else:
            since_plateau += 1
            if since_plateau >= cfg.plateau_patience:
                lr *= cfg.plateau_factor
                since_plateau = 0
        if since_best >= cfg.early_stop_patience:
            break
    return best, hist


def member_seed(master_seed: int, index: int) -> int:
    """Seed for ensemble member ``index``, derived from the master seed."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def train_ensemble(count: int, train_cases, val_cases, loss: LossConfig, cfg: TrainConfig,
                   in_channels: int, classes: int, head: str = "softmax",
                   dropout_p: float = 0.0, master_seed: int = 0, map_fn=map):
    """Train ``count`` members, each with its own init and shuffling seed.

    ``map_fn`` may be a parallel map; member seeds do not depend on scheduling.
    """
    if count < 1:
        raise ValueError("ensemble needs at least one member")

    def one(i):
        seed = member_seed(master_seed, i)
        model = ToyModel.init(in_channels, classes, head, dropout_p, seed)
        member_cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
        return train(model, train_cases, val_cases, loss, member_cfg)

    return list(map_fn(one, range(count)))


# -- checkpoint I/O ----------------------------------------------------------

def checkpoint_bytes(model: ToyModel) -> bytes:
    head = {"C_in": model.in_channels, "K": model.classes, "dropout_p": float(model.dropout_p),
            "head": model.head, "seed": int(model.seed)}
    payload = model.flat_params().astype("<f8").tobytes()
    return CHECKPOINT_MAGIC + canonical_json(head) + b"\n" + payload


def checkpoint_from_bytes(data: bytes) -> ToyModel:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError("missing TOYM1 magic line", 0)
    start = len(CHECKPOINT_MAGIC)
    end = data.find(b"\n", start)
    if end < 0:
        raise CheckpointFormatError("unterminated header line", start)
    raw = data[start:end]
    try:
        head = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc}", start) from None
    if not isinstance(head, dict) or set(head) != {"C_in", "K", "dropout_p", "head", "seed"}:
        raise CheckpointFormatError("header must hold exactly C_in, K, dropout_p, head, seed", start)
    c_in, k, p, hd, seed = head["C_in"], head["K"], head["dropout_p"], head["head"], head["seed"]
    ints_ok = all(isinstance(v, int) and not isinstance(v, bool) for v in (c_in, k, seed))
    if not ints_ok or not isinstance(p, float) or hd not in HEADS:
        raise CheckpointFormatError("header field has the wrong type", start)
    if c_in < 1 or k < 2 or not 0.0 <= p < 1.0 or seed < 0:
        raise CheckpointFormatError("header field out of range", start)
    if canonical_json(head) != raw:
        raise CheckpointFormatError("header JSON is not canonical", start)
    offset = end + 1
    shapes = param_shapes(c_in, k)
    count = sum(int(np.prod(s)) for s in shapes.values())
    payload = data[offset:]
    if len(payload) != 8 * count:
        raise CheckpointFormatError(
            f"payload length mismatch: expected {8 * count} bytes, got {len(payload)}", offset)
    flat = np.frombuffer(payload, dtype="<f8")
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise CheckpointFormatError("non-finite parameter", offset + 8 * int(bad[0]))
    params, pos = {}, 0
    for name in PARAM_ORDER:
        size = int(np.prod(shapes[name]))
        params[name] = flat[pos:pos + size].reshape(shapes[name]).copy()
        pos += size
    return ToyModel(c_in, k, params, hd, p, seed)


def save_checkpoint(model: ToyModel, path) -> None:
    with open(os.fspath(path), "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> ToyModel:
    with open(os.fspath(path), "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def write_history_csv(hist: TrainHistory, path) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        fh.write("epoch,train_loss,val_dice,lr\n")
        for e, l, d, r in hist.rows():
            fh.write(f"{e},{l:.9g},{d:.9g},{r:.9g}\n")
