"""
Fully connected frame detector: one frame of synchronized I/Q in, the
frame's data-bit probabilities out. Training (backprop + Adam) is written
directly in numpy.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .transmitter import FrameConfig

log = logging.getLogger(__name__)

DEFAULT_LAYERS = (8, 100, 50, 20, 6)
_EPS = 1e-12
_TINY = np.finfo(np.float64).tiny
_EPSNEG = np.finfo(np.float64).epsneg


@dataclass(frozen=True)
class MlpConfig:
    layer_sizes: tuple = DEFAULT_LAYERS
    seed: int = 0
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 3:
            raise ValueError("need at least one hidden layer")
        if min(self.layer_sizes) < 1:
            raise ValueError("layer sizes must be positive")
        if self.hidden_activation != "relu" or self.output_activation != "sigmoid":
            raise ValueError("only relu hidden / sigmoid output activations are supported")

    def check_frame(self, frame: FrameConfig) -> None:
        n_in, n_out = 2 * frame.frame_len_symbols, frame.bits_per_frame
        if self.layer_sizes[0] != n_in or self.layer_sizes[-1] != n_out:
            raise ValueError(
                f"layer sizes {self.layer_sizes} do not fit a {frame.frame_len_symbols}-symbol frame "
                f"(need {n_in} inputs and {n_out} outputs)"
            )

    @classmethod
    def for_frame(cls, frame: FrameConfig, hidden=(100, 50, 20), seed: int = 0) -> "MlpConfig":
        return cls((2 * frame.frame_len_symbols, *hidden, frame.bits_per_frame), seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_sizes"] = list(self.layer_sizes)
        return d


@dataclass
class MlpModel:
    """Weights ``W[i]`` have shape (fan_in, fan_out); ``b[i]`` has shape (fan_out,)."""

    weights: list
    biases: list
    config: MlpConfig

    def __post_init__(self):
        sizes = self.config.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("layer count does not match config")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}/{b.shape}, expected {(sizes[i], sizes[i + 1])}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} contains non-finite values")

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.config)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    early_stop_patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: str = "bce"
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must be in (0, 0.5)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("batch_size, max_epochs and early_stop_patience must be >= 1")
        if self.loss != "bce" or self.optimizer != "adam":
            raise ValueError("only bce loss with the adam optimizer is supported")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameDataset:
    """Aligned frames ready for the network.

    ``inputs`` has shape (n, 2L): real parts of the frame's symbols followed
    by the imaginary parts. ``labels`` and ``conventional`` have shape (n, 2(L-1)).
    """

    inputs: np.ndarray
    labels: np.ndarray
    conventional: np.ndarray
    frame_index: np.ndarray | None = None
    split: str = "train"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.conventional = np.asarray(self.conventional, dtype=np.uint8)
        n = len(self.inputs)
        if self.inputs.ndim != 2 or self.labels.ndim != 2 or self.labels.shape != self.conventional.shape:
            raise ValueError("inconsistent record shapes")
        if len(self.labels) != n:
            raise ValueError("inputs and labels differ in length")
        if self.frame_index is None:
            self.frame_index = np.arange(n, dtype=np.int64)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        if len(self.frame_index) != n:
            raise ValueError("frame_index length mismatch")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split tag {self.split!r}")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs must be finite")
        if np.any(self.labels > 1) or np.any(self.conventional > 1):
            raise ValueError("labels must be 0/1")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx, split: str | None = None) -> "FrameDataset":
        return FrameDataset(
            self.inputs[idx],
            self.labels[idx],
            self.conventional[idx],
            self.frame_index[idx],
            split or self.split,
            dict(self.metadata),
        )

    @classmethod
    def from_aligned(cls, frames, split: str = "train", metadata: dict | None = None) -> "FrameDataset":
        return cls(frames.inputs(), frames.labels, frames.conventional, frames.tx_frame_index, split, metadata or {})


def init_model(cfg: MlpConfig, frame: FrameConfig | None = None) -> MlpModel:
    """He-normal hidden layers, small uniform output layer, zero biases."""
    if frame is not None:
        cfg.check_frame(frame)
    rng = np.random.default_rng(cfg.seed)
    sizes = cfg.layer_sizes
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        if i < len(sizes) - 2:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        else:
            lim = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, cfg)


def _sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_all(model: MlpModel, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else _sigmoid(z)
        acts.append(h)
    return pre, acts


def forward(model: MlpModel, inputs) -> np.ndarray:
    """Bit probabilities for one input vector or a (n, n_in) batch."""
    x = np.asarray(inputs, dtype=np.float64)
    n_in = model.config.layer_sizes[0]
    if x.shape[-1] != n_in:
        raise ValueError(f"input length {x.shape[-1]} does not match model input size {n_in}")
    single = x.ndim == 1
    _, acts = _forward_all(model, np.atleast_2d(x))
    # keep saturated logits strictly inside (0, 1)
    out = np.clip(acts[-1], _TINY, 1.0 - _EPSNEG)
    return out[0] if single else out


def _pre_output(model: MlpModel, x):
    pre, _ = _forward_all(model, x)
    return pre[-1]


def loss_and_gradients(model: MlpModel, inputs, labels) -> tuple[float, list]:
    """Mean BCE over every bit in the batch and its gradients.

    Gradients come back as [dW0, db0, dW1, db1, ...] matching ``model.params()``.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if len(x) == 0:
        raise ValueError("empty batch")
    pre, acts = _forward_all(model, x)
    z = pre[-1]
    # BCE written on logits: log(1+e^z) - y*z
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    delta = (acts[-1] - y) / y.size
    grads = []
    for i in range(len(model.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(acts[i].T @ delta)
        if i:
            delta = (delta @ model.weights[i].T) * (pre[i - 1] > 0)
    grads.reverse()
    # reversed list is [dW0, db0, ...] because each layer pushed db then dW
    return loss, grads


def bce_loss(probs, labels) -> float:
    """Mean BCE on probabilities, clamped away from 0 and 1."""
    p = np.clip(np.asarray(probs, dtype=np.float64), _EPS, 1 - _EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def rows(self) -> list[dict]:
        return [
            {"epoch": i, "train_loss": a, "val_loss": b, "train_acc": c, "val_acc": d}
            for i, (a, b, c, d) in enumerate(zip(self.train_loss, self.val_loss, self.train_acc, self.val_acc))
        ]

    @property
    def best_val_acc(self) -> float:
        return self.val_acc[self.best_epoch] if self.best_epoch >= 0 else float("nan")


def _metrics(model: MlpModel, x, y) -> tuple[float, float]:
    z = _pre_output(model, x)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    acc = float(np.mean((z > 0) == (y > 0.5)))
    return loss, acc


def train(
    dataset: FrameDataset,
    mcfg: MlpConfig,
    tcfg: TrainConfig,
    model: MlpModel | None = None,
) -> tuple[MlpModel, TrainHistory]:
    """Mini-batch Adam on BCE with early stopping on the held-out split.

    The returned model holds the weights of the best validation epoch.
    """
    if dataset.split != "train":
        raise ValueError("train() needs a train split")
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if n < 1000:
        log.warning("training on only %d frames", n)
    if dataset.inputs.shape[1] != mcfg.layer_sizes[0] or dataset.labels.shape[1] != mcfg.layer_sizes[-1]:
        raise ValueError("dataset record shapes do not match the model layer sizes")

    rng = np.random.default_rng(tcfg.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(tcfg.validation_fraction * n)))
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if len(tr_idx) == 0:
        raise ValueError("dataset too small to hold out a validation split")
    x_all = dataset.inputs
    y_all = dataset.labels.astype(np.float64)
    x_val, y_val = x_all[val_idx], y_all[val_idx]
    x_tr, y_tr = x_all[tr_idx], y_all[tr_idx]

    model = (model or init_model(mcfg)).copy()
    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, lr, eps = tcfg.beta1, tcfg.beta2, tcfg.learning_rate, tcfg.adam_eps
    step = 0
    hist = TrainHistory()
    best_loss, best = np.inf, model.copy()
    bad = 0

    for epoch in range(tcfg.max_epochs):
        order = rng.permutation(len(tr_idx))
        for bi, s in enumerate(range(0, len(order), tcfg.batch_size)):
            sel = order[s : s + tcfg.batch_size]
            loss, grads = loss_and_gradients(model, x_tr[sel], y_tr[sel])
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, bi)
            step += 1
            c1, c2 = 1 - b1**step, 1 - b2**step
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        tl, ta = _metrics(model, x_tr, y_tr)
        vl, va = _metrics(model, x_val, y_val)
        hist.train_loss.append(tl)
        hist.train_acc.append(ta)
        hist.val_loss.append(vl)
        hist.val_acc.append(va)
        log.debug("epoch %d train %.5f/%.5f val %.5f/%.5f", epoch, tl, ta, vl, va)
        if vl < best_loss:
            best_loss, best, bad = vl, model.copy(), 0
            hist.best_epoch = epoch
        else:
            bad += 1
            if bad >= tcfg.early_stop_patience:
                hist.stopped_early = True
                break
    return best, hist


def detect(model: MlpModel, frames) -> np.ndarray:
    """Hard bit decisions (output > 0.5) concatenated in frame order."""
    x = frames.inputs if isinstance(frames, FrameDataset) else np.asarray(frames, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.config.layer_sizes[0]:
        raise ValueError(f"frame input size {x.shape[1]} does not match model input {model.config.layer_sizes[0]}")
    return threshold_bits(forward(model, x))


def threshold_bits(probs) -> np.ndarray:
    return (np.asarray(probs) > 0.5).astype(np.uint8).ravel()


def evaluate_ber(pred, truth) -> float:
    p = np.asarray(pred).ravel()
    t = np.asarray(truth).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    if p.size == 0:
        raise ValueError("cannot evaluate BER on empty streams")
    return float(np.count_nonzero(p != t)) / p.size
