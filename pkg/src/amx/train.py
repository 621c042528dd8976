"""Adam training loops for the classifier and the autoencoder."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Graph, Tensor
from .data import DatasetSplit, LabeledExample, batch_iter, stack
from .errors import ConfigError, DimensionError, EvaluationError, NumericError, TrainingError
from .models import (DEFAULT_LATENT_DIM, AutoencoderModel, ClassifierModel, init_autoencoder, init_classifier,
                     input_normalization, predict)

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    initial_train_loss: float = math.nan
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for i in range(len(self)):
                acc = self.val_acc[i]
                w.writerow([i + 1, repr(self.train_loss[i]), repr(self.val_loss[i]),
                            "" if math.isnan(acc) else repr(acc)])


@dataclass
class AdamState:
    # moments are float64 whatever the parameter precision: float32 squares of
    # small gradients go subnormal and stall the arithmetic
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place; bumps ``state.t``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} state slots")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam_step: param shape {p.shape} vs grad shape {g.shape}")
        g = np.asarray(g, dtype=np.float64)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, t in params.items():
        t.data[...] = snap[k]


def _classifier_loss(model: ClassifierModel, x: np.ndarray, y: np.ndarray, g: Graph) -> Tensor:
    logits = model.logits(g, Tensor(x.astype(model.dtype, copy=False)))
    return g.cross_entropy(g.softmax(logits), y)


def _eval_classifier(model: ClassifierModel, x: np.ndarray, y: np.ndarray, batch_size: int = 64):
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        g = Graph(grad=False)
        logits = model.logits(g, Tensor(xb.astype(model.dtype, copy=False)))
        loss = g.cross_entropy(g.softmax(logits), yb)
        total += float(loss.data) * len(xb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total / len(x), correct / len(x)


def _run_epochs(params: dict[str, Tensor], config: TrainConfig, n_train: int,
                batch_loss: Callable[[np.ndarray, Graph], Tensor],
                evaluate: Callable[[], tuple[float, float]], better: Callable[[tuple, tuple], bool],
                what: str) -> TrainHistory:
    tensors = list(params.values())
    state = AdamState.zeros_like([t.data for t in tensors])
    history = TrainHistory()
    best_key, best_snap = None, None
    for epoch in range(config.epochs):
        running = 0.0
        for b, idx in enumerate(batch_iter(np.arange(n_train), config.batch_size, shuffle_seed=[config.seed, epoch])):
            g = Graph()
            try:
                loss = batch_loss(idx, g)
                g.backward(loss)
            except NumericError as exc:
                raise TrainingError(f"{what} training diverged at epoch {epoch + 1}, batch {b + 1}: {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"{what} training diverged at epoch {epoch + 1}, batch {b + 1}: loss {value}")
            running += value * len(idx)
            adam_step([t.data for t in tensors], [t.grad for t in tensors], state, config.learning_rate,
                      config.beta1, config.beta2, config.eps)
            for t in tensors:
                t.zero_grad()
        val_loss, val_acc = evaluate()
        history.train_loss.append(running / n_train)
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        key = (val_acc, -val_loss)
        if best_key is None or better(key, best_key):
            best_key, best_snap, history.best_epoch = key, _snapshot(params), epoch + 1
        log.info("%s epoch %d/%d train_loss=%.5f val_loss=%.5f val_acc=%.4f", what, epoch + 1, config.epochs,
                 history.train_loss[-1], val_loss, val_acc)
    _restore(params, best_snap)
    return history


def train_classifier(split: DatasetSplit, config: TrainConfig) -> tuple[ClassifierModel, TrainHistory]:
    """Minimize cross-entropy with Adam; returns the best-validation-accuracy parameters.

    Validation falls back to the training set when the split has no
    validation examples.
    """
    if not split.train:
        raise TrainingError("cannot train a classifier on an empty train split")
    x_tr, y_tr = stack(split.train)
    x_va, y_va = stack(split.val) if split.val else (x_tr, y_tr)
    model = init_classifier(config.seed, split.num_classes, config.dtype, split.class_names)
    model.input_norm = input_normalization(x_tr)
    history = TrainHistory()
    history.initial_train_loss = _eval_classifier(model, x_tr, y_tr)[0]
    run = _run_epochs(
        model.params, config, len(x_tr),
        lambda idx, g: _classifier_loss(model, x_tr[idx], y_tr[idx], g),
        lambda: _eval_classifier(model, x_va, y_va),
        lambda new, old: new > old,  # accuracy first, lower loss breaks ties
        "classifier",
    )
    run.initial_train_loss = history.initial_train_loss
    return model, run


def _recon_loss(model: AutoencoderModel, x: np.ndarray, g: Graph) -> Tensor:
    xt = Tensor(x.astype(model.dtype, copy=False))
    return g.mse(model.decode(g, model.encode(g, xt)), xt)


def reconstruction_mse(model: AutoencoderModel, x: np.ndarray, batch_size: int = 64) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        total += float(_recon_loss(model, x[i:i + batch_size], Graph(grad=False)).data) * len(x[i:i + batch_size])
    return total / len(x)


def train_autoencoder(split: DatasetSplit, config: TrainConfig,
                      latent_dim: int = DEFAULT_LATENT_DIM) -> tuple[AutoencoderModel, TrainHistory]:
    """Minimize reconstruction mse; returns the lowest-validation-loss parameters."""
    if not split.train:
        raise TrainingError("cannot train an autoencoder on an empty train split")
    x_tr, _ = stack(split.train)
    x_va = stack(split.val)[0] if split.val else x_tr
    model = init_autoencoder(config.seed, latent_dim, config.dtype)
    model.input_norm = input_normalization(x_tr)
    initial = reconstruction_mse(model, x_tr)
    history = _run_epochs(
        model.params, config, len(x_tr),
        lambda idx, g: _recon_loss(model, x_tr[idx], g),
        lambda: (reconstruction_mse(model, x_va), math.nan),
        lambda new, old: new[1] > old[1],  # key is (nan, -val_loss)
        "autoencoder",
    )
    history.initial_train_loss = initial
    return model, history


def evaluate_accuracy(model, examples) -> float:
    """Fraction of examples whose argmax prediction equals the label.

    ``model`` is a :class:`ClassifierModel` or any callable mapping a
    ``(N, 80, 64)`` stack to ``(N, K)`` scores; ``examples`` is a list of
    :class:`LabeledExample` or an ``(x, y)`` pair.
    """
    if isinstance(examples, tuple):
        x, y = examples
    else:
        if not examples:
            raise EvaluationError("cannot evaluate accuracy on an empty example list")
        x, y = stack(examples)
    if len(y) == 0:
        raise EvaluationError("cannot evaluate accuracy on an empty example list")
    if isinstance(model, ClassifierModel):
        pred = predict(model, x)
    else:
        pred = np.argmax(np.asarray(model(x)), axis=1)
    return float(np.mean(pred == np.asarray(y)))


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


__all__ = ["TrainConfig", "TrainHistory", "AdamState", "adam_step", "train_classifier", "train_autoencoder",
           "evaluate_accuracy", "reconstruction_mse", "LabeledExample"]
