"""Optimizers, the training loop, evaluation metrics and run reports."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, batches
from .functional import cross_entropy, log_softmax
from .layers import KANLinear, spline_l1_penalty
from .models import Model
from .tensor import ShapeMismatch, Tape, Tensor


class InvalidConfig(ValueError):
    pass


class TrainingFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # None falls back to the model's mini_config.lam
    lam: float | None = None
    grid_extension_schedule: tuple = ()
    reservoir_size: int = 512
    eval_batch_size: int = 256
    deterministic: bool = True

    def __post_init__(self):
        self.grid_extension_schedule = tuple(tuple(int(v) for v in item)
                                             for item in self.grid_extension_schedule)
        if self.epochs < 1:
            raise InvalidConfig("epochs must be at least 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise InvalidConfig("batch sizes must be at least 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.lam is not None and self.lam < 0:
            raise InvalidConfig("lam must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidConfig(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        for item in self.grid_extension_schedule:
            if len(item) != 2 or item[0] < 1 or item[1] < 1:
                raise InvalidConfig(f"grid extension entries are (epoch, new_g), got {item}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_extension_schedule"] = [list(item) for item in self.grid_extension_schedule]
        return d


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr_scales: dict[str, float] | None = None) -> None:
        lr_scales = lr_scales or {}
        for name, p in params.items():
            g = _checked_grad(name, p, grads)
            lr = self.lr * lr_scales.get(name, 1.0)
            p.data -= (lr * g).astype(p.dtype, copy=False)


class Adam:
    """Adam with bias correction.  Moments are kept per parameter name and
    restart when a parameter changes shape (e.g. after grid extension)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, dict] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr_scales: dict[str, float] | None = None) -> None:
        b1, b2 = self.beta1, self.beta2
        lr_scales = lr_scales or {}
        for name, p in params.items():
            g = _checked_grad(name, p, grads)
            st = self.state.get(name)
            if st is None or st["m"].shape != p.shape:
                st = self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            st["t"] += 1
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * (g * g)
            mhat = st["m"] / (1 - b1 ** st["t"])
            vhat = st["v"] / (1 - b2 ** st["t"])
            lr = self.lr * lr_scales.get(name, 1.0)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)


def _checked_grad(name, p, grads) -> np.ndarray:
    g = np.asarray(grads[name])
    if g.shape != p.shape:
        raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
    return g


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    return Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state, config: TrainConfig,
                   lr_scales: dict[str, float] | None = None):
    """Functional form: ``state`` is an optimizer or None (one is created)."""
    opt = state if state is not None else make_optimizer(config)
    opt.step(params, grads, lr_scales)
    return params, opt


# ---------------------------------------------------------------- metrics

def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, np.int64), np.asarray(preds, np.int64)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> dict:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    total = cm.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return {
        "accuracy": accuracy,
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
        # pooled over classes; both equal accuracy since every sample is
        # predicted exactly once and has exactly one true class
        "micro_precision": float(tp.sum() / predicted.sum()) if total else 0.0,
        "micro_recall": float(tp.sum() / support.sum()) if total else 0.0,
        "per_class_precision": precision.tolist(),
        "per_class_recall": recall.tolist(),
        "per_class_f1": f1.tolist(),
        "absent_classes": [int(c) for c in np.flatnonzero(support == 0)],
        "never_predicted": [int(c) for c in np.flatnonzero(predicted == 0)],
    }


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        out = [model(Tensor(images[i:i + batch_size])).data for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    k = model.spec.num_classes if model.spec else 0
    return np.concatenate(out) if out else np.zeros((0, k), np.float32)


def evaluate(model: Model, ds: Dataset, batch_size: int = 256) -> dict:
    """Accuracy, macro P/R/F1, confusion matrix and mean cross-entropy."""
    logits = predict_logits(model, ds.images, batch_size)
    preds = logits.argmax(axis=1)
    cm = confusion_matrix(ds.labels, preds, ds.num_classes)
    result = metrics_from_confusion(cm)
    if len(ds):
        logp = log_softmax(logits.astype(np.float64))
        result["loss"] = float(-logp[np.arange(len(ds)), ds.labels].mean())
    else:
        result["loss"] = 0.0
    result["confusion_matrix"] = cm.tolist()
    return result


# ---------------------------------------------------------------- reports

CURVE_COLUMNS = ("epoch", "train_loss", "test_loss", "accuracy", "precision", "recall", "f1")


@dataclass
class RunReport:
    config: dict
    model: dict
    seed: int
    epochs: list = field(default_factory=list)
    confusion_matrix: list = field(default_factory=list)
    absent_classes: list = field(default_factory=list)
    parameters: int = 0
    wall_clock_seconds: float = 0.0
    # resolved command-line settings, when run from the CLI
    context: dict = field(default_factory=dict)
    # schema tag for downstream readers
    schema: str = "kanice.run/1"

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_seconds")
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def curves_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for row in self.epochs:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in CURVE_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


# ---------------------------------------------------------------- training

def total_penalty(model: Model, lam: float) -> Tensor | None:
    terms = [spline_l1_penalty(layer, lam) for layer in model.kan_layers()]
    if not terms or lam == 0:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def resolve_lambda(model: Model, config: TrainConfig) -> float:
    if config.lam is not None:
        return float(config.lam)
    return float(model.spec.mini_config.lam) if model.spec else 0.0


def training_loss(model: Model, images, labels, lam: float) -> tuple[Tensor, Tensor]:
    """(total loss, classification loss) for one batch under the active tape."""
    ce = cross_entropy(model(Tensor(images)), labels)
    pen = total_penalty(model, lam)
    return (ce if pen is None else ce + pen), ce


def apply_grid_extension(model: Model, new_g: int, reservoir: np.ndarray) -> None:
    """Refit every KANLinear layer onto ``new_g`` intervals, using the inputs
    that layer sees for the reservoir images (eval mode, sequentially so each
    layer is fitted on its already-extended predecessor's outputs)."""
    was_training = model.training
    model.eval()
    try:
        for idx, layer in enumerate(model.layers):
            if isinstance(layer, KANLinear):
                x = Tensor(reservoir)
                acts = model.forward(x, upto=idx - 1).data if idx > 0 else reservoir
                layer.grid_extend(new_g, acts.reshape(len(acts), -1))
    finally:
        model.train(was_training)


def train(model: Model, train_ds: Dataset, test_ds: Dataset, config: TrainConfig,
          log=None) -> RunReport:
    """Minibatch training with per-epoch evaluation on ``test_ds``."""
    if model.spec is not None and model.spec.num_classes != train_ds.num_classes:
        raise ShapeMismatch(f"model predicts {model.spec.num_classes} classes, data has {train_ds.num_classes}")
    lam = resolve_lambda(model, config)
    opt = make_optimizer(config)
    schedule = dict(config.grid_extension_schedule)
    report = RunReport(config=config.to_dict(), model=model.spec.to_dict() if model.spec else {},
                       seed=config.seed, parameters=sum(p.size for p in model.parameters().values()))
    reservoir = np.zeros((0,) + train_ds.input_shape, dtype=train_ds.images.dtype)
    start = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        if epoch in schedule:
            source = reservoir if len(reservoir) else train_ds.images[:config.reservoir_size]
            apply_grid_extension(model, schedule[epoch], source)
        model.train()
        loss_sum, seen = 0.0, 0
        for xb, yb in batches(train_ds, config.batch_size, seed=config.seed, epoch=epoch):
            params = model.parameters()
            with Tape() as tape:
                loss, _ = training_loss(model, xb, yb, lam)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingFailure(f"non-finite loss {value} in epoch {epoch}")
            grads = tape.backward(loss, wrt=params.values())
            opt.step(params, {name: grads[id(p)].data for name, p in params.items()}, model.lr_scales())
            loss_sum += value * len(yb)
            seen += len(yb)
            if schedule:
                reservoir = np.concatenate([reservoir, xb])[-config.reservoir_size:]

        metrics = evaluate(model, test_ds, config.eval_batch_size)
        row = {"epoch": epoch, "train_loss": loss_sum / max(seen, 1), "test_loss": metrics["loss"],
               "accuracy": metrics["accuracy"], "precision": metrics["precision"],
               "recall": metrics["recall"], "f1": metrics["f1"]}
        report.epochs.append(row)
        report.confusion_matrix = metrics["confusion_matrix"]
        report.absent_classes = metrics["absent_classes"]
        if log is not None:
            log(f"epoch {epoch}/{config.epochs} train_loss {row['train_loss']:.4f} "
                f"test_loss {row['test_loss']:.4f} acc {row['accuracy']:.4f}")

    report.wall_clock_seconds = time.perf_counter() - start
    return report
