"""FGSM attacks, robustness tables and feature-shift diagnostics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .functional import cross_entropy
from .models import Model
from .tensor import Tape, Tensor
from .training import predict_logits

DEFAULT_EPSILONS = (0.01, 0.03, 0.05, 0.1)


class NegativeEpsilon(ValueError):
    pass


class InvalidTap(ValueError):
    pass


@dataclass
class AttackConfig:
    epsilons: tuple = DEFAULT_EPSILONS
    clamp: tuple = (0.0, 1.0)
    batch_size: int = 256

    def __post_init__(self):
        self.epsilons = tuple(float(e) for e in self.epsilons)
        self.clamp = (float(self.clamp[0]), float(self.clamp[1]))
        for eps in self.epsilons:
            if eps < 0:
                raise NegativeEpsilon(f"epsilon must be non-negative, got {eps}")


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean classification loss (no spline penalty) w.r.t. ``x``."""
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = cross_entropy(model(xt), y)
    return tape.backward(loss, wrt=[xt])[id(xt)].data


def _step_within(x: np.ndarray, eps: float, direction: np.ndarray) -> np.ndarray:
    """x + eps * direction in x's dtype, nudged so |result - x| <= eps holds
    exactly when measured in 64-bit."""
    cand = (x + x.dtype.type(eps) * direction).astype(x.dtype, copy=False)
    over = np.abs(cand.astype(np.float64) - x.astype(np.float64)) > eps
    while over.any():
        cand[over] = np.nextafter(cand[over], x[over])
        over = np.abs(cand.astype(np.float64) - x.astype(np.float64)) > eps
    return cand


def fgsm_attack(model: Model, x, y, eps: float, config: AttackConfig | None = None) -> np.ndarray:
    """One signed-gradient step: clamp(x + eps * sign(grad_x J), lo, hi).

    The model is evaluated in eval mode.  sign(0) = 0, so pixels with zero
    gradient are left untouched.
    """
    config = config or AttackConfig()
    if eps < 0:
        raise NegativeEpsilon(f"epsilon must be non-negative, got {eps}")
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if eps == 0:
        return x.copy()
    was_training = model.training
    model.eval()
    try:
        out = np.empty_like(x)
        bs = config.batch_size
        for i in range(0, len(x), bs):
            xb = x[i:i + bs]
            # per-batch mean keeps gradient signs equal to per-sample signs
            g = input_gradient(model, xb, y[i:i + bs])
            adv = _step_within(xb, eps, np.sign(g).astype(xb.dtype))
            out[i:i + bs] = np.clip(adv, *config.clamp)
    finally:
        model.train(was_training)
    return out


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    if len(y) == 0:
        return 0.0
    preds = predict_logits(model, x, batch_size).argmax(axis=1)
    return float((preds == y).mean())


def _eps_label(eps: float) -> str:
    return f"eps={eps:g}"


@dataclass
class RobustnessTable:
    epsilons: tuple
    rows: dict = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        return ["clean"] + [_eps_label(e) for e in self.epsilons]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model"] + self.columns)
        for name, row in self.rows.items():
            writer.writerow([name] + [repr(row[c]) for c in self.columns])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"epsilons": list(self.epsilons), "columns": self.columns, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def robustness_table(models: dict[str, Model], ds: Dataset, config: AttackConfig | None = None) -> RobustnessTable:
    """Accuracy of each model on clean data and under FGSM at each epsilon."""
    config = config or AttackConfig()
    table = RobustnessTable(config.epsilons)
    for name, model in models.items():
        row = {"clean": accuracy(model, ds.images, ds.labels, config.batch_size)}
        for eps in config.epsilons:
            adv = fgsm_attack(model, ds.images, ds.labels, eps, config)
            row[_eps_label(eps)] = accuracy(model, adv, ds.labels, config.batch_size)
        table.rows[name] = row
    return table


def _resolve_tap(model: Model, tap) -> int:
    if isinstance(tap, str):
        if tap not in model.taps:
            raise InvalidTap(f"unknown tap {tap!r}; choose from {sorted(model.taps)} or a layer index")
        return model.taps[tap]
    if isinstance(tap, (int, np.integer)) and 0 <= tap < len(model.layers):
        return int(tap)
    raise InvalidTap(f"tap {tap!r} is not a layer index of a {len(model.layers)}-layer model")


def feature_shift(model: Model, x, x_adv, taps=("trunk", "head"), batch_size: int = 256) -> dict:
    """Mean over the batch of ||h(x) - h(x_adv)||_2 at each tap, where h is
    the model truncated after the tap layer (eval mode)."""
    x, x_adv = np.asarray(x), np.asarray(x_adv)
    if x.shape != x_adv.shape:
        raise ValueError(f"clean {x.shape} and adversarial {x_adv.shape} batches differ")
    resolved = {str(t): _resolve_tap(model, t) for t in taps}
    was_training = model.training
    model.eval()
    try:
        out = {}
        for name, idx in resolved.items():
            norms = []
            for i in range(0, len(x), batch_size):
                a = model.forward(Tensor(x[i:i + batch_size]), upto=idx).data
                b = model.forward(Tensor(x_adv[i:i + batch_size]), upto=idx).data
                diff = (a.astype(np.float64) - b.astype(np.float64)).reshape(len(a), -1)
                norms.append(np.sqrt((diff * diff).sum(axis=1)))
            out[name] = float(np.concatenate(norms).mean()) if norms else 0.0
    finally:
        model.train(was_training)
    return out
