"""Finite-difference checks of tape gradients.

Analytic gradients are taken at the layer's own precision.  The numeric side
always runs on a 64-bit copy with central differences of step
h = 1e-4 * max(1, |x|), so 32-bit checks are not swamped by rounding in the
difference quotient.  Errors are reported as max|analytic - numeric| /
max|numeric| per tensor.
"""
from __future__ import annotations

import copy

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(f, arr: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        h = rel_step * max(1.0, abs(float(orig)))
        arr[idx] = orig + h
        up = f()
        arr[idx] = orig - h
        down = f()
        arr[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_layer(layer, x: np.ndarray, seed: int = 0, wrt_input: bool = True,
                rel_step: float = 1e-4) -> dict[str, float]:
    """Compare tape gradients of sum(layer(x) * r), r random, with finite
    differences for the input and every parameter.  Returns name -> error."""
    rng = np.random.default_rng(seed)
    dtype = next(iter(layer.parameters().values())).dtype if layer.parameters() else np.float32
    xt = Tensor(np.asarray(x, dtype=dtype), requires_grad=wrt_input)
    out_shape = layer(Tensor(np.asarray(x, dtype=dtype))).shape
    r = rng.normal(size=out_shape)

    params = layer.parameters()
    with Tape() as tape:
        loss = (layer(xt) * Tensor(r.astype(dtype))).sum()
    targets = ([xt] if wrt_input else []) + list(params.values())
    grads = tape.backward(loss, wrt=targets)

    ref = copy.deepcopy(layer).to(np.float64)
    x64 = np.asarray(x, dtype=np.float64).copy()
    ref_params = ref.parameters()

    def f():
        return float((ref(Tensor(x64)).data * r).sum())

    errors = {}
    if wrt_input:
        errors["input"] = relative_error(grads[id(xt)].data, numeric_grad(f, x64, rel_step))
    for name, p in params.items():
        errors[name] = relative_error(grads[id(p)].data, numeric_grad(f, ref_params[name].data, rel_step))
    return errors


def check_function(fn, inputs: list[np.ndarray], seed: int = 0, dtype=np.float32,
                   rel_step: float = 1e-4) -> list[float]:
    """Same check for a plain function of tensors."""
    rng = np.random.default_rng(seed)
    ts = [Tensor(np.asarray(a, dtype=dtype), requires_grad=True) for a in inputs]
    r = rng.normal(size=fn(*[Tensor(t.data) for t in ts]).shape)
    with Tape() as tape:
        loss = (fn(*ts) * Tensor(r.astype(dtype))).sum()
    grads = tape.backward(loss, wrt=ts)
    arrs = [np.asarray(a, dtype=np.float64).copy() for a in inputs]

    def f():
        return float((fn(*[Tensor(a) for a in arrs]).data * r).sum())

    return [relative_error(grads[id(t)].data, numeric_grad(f, a, rel_step)) for t, a in zip(ts, arrs)]
