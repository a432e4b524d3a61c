"""Differentiable layers: convolutional trunk pieces and the KAN heads."""
from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .spline import SplineBasis, basis_tensor, basis_values, extended_basis, ridge_solve
from .tensor import DEFAULT_DTYPE, ShapeMismatch, Tensor, as_tensor, matmul, primitive, tabs


class GroupMismatch(ValueError):
    pass


class NegativeLambda(ValueError):
    pass


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Layer:
    training = True

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(as_tensor(x))

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        pass

    def train(self, mode: bool = True) -> Layer:
        self.training = mode
        return self

    def eval(self) -> Layer:
        return self.train(False)

    def to(self, dtype) -> Layer:
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def lr_scales(self) -> dict[str, float]:
        """Per-parameter learning-rate multipliers (default 1)."""
        return {}


class Conv2D(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, *,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.weight = _uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype)
        self.bias = _uniform(rng, (out_channels,), fan_in, dtype) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeMismatch(f"expected {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, F.conv_output_size(h, k, s, p), F.conv_output_size(w, k, s, p))


class ICB(Layer):
    """Interactive convolution block: GELU(conv3x3(x)) * GELU(conv5x5(x)).

    Both paths use same-padding so their outputs align elementwise.
    """

    def __init__(self, in_channels: int, out_channels: int, *, bias: bool = False,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        self.conv3 = Conv2D(in_channels, out_channels, 3, padding=1, bias=bias, rng=rng, dtype=dtype)
        self.conv5 = Conv2D(in_channels, out_channels, 5, padding=2, bias=bias, rng=rng, dtype=dtype)

    def forward(self, x):
        return F.gelu(self.conv3(x)) * F.gelu(self.conv5(x))

    def parameters(self):
        params = {f"conv3.{k}": v for k, v in self.conv3.parameters().items()}
        params.update({f"conv5.{k}": v for k, v in self.conv5.parameters().items()})
        return params

    def output_shape(self, shape):
        return self.conv3.output_shape(shape)


class BatchNorm2D(Layer):
    def __init__(self, channels: int, *, eps: float = 1e-5, momentum: float = 0.1, dtype=DEFAULT_DTYPE):
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeMismatch(f"expected (N, {self.gamma.shape[0]}, H, W), got {x.shape}")
        if not self.training:
            out, _, _ = F.batch_norm2d(x, self.gamma, self.beta, self.eps,
                                       self.running_mean, self.running_var)
            return out
        out, mean, var = F.batch_norm2d(x, self.gamma, self.beta, self.eps)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mom = self.momentum
        self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(self.running_mean.dtype)
        unbiased = var * (m / (m - 1))
        self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(self.running_var.dtype)
        return out

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_buffers(self, buffers):
        self.running_mean = np.array(buffers["running_mean"])
        self.running_var = np.array(buffers["running_var"])

    def to(self, dtype):
        super().to(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def output_shape(self, shape):
        return shape


class MaxPool2D(Layer):
    def __init__(self, size: int = 2, stride: int | None = None):
        self.size, self.stride = size, stride or size

    def forward(self, x):
        return F.maxpool2d(x, self.size, self.stride)

    def output_shape(self, shape):
        c, h, w = shape
        return (c, (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1)


class Activation(Layer):
    def __init__(self, name: str = "gelu"):
        if name not in F.ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}")
        self.name = name
        self.fn = F.ACTIVATIONS[name]

    def forward(self, x):
        return self.fn(x)

    def output_shape(self, shape):
        return shape


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Normalize(Layer):
    """Fixed per-channel (x - mean) / std on NCHW input."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape or (self.std <= 0).any():
            raise ValueError("mean and std need one entry per channel and std > 0")

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.mean.size:
            raise ShapeMismatch(f"expected (N, {self.mean.size}, H, W), got {x.shape}")
        mean = self.mean.astype(x.dtype)[:, None, None]
        inv = (1.0 / self.std).astype(x.dtype)[:, None, None]
        return primitive((x.data - mean) * inv, (x,), lambda g: (g * inv,))

    def buffers(self):
        return {"mean": self.mean, "std": self.std}

    def load_buffers(self, buffers):
        self.mean = np.asarray(buffers["mean"], dtype=np.float64)
        self.std = np.asarray(buffers["std"], dtype=np.float64)

    def output_shape(self, shape):
        return shape


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, *, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = _uniform(rng, (out_features, in_features), in_features, dtype)
        self.bias = _uniform(rng, (out_features,), in_features, dtype) if bias else None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"expected (N, {self.in_features}), got {x.shape}")
        y = matmul(x, self.weight.T)
        return y + self.bias if self.bias is not None else y

    def parameters(self):
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def output_shape(self, shape):
        return (self.out_features,)


def _spline_init(rng, shape, n_basis, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, 0.1 / n_basis, size=shape).astype(dtype), requires_grad=True)


class KANLinear(Layer):
    """Edge-wise KAN layer: y_q = sum_p w[q,p] * (silu(x_p) + spline_qp(x_p)).

    All edges share one clamped B-spline basis; each edge owns its own
    coefficient vector.  Inputs outside the basis domain are clamped on the
    spline path only.
    """

    def __init__(self, in_features: int, out_features: int, *, grid_size: int = 5,
                 degree: int = 3, domain=(-1.0, 1.0), rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.basis = SplineBasis(grid_size, degree, float(domain[0]), float(domain[1]))
        self.base_weight = _uniform(rng, (out_features, in_features), in_features, dtype)
        self.spline_coef = _spline_init(rng, (out_features, in_features, self.basis.n_basis),
                                        self.basis.n_basis, dtype)

    def forward(self, x):
        n, p = x.shape if x.ndim == 2 else (None, None)
        if p != self.in_features:
            raise ShapeMismatch(f"expected (N, {self.in_features}), got {x.shape}")
        q, nb = self.out_features, self.basis.n_basis
        base = matmul(F.silu(x), self.base_weight.T)
        # w[q,p] * c[q,p,:] under trailing-dimension broadcasting
        scaled = (self.spline_coef.permute(2, 0, 1) * self.base_weight).permute(1, 2, 0)
        feats = basis_tensor(self.basis, x).reshape(n, p * nb)
        return base + matmul(feats, scaled.reshape(q, p * nb).T)

    def parameters(self):
        return {"base_weight": self.base_weight, "spline_coef": self.spline_coef}

    def spline_parameters(self) -> list[Tensor]:
        return [self.spline_coef]

    def buffers(self):
        b = self.basis
        return {"basis": np.array([b.grid_size, b.degree, b.lo, b.hi], dtype=np.float64)}

    def load_buffers(self, buffers):
        g, k, lo, hi = buffers["basis"]
        self.basis = SplineBasis(int(g), int(k), float(lo), float(hi))

    def output_shape(self, shape):
        return (self.out_features,)

    def grid_extend(self, new_g: int, samples) -> KANLinear:
        """Refit every edge spline onto a ``new_g`` grid by least squares
        over ``samples`` (shape ``(M, in_features)``).  Base weights stay."""
        samples = np.asarray(samples.data if isinstance(samples, Tensor) else samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[1] != self.in_features:
            raise ShapeMismatch(f"samples must be (M, {self.in_features}), got {samples.shape}")
        new_basis = extended_basis(self.basis, new_g, samples)
        old_vals = basis_values(self.basis, samples, extrapolate=True)  # (M, P, G1)
        coef = self.spline_coef.data.astype(np.float64)     # (Q, P, G1)
        new_coef = np.empty((self.out_features, self.in_features, new_basis.n_basis))
        for p in range(self.in_features):
            target = old_vals[:, p, :] @ coef[:, p, :].T    # (M, Q)
            design = basis_values(new_basis, samples[:, p])  # (M, G2)
            new_coef[:, p, :] = ridge_solve(design, target).T
        self.basis = new_basis
        self.spline_coef = Tensor(new_coef.astype(self.spline_coef.dtype), requires_grad=True)
        return self


class KANLinearMini(Layer):
    """Compact KAN layer: grouped linear map + bias + spline correction.

    The spline path evaluates a basis on ``[0, 1]`` at u(x) = clamp((x - lo) /
    (hi - lo), 0, 1).  With ``shared`` one coefficient row per output is
    applied to every input and the results summed over inputs; otherwise each
    (output, input) pair has its own row, and with ``literal_x_gate`` the
    per-input term is additionally multiplied by x_j.
    """

    def __init__(self, in_features: int, out_features: int, *, grid_size: int = 8,
                 degree: int = 3, groups: int = 1, shared: bool = True,
                 literal_x_gate: bool | None = None, input_range=(0.0, 1.0),
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        if groups < 1 or in_features % groups or out_features % groups:
            raise GroupMismatch(f"{groups} groups must divide both {in_features} and {out_features}")
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features, self.groups = in_features, out_features, groups
        self.shared = shared
        self.literal_x_gate = (not shared) if literal_x_gate is None else bool(literal_x_gate)
        self.input_range = (float(input_range[0]), float(input_range[1]))
        self.basis = SplineBasis(grid_size, degree, 0.0, 1.0)
        gin, gout = in_features // groups, out_features // groups
        self.base_weight = _uniform(rng, (groups, gout, gin), gin, dtype)
        self.bias = _uniform(rng, (out_features,), gin, dtype)
        nb = self.basis.n_basis
        shape = (out_features, nb) if shared else (out_features, in_features, nb)
        self.spline_weight = _spline_init(rng, shape, nb, dtype)
        if shared:
            # one row serves all n inputs and the terms add coherently, so
            # shrink by n to keep the initial spline path near zero
            self.spline_weight.data /= in_features

    def grouped_linear(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        c = self.groups
        if c == 1:
            return matmul(x, self.base_weight.reshape(self.out_features, self.in_features).T) + self.bias
        xg = x.reshape(n, c, self.in_features // c).permute(1, 0, 2)        # (C, N, n/C)
        yg = matmul(xg, self.base_weight.permute(0, 2, 1))                  # (C, N, m/C)
        return yg.permute(1, 0, 2).reshape(n, self.out_features) + self.bias

    def normalized(self, x: Tensor) -> Tensor:
        lo, hi = self.input_range
        return (x - lo) * (1.0 / (hi - lo))

    def spline_path(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        nb = self.basis.n_basis
        feats = basis_tensor(self.basis, self.normalized(x))               # (N, n, G)
        if self.shared:
            return matmul(feats.sum(axis=1), self.spline_weight.T)
        if self.literal_x_gate:
            feats = (feats.permute(2, 0, 1) * x).permute(1, 2, 0)
        w = self.spline_weight.reshape(self.out_features, self.in_features * nb)
        return matmul(feats.reshape(n, self.in_features * nb), w.T)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"expected (N, {self.in_features}), got {x.shape}")
        return self.grouped_linear(x) + self.spline_path(x)

    def parameters(self):
        return {"base_weight": self.base_weight, "bias": self.bias, "spline_weight": self.spline_weight}

    def spline_parameters(self) -> list[Tensor]:
        return [self.spline_weight]

    def lr_scales(self):
        # a shared row acts on all n inputs at once, so an optimizer step of a
        # given size moves the output n times further than a base weight step
        return {"spline_weight": 1.0 / self.in_features} if self.shared else {}

    def output_shape(self, shape):
        return (self.out_features,)


def spline_l1_penalty(layer: KANLinear | KANLinearMini, lam: float) -> Tensor:
    """lam * sum |spline coefficients| of one layer."""
    if lam < 0:
        raise NegativeLambda(f"lambda must be non-negative, got {lam}")
    total = None
    for w in layer.spline_parameters():
        term = tabs(w).sum()
        total = term if total is None else total + term
    return total * lam


def layer_grid_extend(layer: KANLinear, new_g: int, activation_samples) -> KANLinear:
    return layer.grid_extend(new_g, activation_samples)
