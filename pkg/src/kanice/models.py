"""Builders for the seven architectures and parameter accounting."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (ICB, Activation, BatchNorm2D, Conv2D, Flatten, KANLinear,
                     KANLinearMini, Layer, Linear, MaxPool2D, Normalize)
from .data import load_container, save_container
from .rng import numpy_rng
from .tensor import DEFAULT_DTYPE, Tensor, as_tensor

VARIANTS = ("CNN", "CNN_KAN", "ICB", "ICB_KAN", "ICB_CNN", "KANICE", "KANICE_MINI")

# CLI spellings such as "kanice-mini" or "icb_cnn"
ARCH_ALIASES = {v.lower().replace("_", "-"): v for v in VARIANTS}


class InvalidSpec(ValueError):
    pass


def canonical_variant(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    if key not in ARCH_ALIASES:
        raise InvalidSpec(f"unknown architecture {name!r}; choose from {sorted(ARCH_ALIASES)}")
    return ARCH_ALIASES[key]


@dataclass
class KANConfig:
    grid_size: int = 8
    degree: int = 3
    domain: tuple = (-1.0, 1.0)


@dataclass
class MiniConfig:
    grid_size: int = 8
    degree: int = 3
    groups: int = 1
    shared: bool = True
    lam: float = 1e-4
    input_range: tuple = (0.0, 1.0)
    literal_x_gate: bool | None = None


@dataclass
class ModelSpec:
    variant: str = "KANICE"
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10
    channel_plan: tuple = (64, 128)
    fc_hidden: int = 256
    activation: str = "gelu"
    kan_config: KANConfig = field(default_factory=KANConfig)
    mini_config: MiniConfig = field(default_factory=MiniConfig)
    # optional per-channel ((means), (stds)) applied inside the model, so the
    # model always consumes raw [0, 1] pixels
    normalize: tuple | None = None

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.channel_plan = tuple(int(v) for v in self.channel_plan)
        if isinstance(self.kan_config, dict):
            self.kan_config = KANConfig(**self.kan_config)
        if isinstance(self.mini_config, dict):
            self.mini_config = MiniConfig(**self.mini_config)
        self.kan_config.domain = tuple(self.kan_config.domain)
        self.mini_config.input_range = tuple(self.mini_config.input_range)
        if self.normalize is not None:
            mean, std = self.normalize
            self.normalize = (tuple(float(v) for v in mean), tuple(float(v) for v in std))

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    """Ordered layers plus a flat, uniquely named parameter registry."""

    def __init__(self, layers: list[Layer], spec: ModelSpec | None = None, trunk_end: int | None = None):
        self.layers = layers
        self.spec = spec
        self.trunk_end = trunk_end if trunk_end is not None else len(layers) - 1
        self.training = True

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x, upto: int | None = None) -> Tensor:
        """Run layers ``0..upto`` inclusive (all layers by default)."""
        x = as_tensor(x)
        last = len(self.layers) - 1 if upto is None else upto
        for layer in self.layers[:last + 1]:
            x = layer(x)
        return x

    @property
    def taps(self) -> dict[str, int]:
        return {"trunk": self.trunk_end, "head": len(self.layers) - 1}

    def named_layers(self):
        return [(f"{i}.{type(layer).__name__}", layer) for i, layer in enumerate(self.layers)]

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                params[f"{i}.{name}"] = p
        return params

    def lr_scales(self) -> dict[str, float]:
        scales = {}
        for i, layer in enumerate(self.layers):
            for name, s in layer.lr_scales().items():
                scales[f"{i}.{name}"] = s
        return scales

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers().items():
                out[f"{i}.{name}"] = b
        return out

    def kan_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if isinstance(layer, (KANLinear, KANLinearMini))]

    def train(self, mode: bool = True) -> Model:
        self.training = mode
        for layer in self.layers:
            layer.train(mode)
        return self

    def eval(self) -> Model:
        return self.train(False)

    def to(self, dtype) -> Model:
        for layer in self.layers:
            layer.to(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param.{k}": v.data for k, v in self.parameters().items()}
        state.update({f"buffer.{k}": v for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            prefix = f"buffer.{i}."
            bufs = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            if bufs:
                layer.load_buffers(bufs)
            for name, p in layer.parameters().items():
                key = f"param.{i}.{name}"
                if key not in state:
                    raise KeyError(f"checkpoint lacks {key}")
                arr = np.asarray(state[key])
                if arr.shape != p.shape:
                    # grid extension changes the coefficient shape
                    if not (isinstance(layer, KANLinear) and name == "spline_coef"):
                        raise ValueError(f"{key}: shape {arr.shape} != {p.shape}")
                    layer.spline_coef = Tensor(arr.copy(), requires_grad=True)
                else:
                    p.data = np.array(arr, dtype=arr.dtype)


def _trunk(spec: ModelSpec, rng) -> list[Layer]:
    c = spec.input_shape[0]
    c1, c2 = spec.channel_plan
    act = spec.activation
    v = spec.variant
    if v in ("CNN", "CNN_KAN"):
        return [Conv2D(c, c1, 3, padding=1, rng=rng), Activation(act), MaxPool2D(2),
                Conv2D(c1, c2, 3, padding=1, rng=rng), Activation(act), MaxPool2D(2)]
    if v in ("ICB", "ICB_KAN"):
        return [ICB(c, c1, rng=rng), MaxPool2D(2), ICB(c1, c2, rng=rng), MaxPool2D(2)]
    layers: list[Layer] = []
    for cin, cout in ((c, c1), (c1, c2)):
        layers += [ICB(cin, cout, rng=rng), Conv2D(cout, cout, 3, padding=1, rng=rng),
                   BatchNorm2D(cout), Activation(act), MaxPool2D(2)]
    return layers


def _head(spec: ModelSpec, width: int, rng) -> list[Layer]:
    h, k = spec.fc_hidden, spec.num_classes
    v = spec.variant
    if v in ("CNN", "ICB", "ICB_CNN"):
        return [Linear(width, h, rng=rng), Activation(spec.activation), Linear(h, k, rng=rng)]
    if v in ("CNN_KAN", "ICB_KAN", "KANICE"):
        kc = spec.kan_config
        kw = dict(grid_size=kc.grid_size, degree=kc.degree, domain=kc.domain, rng=rng)
        return [KANLinear(width, h, **kw), KANLinear(h, k, **kw)]
    mc = spec.mini_config
    kw = dict(grid_size=mc.grid_size, degree=mc.degree, groups=mc.groups, shared=mc.shared,
              literal_x_gate=mc.literal_x_gate, input_range=mc.input_range, rng=rng)
    # the output layer keeps a single group so any class count works
    return [KANLinearMini(width, h, **kw), KANLinearMini(h, k, **{**kw, "groups": 1})]


def shape_chain(spec: ModelSpec, layers: list[Layer]) -> list[tuple]:
    shapes = [tuple(spec.input_shape)]
    for layer in layers:
        shapes.append(tuple(layer.output_shape(shapes[-1])))
    return shapes


def build(spec: ModelSpec, seed: int = 0, dtype=DEFAULT_DTYPE) -> Model:
    """Instantiate ``spec``.  Trunk and head draw from separate seeded
    streams, so variants sharing a trunk get identical trunk weights."""
    if len(spec.input_shape) != 3 or len(spec.channel_plan) != 2:
        raise InvalidSpec("input_shape must be (C, H, W) and channel_plan two entries")
    if min(spec.input_shape) < 1 or min(spec.channel_plan) < 1 or spec.num_classes < 1 or spec.fc_hidden < 1:
        raise InvalidSpec("all extents must be positive")
    trunk = _trunk(spec, numpy_rng(seed, "init.trunk"))
    if spec.normalize is not None:
        trunk.insert(0, Normalize(*spec.normalize))
    shapes = shape_chain(spec, trunk)
    _, h, w = shapes[-1]
    if h < 1 or w < 1:
        raise InvalidSpec(f"input {spec.input_shape} pools down to non-positive size {shapes[-1]}")
    flat = Flatten()
    width = flat.output_shape(shapes[-1])[0]
    layers = trunk + [flat] + _head(spec, width, numpy_rng(seed, "init.head"))
    model = Model(layers, spec, trunk_end=len(trunk))
    if np.dtype(dtype) != np.dtype(DEFAULT_DTYPE):
        model.to(dtype)
    return model


def count_parameters(model: Model) -> dict:
    """Exact count of trainable scalars per layer (buffers excluded)."""
    per_layer = {name: layer.num_parameters() for name, layer in model.named_layers()}
    return {"layers": per_layer, "total": int(sum(per_layer.values()))}


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    """Parameters, buffers and the JSON-encoded spec in one container file."""
    meta = {"model": model.spec.to_dict() if model.spec else None, **(extra or {})}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    save_container(path, {"meta.json": blob, **model.state_dict()})


def load_checkpoint(path) -> tuple[Model, dict]:
    entries = load_container(path)
    if "meta.json" not in entries:
        raise InvalidSpec(f"{path}: not a model checkpoint (no meta.json entry)")
    meta = json.loads(entries.pop("meta.json").tobytes().decode("utf-8"))
    if meta.get("model") is None:
        raise InvalidSpec(f"{path}: checkpoint has no model spec")
    spec = ModelSpec(**meta["model"])
    dtypes = {v.dtype for k, v in entries.items() if k.startswith("param.")}
    model = build(spec, seed=0, dtype=dtypes.pop() if len(dtypes) == 1 else DEFAULT_DTYPE)
    model.load_state_dict(entries)
    return model, meta
