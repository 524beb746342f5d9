"""Layers, the two built-in reference models, and adapter attachment."""
from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field

import numpy as np

from . import formats
from . import tensor as T
from .autograd import Tape, VarId
from .errors import ShapeError
from .peft import AdapterConfig, AttachedAdapter, LowRankFactors, attach
from .rng import Rng


@dataclass
class Linear:
    name: str
    weight: np.ndarray  # (n_out, n_in)
    bias: np.ndarray | None = None
    frozen: bool = False

    param_suffix = "W"


@dataclass
class Conv2d:
    name: str
    weight: np.ndarray  # (C_out, C_in, k, k)
    stride: int = 1
    pad: int = 0
    frozen: bool = False

    param_suffix = "kernel"
    bias = None


@dataclass
class ReLU:
    name: str


@dataclass
class Flatten:
    name: str


PARAMETRIC = (Linear, Conv2d)


def _targets(target) -> list[str]:
    if isinstance(target, str):
        return [t.strip() for t in target.replace("+", ",").split(",") if t.strip()]
    return list(target)


@dataclass
class Model:
    kind: str
    input_shape: tuple
    n_classes: int
    layers: list
    adapters: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")

    def parametric(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, PARAMETRIC)]

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def params(self) -> dict:
        out = {}
        for layer in self.parametric():
            out[f"{layer.name}.{layer.param_suffix}"] = layer.weight
            if layer.bias is not None:
                out[f"{layer.name}.bias"] = layer.bias
        return out

    def set_params(self, params: dict) -> None:
        for layer in self.parametric():
            key = f"{layer.name}.{layer.param_suffix}"
            if key in params:
                if params[key].shape != layer.weight.shape:
                    raise ShapeError(f"{key}: {params[key].shape} vs {layer.weight.shape}")
                layer.weight = params[key]
            if layer.bias is not None and f"{layer.name}.bias" in params:
                layer.bias = params[f"{layer.name}.bias"]

    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def registry(self) -> list[tuple[str, tuple, bool]]:
        out = []
        for layer in self.parametric():
            out.append((f"{layer.name}.{layer.param_suffix}", layer.weight.shape, layer.frozen))
            if layer.bias is not None:
                out.append((f"{layer.name}.bias", layer.bias.shape, layer.frozen))
        return out

    def select(self, target) -> list:
        """Parametric layers whose names match any glob in ``target``."""
        patterns = _targets(target)
        chosen = [layer for layer in self.parametric() if any(fnmatch.fnmatchcase(layer.name, p) for p in patterns)]
        if not chosen:
            raise ValueError(f"target {target!r} matches no layer of {[l.name for l in self.parametric()]}")
        return chosen


def _he(shape, fan_in, gain, rng):
    return T.gaussian(shape, 0.0, math.sqrt(gain / fan_in), rng)


def smallcnn(n_classes: int = 4, seed: int = 0, image_size=(1, 8, 8), width: int = 8) -> Model:
    """conv(C->8, k3, p1) / relu / conv(8->8, k3, p1) / relu / flatten / linear."""
    rng = Rng(seed)
    c, h, w = image_size
    k1 = _he((width, c, 3, 3), c * 9, 2.0, rng)
    k2 = _he((width, width, 3, 3), width * 9, 2.0, rng)
    fc = _he((n_classes, width * h * w), width * h * w, 1.0, rng)
    layers = [
        Conv2d("conv1", k1, 1, 1),
        ReLU("relu1"),
        Conv2d("conv2", k2, 1, 1),
        ReLU("relu2"),
        Flatten("flatten"),
        Linear("linear1", fc, T.zeros((n_classes,))),
    ]
    return Model("smallcnn", tuple(image_size), n_classes, layers)


def mlp(n_classes: int = 4, seed: int = 0, image_size=(1, 8, 8), hidden: int = 32) -> Model:
    """flatten / linear(64->32) / relu / linear(32->n_classes) for 8x8 inputs."""
    rng = Rng(seed)
    n_in = math.prod(image_size)
    layers = [
        Flatten("flatten"),
        Linear("linear1", _he((hidden, n_in), n_in, 2.0, rng), T.zeros((hidden,))),
        ReLU("relu1"),
        Linear("linear2", _he((n_classes, hidden), hidden, 1.0, rng), T.zeros((n_classes,))),
    ]
    return Model("mlp", tuple(image_size), n_classes, layers)


BUILDERS = {"smallcnn": smallcnn, "mlp": mlp}


def build(kind: str, n_classes: int, seed: int, image_size) -> Model:
    try:
        return BUILDERS[kind](n_classes, seed, tuple(image_size))
    except KeyError:
        raise ValueError(f"unknown model {kind!r}") from None


def freeze_all_base(model: Model) -> None:
    for layer in model.parametric():
        layer.frozen = True


def attach_adapters(model: Model, config: AdapterConfig, rng: Rng) -> dict:
    """Attach fresh adapters to the layers selected by ``config.target``."""
    freeze_all_base(model)
    adapters = {}
    for i, layer in enumerate(model.select(config.target)):
        adapters[layer.name] = attach(layer.weight, config, rng.derive(i), layer.bias)
    model.adapters = adapters
    return adapters


def load_adapter_factors(model: Model, config: AdapterConfig, factors: dict) -> dict:
    freeze_all_base(model)
    adapters = {}
    for layer in model.select(config.target):
        f = factors[layer.name]
        adapters[layer.name] = AttachedAdapter(layer.weight, LowRankFactors(f.A, f.B, config.alpha), config, layer.bias)
    model.adapters = adapters
    return adapters


def detach_adapters(model: Model) -> dict:
    adapters, model.adapters = model.adapters, {}
    return adapters


def _check_input(model: Model, x):
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"{model.kind} expects (B, {', '.join(map(str, model.input_shape))}), got {x.shape}")


def model_forward(model: Model, x, tape: Tape, adapters: dict | None = None, train_base: bool = False) -> VarId:
    """Record a forward pass on ``tape``; returns the (batch, n_classes) logits node.

    Adapted layers contribute their factors as parameters; other weights are
    parameters only when ``train_base`` is set, and frozen inputs otherwise.
    """
    _check_input(model, x)
    adapters = model.adapters if adapters is None else adapters
    h = tape.input(x)
    for layer in model.layers:
        if isinstance(layer, PARAMETRIC):
            if layer.name in adapters:
                w = adapters[layer.name].record(tape, layer.name)
            else:
                leaf = tape.param if train_base and not layer.frozen else tape.input
                w = leaf(layer.weight, f"{layer.name}.{layer.param_suffix}")
            if isinstance(layer, Conv2d):
                h = tape.conv2d(h, w, layer.stride, layer.pad)
            else:
                h = tape.matmul(h, tape.transpose(w))
                if layer.bias is not None:
                    leaf = tape.param if train_base and not layer.frozen else tape.input
                    h = tape.add_bias(h, leaf(layer.bias, f"{layer.name}.bias"))
        elif isinstance(layer, ReLU):
            h = tape.relu(h)
        elif isinstance(layer, Flatten):
            shape = tape.value(h).shape
            h = tape.reshape(h, (shape[0], math.prod(shape[1:])))
    return h


def predict_logits(model: Model, x, adapters: dict | None = None) -> np.ndarray:
    tape = Tape()
    return tape.value(model_forward(model, x, tape, adapters))


# ---------------------------------------------------------------- checkpoints


def save_model(path, model: Model) -> None:
    entries = dict(model.params())
    entries["meta.json"] = dict(model=model.kind, n_classes=model.n_classes, image_size=list(model.input_shape))
    formats.save_container(path, entries)


def load_model(path) -> Model:
    entries = formats.load_container(path)
    meta = entries.pop("meta.json")
    model = build(meta["model"], meta["n_classes"], 0, meta["image_size"])
    expected = model.params()
    if set(entries) != set(expected):
        raise ShapeError(f"checkpoint entries {sorted(entries)} do not match model {sorted(expected)}")
    model.set_params(entries)
    return model
