"""SGD with momentum, AdamW, and the classification loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape, VarId
from .errors import ShapeError


@dataclass
class SgdConfig:
    lr: float = 0.1
    momentum: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.lr > 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and momentum in [0, 1)")


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.lr > 0 or not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("need lr > 0 and betas in (0, 1)")
        if not self.eps > 0 or self.weight_decay < 0:
            raise ValueError("need eps > 0 and weight_decay >= 0")


@dataclass
class TrainState:
    step: int = 0
    buffers: dict = field(default_factory=dict)


def cross_entropy(tape: Tape, logits: VarId, labels) -> VarId:
    """Mean negative log-softmax of the true class."""
    return tape.softmax_xent(logits, labels)


def accuracy(logits, labels) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("label out of range")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def step(state: TrainState, config, params: dict, grads: dict) -> dict:
    """One optimizer update; returns new arrays for every key of ``params``."""
    missing = set(params) - set(grads)
    if missing:
        raise KeyError(f"missing gradient for {sorted(missing)}")
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ShapeError(f"{k}: gradient {grads[k].shape} vs parameter {p.shape}")
    grads = {k: grads[k] for k in params}
    if config.clip_norm is not None:
        grads = clip_by_global_norm(grads, config.clip_norm)
    state.step += 1
    out = {}
    if isinstance(config, SgdConfig):
        for k, p in params.items():
            v = grads[k]
            if config.momentum:
                v = config.momentum * state.buffers.get(k, np.zeros_like(p)) + v
                state.buffers[k] = v
            out[k] = p - config.lr * v
        return out
    t = state.step
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for k, p in params.items():
        g = grads[k]
        m, v = state.buffers.get(k, (np.zeros_like(p), np.zeros_like(p)))
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        state.buffers[k] = (m, v)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        decayed = p - config.lr * config.weight_decay * p if config.weight_decay else p
        out[k] = decayed - config.lr * update
    return out


def state_entries(state: TrainState) -> dict:
    """Moment buffers flattened to LCKP entry names."""
    out = {}
    for k, buf in state.buffers.items():
        if isinstance(buf, tuple):
            out[f"{k}.m"], out[f"{k}.v"] = buf
        else:
            out[f"{k}.velocity"] = buf
    out["state.json"] = {"step": state.step}
    return out
