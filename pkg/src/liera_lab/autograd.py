"""Tape-based reverse-mode differentiation.

Forward values are computed eagerly when a node is recorded.  ``backward``
sweeps the tape in reverse and returns gradients for parameter nodes only;
input nodes (frozen base weights, data) never receive a gradient.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .liegroup import guard_exp_argument
from .errors import ShapeError

VarId = int


class Kind(enum.Enum):
    INPUT = "input"
    PARAM = "param"
    MATMUL = "matmul"
    ADD = "add"
    HADAMARD = "hadamard"
    EXP = "exp"
    SCALE = "scale"
    RESHAPE = "reshape"
    CONV2D = "conv2d"
    RELU = "relu"
    SOFTMAX_XENT = "softmax_xent"
    SUM = "sum"
    TRANSPOSE = "transpose"
    ADD_BIAS = "add_bias"


@dataclass
class Node:
    kind: Kind
    inputs: tuple
    value: np.ndarray
    aux: dict = field(default_factory=dict)
    requires_grad: bool = False


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[VarId] = []
        self.names: dict[str, VarId] = {}

    def __len__(self):
        return len(self.nodes)

    def value(self, vid: VarId) -> np.ndarray:
        return self.nodes[vid].value

    def _append(self, node: Node, name=None) -> VarId:
        vid = len(self.nodes)
        self.nodes.append(node)
        if name is not None:
            if name in self.names:
                raise ValueError(f"duplicate tape name {name!r}")
            self.names[name] = vid
        return vid

    def input(self, tensor, name=None) -> VarId:
        return self._append(Node(Kind.INPUT, (), T.check_finite(np.asarray(tensor), "input")), name)

    def param(self, tensor, name=None) -> VarId:
        vid = self._append(Node(Kind.PARAM, (), T.check_finite(np.asarray(tensor), "param"), requires_grad=True), name)
        self.params.append(vid)
        return vid

    def record(self, kind: Kind, inputs, **aux) -> VarId:
        inputs = tuple(inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"unknown VarId {i}")
        vals = [self.nodes[i].value for i in inputs]
        value = _FORWARD[kind](vals, aux)
        requires = any(self.nodes[i].requires_grad for i in inputs)
        return self._append(Node(kind, inputs, value, aux, requires))

    # convenience wrappers

    def matmul(self, a, b):
        return self.record(Kind.MATMUL, (a, b))

    def add(self, a, b):
        return self.record(Kind.ADD, (a, b))

    def hadamard(self, a, b):
        return self.record(Kind.HADAMARD, (a, b))

    def exp(self, a):
        return self.record(Kind.EXP, (a,))

    def scale(self, a, s):
        return self.record(Kind.SCALE, (a,), s=float(s))

    def reshape(self, a, shape):
        return self.record(Kind.RESHAPE, (a,), shape=tuple(shape))

    def conv2d(self, x, kernel, stride=1, pad=0):
        return self.record(Kind.CONV2D, (x, kernel), stride=int(stride), pad=int(pad))

    def relu(self, a):
        return self.record(Kind.RELU, (a,))

    def softmax_xent(self, logits, labels):
        return self.record(Kind.SOFTMAX_XENT, (logits,), labels=np.asarray(labels, dtype=np.int64))

    def sum(self, a):
        return self.record(Kind.SUM, (a,))

    def transpose(self, a):
        return self.record(Kind.TRANSPOSE, (a,))

    def add_bias(self, x, bias):
        return self.record(Kind.ADD_BIAS, (x, bias))


def var_input(tape: Tape, tensor, name=None) -> VarId:
    return tape.input(tensor, name)


def var_param(tape: Tape, tensor, name=None) -> VarId:
    return tape.param(tensor, name)


def record(tape: Tape, kind: Kind, inputs, **aux) -> VarId:
    return tape.record(kind, inputs, **aux)


# ---------------------------------------------------------------- forward rules


def _fwd_conv(vals, aux):
    x, kernel = vals
    T._conv_check(x, kernel)
    k = kernel.shape[2]
    out_h = T.conv_output_size(x.shape[2], k, aux["stride"], aux["pad"])
    out_w = T.conv_output_size(x.shape[3], k, aux["stride"], aux["pad"])
    cols = T.im2col(x, k, aux["stride"], aux["pad"])
    aux["cols"] = cols
    return T.fold_output(T.matmul(T.flatten_kernel(kernel), cols), x.shape[0], out_h, out_w)


def log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _fwd_xent(vals, aux):
    (z,) = vals
    labels = aux["labels"]
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_xent: logits {z.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ShapeError(f"softmax_xent: label out of range [0, {z.shape[1]})")
    logp = log_softmax(z)
    aux["probs"] = np.exp(logp)
    return T.check_finite(np.asarray(-logp[np.arange(z.shape[0]), labels].mean(), dtype=z.dtype), "softmax_xent")


def _fwd_bias(vals, aux):
    x, b = vals
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: {x.shape} + {b.shape}")
    return T.check_finite(x + b, "add_bias")


def _fwd_exp(v, aux):
    guard_exp_argument(v[0])
    return T.map_exp(v[0])


_FORWARD = {
    Kind.MATMUL: lambda v, aux: T.matmul(*v),
    Kind.ADD: lambda v, aux: T.add(*v),
    Kind.HADAMARD: lambda v, aux: T.hadamard(*v),
    Kind.EXP: _fwd_exp,
    Kind.SCALE: lambda v, aux: T.scale(v[0], aux["s"]),
    Kind.RESHAPE: lambda v, aux: T.reshape(v[0], aux["shape"]),
    Kind.CONV2D: _fwd_conv,
    Kind.RELU: lambda v, aux: T.relu(v[0]),
    Kind.SOFTMAX_XENT: _fwd_xent,
    Kind.SUM: lambda v, aux: np.asarray(v[0].sum(), dtype=v[0].dtype),
    Kind.TRANSPOSE: lambda v, aux: T.transpose(v[0]),
    Kind.ADD_BIAS: _fwd_bias,
}

# ---------------------------------------------------------------- vector-Jacobian products


def _vjp(node: Node, vals, g, need):
    """Gradients for each input of ``node`` (``None`` where ``need`` is False)."""
    kind = node.kind
    if kind is Kind.MATMUL:
        a, b = vals
        return (
            T.matmul(g, T.transpose(b)) if need[0] else None,
            T.matmul(T.transpose(a), g) if need[1] else None,
        )
    if kind is Kind.ADD:
        return g, g
    if kind is Kind.HADAMARD:
        a, b = vals
        return g * b if need[0] else None, g * a if need[1] else None
    if kind is Kind.EXP:
        return (g * node.value,)
    if kind is Kind.SCALE:
        return (g * g.dtype.type(node.aux["s"]),)
    if kind is Kind.RESHAPE:
        return (g.reshape(vals[0].shape),)
    if kind is Kind.CONV2D:
        x, kernel = vals
        stride, pad = node.aux["stride"], node.aux["pad"]
        g_cols = T.unfold_output(g)
        gx = gk = None
        if need[0]:
            gx = T.col2im(T.matmul(T.transpose(T.flatten_kernel(kernel)), g_cols), x.shape, kernel.shape[2], stride, pad)
        if need[1]:
            gk = T.unflatten_kernel(T.matmul(g_cols, T.transpose(node.aux["cols"])), kernel.shape)
        return gx, gk
    if kind is Kind.RELU:
        return (g * (vals[0] > 0),)
    if kind is Kind.SOFTMAX_XENT:
        probs = node.aux["probs"]
        labels = node.aux["labels"]
        onehot = np.zeros_like(probs)
        onehot[np.arange(len(labels)), labels] = 1.0
        return ((probs - onehot) * (g / len(labels)),)
    if kind is Kind.SUM:
        return (np.full(vals[0].shape, g, dtype=vals[0].dtype),)
    if kind is Kind.TRANSPOSE:
        return (T.transpose(g),)
    if kind is Kind.ADD_BIAS:
        return g, g.sum(axis=0) if need[1] else None
    raise AssertionError(f"no VJP for {kind}")


def backward(tape: Tape, loss: VarId) -> dict:
    """Gradients ``{param VarId: array}`` of the scalar node ``loss``."""
    root = tape.nodes[loss]
    if root.value.size != 1 or root.value.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {root.value.shape}")
    grads = {loss: np.ones_like(root.value)}
    for vid in range(loss, -1, -1):
        node = tape.nodes[vid]
        g = grads.pop(vid, None) if node.kind is not Kind.PARAM else grads.get(vid)
        if g is None or not node.inputs or not node.requires_grad:
            continue
        vals = [tape.nodes[i].value for i in node.inputs]
        need = [tape.nodes[i].requires_grad for i in node.inputs]
        for i, gi, wanted in zip(node.inputs, _vjp(node, vals, g, need), need):
            if not wanted:
                continue
            grads[i] = grads[i] + gi if i in grads else gi
    out = {}
    for p in tape.params:
        value = tape.nodes[p].value
        out[p] = T.check_finite(np.asarray(grads.get(p, np.zeros_like(value)), dtype=value.dtype).reshape(value.shape), "backward")
    return out
