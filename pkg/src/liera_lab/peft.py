"""Low-rank deltas and the three ways of lifting them onto a frozen weight.

``additive``    W + dW
``lie_exact``   W * exp(dW)        (elementwise)
``lie_taylor``  W + W * dW         (first-order form of the above)

For a convolution kernel of shape (C_out, C_in, k, k) the factors span
``n = C_out`` rows and ``m = C_in*k*k`` columns and the delta is reshaped
row-major back to the kernel shape.
"""
from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import formats
from . import tensor as T
from .autograd import Tape, VarId
from .errors import MembershipError, ShapeError
from .liegroup import check_membership, default_eps, exp_map, guard_exp_argument
from .rng import Rng


class LiftMode(str, enum.Enum):
    ADDITIVE = "additive"
    LIE_EXACT = "lie_exact"
    LIE_TAYLOR = "lie_taylor"


@dataclass
class LowRankFactors:
    A: np.ndarray
    B: np.ndarray
    alpha: float

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise ShapeError(f"factor shapes {self.A.shape} and {self.B.shape} are inconsistent")
        if self.rank > min(self.A.shape[0], self.B.shape[1]):
            raise ShapeError(f"rank {self.rank} exceeds min{(self.A.shape[0], self.B.shape[1])}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[0], self.B.shape[1]


@dataclass
class AdapterConfig:
    rank: int = 2
    alpha: float = 16.0
    lift_mode: LiftMode = LiftMode.LIE_TAYLOR
    init_stddev: float = 0.02
    target: str | tuple = "*"

    def __post_init__(self):
        self.lift_mode = LiftMode(self.lift_mode)
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not self.alpha > 0 or not self.init_stddev > 0:
            raise ValueError("alpha and init_stddev must be positive")

    def to_json(self) -> dict:
        target = self.target if isinstance(self.target, str) else list(self.target)
        return dict(rank=self.rank, alpha=self.alpha, lift_mode=self.lift_mode.value, init_stddev=self.init_stddev, target=target)

    @classmethod
    def from_json(cls, d: dict) -> "AdapterConfig":
        target = d.get("target", "*")
        return cls(d["rank"], d["alpha"], LiftMode(d["lift_mode"]), d["init_stddev"], target if isinstance(target, str) else tuple(target))


def init_factors(n: int, m: int, r: int, alpha: float, init_stddev: float, rng: Rng, dtype=T.F64) -> LowRankFactors:
    """Gaussian ``A`` (n x r) and all-zero ``B`` (r x m), so the initial delta is zero."""
    if not 1 <= r <= min(n, m):
        raise ShapeError(f"rank {r} outside [1, {min(n, m)}]")
    A = T.gaussian((n, r), 0.0, init_stddev, rng, dtype)
    return LowRankFactors(A, T.zeros((r, m), dtype), alpha)


def delta_matrix(factors: LowRankFactors) -> np.ndarray:
    return T.scale(T.matmul(factors.A, factors.B), factors.scaling)


def factor_dims(weight_shape) -> tuple[int, int]:
    """(n, m) of the matrix a weight of ``weight_shape`` is factorized as."""
    if len(weight_shape) == 2:
        return tuple(weight_shape)
    if len(weight_shape) == 4:
        return weight_shape[0], math.prod(weight_shape[1:])
    raise ShapeError(f"cannot adapt a weight of shape {tuple(weight_shape)}")


def delta_for_kernel(factors: LowRankFactors, kernel_shape) -> np.ndarray:
    if factors.shape != factor_dims(kernel_shape):
        raise ShapeError(f"factors {factors.shape} do not fit kernel {tuple(kernel_shape)}")
    return T.unflatten_kernel(delta_matrix(factors), kernel_shape)


def delta_for(factors: LowRankFactors, weight_shape) -> np.ndarray:
    if len(weight_shape) == 4:
        return delta_for_kernel(factors, weight_shape)
    if factors.shape != tuple(weight_shape):
        raise ShapeError(f"factors {factors.shape} do not fit weight {tuple(weight_shape)}")
    return delta_matrix(factors)


def lift(base, delta, mode: LiftMode) -> np.ndarray:
    mode = LiftMode(mode)
    if base.shape != delta.shape:
        raise ShapeError(f"lift: base {base.shape} vs delta {delta.shape}")
    if mode is LiftMode.ADDITIVE:
        return T.add(base, delta)
    if mode is LiftMode.LIE_EXACT:
        return T.hadamard(base, exp_map(delta).value)
    return T.add(base, T.hadamard(base, delta))


def lift_on_tape(tape: Tape, base: VarId, delta: VarId, mode: LiftMode) -> VarId:
    """Record :func:`lift` so gradients flow through ``delta`` only."""
    mode = LiftMode(mode)
    if mode is LiftMode.ADDITIVE:
        return tape.add(base, delta)
    if mode is LiftMode.LIE_EXACT:
        guard_exp_argument(tape.value(delta))
        return tape.hadamard(base, tape.exp(delta))
    return tape.add(base, tape.hadamard(base, delta))


@dataclass
class AttachedAdapter:
    base: np.ndarray
    factors: LowRankFactors
    config: AdapterConfig
    bias: np.ndarray | None = None
    merged: bool = False

    def __post_init__(self):
        if self.factors.shape != factor_dims(self.base.shape):
            raise ShapeError(f"factors {self.factors.shape} do not fit base {self.base.shape}")

    @property
    def kind(self) -> str:
        return "conv" if self.base.ndim == 4 else "linear"

    def delta(self) -> np.ndarray:
        return delta_for(self.factors, self.base.shape)

    def effective_weight(self) -> np.ndarray:
        if self.merged:
            return self.base
        return lift(self.base, self.delta(), self.config.lift_mode)

    def record(self, tape: Tape, prefix: str) -> VarId:
        """Put the effective weight on ``tape``; ``A`` and ``B`` become parameters."""
        if self.merged:
            return tape.input(self.base, f"{prefix}.base")
        a = tape.param(self.factors.A, f"{prefix}.A")
        b = tape.param(self.factors.B, f"{prefix}.B")
        delta = tape.scale(tape.matmul(a, b), self.factors.scaling)
        if self.kind == "conv":
            delta = tape.reshape(delta, self.base.shape)
        return lift_on_tape(tape, tape.input(self.base, f"{prefix}.base"), delta, self.config.lift_mode)


def attach(base, config: AdapterConfig, rng: Rng, bias=None) -> AttachedAdapter:
    n, m = factor_dims(base.shape)
    factors = init_factors(n, m, config.rank, config.alpha, config.init_stddev, rng, T.DType.of(base))
    if config.lift_mode is not LiftMode.ADDITIVE:
        report = check_membership(base, default_eps(base.dtype))
        if not report:
            warnings.warn(
                f"base weight has an entry with |w| <= eps at {report.index}; "
                f"{config.lift_mode.value} cannot move such entries",
                stacklevel=2,
            )
    return AttachedAdapter(base, factors, config, bias)


def forward_linear(adapter: AttachedAdapter, x, lowrank_first: bool = False):
    """``h = W_eff x (+ bias)`` for a vector or a column batch ``x``.

    With ``lowrank_first`` (additive mode only) the delta is applied as
    ``s * A (B x)`` without materializing it.
    """
    if adapter.kind != "linear":
        raise ShapeError("forward_linear needs a matrix base")
    cols = x.reshape(-1, 1) if x.ndim == 1 else x
    if lowrank_first and not adapter.merged:
        if adapter.config.lift_mode is not LiftMode.ADDITIVE:
            raise ValueError("low-rank-first evaluation only exists for the additive lift")
        f = adapter.factors
        h = T.add(T.matmul(adapter.base, cols), T.scale(T.matmul(f.A, T.matmul(f.B, cols)), f.scaling))
    else:
        h = T.matmul(adapter.effective_weight(), cols)
    if adapter.bias is not None:
        h = h + adapter.bias.reshape(-1, 1)
    return h.reshape(-1) if x.ndim == 1 else h


def forward_conv(adapter: AttachedAdapter, x, stride: int = 1, pad: int = 0):
    if adapter.kind != "conv":
        raise ShapeError("forward_conv needs a 4-D kernel base")
    return T.conv2d(x, adapter.effective_weight(), stride, pad)


def merge(adapter: AttachedAdapter) -> None:
    if adapter.merged:
        raise ValueError("adapter is already merged")
    adapter.base = adapter.effective_weight()
    adapter.merged = True


def unmerge(adapter: AttachedAdapter) -> None:
    if not adapter.merged:
        raise ValueError("adapter is not merged")
    delta = adapter.delta()
    mode = adapter.config.lift_mode
    if mode is LiftMode.ADDITIVE:
        base = T.sub(adapter.base, delta)
    elif mode is LiftMode.LIE_EXACT:
        base = T.hadamard(adapter.base, exp_map(-delta).value)
    else:
        factor = 1.0 + delta
        report = check_membership(factor, default_eps(factor.dtype))
        if not report:
            raise MembershipError("not invertible in Taylor regime: |1 + dW| too small", report.index)
        base = T.check_finite(adapter.base / factor, "unmerge")
    adapter.base = base
    adapter.merged = False


# ---------------------------------------------------------------- parameter accounting


def trainable_param_count(weight_shape, config: AdapterConfig) -> int:
    """r(n + m) for the factorization of a weight of ``weight_shape``."""
    n, m = factor_dims(weight_shape)
    return config.rank * (n + m)


@dataclass
class BudgetRow:
    layer: str
    shape: tuple
    trainable: int
    full: int

    @property
    def ratio(self) -> float:
        return self.trainable / self.full


@dataclass
class BudgetTable:
    rows: list[BudgetRow] = field(default_factory=list)
    total_params: int = 0

    @property
    def total_trainable(self) -> int:
        return sum(r.trainable for r in self.rows)

    @property
    def ratio(self) -> float:
        return self.total_trainable / self.total_params


def budget_table(model, config: AdapterConfig) -> BudgetTable:
    """Per-layer adapter parameter counts for the layers ``config.target`` selects."""
    rows = [
        BudgetRow(layer.name, layer.weight.shape, trainable_param_count(layer.weight.shape, config), layer.weight.size)
        for layer in model.select(config.target)
    ]
    return BudgetTable(rows, model.num_params())


# ---------------------------------------------------------------- checkpoints


def save_adapters(path, adapters: dict, include_base: bool = False) -> None:
    """Write ``{layer: AttachedAdapter}`` to an LCKP container."""
    if not adapters:
        raise ValueError("no adapters to save")
    configs = {json.dumps(a.config.to_json(), sort_keys=True) for a in adapters.values()}
    if len(configs) != 1:
        raise ValueError("adapters in one checkpoint must share a config")
    entries = {}
    for name, a in adapters.items():
        entries[f"{name}.A"] = a.factors.A
        entries[f"{name}.B"] = a.factors.B
        if include_base:
            entries[f"{name}.base"] = a.base
    entries["meta.json"] = next(iter(adapters.values())).config.to_json()
    formats.save_container(path, entries)


def load_adapters(path) -> tuple[AdapterConfig, dict, dict]:
    """Returns (config, {layer: LowRankFactors}, {layer: base}) from an LCKP file."""
    entries = formats.load_container(path)
    config = AdapterConfig.from_json(entries.pop("meta.json"))
    layers = sorted({k.rsplit(".", 1)[0] for k in entries})
    factors = {n: LowRankFactors(entries[f"{n}.A"], entries[f"{n}.B"], config.alpha) for n in layers}
    bases = {n: entries[f"{n}.base"] for n in layers if f"{n}.base" in entries}
    return config, factors, bases
