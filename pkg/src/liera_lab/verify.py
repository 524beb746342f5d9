"""Independent numerical oracles.

Central finite differences check tape gradients, a one-sided Jacobi SVD
measures numerical rank, and two probes test the low-rank / Hadamard rank
gap and the quadratic decay of the first-order exponential surrogate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .autograd import Tape, backward
from .errors import ConvergenceError, NonFiniteError, ShapeError
from .liegroup import exp_map, taylor_exp
from .peft import AdapterConfig, AttachedAdapter, LiftMode, LowRankFactors
from .rng import Rng

# ---------------------------------------------------------------- finite differences


def fd_step(theta: float) -> float:
    return 1e-5 * max(1.0, abs(theta))


def finite_diff_grad(loss_fn, params: dict, coords=None) -> dict:
    """Central differences of ``loss_fn(params)``.

    ``coords`` is an iterable of ``(name, flat_index)``; by default every
    coordinate of every parameter is probed.  Returns ``{(name, index): value}``.
    """
    if coords is None:
        coords = [(k, i) for k, v in params.items() for i in range(v.size)]
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name, i in coords:
        flat = work[name].reshape(-1)
        theta = flat[i]
        h = fd_step(theta)
        flat[i] = theta + h
        f_plus = float(loss_fn(work))
        flat[i] = theta - h
        f_minus = float(loss_fn(work))
        flat[i] = theta
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(f"non-finite loss probing {name}[{i}]")
        out[(name, i)] = (f_plus - f_minus) / (2 * h)
    return out


@dataclass
class GradCheckReport:
    label: str
    rows: list = field(default_factory=list)  # (name, index, analytic, numeric, rel_err)
    tolerance: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max((r[4] for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and self.max_rel_err <= self.tolerance


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(numeric))


def grad_check(loss_fn, params: dict, analytic: dict, coords=None, tol: float = 1e-4, label: str = "") -> GradCheckReport:
    numeric = finite_diff_grad(loss_fn, params, coords)
    report = GradCheckReport(label, tolerance=tol)
    for (name, i), n in numeric.items():
        a = float(analytic[name].reshape(-1)[i])
        report.rows.append((name, i, a, n, rel_err(a, n)))
    return report


def adapter_grad_check(
    layer_kind: str, mode: LiftMode, seed: int = 0, tol: float = 1e-4, min_coords: int = 100
) -> GradCheckReport:
    """End-to-end check of d(cross-entropy)/d(A, B) through one adapted layer.

    Linear: x (6, 12) -> W_eff (16 x 12) -> logits (6, 16).
    Conv:   x (2, 4, 5, 5) -> kernel (8, 4, 3, 3), pad 1 -> frozen linear -> logits (2, 5).
    Factors are random (``B`` nonzero) so neither gradient vanishes.
    """
    rng = Rng(seed)
    mode = LiftMode(mode)
    r = 4
    if layer_kind == "linear":
        base = T.gaussian((16, 12), 0.0, 1.0, rng)
        x = T.gaussian((6, 12), 0.0, 1.0, rng)
        head = None
        labels = rng.integers(16, 6)
    elif layer_kind == "conv":
        base = T.gaussian((8, 4, 3, 3), 0.0, 0.5, rng)
        x = T.gaussian((2, 4, 5, 5), 0.0, 1.0, rng)
        head = T.gaussian((5, 8 * 5 * 5), 0.0, 0.1, rng)
        labels = rng.integers(5, 2)
    else:
        raise ValueError(layer_kind)
    n, m = base.shape[0], base.size // base.shape[0]
    params = {"A": T.gaussian((n, r), 0.0, 0.3, rng), "B": T.gaussian((r, m), 0.0, 0.3, rng)}
    config = AdapterConfig(rank=r, alpha=2.0, lift_mode=mode)

    def build(p):
        adapter = AttachedAdapter(base, LowRankFactors(p["A"], p["B"], config.alpha), config)
        tape = Tape()
        w = adapter.record(tape, "layer")
        xi = tape.input(x)
        if layer_kind == "linear":
            logits = tape.matmul(xi, tape.transpose(w))
        else:
            h = tape.conv2d(xi, w, 1, 1)
            h = tape.reshape(h, (x.shape[0], 8 * 5 * 5))
            logits = tape.matmul(h, tape.transpose(tape.input(head)))
        return tape, tape.softmax_xent(logits, labels)

    def loss_fn(p):
        tape, loss = build(p)
        return float(tape.value(loss))

    tape, loss = build(params)
    grads = backward(tape, loss)
    analytic = {"A": grads[tape.names["layer.A"]], "B": grads[tape.names["layer.B"]]}
    total = sum(v.size for v in params.values())
    if total < min_coords:
        raise ShapeError(f"only {total} coordinates available, need {min_coords}")
    return grad_check(loss_fn, params, analytic, tol=tol, label=f"{layer_kind}+{mode.value}")


# ---------------------------------------------------------------- SVD and rank

MAX_SVD_DIM = 64


def svd_small(matrix, tol: float = 1e-14, max_sweeps: int = 60) -> np.ndarray:
    """Singular values (descending) by one-sided Jacobi rotations."""
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("svd_small expects a matrix")
    if max(a.shape) > MAX_SVD_DIM:
        raise ShapeError(f"svd_small handles matrices up to {MAX_SVD_DIM}x{MAX_SVD_DIM}")
    T.check_finite(a, "svd_small")
    if a.shape[0] < a.shape[1]:
        a = a.T
    u = np.ascontiguousarray(a)
    if kernels.jacobi_sweeps(u, tol, max_sweeps) < 0:
        raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    return np.sort(kernels.column_norms(u))[::-1].copy()


def numerical_rank(matrix, rel_threshold: float = 1e-8) -> int:
    sigma = svd_small(matrix)
    if sigma[0] == 0.0:
        return 0
    return int(np.sum(sigma > rel_threshold * sigma[0]))


@dataclass
class RankReport:
    n: int
    m: int
    r: int
    threshold: float
    lowrank_sigma: list = field(default_factory=list)
    hadamard_sigma: list = field(default_factory=list)
    lowrank_ranks: list = field(default_factory=list)
    hadamard_ranks: list = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.lowrank_ranks)

    @property
    def lowrank_hits(self) -> int:
        """Trials where rank(sAB) == r."""
        return sum(k == self.r for k in self.lowrank_ranks)

    @property
    def hadamard_hits(self) -> int:
        """Trials where rank(W * sAB) == min(n, m)."""
        return sum(k == min(self.n, self.m) for k in self.hadamard_ranks)


def _rank_from_sigma(sigma, threshold):
    return 0 if sigma[0] == 0.0 else int(np.sum(sigma > threshold * sigma[0]))


def rank_capacity_experiment(
    n: int = 8, m: int = 8, r: int = 2, trials: int = 100, seed: int = 0, alpha: float | None = None, threshold: float = 1e-8
) -> RankReport:
    """Rank of ``s A B`` versus ``W * (s A B)`` for Gaussian W, A, B.

    Trial ``t`` draws from the stream seeded with ``seed + t``, so trials are
    independent of execution order.
    """
    if not 1 <= r <= min(n, m) or min(n, m) > MAX_SVD_DIM:
        raise ShapeError(f"need 1 <= r <= min(n, m) <= {MAX_SVD_DIM}")
    s = (r if alpha is None else alpha) / r
    report = RankReport(n, m, r, threshold)
    for t in range(trials):
        rng = Rng(seed + t)
        W = T.gaussian((n, m), 0.0, 1.0, rng)
        A = T.gaussian((n, r), 0.0, 1.0, rng)
        B = T.gaussian((r, m), 0.0, 1.0, rng)
        delta = T.scale(T.matmul(A, B), s)
        lo = svd_small(delta)
        hi = svd_small(T.hadamard(W, delta))
        report.lowrank_sigma.append(lo)
        report.hadamard_sigma.append(hi)
        report.lowrank_ranks.append(_rank_from_sigma(lo, threshold))
        report.hadamard_ranks.append(_rank_from_sigma(hi, threshold))
    return report


# ---------------------------------------------------------------- Taylor remainder


@dataclass
class TaylorProbe:
    ts: tuple
    errors: list
    slope: float | None

    @property
    def degenerate(self) -> bool:
        return self.slope is None


def taylor_remainder(delta) -> float:
    """``||exp(delta) - (1 + delta)||_F``."""
    return T.frobenius_norm(exp_map(delta).value - taylor_exp(delta))


def taylor_decay_probe(shape=(8, 4, 3, 3), base_scale: float = 0.1, seed: int = 0, ts=(1.0, 0.5, 0.25, 0.125), delta=None) -> TaylorProbe:
    """Least-squares slope of ln E(t) against ln t, E(t) = taylor_remainder(t * delta).

    ``delta`` defaults to a Gaussian tensor rescaled to ``max_abs == base_scale``.
    """
    if base_scale > 0.5:
        raise ValueError("base_scale must be <= 0.5")
    if delta is None:
        delta = T.gaussian(shape, 0.0, 1.0, Rng(seed))
        delta = delta * (base_scale / T.max_abs(delta))
    errors = [taylor_remainder(t * delta) for t in ts]
    if min(errors) == 0.0:
        return TaylorProbe(tuple(ts), errors, None)
    slope = float(np.polyfit(np.log(ts), np.log(errors), 1)[0])
    return TaylorProbe(tuple(ts), errors, slope)
