"""The Abelian group of entrywise-nonzero tensors under the Hadamard product.

The identity is the all-ones tensor, the inverse is the elementwise
reciprocal, and the exponential map from the (unconstrained) algebra is the
elementwise ``exp``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import MembershipError, OverflowGuardError
from .rng import Rng

EXP_GUARD = 700.0


def default_eps(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float32 else 1e-12


@dataclass(frozen=True)
class MembershipReport:
    ok: bool
    min_abs: float
    index: tuple | None = None

    def __bool__(self):
        return self.ok


def check_membership(tensor, eps: float = 1e-12) -> MembershipReport:
    """True iff every ``|entry| > eps``; otherwise reports the first offending index."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mags = np.abs(tensor)
    bad = mags <= eps
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        return MembershipReport(False, float(mags.min()), idx)
    return MembershipReport(True, float(mags.min()))


@dataclass(frozen=True)
class GroupElement:
    value: np.ndarray
    membership_eps: float = 1e-12

    def __post_init__(self):
        report = check_membership(self.value, self.membership_eps)
        if not report:
            raise MembershipError(f"entry magnitude {report.min_abs:g} <= {self.membership_eps:g}", report.index)

    @property
    def shape(self):
        return self.value.shape


@dataclass(frozen=True)
class AlgebraElement:
    value: np.ndarray

    def __post_init__(self):
        T.check_finite(self.value, "algebra element")


def _check_pair(a: GroupElement, b: GroupElement):
    if a.shape != b.shape:
        raise T.ShapeError(f"group_mul: shape mismatch {a.shape} vs {b.shape}")


def group_mul(a: GroupElement, b: GroupElement) -> GroupElement:
    _check_pair(a, b)
    return GroupElement(T.hadamard(a.value, b.value), min(a.membership_eps, b.membership_eps))


def group_identity(shape, dtype=T.F64) -> GroupElement:
    ones = T.ones(shape, dtype)
    return GroupElement(ones, default_eps(ones.dtype))


def group_inverse(a: GroupElement) -> GroupElement:
    return GroupElement(T.reciprocal(a.value, a.membership_eps), a.membership_eps)


def guard_exp_argument(delta) -> None:
    big = np.abs(delta) >= EXP_GUARD
    if big.any():
        raise OverflowGuardError(f"exp argument magnitude >= {EXP_GUARD}", np.argwhere(big)[0])


def exp_map(delta: AlgebraElement | np.ndarray) -> GroupElement:
    value = delta.value if isinstance(delta, AlgebraElement) else T.check_finite(np.asarray(delta), "exp_map")
    guard_exp_argument(value)
    out = T.map_exp(value)
    return GroupElement(out, min(default_eps(out.dtype), float(out.min()) / 2))


def log_map(g: GroupElement | np.ndarray) -> AlgebraElement:
    """Inverse of :func:`exp_map` on entrywise-positive elements."""
    value = g.value if isinstance(g, GroupElement) else g
    return AlgebraElement(T.map_ln(value))


def taylor_exp(delta: AlgebraElement | np.ndarray, eps: float | None = None) -> np.ndarray:
    """First-order surrogate ``1 + delta`` of the exponential map.

    Returns a plain tensor because ``1 + delta`` can leave the group; raises
    :class:`MembershipError` when it does.
    """
    value = delta.value if isinstance(delta, AlgebraElement) else T.check_finite(np.asarray(delta), "taylor_exp")
    out = T.add(np.ones_like(value), value)
    eps = default_eps(out.dtype) if eps is None else eps
    report = check_membership(out, eps)
    if not report:
        raise MembershipError("taylor_exp left the group: perturbation too large for the first-order regime", report.index)
    return out


# ---------------------------------------------------------------- axiom checks


@dataclass
class AxiomResult:
    axiom: str
    passed: bool
    worst_error: float
    tolerance: float


def _random_member(shape, rng: Rng, eps: float) -> np.ndarray:
    while True:
        x = T.gaussian(shape, 0.0, 1.0, rng)
        if check_membership(x, eps):
            return x


def _rel_err(a, b) -> float:
    return float(np.max(np.abs(a - b) / np.abs(b)))


def axiom_suite(shape=(2, 3, 3, 3), trials: int = 100, seed: int = 0, tol: float = 1e-12) -> list[AxiomResult]:
    """Check closure, associativity, identity and inverse on random members."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    eps = 1e-12
    rng = Rng(seed)
    worst = dict(closure=0.0, associativity=0.0, identity=0.0, inverse=0.0)
    closure_ok = identity_exact = True
    ident = group_identity(shape)
    for _ in range(trials):
        a, b, c = (_random_member(shape, rng, eps) for _ in range(3))
        ga, gb, gc = GroupElement(a, eps), GroupElement(b, eps), GroupElement(c, eps)

        prod = T.hadamard(a, b)
        closed = check_membership(prod, eps)
        closure_ok &= closed.ok
        # closure margin: how close a product came to the membership floor
        worst["closure"] = max(worst["closure"], eps / closed.min_abs)

        left = group_mul(group_mul(ga, gb), gc).value
        right = group_mul(ga, group_mul(gb, gc)).value
        worst["associativity"] = max(worst["associativity"], _rel_err(left, right))

        for x in (ga, gb, gc):
            xi = group_mul(x, ident).value
            ix = group_mul(ident, x).value
            identity_exact &= np.array_equal(xi, x.value) and np.array_equal(ix, x.value)
            worst["identity"] = max(worst["identity"], _rel_err(xi, x.value), _rel_err(ix, x.value))
            inv = group_mul(x, group_inverse(x)).value
            worst["inverse"] = max(worst["inverse"], _rel_err(inv, ident.value))
    return [
        AxiomResult("closure", closure_ok, worst["closure"], 1.0),
        AxiomResult("associativity", worst["associativity"] <= tol, worst["associativity"], tol),
        AxiomResult("identity", identity_exact and worst["identity"] <= tol, worst["identity"], tol),
        AxiomResult("inverse", worst["inverse"] <= tol, worst["inverse"], tol),
    ]
