import math

import numpy as np
import pytest

from liera_lab import tensor as T
from liera_lab import verify
from liera_lab.errors import ConvergenceError, ShapeError
from liera_lab.peft import LiftMode
from liera_lab.rng import Rng


def test_finite_diff_examples():
    g = verify.finite_diff_grad(lambda p: p["t"][0] ** 2, {"t": np.array([3.0])})
    assert g[("t", 0)] == pytest.approx(6.0, abs=1e-9)
    w = np.array([0.5, -2.0, 3.0])
    g = verify.finite_diff_grad(lambda p: float(np.sum(w * np.exp(p["t"]))), {"t": np.zeros(3)})
    assert np.allclose([g[("t", i)] for i in range(3)], w, atol=1e-9, rtol=0)
    g = verify.finite_diff_grad(lambda p: 4.0, {"t": np.ones(2)})
    assert all(abs(v) <= 1e-9 for v in g.values())


def test_svd_examples():
    assert np.allclose(verify.svd_small(np.diag([3.0, 1.0])), [3.0, 1.0], rtol=0, atol=1e-15)
    rng = Rng(0)
    u, v = rng.normal(5), rng.normal(7)
    u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
    s = verify.svd_small(np.outer(u, v))
    assert abs(s[0] - 1.0) <= 1e-12 and np.all(s[1:] <= 1e-12)


@pytest.mark.parametrize("shape", [(8, 8), (5, 9), (12, 3), (64, 64), (1, 1)])
def test_svd_matches_lapack_and_frobenius(shape):
    a = Rng(sum(shape)).normal(shape[0] * shape[1]).reshape(shape)
    s = verify.svd_small(a)
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    assert np.allclose(s, np.linalg.svd(a, compute_uv=False), rtol=1e-10, atol=1e-12)
    assert np.sum(s**2) == pytest.approx(np.sum(a**2), rel=1e-10)


def test_svd_limits():
    with pytest.raises(ShapeError):
        verify.svd_small(np.ones((65, 2)))
    with pytest.raises(ConvergenceError):
        verify.svd_small(Rng(0).normal(64).reshape(8, 8), max_sweeps=1)


def test_random_gaussian_full_rank():
    for seed in range(100):
        s = verify.svd_small(T.gaussian((8, 8), 0, 1, Rng(seed)))
        assert s[-1] > 1e-8 * s[0]


def test_numerical_rank():
    assert verify.numerical_rank(np.zeros((4, 4))) == 0
    rng = Rng(1)
    w, a, b = T.gaussian((8, 8), 0, 1, rng), T.gaussian((8, 2), 0, 1, rng), T.gaussian((2, 8), 0, 1, rng)
    d = T.matmul(a, b)
    assert verify.numerical_rank(d) == 2
    assert verify.numerical_rank(T.hadamard(w, d)) == 8


def test_numerical_rank_monotone_in_threshold():
    m = np.diag([1.0, 1e-3, 1e-6, 1e-9, 1e-12])
    ranks = [verify.numerical_rank(m, t) for t in (1e-14, 1e-10, 1e-7, 1e-4, 1e-1)]
    assert ranks == sorted(ranks, reverse=True) == [5, 4, 3, 2, 1]


def test_rank_capacity_cases():
    rep = verify.rank_capacity_experiment(8, 8, 2, 100, 0)
    assert rep.lowrank_hits == 100 and rep.hadamard_hits >= 99
    full = verify.rank_capacity_experiment(6, 6, 6, 10, 1)
    assert full.lowrank_ranks == [6] * 10 and full.hadamard_ranks == [6] * 10
    one = verify.rank_capacity_experiment(1, 1, 1, 5, 2)
    assert one.lowrank_ranks == [1] * 5 and one.hadamard_ranks == [1] * 5


def test_rank_trials_order_independent():
    a = verify.rank_capacity_experiment(8, 8, 2, 10, 5)
    b = verify.rank_capacity_experiment(8, 8, 2, 5, 10)
    assert [s.tobytes() for s in a.hadamard_sigma[5:]] == [s.tobytes() for s in b.hadamard_sigma]


def test_taylor_probe():
    probe = verify.taylor_decay_probe((8, 4, 3, 3), 0.1, 0)
    assert 1.9 <= probe.slope <= 2.1
    assert verify.taylor_remainder(np.array([0.01])) == pytest.approx(math.exp(0.01) - 1.01, abs=1e-15)
    assert verify.taylor_decay_probe(delta=np.zeros((2, 2))).degenerate
    with pytest.raises(ValueError):
        verify.taylor_decay_probe(base_scale=0.6)


@pytest.mark.parametrize("kind", ["linear", "conv"])
@pytest.mark.parametrize("mode", list(LiftMode))
def test_adapter_grad_checks(kind, mode):
    rep = verify.adapter_grad_check(kind, mode, seed=3)
    assert len(rep.rows) >= 100
    assert rep.passed, rep.max_rel_err


def test_grad_check_catches_wrong_gradient():
    params = {"t": np.array([1.0, 2.0])}
    rep = verify.grad_check(lambda p: float(np.sum(p["t"] ** 2)), params, {"t": np.array([2.0, 4.5])})
    assert not rep.passed
