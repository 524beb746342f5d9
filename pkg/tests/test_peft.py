import math
import warnings

import numpy as np
import pytest

from liera_lab import peft
from liera_lab import tensor as T
from liera_lab.autograd import Tape, backward
from liera_lab.errors import MembershipError, ShapeError
from liera_lab.peft import AdapterConfig, AttachedAdapter, LiftMode, LowRankFactors
from liera_lab.rng import Rng
from liera_lab.verify import numerical_rank

MODES = list(LiftMode)


def test_init_factors():
    f = peft.init_factors(8, 36, 2, 4.0, 0.02, Rng(3))
    assert f.A.shape == (8, 2) and f.B.shape == (2, 36)
    assert not f.B.any()
    assert not peft.delta_matrix(f).any()
    with pytest.raises(ShapeError):
        peft.init_factors(3, 5, 4, 1.0, 0.02, Rng(0))


def test_delta_matrix():
    f = LowRankFactors(np.array([[1.0], [0.0]]), np.array([[0.0, 1.0]]), 1.0)
    assert np.array_equal(peft.delta_matrix(f), [[0, 1], [0, 0]])
    rng = Rng(4)
    a, b = T.gaussian((8, 2), 0, 1, rng), T.gaussian((2, 8), 0, 1, rng)
    d1 = peft.delta_matrix(LowRankFactors(a, b, 2.0))
    d2 = peft.delta_matrix(LowRankFactors(a, b, 4.0))
    assert np.array_equal(2 * d1, d2)
    assert numerical_rank(d1) == 2


def test_delta_for_kernel():
    rng = Rng(5)
    f = LowRankFactors(T.gaussian((8, 2), 0, 1, rng), T.gaussian((2, 36), 0, 1, rng), 2.0)
    k = peft.delta_for_kernel(f, (8, 4, 3, 3))
    assert k.shape == (8, 4, 3, 3)
    assert T.flatten_kernel(k).tobytes() == peft.delta_matrix(f).tobytes()
    with pytest.raises(ShapeError):
        peft.delta_for_kernel(f, (8, 3, 3, 3))
    zero = LowRankFactors(f.A, np.zeros((2, 36)), 2.0)
    assert not peft.delta_for_kernel(zero, (8, 4, 3, 3)).any()


def test_lift_examples():
    base, d = np.array([2.0]), np.array([0.1])
    assert peft.lift(base, d, LiftMode.ADDITIVE)[0] == pytest.approx(2.1, abs=1e-15)
    assert peft.lift(base, d, LiftMode.LIE_TAYLOR)[0] == pytest.approx(2.2, abs=1e-15)
    assert peft.lift(base, d, LiftMode.LIE_EXACT)[0] == pytest.approx(2 * math.exp(0.1), abs=1e-15)
    assert peft.lift(np.array([-3.0]), d, LiftMode.LIE_TAYLOR)[0] == pytest.approx(-3.3, abs=1e-15)


@pytest.mark.parametrize("mode", MODES)
def test_lift_zero_delta_is_identity(mode):
    base = T.gaussian((4, 5), 0, 1, Rng(1))
    assert peft.lift(base, np.zeros_like(base), mode).tobytes() == base.tobytes()


def test_lift_shape_mismatch():
    with pytest.raises(ShapeError):
        peft.lift(np.ones((2, 2)), np.ones(4), LiftMode.ADDITIVE)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("shape", [(6, 5), (8, 4, 3, 3)])
def test_fresh_adapter_effective_weight_is_base(mode, shape):
    base = T.gaussian(shape, 0, 1, Rng(2))
    a = peft.attach(base, AdapterConfig(rank=2, lift_mode=mode), Rng(3))
    assert np.max(np.abs(a.effective_weight() - base)) == 0.0
    tape = Tape()
    assert tape.value(a.record(tape, "x")).tobytes() == base.tobytes()


def test_lie_paths_use_exp_only_when_exact(monkeypatch):
    calls = []
    real = peft.exp_map
    monkeypatch.setattr(peft, "exp_map", lambda d: calls.append(1) or real(d))
    base, d = np.array([1.0, -2.0]), np.array([0.1, 0.2])
    t = peft.lift(base, d, LiftMode.LIE_TAYLOR)
    assert calls == [] and t.tobytes() == T.add(base, T.hadamard(base, d)).tobytes()
    peft.lift(base, d, LiftMode.LIE_EXACT)
    assert calls == [1]


def test_lie_exact_preserves_sign_pattern():
    rng = Rng(6)
    base = T.gaussian((5, 7), 0, 1, rng)
    d = T.gaussian((5, 7), 0, 2, rng)
    out = peft.lift(base, d, LiftMode.LIE_EXACT)
    assert np.array_equal(np.sign(out), np.sign(base)) and np.all(out != 0)


def test_forward_linear_example():
    f = LowRankFactors(np.array([[1.0], [0.0]]), np.array([[0.0, 1.0]]), 1.0)
    a = AttachedAdapter(np.eye(2), f, AdapterConfig(rank=1, alpha=1.0, lift_mode=LiftMode.ADDITIVE))
    assert np.array_equal(peft.forward_linear(a, np.array([1.0, 1.0])), [2.0, 1.0])


def test_forward_linear_lowrank_first():
    rng = Rng(7)
    base = T.gaussian((6, 9), 0, 1, rng)
    f = LowRankFactors(T.gaussian((6, 3), 0, 1, rng), T.gaussian((3, 9), 0, 1, rng), 6.0)
    a = AttachedAdapter(base, f, AdapterConfig(rank=3, alpha=6.0, lift_mode=LiftMode.ADDITIVE), bias=rng.normal(6))
    x = T.gaussian((9, 4), 0, 1, rng)
    assert np.max(np.abs(peft.forward_linear(a, x) - peft.forward_linear(a, x, lowrank_first=True))) <= 1e-12


@pytest.mark.parametrize("mode", MODES)
def test_zero_b_forward_equals_base(mode):
    rng = Rng(8)
    base = T.gaussian((4, 3, 3, 3), 0, 1, rng)
    a = peft.attach(base, AdapterConfig(rank=2, lift_mode=mode), rng)
    x = T.gaussian((2, 3, 5, 5), 0, 1, rng)
    assert peft.forward_conv(a, x, 1, 1).tobytes() == T.conv2d(x, base, 1, 1).tobytes()


def _trained_adapter(mode, shape, scale=0.05, seed=9):
    rng = Rng(seed)
    base = T.gaussian(shape, 0, 1, rng)
    n, m = peft.factor_dims(shape)
    f = LowRankFactors(T.gaussian((n, 2), 0, scale, rng), T.gaussian((2, m), 0, scale, rng), 4.0)
    return AttachedAdapter(base, f, AdapterConfig(rank=2, alpha=4.0, lift_mode=mode)), rng


@pytest.mark.parametrize("mode", MODES)
def test_merge_unmerge(mode):
    a, rng = _trained_adapter(mode, (6, 5))
    x = T.gaussian((5, 3), 0, 1, rng)
    before = peft.forward_linear(a, x)
    base = a.base.copy()
    peft.merge(a)
    assert np.max(np.abs(peft.forward_linear(a, x) - before)) <= 1e-10
    with pytest.raises(ValueError):
        peft.merge(a)
    peft.unmerge(a)
    assert T.allclose(a.base, base, rtol=1e-12)
    with pytest.raises(ValueError):
        peft.unmerge(a)


def test_unmerge_taylor_not_invertible():
    base = np.array([[1.0, 2.0]])
    f = LowRankFactors(np.array([[1.0]]), np.array([[-1.0, 0.5]]), 1.0)
    a = AttachedAdapter(base, f, AdapterConfig(rank=1, alpha=1.0, lift_mode=LiftMode.LIE_TAYLOR))
    peft.merge(a)
    with pytest.raises(MembershipError, match="not invertible"):
        peft.unmerge(a)


def test_attach_warns_on_zero_base():
    base = np.array([[1.0, 0.0], [2.0, 3.0]])
    with pytest.warns(UserWarning, match="cannot move"):
        a = peft.attach(base, AdapterConfig(rank=1, lift_mode=LiftMode.LIE_TAYLOR), Rng(0))
    a.factors = LowRankFactors(np.ones((2, 1)), np.ones((1, 2)), 1.0)
    assert a.effective_weight()[0, 1] == 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        peft.attach(base, AdapterConfig(rank=1, lift_mode=LiftMode.ADDITIVE), Rng(0))


def test_param_counts():
    cfg = AdapterConfig(rank=2)
    assert peft.trainable_param_count((8, 6), cfg) == 28
    assert peft.trainable_param_count((8, 4, 3, 3), cfg) == 88
    row = peft.BudgetRow("k", (8, 4, 3, 3), 88, 288)
    assert row.ratio == pytest.approx(0.3056, abs=5e-5)
    for shape in [(8, 6), (8, 4, 3, 3)]:
        counts = {peft.trainable_param_count(shape, AdapterConfig(rank=2, lift_mode=m)) for m in MODES}
        assert len(counts) == 1


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("shape", [(5, 4), (3, 2, 3, 3)])
def test_adapter_gradients_match_finite_differences(mode, shape):
    from liera_lab.verify import finite_diff_grad, rel_err

    a, rng = _trained_adapter(mode, shape, scale=0.3)
    target = T.gaussian(shape, 0, 1, rng)

    def build(t, p):
        adapter = AttachedAdapter(a.base, LowRankFactors(p["A"], p["B"], 4.0), a.config)
        w = adapter.record(t, "l")
        return t.sum(t.hadamard(w, t.input(target)))

    params = {"A": a.factors.A, "B": a.factors.B}
    tape = Tape()
    grads = backward(tape, build(tape, params))
    analytic = {"A": grads[tape.names["l.A"]], "B": grads[tape.names["l.B"]]}

    def loss_fn(p):
        t = Tape()
        return float(t.value(build(t, p)))

    for (name, i), n in finite_diff_grad(loss_fn, params).items():
        assert rel_err(float(analytic[name].reshape(-1)[i]), n) <= 1e-4


def test_adapter_checkpoint_round_trip(tmp_path):
    a, _ = _trained_adapter(LiftMode.LIE_EXACT, (8, 4, 3, 3))
    path = tmp_path / "ad.lckp"
    peft.save_adapters(path, {"conv1": a}, include_base=True)
    cfg, factors, bases = peft.load_adapters(path)
    assert cfg == a.config
    assert factors["conv1"].A.tobytes() == a.factors.A.tobytes()
    assert factors["conv1"].B.tobytes() == a.factors.B.tobytes()
    assert bases["conv1"].tobytes() == a.base.tobytes()
