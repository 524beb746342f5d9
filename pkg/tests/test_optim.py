import math

import numpy as np
import pytest

from liera_lab import data, nn, optim, train
from liera_lab.autograd import Tape, backward
from liera_lab.errors import ShapeError
from liera_lab.peft import AdapterConfig, LiftMode
from liera_lab.rng import Rng


def _xent(logits, labels):
    tape = Tape()
    return float(tape.value(optim.cross_entropy(tape, tape.input(np.asarray(logits, dtype=float)), labels)))


def test_cross_entropy_examples():
    assert _xent([[0.0, 0.0]], [0]) == pytest.approx(math.log(2), abs=1e-15)
    assert _xent([[40.0, 0.0, 0.0]], [0]) < 1e-6
    with pytest.raises(ShapeError):
        _xent([[0.0, 0.0]], [2])


def test_accuracy():
    labels = np.array([0, 2, 1])
    assert optim.accuracy(np.eye(3)[labels], labels) == 1.0
    assert optim.accuracy(np.array([[1.0, 1.0]]), np.array([0])) == 1.0  # tie -> lowest index


def test_sgd_step():
    out = optim.step(optim.TrainState(), optim.SgdConfig(lr=0.1), {"t": np.array([1.0])}, {"t": np.array([2.0])})
    assert out["t"][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_momentum():
    state, cfg = optim.TrainState(), optim.SgdConfig(lr=0.1, momentum=0.5)
    p = {"t": np.array([0.0])}
    p = optim.step(state, cfg, p, {"t": np.array([1.0])})
    p = optim.step(state, cfg, p, {"t": np.array([1.0])})
    assert p["t"][0] == pytest.approx(-0.1 - 0.15, abs=1e-15)


@pytest.mark.parametrize("c", [1e-6, 0.3, 50.0])
def test_adamw_first_step_magnitude(c):
    cfg = optim.AdamWConfig(lr=1e-3)
    out = optim.step(optim.TrainState(), cfg, {"t": np.array([1.0])}, {"t": np.array([c])})
    assert abs(1.0 - out["t"][0]) == pytest.approx(1e-3, rel=1e-6 / c + 1e-12)


def test_adamw_zero_decay_is_adam():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=3) for _ in range(5)]

    def run(cfg):
        state, p = optim.TrainState(), {"t": np.ones(3)}
        for g in grads:
            p = optim.step(state, cfg, p, {"t": g})
        return p["t"]

    adam = run(optim.AdamWConfig(weight_decay=0.0))
    # reference Adam written out independently
    m = v = np.zeros(3)
    theta = np.ones(3)
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert adam.tobytes() == theta.tobytes()
    assert not np.array_equal(run(optim.AdamWConfig(weight_decay=0.1)), adam)


def test_missing_gradient():
    with pytest.raises(KeyError):
        optim.step(optim.TrainState(), optim.SgdConfig(), {"a": np.ones(1), "b": np.ones(1)}, {"a": np.ones(1)})


def test_clip_by_global_norm():
    g = optim.clip_by_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert g["a"][0] == pytest.approx(0.6) and g["b"][0] == pytest.approx(0.8)


@pytest.fixture(scope="module")
def shifted_data(shifted_task):
    return data.generate(shifted_task)


@pytest.mark.parametrize("mode", [LiftMode.ADDITIVE, LiftMode.LIE_TAYLOR])
def test_finetune_loss_decreases_and_base_frozen(pretrained, shifted_data, mode):
    tr, va = shifted_data
    model = nn.load_model(pretrained)
    base = {k: v.copy() for k, v in model.params().items()}
    losses = []
    cfg = AdapterConfig(rank=2, alpha=16.0, lift_mode=mode, target="conv*,linear*")
    adapters = nn.attach_adapters(model, cfg, Rng(0))
    state = optim.TrainState()
    params = train.adapter_params(adapters)
    for step_i in range(50):
        idx = np.arange(step_i * 10, step_i * 10 + 32) % len(tr)
        tape = Tape()
        loss = optim.cross_entropy(tape, nn.model_forward(model, tr.images[idx], tape), tr.labels[idx])
        grads = backward(tape, loss)
        params = optim.step(state, optim.AdamWConfig(), params, {k: grads[tape.names[k]] for k in params})
        train.set_adapter_params(adapters, params)
        losses.append(float(tape.value(loss)))
    assert np.mean(losses[40:]) < np.mean(losses[:10])
    assert all(base[k].tobytes() == v.tobytes() for k, v in model.params().items())


def test_seeded_loss_curve_is_reproducible(pretrained, shifted_data):
    tr, va = shifted_data
    curves = []
    for _ in range(2):
        model = nn.load_model(pretrained)
        _, hist, _ = train.finetune(model, tr, va, AdapterConfig(target="*"), optim.AdamWConfig(), 2, 32, 7)
        curves.append([(h.train_loss, h.val_loss, h.val_acc) for h in hist])
    assert curves[0] == curves[1]
