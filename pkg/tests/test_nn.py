import numpy as np
import pytest

from liera_lab import nn, optim, peft
from liera_lab import tensor as T
from liera_lab.autograd import Tape, backward
from liera_lab.errors import ShapeError
from liera_lab.peft import AdapterConfig, LiftMode
from liera_lab.rng import Rng
from liera_lab.train import adapter_params, set_adapter_params


def test_smallcnn_shapes():
    model = nn.smallcnn(4, seed=0)
    x = T.gaussian((2, 1, 8, 8), 0, 1, Rng(0))
    tape = Tape()
    assert tape.value(nn.model_forward(model, x, tape)).shape == (2, 4)
    assert [r[0] for r in model.registry()] == ["conv1.kernel", "conv2.kernel", "linear1.W", "linear1.bias"]
    assert dict((r[0], r[1]) for r in model.registry())["linear1.W"] == (4, 512)


def test_mlp_shapes():
    model = nn.mlp(3, seed=1)
    tape = Tape()
    out = nn.model_forward(model, T.gaussian((5, 1, 8, 8), 0, 1, Rng(0)), tape)
    assert tape.value(out).shape == (5, 3)


def test_bad_input_shape():
    with pytest.raises(ShapeError):
        nn.model_forward(nn.smallcnn(), np.zeros((2, 1, 7, 8)), Tape())


def test_forward_deterministic():
    x = T.gaussian((3, 1, 8, 8), 0, 1, Rng(4))
    a = nn.predict_logits(nn.smallcnn(seed=3), x)
    b = nn.predict_logits(nn.smallcnn(seed=3), x)
    assert a.tobytes() == b.tobytes()


def test_attach_selectors():
    model = nn.smallcnn()
    assert len(nn.attach_adapters(model, AdapterConfig(target="conv*"), Rng(0))) == 2
    assert set(nn.attach_adapters(model, AdapterConfig(target=("conv*", "linear*")), Rng(0))) == {"conv1", "conv2", "linear1"}
    with pytest.raises(ValueError, match="matches no layer"):
        nn.attach_adapters(model, AdapterConfig(target="nomatch*"), Rng(0))
    assert all(frozen for _, _, frozen in model.registry())


@pytest.mark.parametrize("mode", list(LiftMode))
def test_fresh_adapters_preserve_logits(mode):
    model = nn.smallcnn(seed=2)
    x = T.gaussian((4, 1, 8, 8), 0, 1, Rng(1))
    before = nn.predict_logits(model, x)
    nn.attach_adapters(model, AdapterConfig(lift_mode=mode, target="*"), Rng(5))
    assert nn.predict_logits(model, x).tobytes() == before.tobytes()
    nn.detach_adapters(model)
    assert nn.predict_logits(model, x).tobytes() == before.tobytes()


def test_budget_table_smallcnn():
    model = nn.smallcnn()
    cfg = AdapterConfig(rank=2, target="*")
    table = peft.budget_table(model, cfg)
    counts = {r.layer: r.trainable for r in table.rows}
    assert counts == {"conv1": 2 * (8 + 9), "conv2": 2 * (8 + 72), "linear1": 2 * (4 + 512)}
    assert table.total_trainable == sum(counts.values())
    assert table.total_params == 72 + 576 + 2048 + 4
    assert table.ratio == pytest.approx(table.total_trainable / table.total_params)


def test_one_step_moves_effective_weight():
    model = nn.smallcnn(seed=0)
    base = {k: v.copy() for k, v in model.params().items()}
    adapters = nn.attach_adapters(model, AdapterConfig(lift_mode=LiftMode.LIE_TAYLOR, target="*"), Rng(2))
    rng = Rng(3)
    x, y = T.gaussian((8, 1, 8, 8), 0, 1, rng), rng.integers(4, 8)
    tape = Tape()
    loss = optim.cross_entropy(tape, nn.model_forward(model, x, tape), y)
    grads = backward(tape, loss)
    params = adapter_params(adapters)
    named = {k: grads[tape.names[k]] for k in params}
    assert any(np.any(named[k] != 0) for k in named if k.endswith(".B"))
    set_adapter_params(adapters, optim.step(optim.TrainState(), optim.SgdConfig(lr=0.1), params, named))
    assert any(np.any(a.effective_weight() != a.base) for a in adapters.values())
    assert all(base[k].tobytes() == v.tobytes() for k, v in model.params().items())


def test_model_checkpoint_round_trip(tmp_path):
    model = nn.smallcnn(seed=4)
    nn.save_model(tmp_path / "m.lckp", model)
    back = nn.load_model(tmp_path / "m.lckp")
    assert back.params().keys() == model.params().keys()
    assert all(back.params()[k].tobytes() == v.tobytes() for k, v in model.params().items())
