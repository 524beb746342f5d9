"""Pretraining and adapter fine-tuning loops."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autograd import Tape, backward
from .data import Dataset
from .nn import Model, attach_adapters, model_forward
from .optim import TrainState, accuracy, cross_entropy, step
from .peft import AdapterConfig, LowRankFactors
from .rng import Rng, hash_seed


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    wall_ms: float


def evaluate(model: Model, dataset: Dataset, adapters=None, chunk: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over ``dataset``."""
    total = 0.0
    logits_all = []
    for start in range(0, len(dataset), chunk):
        x = dataset.images[start : start + chunk]
        y = dataset.labels[start : start + chunk]
        tape = Tape()
        logits = model_forward(model, x, tape, adapters)
        total += float(tape.value(cross_entropy(tape, logits, y))) * len(y)
        logits_all.append(tape.value(logits))
    return total / len(dataset), accuracy(np.concatenate(logits_all), dataset.labels)


def batches(n: int, batch_size: int, seed: int, epoch: int):
    order = Rng(hash_seed(seed, epoch)).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _loop_steps(model, train, val, optim_config, epochs, batch_size, seed, get_params, set_params, on_epoch=None):
    """Training loop as a generator.

    Yields ``None`` after every optimizer step and the epoch's
    :class:`EpochRecord` after each validation pass, so a driver can
    interleave and time several runs.  Returns ``(history, state)``.
    """
    state = TrainState()
    history = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in batches(len(train), batch_size, seed, epoch):
            tape = Tape()
            logits = model_forward(model, train.images[idx], tape, train_base=not model.adapters)
            loss = cross_entropy(tape, logits, train.labels[idx])
            grads = backward(tape, loss)
            params = get_params()
            named = {name: grads[tape.names[name]] for name in params}
            set_params(step(state, optim_config, params, named))
            losses.append(float(tape.value(loss)))
            yield None
        val_loss, val_acc = evaluate(model, val)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        record = EpochRecord(epoch, float(np.mean(losses)), val_loss, val_acc, wall_ms)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        yield record
    return history, state


def drain(steps):
    """Run a step generator to completion and return its result."""
    while True:
        try:
            next(steps)
        except StopIteration as stop:
            return stop.value


def _loop(*args, **kwargs):
    return drain(_loop_steps(*args, **kwargs))


def pretrain(model: Model, train: Dataset, val: Dataset, optim_config, epochs: int, batch_size: int, seed: int, on_epoch=None):
    """Train every unfrozen base weight and bias of ``model`` (no adapters)."""
    model.adapters = {}

    def get_params():
        frozen = {f"{l.name}.{s}" for l in model.parametric() if l.frozen for s in (l.param_suffix, "bias")}
        return {k: v for k, v in model.params().items() if k not in frozen}

    return _loop(model, train, val, optim_config, epochs, batch_size, seed, get_params, model.set_params, on_epoch)


def adapter_params(adapters: dict) -> dict:
    out = {}
    for name, a in adapters.items():
        out[f"{name}.A"] = a.factors.A
        out[f"{name}.B"] = a.factors.B
    return out


def set_adapter_params(adapters: dict, params: dict) -> None:
    for name, a in adapters.items():
        a.factors = LowRankFactors(params[f"{name}.A"], params[f"{name}.B"], a.factors.alpha)


def finetune(*args, **kwargs):
    """Attach fresh adapters (unless given) and train only their factors.

    Returns ``(adapters, history, state)``.
    """
    return drain(finetune_steps(*args, **kwargs))


def finetune_steps(
    model: Model,
    train: Dataset,
    val: Dataset,
    adapter_config: AdapterConfig,
    optim_config,
    epochs: int,
    batch_size: int,
    seed: int,
    on_epoch=None,
    adapters: dict | None = None,
):
    """Step-generator form of :func:`finetune`."""
    if adapters is None:
        adapters = attach_adapters(model, adapter_config, Rng(hash_seed(seed, 0xADA)))
    model.adapters = adapters
    history, state = yield from _loop_steps(
        model,
        train,
        val,
        optim_config,
        epochs,
        batch_size,
        seed,
        lambda: adapter_params(adapters),
        lambda p: set_adapter_params(adapters, p),
        on_epoch,
    )
    return adapters, history, state
