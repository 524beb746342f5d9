import numpy as np
import pytest

from liera_lab import data, nn, optim, train
from liera_lab.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def direct_conv2d(x, kernel, stride=1, pad=0):
    """Naive nested-loop cross-correlation used as an independent oracle."""
    b_, c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    xp = np.zeros((b_, c_in, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((b_, c_out, oh, ow))
    for b in range(b_):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[b, c, i * stride + ki, j * stride + kj] * kernel[o, c, ki, kj]
                    out[b, o, i, j] = acc
    return out


@pytest.fixture(scope="session")
def base_task():
    return data.TaskSpec()


@pytest.fixture(scope="session")
def shifted_task(base_task):
    return base_task.with_transforms(data.shift(2, 1), data.noise(0.1))


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory, base_task):
    """A SmallCNN pretrained on the default Bars task, saved once per session."""
    tr, va = data.generate(base_task)
    model = nn.smallcnn(4, seed=0)
    train.pretrain(model, tr, va, optim.AdamWConfig(), 20, 32, 0)
    path = tmp_path_factory.mktemp("ckpt") / "pre.lckp"
    nn.save_model(path, model)
    return path


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(label: str, ok: bool, detail: str = ""):
        line = f"{label}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
