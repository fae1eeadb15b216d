import contextlib

import numpy as np
import pytest

from attcdcnet import functional as F
from attcdcnet.autograd import GradTape, Tensor, backward, precision
from attcdcnet.model import ModelConfig


def relative_error(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = np.maximum(1e-4, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def gradcheck(fn, arrays, h=1e-3, seed=0):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps Tensors to a Tensor; it is reduced to a scalar through a fixed
    random projection so every output element contributes.  Runs in float64.
    """
    with precision(np.float64):
        tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        probe = fn(*tensors)
        proj = Tensor(np.random.default_rng(seed).standard_normal(probe.shape))

        def scalar(*ts):
            return F.sum(F.mul(fn(*ts), proj))

        with GradTape() as tape:
            loss = scalar(*tensors)
        analytic = backward(tape, loss, sources=tensors)
        worst = 0.0
        for i, t in enumerate(tensors):
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                flat[j] = old + h
                up = scalar(*tensors).item()
                flat[j] = old - h
                down = scalar(*tensors).item()
                flat[j] = old
                numeric.reshape(-1)[j] = (up - down) / (2 * h)
            worst = max(worst, relative_error(analytic[i], numeric))
        return worst


@contextlib.contextmanager
def relu_margin():
    """Record the smallest |input| seen by any ReLU while the context is open.

    Central differences are only valid where the function is smooth, so
    gradient checks of ReLU networks first confirm that no activation sits
    within the perturbation range of its kink.
    """
    seen = []
    original = F.relu

    def recording(x):
        seen.append(float(np.abs(x.data).min()))
        return original(x)

    F.relu = recording
    try:
        yield seen
    finally:
        F.relu = original


@contextlib.contextmanager
def relu_patterns():
    """Record the on/off pattern of every ReLU applied while open."""
    masks = []
    original = F.relu

    def recording(x):
        masks.append(x.data > 0)
        return original(x)

    F.relu = recording
    try:
        yield masks
    finally:
        F.relu = original


def same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def smooth_case(make, min_margin=1e-2, tries=100):
    """First seed whose case keeps every ReLU input at least ``min_margin`` from 0.

    ``make(rng)`` returns ``(forward, arrays)``; the forward pass is run once
    to measure the margin.
    """
    for seed in range(tries):
        forward, arrays = make(np.random.default_rng(seed))
        with relu_margin() as seen, precision(np.float64):
            forward(*[Tensor(a) for a in arrays])
        if not seen or min(seen) >= min_margin:
            return forward, arrays
    raise AssertionError("no kink-free seed found")


def module_forward(module, call=None):
    """``(fn, arrays)`` where ``fn(x, *params)`` runs ``module`` with the given
    Tensors swapped in for its parameters, so gradcheck can perturb them."""
    slots = []
    for _, m in module.named_modules():
        for attr, p in m._params.items():
            slots.append((m, attr, p))
    call = call or (lambda mod, x: mod(x))

    def fn(x, *params):
        try:
            for (owner, attr, _), t in zip(slots, params):
                object.__setattr__(owner, attr, t)
            return call(module, x)
        finally:
            for owner, attr, p in slots:
                object.__setattr__(owner, attr, p)

    return fn, [p.data.astype(np.float64) for _, _, p in slots]


def tiny_config(**overrides) -> ModelConfig:
    """A DenseNet-shaped model small enough for per-test training."""
    opts = dict(
        block_layout=(2, 2), growth_rate=4, bn_size=2, stem_channels=8, num_classes=4,
        attention_reduction=4, input_size=32,
    )
    opts.update(overrides)
    return ModelConfig(**opts)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
