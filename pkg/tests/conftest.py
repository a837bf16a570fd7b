import numpy as np
import pytest
import torch

from dfcil.data import make_toy_dataset
from dfcil.model import IncrementalClassifier


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def double():
    """Run the test body in float64, restoring the default dtype afterwards."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def tiny_model(task_sizes=(3, 2), image_shape=(4, 4, 2), seed=0, dtype=torch.float64):
    """``tiny`` backbone (D=8) with one head per entry of ``task_sizes``."""
    torch.manual_seed(seed)
    m = IncrementalClassifier("tiny", image_shape).to(dtype)
    start = 0
    g = torch.Generator().manual_seed(seed)
    for size in task_sizes:
        m.grow_heads(range(start, start + size), generator=g)
        start += size
    return m


def small_model(task_sizes=(5,), seed=0):
    torch.manual_seed(seed)
    m = IncrementalClassifier("small_conv", (16, 16, 3))
    start = 0
    for size in task_sizes:
        m.grow_heads(range(start, start + size), generator=torch.Generator().manual_seed(seed + start))
        start += size
    return m


def central_difference(fn, params, eps=1e-6):
    """Numerical gradient of the scalar ``fn()`` with respect to each tensor in ``params``."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(fn, params, eps=1e-6):
    """Largest |analytic - numeric| over all entries, relative to the largest numeric entry."""
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    with torch.no_grad():
        numeric = central_difference(fn, params, eps)
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return float((a - n).abs().max() / n.abs().max().clamp_min(1e-12))


@pytest.fixture(scope="session")
def toy_small():
    """A reduced toy dataset for fast integration tests."""
    return make_toy_dataset(num_classes=6, train_per_class=30, test_per_class=10, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
