import numpy as np
import pytest
import torch

from cxrseg.core import ClassScheme
from cxrseg.data import SegmentationSet
from cxrseg.phantom import make_phantom
from cxrseg.preprocess import PreprocessConfig, preprocess_pair

torch.set_num_threads(1)


@pytest.fixture
def lungs():
    return ClassScheme.from_name("lungs")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def phantom_set(n, size, scheme, seed=0):
    cfg = PreprocessConfig(target_size=size)
    pairs = [preprocess_pair(*make_phantom(size, scheme, seed=seed + i), cfg) for i in range(n)]
    return SegmentationSet.from_pairs(pairs, [f"s{seed + i:03d}" for i in range(n)])


@pytest.fixture
def tiny_set(lungs):
    return phantom_set(6, 32, lungs)


def random_prediction(rng, shape, dtype=np.float64):
    """Softmax of Gaussian logits, shape [..., C]."""
    logits = rng.standard_normal(shape)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).astype(dtype)


def random_one_hot(rng, shape):
    *spatial, c = shape
    return np.eye(c)[rng.integers(0, c, size=spatial)]


def finite_difference_check(fn, x, step=1e-5, rtol=1e-4, floor=1e-10):
    """Compare autograd against central differences; returns the worst scaled error.

    A component passes when |analytic - numeric| <= rtol * max(|analytic|, |numeric|) + floor,
    so a return value <= 1 means every component passed.
    """
    x = x.detach().clone().to(torch.float64).requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().numpy().ravel()
    base = x.detach().clone()
    numeric = np.empty_like(analytic)
    flat = base.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = fn(base).item()
            flat[i] = orig - step
            down = fn(base).item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * step)
    allowed = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
    return float(np.max(np.abs(analytic - numeric) / allowed))


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one acceptance line; the lines are printed in the terminal summary."""
    def record(name, passed, detail=""):
        ACCEPTANCE.append((name, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
