import numpy as np
import pytest
from hypothesis import settings

from sasra import tensor as T
from sasra.gridsim import Vocabulary, WorldCache, WorldParams, generate_world, sample_episode
from sasra.model import ModelConfig
from sasra.tensor import Rng, Tensor

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

TINY = dict(H=16, n_h=2, ff=32, r=8, obs_size=32, rgb_channels=8, rgb_reduced=8, depth_channels=8,
            action_embed=8)


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar f(*arrays) with respect to every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            fp = f(*arrays)
            a[i] = old - eps
            fm = f(*arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def gradcheck(fn, *arrays, eps=1e-6):
    """Max relative error between analytic and numeric gradients of sum(w * fn(...))."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = None

    def scalar(*arrs):
        out = fn(*[Tensor(a) for a in arrs])
        return float((out.data * probe).sum())

    out = fn(*[Tensor(a) for a in arrays])
    probe = np.random.default_rng(0).normal(size=out.shape)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    y = fn(*ts)
    (y * Tensor(probe)).sum().backward()
    num = numeric_grad(scalar, arrays, eps)
    return max(rel_err(t.grad if t.grad is not None else np.zeros_like(n), n) for t, n in zip(ts, num))


@pytest.fixture(autouse=True)
def _f64():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture(scope="session")
def world():
    return generate_world(3)


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.default()


@pytest.fixture(scope="session")
def episode(world, vocab):
    return sample_episode(world, Rng(5), vocab, "ep0")


@pytest.fixture
def tiny_cfg(vocab):
    return ModelConfig(**TINY, vocab_size=len(vocab))


@pytest.fixture(scope="session")
def worlds():
    return WorldCache(WorldParams())


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
