import numpy as np
import pytest

from resdistill.tensor import Graph, Tensor


def numeric_grad(f, arr, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def tape_grads(fn, *tensors):
    g = Graph()
    with g.recording():
        loss = fn()
    grads = g.backward(loss, params=tensors)
    return [grads[t] for t in tensors]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(arr):
    return Tensor(arr, requires_grad=True)
