"""Randomized finite-difference checks for every differentiable op and the full network."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import losses, nn
from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-5


def _param(rng, shape, lo=None, hi=None):
    if lo is None:
        arr = rng.standard_normal(shape)
    else:
        arr = rng.uniform(lo, hi, shape)
    return Tensor(arr, requires_grad=True)


def _away_from_zero(rng, shape, gap=1e-3):
    arr = rng.standard_normal(shape)
    arr[np.abs(arr) < gap] += np.copysign(2 * gap, arr[np.abs(arr) < gap])
    return Tensor(arr, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # a random linear read-out keeps every input coordinate's gradient generic
    return T.tsum(T.mul(out, Tensor(w)))


def _conv(rng):
    x, k, b = _param(rng, (2, 3, 8, 8)), _param(rng, (4, 3, 3, 3)), _param(rng, (4,))
    w = rng.standard_normal((2, 4, 8, 8))
    return lambda: _weighted(T.conv2d(x, k, b, 1, 1), w), {"input": x, "kernel": k, "bias": b}


def _conv_strided(rng):
    x, k = _param(rng, (2, 2, 9, 9)), _param(rng, (3, 2, 3, 3))
    w = rng.standard_normal((2, 3, 5, 5))
    return lambda: _weighted(T.conv2d(x, k, None, 2, 1), w), {"input": x, "kernel": k}


def _relu(rng):
    x = _away_from_zero(rng, (4, 60))
    w = rng.standard_normal((4, 60))
    return lambda: _weighted(T.relu(x), w), {"input": x}


def _bn(mode):
    def make(rng):
        x = _param(rng, (4, 3, 5, 5))
        s, b = _param(rng, (3,), 0.5, 1.5), _param(rng, (3,))
        rm, rv = Tensor(rng.standard_normal(3)), Tensor(rng.uniform(0.5, 2.0, 3))
        w = rng.standard_normal((4, 3, 5, 5))
        return (lambda: _weighted(T.batch_norm2d(x, s, b, rm, rv, mode), w),
                {"input": x, "scale": s, "shift": b})
    return make


def _pool(rng):
    x = _param(rng, (3, 4, 5, 6))
    w = rng.standard_normal((3, 4))
    return lambda: _weighted(T.global_avg_pool(x), w), {"input": x}


def _linear(rng):
    x, wt, b = _param(rng, (6, 40)), _param(rng, (7, 40)), _param(rng, (7,))
    w = rng.standard_normal((6, 7))
    return lambda: _weighted(T.linear(x, wt, b), w), {"input": x, "weight": wt, "bias": b}


def _l2(rng):
    x = _param(rng, (6, 40))
    w = rng.standard_normal((6, 40))
    return lambda: _weighted(T.l2_normalize(x), w), {"input": x}


def _sqdist(rng):
    a, b = _param(rng, (5, 50)), _param(rng, (5, 50))
    return lambda: T.squared_distance_mean(a, b), {"a": a, "b": b}


def _softmax_ce(rng):
    z = _param(rng, (8, 30))
    y = rng.integers(0, 30, 8)
    return lambda: losses.softmax_cross_entropy(z, y), {"logits": z}


def _angular(rng):
    n, k = 8, 30
    y = rng.integers(0, k, n)
    c = rng.uniform(-0.9, 0.9, (n, k))
    # keep theta_y + m clear of pi so the cap is not active
    c[np.arange(n), y] = rng.uniform(-0.5, 0.9, n)
    cos = Tensor(c, requires_grad=True)
    return lambda: losses.softmax_cross_entropy(losses.angular_margin_logits(cos, y, 4.0, 0.3), y), {"cosines": cos}


def _arcface(rng):
    e, wt = _param(rng, (8, 12)), _param(rng, (10, 12))
    y = rng.integers(0, 10, 8)
    return lambda: losses.arcface(e, wt, y, 4.0, 0.3), {"embeddings": e, "W": wt}


def _feature_match(rng):
    s, t = _param(rng, (6, 40)), Tensor(rng.standard_normal((6, 40)))
    return lambda: losses.feature_match(s, t), {"student": s}


MINI_NET = nn.ModelConfig.from_lists([4, 6], kernels=3, strides=[2, 2], embed_dim=8)


def _network(cls_kind: str, alpha: float):
    def make(rng):
        params = nn.build(MINI_NET, 5, seed=int(rng.integers(1 << 31)))
        x = rng.random((6, 1, 8, 8))
        y = np.array([0, 1, 2, 3, 4, 0])
        teacher = rng.standard_normal((6, MINI_NET.embed_dim))

        def fn():
            emb = nn.forward_embed(params, x, "train")
            lb = losses.combined_student_loss(emb, params.W, y, alpha,
                                              teacher_feat=Tensor(teacher) if alpha else None,
                                              cls_kind=cls_kind, arc_scale=4.0, arc_margin=0.3)
            return lb.tensor
        return fn, params.trainable()
    return make


CASES: dict[str, Callable] = {
    "conv2d": _conv,
    "conv2d_stride2": _conv_strided,
    "relu": _relu,
    "batch_norm2d_train": _bn("train"),
    "batch_norm2d_eval": _bn("eval"),
    "global_avg_pool": _pool,
    "linear": _linear,
    "l2_normalize": _l2,
    "squared_distance_mean": _sqdist,
    "softmax_cross_entropy": _softmax_ce,
    "angular_margin_logits": _angular,
    "arcface": _arcface,
    "feature_match": _feature_match,
    "network_softmax": _network("softmax", 0.0),
    "network_arcface": _network("arcface", 0.0),
    "network_combined": _network("softmax", 0.1),
}


def run(seed: int = 0, step: float = STEP, min_coords: int = 200, cases=None) -> dict[str, float]:
    """Worst relative error per case."""
    out = {}
    for i, name in enumerate(cases or CASES):
        rng = np.random.default_rng([seed, i])
        fn, params = CASES[name](rng)
        worst, _ = T.grad_check(fn, params, step, min_coords, seed=seed)
        out[name] = worst
    return out


def passed(results: dict[str, float], tolerance: float = TOLERANCE) -> bool:
    return all(math.isfinite(v) and v <= tolerance for v in results.values())
