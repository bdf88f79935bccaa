"""Dense float64 tensors with tape-based reverse-mode differentiation.

Taping is explicit: operations are only recorded while a :class:`Graph` is
active (``with graph.recording(): ...``) and at least one input requires a
gradient. Outside of a recording block every op is a plain numpy computation
and allocates no graph state.

Example::

    w = Tensor(np.ones(3), requires_grad=True)
    g = Graph()
    with g.recording():
        loss = tsum(w * 2.0)
    grads = g.backward(loss)
    grads[w]  # array([2., 2., 2.])
"""
from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import kernels

_local = threading.local()


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Gradients(Mapping):
    """Gradient map keyed by tensor identity."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._tensors: dict[int, Tensor] = {}

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        k = id(t)
        if k in self._grads:
            self._grads[k] = self._grads[k] + g
        else:
            self._grads[k] = g
            self._tensors[k] = t

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._grads[id(t)]

    def __contains__(self, t) -> bool:
        return id(t) in self._grads

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._grads)

    def get(self, t: Tensor, default=None, zeros: bool = False):
        """Gradient of ``t``; with ``zeros=True`` unreachable tensors get zeros."""
        g = self._grads.get(id(t))
        if g is None and zeros:
            return np.zeros(t.shape)
        return default if g is None else g


class Graph:
    """Append-only tape of recorded operations."""

    def __init__(self):
        self.nodes: list[Node] = []

    @contextmanager
    def recording(self):
        prev = getattr(_local, "graph", None)
        _local.graph = self
        try:
            yield self
        finally:
            _local.graph = prev

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> Gradients:
        """Propagate d(loss)/d(.) through the tape, newest node first.

        ``params`` lists tensors that should always appear in the result; any
        of them not reachable from ``loss`` receives a zero gradient.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = Gradients()
        grads._accumulate(loss, np.ones(loss.shape))
        for node in reversed(self.nodes):
            g = grads.get(node.output)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is not None and t.requires_grad:
                    grads._accumulate(t, gi)
        for p in params:
            if p not in grads:
                grads._accumulate(p, np.zeros(p.shape))
        return grads


def active_graph() -> Optional[Graph]:
    return getattr(_local, "graph", None)


def emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, check it is finite, and record it when taping.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    res = Tensor._wrap(out, requires_grad=needs)
    graph = active_graph()
    if needs and graph is not None:
        graph.record(op, inputs, res, backward)
    return res


# -- elementwise & reductions --------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    if a.shape != b.shape and b.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        gb = g if b.shape == a.shape else np.full(b.shape, g.sum())
        return g, gb

    return emit("add", a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return emit("scale", a.data * c, (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    return emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return emit("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def reshape(a: Tensor, shape) -> Tensor:
    return emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# -- layers --------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation over (N, C, H, W) inputs, lowered to im2col + GEMM."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has C={c} channels but kernel expects C={kc}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match O={o}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, padding)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, oh, ow)

    def backward(g):
        g2 = g.reshape(n, o, oh * ow)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(wmat.T, g2), x.shape, kh, kw, stride, padding)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return emit("conv2d", out, inputs, backward)


def batch_norm2d(x: Tensor, scale_: Tensor, shift: Tensor, running_mean: Tensor,
                 running_var: Tensor, mode: str = "train", momentum: float = 0.9,
                 epsilon: float = 1e-5) -> Tensor:
    """Per-channel normalization of (N, C, H, W) activations.

    In train mode the running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch`` (unbiased batch
    variance for the running estimate).
    """
    if epsilon <= 0:
        raise ValueError("batch_norm2d: epsilon must be > 0")
    n, c, h, w = x.shape
    for name, t in (("scale", scale_), ("shift", shift), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batch_norm2d: {name} has shape {t.shape}, expected ({c},)")
    gamma = scale_.data[None, :, None, None]
    beta = shift.data[None, :, None, None]
    if mode == "train":
        m = n * h * w
        if m == 1:
            raise ValueError("batch_norm2d: N*H*W = 1 in train mode; use a larger batch")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + epsilon)
        xhat = xc * inv[None, :, None, None]
        running_mean.data[...] = momentum * running_mean.data + (1.0 - momentum) * mu
        running_var.data[...] = momentum * running_var.data + (1.0 - momentum) * var * (m / (m - 1))

        def backward(g):
            dxhat = g * gamma
            sum_d = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            gx = (inv[None, :, None, None] / m) * (m * dxhat - sum_d - xhat * sum_dx)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)), None, None
    elif mode == "eval":
        if (running_var.data < 0).any():
            raise ValueError("batch_norm2d: running_var must be non-negative in eval mode")
        inv = 1.0 / np.sqrt(running_var.data + epsilon)
        xhat = (x.data - running_mean.data[None, :, None, None]) * inv[None, :, None, None]

        def backward(g):
            gx = g * (gamma * inv[None, :, None, None])
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)), None, None
    else:
        raise ValueError(f"batch_norm2d: unknown mode {mode!r}")
    out = xhat * gamma + beta
    return emit("batch_norm2d", out, (x, scale_, shift, running_mean, running_var), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    k = 1.0 / (h * w)
    return emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                lambda g: (np.broadcast_to(g[:, :, None, None] * k, x.shape).copy(),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match K={weight.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit("linear", out, inputs, backward)


def l2_normalize(x: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||, epsilon)``."""
    norm = np.sqrt((x.data * x.data).sum(axis=1))
    denom = np.maximum(norm, epsilon)
    y = x.data / denom[:, None]
    active = (norm >= epsilon)[:, None]

    def backward(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(active, g - y * proj, g) / denom[:, None],)

    return emit("l2_normalize", y, (x,), backward)


def squared_distance_mean(a: Tensor, b: Tensor) -> Tensor:
    """``(1/N) * sum_rows ||a_row - b_row||^2``."""
    if a.shape != b.shape:
        raise ShapeError(f"squared_distance_mean: shapes {a.shape} and {b.shape} differ")
    n = a.shape[0]
    d = a.data - b.data
    out = np.asarray((d * d).sum() / n)
    return emit("squared_distance_mean", out, (a, b),
                lambda g: ((2.0 * float(g) / n) * d, (-2.0 * float(g) / n) * d))


# -- finite-difference verification ------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor], step: float = 1e-5,
               min_coords: int = 200, seed: int = 0) -> tuple[float, dict[str, float]]:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` must read the tensors in ``params`` (mutating their ``data`` is how
    coordinates are perturbed). For every tensor, ``min_coords`` coordinates
    (all of them if fewer) are sampled. Returns the worst relative error
    overall and per tensor, with denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be > 0")
    graph = Graph()
    with graph.recording():
        loss = fn()
    _require_finite(loss.data, "loss")
    grads = graph.backward(loss, params=params.values())
    rng = np.random.default_rng(seed)
    per_tensor: dict[str, float] = {}
    for name, t in params.items():
        analytic = grads.get(t, zeros=True)
        _require_finite(analytic, f"gradient of {name}")
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ValueError(f"grad_check: tensor {name} is not contiguous; cannot perturb in place")
        idx = np.arange(flat.size)
        if flat.size > min_coords:
            idx = rng.choice(flat.size, size=min_coords, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"grad_check: non-finite loss while perturbing {name}")
            num = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        per_tensor[name] = worst
    return max(per_tensor.values(), default=0.0), per_tensor


def _require_finite(arr, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


# -- checkpoint container ------------------------------------------------------

MAGIC = b"RDT1"


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays in the ``RDT1`` container (little-endian throughout)."""
    chunks = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: unknown magic {buf[:4]!r}, expected {MAGIC!r}")
    out: dict[str, np.ndarray] = {}
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        out[name] = arr
    return out
