"""Resolution-agnostic fully convolutional embedding network.

Teacher and student are the same network: a stack of conv -> batch norm ->
ReLU blocks, global average pooling and a bias-free linear projection to the
embedding. Nothing in the parameter set depends on the input resolution, so
one :class:`ParameterSet` runs on any input at least ``min_resolution`` wide.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class Block:
    out_channels: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be positive, got {self.out_channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be an odd positive int, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")


@dataclass(frozen=True)
class ModelConfig:
    blocks: tuple = (Block(16), Block(32), Block(64), Block(128))
    embed_dim: int = 64
    in_channels: int = 1
    norm_momentum: float = 0.9
    norm_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValueError("ModelConfig needs at least one block")
        if self.embed_dim < 1 or self.in_channels < 1:
            raise ValueError("embed_dim and in_channels must be positive")
        if not 0.0 < self.norm_momentum < 1.0:
            raise ValueError(f"norm momentum must lie in (0, 1), got {self.norm_momentum}")
        if self.norm_epsilon <= 0:
            raise ValueError(f"norm epsilon must be > 0, got {self.norm_epsilon}")

    @classmethod
    def from_lists(cls, channels, kernels=3, strides=2, paddings=None, **kw) -> "ModelConfig":
        n = len(channels)
        kernels = _broadcast(kernels, n)
        strides = _broadcast(strides, n)
        paddings = _broadcast([k // 2 for k in kernels] if paddings is None else paddings, n)
        blocks = tuple(Block(c, k, s, p) for c, k, s, p in zip(channels, kernels, strides, paddings))
        return cls(blocks=blocks, **kw)

    @property
    def min_resolution(self) -> int:
        """Smallest square input for which every block still emits >= 1 pixel."""
        need = 1
        for b in reversed(self.blocks):
            need = max((need - 1) * b.stride + b.kernel - 2 * b.padding, 1)
        return need

    def spatial_sizes(self, resolution: int) -> list[int]:
        sizes = []
        r = resolution
        for b in self.blocks:
            r = T.conv_output_size(r, b.kernel, b.stride, b.padding)
            sizes.append(r)
        return sizes

    def check_resolution(self, resolution: int) -> None:
        if resolution < self.min_resolution:
            raise ValueError(
                f"input resolution {resolution} is below min_resolution={self.min_resolution}")

    def param_shapes(self, num_classes: Optional[int] = None) -> dict[str, tuple]:
        """Names and shapes of every stored tensor (``W`` included if ``num_classes``)."""
        shapes: dict[str, tuple] = {}
        cin = self.in_channels
        for i, b in enumerate(self.blocks):
            shapes[f"block{i}.conv.weight"] = (b.out_channels, cin, b.kernel, b.kernel)
            shapes[f"block{i}.bn.scale"] = (b.out_channels,)
            shapes[f"block{i}.bn.shift"] = (b.out_channels,)
            shapes[f"block{i}.bn.running_mean"] = (b.out_channels,)
            shapes[f"block{i}.bn.running_var"] = (b.out_channels,)
            cin = b.out_channels
        shapes["embed.weight"] = (self.embed_dim, cin)
        if num_classes is not None:
            shapes["W"] = (num_classes, self.embed_dim)
        return shapes


def _broadcast(v, n):
    if isinstance(v, int):
        return [v] * n
    v = list(v)
    if len(v) == 1:
        return v * n
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {len(v)}")
    return v


def is_buffer(name: str) -> bool:
    return name.endswith("running_mean") or name.endswith("running_var")


@dataclass
class ParameterSet:
    config: ModelConfig
    theta: dict
    W: Tensor

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def trainable(self) -> dict[str, Tensor]:
        out = {k: v for k, v in self.theta.items() if not is_buffer(k)}
        out["W"] = self.W
        return out

    def tensors(self) -> dict[str, Tensor]:
        out = dict(self.theta)
        out["W"] = self.W
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors().items()}


def build(config: ModelConfig, num_classes: int, seed: int) -> ParameterSet:
    """Fresh He-initialized parameters; bit-identical for equal arguments."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    theta = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("conv.weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name == "embed.weight":
            arr = rng.standard_normal(shape) * np.sqrt(1.0 / shape[1])
        elif name.endswith(("bn.scale", "running_var")):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        theta[name] = Tensor(arr, requires_grad=not is_buffer(name), name=name)
    w = rng.standard_normal((num_classes, config.embed_dim)) * np.sqrt(1.0 / config.embed_dim)
    return ParameterSet(config, theta, Tensor(w, requires_grad=True, name="W"))


def forward_features(params: ParameterSet, images, mode: str = "eval") -> tuple[Tensor, Tensor]:
    """Return ``(pooled, embedding)`` for a batch of (N, C, R, R) images."""
    cfg = params.config
    x = images if isinstance(images, Tensor) else Tensor._wrap(np.asarray(images, dtype=np.float64))
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"expected images of shape (N, {cfg.in_channels}, R, R), got {x.shape}")
    cfg.check_resolution(min(x.shape[2], x.shape[3]))
    th = params.theta
    for i, b in enumerate(cfg.blocks):
        x = T.conv2d(x, th[f"block{i}.conv.weight"], None, b.stride, b.padding)
        x = T.batch_norm2d(x, th[f"block{i}.bn.scale"], th[f"block{i}.bn.shift"],
                           th[f"block{i}.bn.running_mean"], th[f"block{i}.bn.running_var"],
                           mode, cfg.norm_momentum, cfg.norm_epsilon)
        x = T.relu(x)
    pooled = T.global_avg_pool(x)
    return pooled, T.linear(pooled, th["embed.weight"])


def forward_embed(params: ParameterSet, images, mode: str = "eval") -> Tensor:
    return forward_features(params, images, mode)[1]


def forward_logits(params: ParameterSet, images, mode: str = "eval") -> Tensor:
    return T.linear(forward_embed(params, images, mode), params.W)


def param_count(config: ModelConfig, num_classes: int) -> int:
    """Trainable values (running statistics excluded); no resolution enters."""
    return sum(int(np.prod(s)) for k, s in config.param_shapes(num_classes).items()
               if not is_buffer(k))


def copy_parameters(source: ParameterSet) -> ParameterSet:
    theta = {k: Tensor(v.data, requires_grad=v.requires_grad, name=v.name)
             for k, v in source.theta.items()}
    w = Tensor(source.W.data, requires_grad=source.W.requires_grad, name="W")
    return ParameterSet(source.config, theta, w)


def save(params: ParameterSet, path) -> None:
    T.write_tensors(path, params.arrays())


def load(path, config: ModelConfig) -> ParameterSet:
    """Read a checkpoint and validate it against ``config``."""
    arrays = T.read_tensors(path)
    if "W" not in arrays:
        raise T.CheckpointError(f"{path}: no classifier tensor 'W'")
    expected = config.param_shapes(arrays["W"].shape[0])
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise T.CheckpointError(f"{path}: tensor names differ from config "
                                f"(missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise T.ShapeError(f"{path}: tensor {name!r} has shape {arrays[name].shape}, "
                               f"config expects {shape}")
    theta = {k: Tensor(arrays[k], requires_grad=not is_buffer(k), name=k)
             for k in expected if k != "W"}
    return ParameterSet(config, theta, Tensor(arrays["W"], requires_grad=True, name="W"))


def fingerprint(params: ParameterSet) -> str:
    """SHA-256 over every stored tensor, for frozen-parameter checks."""
    h = hashlib.sha256()
    for k, arr in sorted(params.arrays().items()):
        h.update(k.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
