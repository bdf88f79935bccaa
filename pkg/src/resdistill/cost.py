"""Analytic compute and memory model of the embedding network.

Only convolutions and the embedding projection are charged multiply-accumulates;
normalization, ReLU and pooling are treated as free. The classifier ``W`` is a
training-only head and is not part of inference cost.
"""
from __future__ import annotations

import io
import statistics
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn
from . import tensor as T

BYTES_PER_VALUE = 8
COST_HEADER = "resolution,macc,param_bytes,activation_bytes,wall_ms"


@dataclass(frozen=True)
class LayerCost:
    name: str
    macc: int
    in_values: int
    out_values: int


@dataclass(frozen=True)
class CostReport:
    resolution: int
    macc: int
    param_bytes: int
    activation_bytes: int
    wall_ms: Optional[float] = None


def layer_costs(config: nn.ModelConfig, resolution: int) -> list[LayerCost]:
    """Per-op costs for one image, in execution order."""
    config.check_resolution(resolution)
    layers = []
    c, r = config.in_channels, resolution
    for i, b in enumerate(config.blocks):
        out_r = T.conv_output_size(r, b.kernel, b.stride, b.padding)
        inp, out = c * r * r, b.out_channels * out_r * out_r
        macc = out_r * out_r * b.out_channels * c * b.kernel * b.kernel
        layers.append(LayerCost(f"block{i}.conv", macc, inp, out))
        layers.append(LayerCost(f"block{i}.bn", 0, out, out))
        layers.append(LayerCost(f"block{i}.relu", 0, out, out))
        c, r = b.out_channels, out_r
    layers.append(LayerCost("pool", 0, c * r * r, c))
    layers.append(LayerCost("embed", c * config.embed_dim, c, config.embed_dim))
    return layers


def macc_count(config: nn.ModelConfig, resolution: int) -> int:
    return sum(layer.macc for layer in layer_costs(config, resolution))


def activation_memory(config: nn.ModelConfig, resolution: int, batch: int = 1) -> int:
    """Peak live activation bytes when each op frees its input right after running.

    While an op runs both its input and output are resident, so the peak is
    the largest ``in + out`` over the sequence.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    peak = max(layer.in_values + layer.out_values for layer in layer_costs(config, resolution))
    return peak * batch * BYTES_PER_VALUE


def param_bytes(config: nn.ModelConfig) -> int:
    """Stored backbone size: every theta tensor including running statistics."""
    return BYTES_PER_VALUE * sum(int(np.prod(s)) for s in config.param_shapes().values())


def measure_wall_clock(params: nn.ParameterSet, resolution: int, repeats: int = 5,
                       seed: int = 0) -> float:
    """Median single-threaded eval-mode forward time in milliseconds, batch 1."""
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    cfg = params.config
    x = np.random.default_rng(seed).random((1, cfg.in_channels, resolution, resolution))
    times = []
    with threadpool_limits(limits=1):
        nn.forward_embed(params, x)  # warm-up
        for _ in range(repeats):
            t0 = time.perf_counter()
            nn.forward_embed(params, x)
            times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def cost_table(config: nn.ModelConfig, resolutions: Sequence[int],
               params: Optional[nn.ParameterSet] = None, repeats: int = 5) -> list[CostReport]:
    """One report per resolution, highest first. ``wall_ms`` is only measured with ``params``."""
    pb = param_bytes(config)
    rows = []
    for r in sorted(set(resolutions), reverse=True):
        wall = measure_wall_clock(params, r, repeats) if params is not None else None
        rows.append(CostReport(r, macc_count(config, r), pb, activation_memory(config, r), wall))
    return rows


def cost_csv(rows: Sequence[CostReport]) -> str:
    buf = io.StringIO()
    buf.write(COST_HEADER + "\n")
    for row in rows:
        wall = "NA" if row.wall_ms is None else f"{row.wall_ms:.3f}"
        buf.write(f"{row.resolution},{row.macc},{row.param_bytes},{row.activation_bytes},{wall}\n")
    return buf.getvalue()
