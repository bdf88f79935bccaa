import numpy as np
import pytest

from resdistill import cost, nn

DEFAULT = nn.ModelConfig()
PRESERVING = nn.ModelConfig.from_lists([8, 8, 8], strides=1, embed_dim=16)


def test_single_conv_macc():
    cfg = nn.ModelConfig.from_lists([1], kernels=3, strides=1, paddings=1, embed_dim=1)
    conv = cost.layer_costs(cfg, 4)[0]
    assert conv.name == "block0.conv" and conv.macc == 4 * 4 * 1 * 1 * 3 * 3 == 144
    # the 1x1 projection adds one multiply-accumulate
    assert cost.macc_count(cfg, 4) == 145


def test_macc_brute_force_enumeration():
    # count multiply-accumulates by walking every output position and kernel tap
    cfg = nn.ModelConfig.from_lists([3, 2], kernels=[3, 5], strides=[2, 1], paddings=[1, 2], embed_dim=4)
    total, c, r = 0, 1, 9
    for b in cfg.blocks:
        out = (r + 2 * b.padding - b.kernel) // b.stride + 1
        for _o in range(b.out_channels):
            for _y in range(out):
                for _x in range(out):
                    total += c * b.kernel * b.kernel
        c, r = b.out_channels, out
    total += c * cfg.embed_dim
    assert cost.macc_count(cfg, 9) == total


def test_macc_doubling_stride_preserving():
    ratio = cost.macc_count(PRESERVING, 64) / cost.macc_count(PRESERVING, 32)
    assert 3.9 <= ratio <= 4.1


def test_macc_ratios_default_config():
    r48 = cost.macc_count(DEFAULT, 48) / cost.macc_count(DEFAULT, 112)
    r80 = cost.macc_count(DEFAULT, 80) / cost.macc_count(DEFAULT, 112)
    assert abs(r48 - 0.1837) <= 0.1 * 0.1837
    assert abs(r48 - 2.22 / 12.1) <= 0.1 * (2.22 / 12.1)
    assert abs(r80 - 0.510) <= 0.1 * 0.510
    assert abs(r80 - 6.17 / 12.1) <= 0.1 * (6.17 / 12.1)


@pytest.mark.parametrize("r1,r2", [(32, 64), (48, 112), (64, 96), (80, 112)])
def test_area_scaling_law(r1, r2):
    ratio = cost.macc_count(PRESERVING, r1) / cost.macc_count(PRESERVING, r2)
    assert abs(ratio - (r1 / r2) ** 2) <= 0.1 * (r1 / r2) ** 2


def test_macc_is_exact_integer():
    v = cost.macc_count(DEFAULT, 112)
    assert isinstance(v, int) and v == cost.macc_count(DEFAULT, 112)


def test_activation_memory_batch_linear():
    assert cost.activation_memory(DEFAULT, 64, 2) == 2 * cost.activation_memory(DEFAULT, 64, 1)


def test_activation_memory_doubling():
    ratio = cost.activation_memory(DEFAULT, 128) / cost.activation_memory(DEFAULT, 64)
    assert 3.8 <= ratio <= 4.2


def test_activation_memory_monotone():
    vals = [cost.activation_memory(DEFAULT, r) for r in (112, 96, 80, 64, 48)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_activation_memory_hand_value():
    # 64px input: block0 conv holds the 1x64x64 input and 16x32x32 output;
    # its norm then holds two 16x32x32 tensors, which is the peak
    assert cost.activation_memory(DEFAULT, 64) == 2 * 16 * 32 * 32 * 8


def test_param_bytes_constant_and_counted():
    p = nn.build(DEFAULT, 10, seed=0)
    backbone = sum(t.data.size for t in p.theta.values())
    assert cost.param_bytes(DEFAULT) == 8 * backbone
    rows = cost.cost_table(DEFAULT, [48, 112, 64, 96, 80])
    assert [r.resolution for r in rows] == [112, 96, 80, 64, 48]
    assert len({r.param_bytes for r in rows}) == 1
    assert [r.macc for r in rows] == [cost.macc_count(DEFAULT, r.resolution) for r in rows]


def test_inadmissible_resolution():
    cfg = nn.ModelConfig.from_lists([4, 4], strides=2, paddings=0)
    with pytest.raises(ValueError, match="min_resolution"):
        cost.macc_count(cfg, 4)
    with pytest.raises(ValueError, match="min_resolution"):
        cost.activation_memory(cfg, 4)


def test_cost_csv():
    assert cost.cost_csv([]) == "resolution,macc,param_bytes,activation_bytes,wall_ms\n"
    text = cost.cost_csv(cost.cost_table(DEFAULT, [32, 64]))
    lines = text.splitlines()
    assert lines[1].startswith("64,") and lines[2].startswith("32,")
    assert lines[1].endswith(",NA")


def test_wall_clock_median_positive():
    p = nn.build(nn.ModelConfig.from_lists([4, 8], strides=2, embed_dim=8), 2, seed=0)
    small, large = cost.measure_wall_clock(p, 16, 5), cost.measure_wall_clock(p, 64, 5)
    assert small > 0 and large > 0
    with pytest.raises(ValueError):
        cost.measure_wall_clock(p, 16, 2)
