import numpy as np
import pytest

from wccn import autodiff as ad
from wccn.layers import (FC, ArchConfig, Conv, LocationHead, MILHead, ParamRegistry, SegHead, Trunk,
                         conv_out_size, forward_trunk, init_params)


def test_he_init_variance_and_zero_bias():
    reg = ParamRegistry()
    fc = FC(reg, "fc", 200, 50)  # 10k weights
    init_params(fc, 0)
    assert np.all(fc.bias.data == 0)
    assert abs(fc.weight.data.var() / (2 / 200) - 1) < 0.1
    conv = Conv(reg, "conv", 8, 16, 3)
    init_params(conv, 0)
    assert abs(conv.weight.data.var() / (2 / 72) - 1) < 0.15


def test_init_deterministic_per_seed_and_name():
    def weights(seed, name="a"):
        layer = FC(ParamRegistry(), name, 10, 10)
        init_params(layer, seed)
        return layer.weight.data
    assert np.array_equal(weights(3), weights(3))
    assert not np.array_equal(weights(3), weights(4))
    assert not np.array_equal(weights(3), weights(3, "b"))


def test_registry_rejects_duplicates_and_bad_shapes():
    reg = ParamRegistry()
    FC(reg, "x", 2, 3)
    with pytest.raises(KeyError):
        FC(reg, "x", 2, 3)
    state = reg.state_dict()
    state["x/weight"] = np.zeros((2, 2))
    with pytest.raises(ad.ShapeError):
        reg.load_state_dict(state)


def _model(pooling="gap"):
    reg = ParamRegistry()
    cfg = ArchConfig(pooling=pooling)
    trunk = Trunk(reg, cfg)
    heads = LocationHead(reg, cfg, trunk.out_channels), SegHead(reg, cfg, trunk.out_channels), \
        MILHead(reg, cfg, trunk.out_channels)
    for layer in trunk.layers + [l for h in heads for l in h.layers]:
        init_params(layer, 0)
    return reg, trunk, heads


def test_trunk_shape_arithmetic():
    _, trunk, _ = _model()
    x = ad.Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 64, 64)))
    out = forward_trunk(trunk, x)
    assert out.shape == (2, 32, 16, 16)
    assert trunk.output_size(64, 64) == (16, 16)
    for h, w in [(56, 56), (72, 96), (33, 40)]:
        got = forward_trunk(trunk, ad.Tensor(np.zeros((1, 3, h, w)))).shape[2:]
        assert got == trunk.output_size(h, w)
    assert conv_out_size(64, 5, 2, 2) == 32
    with pytest.raises(ValueError):
        forward_trunk(trunk, ad.Tensor(np.zeros((1, 3, 16, 16))))
    with pytest.raises(ad.ShapeError):
        forward_trunk(trunk, ad.Tensor(np.zeros((3, 64, 64))))


def test_gap_and_gmp_share_parameter_shapes():
    reg_a, _, _ = _model("gap")
    reg_b, _, _ = _model("gmp")
    assert [(k, v.shape) for k, v in reg_a.items()] == [(k, v.shape) for k, v in reg_b.items()]
    with pytest.raises(ValueError):
        ArchConfig(pooling="avg")


def test_head_outputs_and_gradients_accumulate_into_trunk():
    reg, trunk, (loc, seg, mil) = _model()
    x = ad.Tensor(np.random.default_rng(1).uniform(0, 1, (1, 3, 64, 64)))
    w = trunk.conv2.weight

    def trunk_grad(*use):
        reg.zero_grad()
        with ad.new_graph():
            f = trunk(x)
            logits, maps = loc(f)
            parts = {"loc": ad.sum_axis(logits), "seg": ad.sum_axis(seg(f)),
                     "mil": ad.sum_axis(mil(f, [(0, 0, 8, 8), (4, 4, 16, 16)]))}
            total = parts[use[0]]
            for u in use[1:]:
                total = ad.add(total, parts[u])
            ad.backward(total)
        return w.grad.copy()

    g_loc, g_seg, g_mil = trunk_grad("loc"), trunk_grad("seg"), trunk_grad("mil")
    assert np.allclose(trunk_grad("loc", "seg", "mil"), g_loc + g_seg + g_mil, atol=1e-12)
    with ad.no_grad():
        f = trunk(x)
        logits, maps = loc(f)
        assert logits.shape == (1, 4) and maps.shape == (1, 4, 16, 16)
        assert np.allclose(logits.data, maps.data.mean(axis=(2, 3)))
        assert seg(f).shape == (1, 5, 16, 16)
        assert mil(f, [(0, 0, 8, 8)]).shape == (1, 4)
