from __future__ import annotations

import numpy as np
import pytest

from layerlab import flow, scenes
from layerlab.numerics import Tensor, backward
from layerlab.policy import Condition, LoRALinear, VelocityNet, pretrain, sample_layers, scene_stream


def _small(seed=0, **kw):
    kw.setdefault("hidden", (32, 32, 32))
    return VelocityNet(height=8, width=8, seed=seed, **kw)


def _inputs(net, n_layers=3, n=2, seed=0):
    rng = np.random.default_rng(seed)
    d = scenes.packed_dim(n_layers, net.height, net.width)
    cond = Condition(rng.uniform(0, 1, (3, net.height, net.width)), n_layers)
    return rng.standard_normal((n, d)), cond


def test_fresh_adapters_match_base():
    net = _small()
    x, cond = _inputs(net)
    on = net.forward(x, 0.4, cond, adapters=True).data
    off = net.forward(x, 0.4, cond, adapters=False).data
    np.testing.assert_array_equal(on, off)


def test_perturbing_a_with_zero_b_changes_nothing():
    net = _small()
    x, cond = _inputs(net)
    before = net.forward(x, 0.3, cond).data
    for layer in net.layers:
        layer.lora_a.data += 1.0
    np.testing.assert_array_equal(net.forward(x, 0.3, cond).data, before)


def test_adapter_contribution_by_hand():
    rng = np.random.default_rng(0)
    layer = LoRALinear(1, 1, rank=1, alpha=3.0, rng=rng, name="tiny")
    layer.weight.data[...] = 0.5
    layer.lora_a.data[...] = 2.0
    layer.lora_b.data[...] = -0.25
    h = Tensor([[1.5]])
    base = layer(h, adapters=False).item()
    full = layer(h, adapters=True).item()
    assert base == 0.75
    assert full - base == pytest.approx(3.0 * (-0.25) * 2.0 * 1.5)


def test_segmented_input_matches_padded_input():
    rng = np.random.default_rng(1)
    layer = LoRALinear(10, 4, rank=2, alpha=2.0, rng=rng, name="seg")
    layer.lora_b.data[...] = rng.standard_normal(layer.lora_b.shape)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 3))
    padded = np.zeros((3, 10))
    padded[:, :4], padded[:, 7:] = a, b
    full = layer(Tensor(padded), True).data
    seg = layer([(Tensor(a), 0), (Tensor(b), 7)], True).data
    np.testing.assert_allclose(seg, full, rtol=1e-13, atol=1e-13)


def test_layer_count_mismatch_raises():
    net = _small()
    x, _ = _inputs(net, n_layers=3)
    _, cond = _inputs(net, n_layers=2)
    with pytest.raises(ValueError):
        net.forward(x, 0.5, cond)


def test_forward_deterministic_and_reference_frozen():
    net = _small()
    x, cond = _inputs(net)
    ref = net.forward(x, 0.6, cond, adapters=False).data
    rng = np.random.default_rng(3)
    for p in net.adapter_params():
        p.data += rng.standard_normal(p.shape) * 0.1
    np.testing.assert_array_equal(net.forward(x, 0.6, cond, adapters=False).data, ref)
    a = net.forward(x, 0.6, cond).data
    assert not np.array_equal(a, ref)
    np.testing.assert_array_equal(net.forward(x, 0.6, cond).data, a)


def test_gradients_reach_only_adapters_when_base_frozen():
    net = _small()
    for layer in net.layers:
        layer.lora_b.data[...] = 0.01
    for p in net.base_params():
        p.requires_grad = False
    x, cond = _inputs(net)
    loss = net.forward(x, 0.5, cond).square().mean()
    grads = backward(loss, net.parameters())
    for p in net.base_params():
        assert not np.any(grads[p])
    assert any(np.any(grads[p]) for p in net.adapter_params())


def test_state_dict_prefixes_and_roundtrip():
    net = _small()
    sd = net.state_dict()
    assert all(k.startswith(("base.", "adapter.")) for k in sd)
    adapters = net.state_dict("adapter.")
    assert adapters and all(k.startswith("adapter.") for k in adapters)
    other = _small(seed=5)
    other.load_state_dict(sd)
    x, cond = _inputs(net)
    np.testing.assert_array_equal(other.forward(x, 0.2, cond).data, net.forward(x, 0.2, cond).data)


def test_snapshot_is_independent():
    net = _small()
    twin = net.snapshot()
    net.layers[0].weight.data += 1.0
    assert not np.array_equal(twin.layers[0].weight.data, net.layers[0].weight.data)


def test_pretrain_zero_steps_keeps_weights():
    net = _small()
    before = net.state_dict()
    assert pretrain(net, scene_stream(0, height=8, width=8), 0) == []
    for k, v in net.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_pretrain_leaves_adapters_alone():
    net = _small()
    before = net.state_dict("adapter.")
    pretrain(net, scene_stream(0, height=8, width=8), 3, batch_size=4)
    for k, v in net.state_dict("adapter.").items():
        np.testing.assert_array_equal(v, before[k])


def test_pretrain_loss_decreases():
    # median over five seeds of the first-vs-last quarter of 100 steps
    drops = []
    for seed in range(5):
        net = VelocityNet(height=8, width=8, hidden=(64, 64, 64), seed=seed)
        losses = pretrain(net, scene_stream(seed, height=8, width=8), 100, batch_size=8,
                          lr=1e-3, seed=seed)
        drops.append(np.mean(losses[:25]) - np.mean(losses[-25:]))
    assert np.median(drops) > 0


def test_overfit_single_scene():
    _, stack, comp = scenes.generate_scene(7, 3, 16, 16)
    cond = Condition(comp, 3)

    def one_scene():
        while True:
            yield cond, stack, None

    net = VelocityNet(height=16, width=16, hidden=(128, 128, 128), seed=0)
    pretrain(net, one_scene(), 400, batch_size=8, lr=1e-3)
    out = sample_layers(net, cond, flow.build_schedule(50), np.random.default_rng(0), n=2)
    assert np.mean(np.abs(out - stack)) < 0.1


def test_velocity_head_option():
    net = _small(head="velocity")
    x, cond = _inputs(net)
    assert net.forward(x, 0.5, cond).shape == x.shape
    with pytest.raises(ValueError):
        _small(head="noise")
