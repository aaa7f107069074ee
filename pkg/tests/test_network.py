import dataclasses

import numpy as np
import pytest

from spikebench.attention import AttnConfig
from spikebench.encoders import EncoderSpec, encode
from spikebench.errors import ConfigError, FormatError, StateError
from spikebench.network import (
    MLP,
    SPS,
    Block,
    ModelConfig,
    PositionalEncoding,
    SpikingTransformer,
    firing_rate_probe,
    load_checkpoint,
    parameter_count,
    reset_neurons,
    save_checkpoint,
    sps_pools,
    sps_widths,
)
from spikebench.neurons import NeuronConfig
from spikebench.tensor import Tensor


def small(**kw):
    base = dict(embed_dim=16, num_heads=2, step=2, patch_size=4, img_size=16, mlp_ratio=2.0)
    base.update(kw)
    return ModelConfig(**base)


def spikes(shape, seed=0, p=0.5):
    return Tensor((np.random.default_rng(seed).uniform(size=shape) < p).astype(np.float32))


def zero_all(module):
    for p in module.parameters():
        p.data[...] = 0.0


def test_sps_token_count_32x32_patch4():
    cfg = small(embed_dim=32, img_size=32, in_channels=3)
    tokens, grid = SPS(cfg, np.random.default_rng(0))(spikes((1, 2, 3, 32, 32)))
    assert tokens.shape == (1, 2, 64, 32) and grid == (8, 8)


def test_sps_1d_784_sequence():
    cfg = small(conv_dims=1, img_size=784, patch_size=16)
    tokens, grid = SPS(cfg, np.random.default_rng(0))(spikes((1, 1, 1, 784)))
    assert tokens.shape[2] == 49 and grid == (49,)


@pytest.mark.parametrize("patch", [1, 2, 4, 8, 16])
@pytest.mark.parametrize("stages", [1, 2, 4])
def test_sps_matching_downsampling_gives_equal_tokens_1d_2d(patch, stages):
    rng = np.random.default_rng(1)
    cfg2 = small(img_size=16, patch_size=patch, sps_conv_layers=stages)
    cfg1 = small(img_size=256, patch_size=patch * patch, sps_conv_layers=stages, conv_dims=1)
    t2, _ = SPS(cfg2, rng)(spikes((1, 1, 1, 16, 16)))
    t1, _ = SPS(cfg1, rng)(spikes((1, 1, 1, 256)))
    assert t1.shape[2] == t2.shape[2] == 256 // patch**2


@pytest.mark.parametrize("patch,stages,expected", [
    (4, 4, [1, 1, 2, 2]), (16, 4, [2, 2, 2, 2]), (4, 1, [4]), (16, 2, [2, 8]), (1, 4, [1, 1, 1, 1]), (2, 2, [1, 2]),
])
def test_pool_schedule(patch, stages, expected):
    assert sps_pools(patch, stages) == expected
    assert np.prod(expected) == patch


def test_channel_ramp():
    assert sps_widths(384, 4) == [48, 96, 192, 384]
    assert sps_widths(384, 2) == [192, 384]
    assert sps_widths(384, 1) == [384]


def test_sps_zero_input_and_indivisible_extent():
    sps = SPS(small(), np.random.default_rng(2))
    tokens, _ = sps(Tensor(np.zeros((2, 3, 1, 16, 16))))
    assert not tokens.data.any()
    reset_neurons(sps)
    with pytest.raises(ConfigError, match="stage 2"):
        sps(spikes((1, 1, 1, 17, 17)))


def test_positional_encoding():
    pe = PositionalEncoding(8, 2, NeuronConfig(), np.random.default_rng(3))
    assert not pe(Tensor(np.zeros((1, 2, 16, 8))), (4, 4)).data.any()
    reset_neurons(pe)
    a, b = spikes((2, 4, 16, 8), 4), spikes((2, 4, 16, 8), 5)
    ya = pe(a, (4, 4)).data
    reset_neurons(pe)
    yb = pe(b, (4, 4)).data
    assert ya.max() <= 2 and set(np.unique(ya)) <= {0.0, 1.0, 2.0}
    assert not np.array_equal(ya - a.data, yb - b.data)


def test_block_with_zero_weights_is_identity():
    block = Block(small(), np.random.default_rng(4))
    zero_all(block)
    x = spikes((2, 3, 16, 16), 6)
    np.testing.assert_array_equal(block(x, (4, 4)).data, x.data)


@pytest.mark.parametrize("variant", ["SSA", "SDSA", "SEMM"])
def test_block_preserves_shape(variant):
    cfg = small(attn=AttnConfig(variant=variant, num_experts=2))
    x = spikes((2, 3, 16, 16), 7)
    out = Block(cfg, np.random.default_rng(5))(x, (4, 4))
    assert out.shape == x.shape
    assert out.data.max() <= 4  # two residual sums of binary maps


def test_mlp_output_binary():
    out = MLP(8, 16, NeuronConfig(), np.random.default_rng(0))(spikes((2, 2, 5, 8)))
    assert set(np.unique(out.data)) <= {0.0, 1.0}


def test_model_logits_deterministic_and_shaped():
    cfg = small()
    x = np.random.default_rng(8).uniform(size=(3, 1, 16, 16))
    a = SpikingTransformer(cfg, seed=1).classify(x).data
    b = SpikingTransformer(cfg, seed=1).classify(x).data
    assert a.shape == (3, 10) and a.tobytes() == b.tobytes()


def test_single_step_model_equals_its_per_step_logits():
    model = SpikingTransformer(small(step=1), seed=2)
    x = spikes((1, 2, 1, 16, 16), 9)
    per_step = model.head(model.features(x))
    np.testing.assert_array_equal(model(x).data, per_step.data[0])


def test_neuron_state_resets_between_batches():
    model = SpikingTransformer(small(), seed=3)
    model.eval()
    x = spikes((2, 2, 1, 16, 16), 10)
    first = model(x).data
    model(spikes((2, 5, 1, 16, 16), 11))
    np.testing.assert_array_equal(model(x).data, first)


def test_model_rejects_wrong_input_layout():
    with pytest.raises(ConfigError):
        SpikingTransformer(small(), seed=0)(spikes((2, 2, 3, 16, 16)))


@pytest.mark.parametrize("cfg", [
    small(),
    small(sps_conv_layers=2, depths=2, neuron=NeuronConfig(kind="PLIF")),
    small(sps_conv_layers=1, attn=AttnConfig(variant="SEMM", num_experts=3), neuron=NeuronConfig(kind="GLIF")),
    small(attn=AttnConfig(variant="SDSA", qkv_generator="sepconv_bn"), conv_dims=1, img_size=64),
    small(attn=AttnConfig(qkv_generator="conv_bn", out_proj=False), mlp_ratio=3.0, num_classes=7),
    small(embed_dim=24, num_heads=3, neuron=NeuronConfig(kind="KLIF"), in_channels=3),
])
def test_parameter_count_closed_form(cfg):
    assert SpikingTransformer(cfg).num_parameters() == parameter_count(cfg)


def test_fewer_sps_layers_fewer_parameters():
    counts = [SpikingTransformer(small(sps_conv_layers=n)).sps.num_parameters() for n in (4, 2, 1)]
    assert counts[0] > counts[1] > counts[2]


@pytest.mark.parametrize("layers", [1, 2, 4])
def test_gradient_reaches_first_sps_conv(layers):
    model = SpikingTransformer(small(sps_conv_layers=layers, depths=2, neuron=NeuronConfig(v_threshold=0.5)), seed=4)
    x = np.random.default_rng(12).uniform(size=(4, 1, 16, 16))
    w = np.random.default_rng(13).normal(size=(4, 10))
    (model.classify(x) * w).sum().backward()
    assert np.linalg.norm(model.sps.stages[0].conv.weight.grad) > 0


def test_firing_rates_zero_input_and_forced_firing():
    model = SpikingTransformer(small(), seed=5)
    rates = firing_rate_probe(model, Tensor(np.zeros((2, 2, 1, 16, 16))))
    assert rates and all(r == 0.0 for r in rates.values())
    hot = SpikingTransformer(small(neuron=NeuronConfig(v_threshold=1e-30, v_reset=-1.0)), seed=5)
    for _, bn in ((n, m) for n, m in hot.named_modules() if type(m).__name__ == "BatchNorm"):
        bn.bias.data[...] = 5.0
    zero_all(hot.head)
    rates = firing_rate_probe(hot, spikes((2, 2, 1, 16, 16)))
    assert all(r == 1.0 for r in rates.values())


def test_firing_rates_strictly_inside_unit_interval():
    model = SpikingTransformer(small(neuron=NeuronConfig(v_threshold=0.5)), seed=6)
    x = np.random.default_rng(14).uniform(size=(8, 1, 16, 16))
    rates = firing_rate_probe(model, encode(x, model.cfg.encoder))
    assert all(0.0 < r < 1.0 for r in rates.values())


def test_probe_without_forward_is_state_error():
    model = SpikingTransformer(small(), seed=7)
    model.start_probe()
    with pytest.raises(StateError):
        model.firing_rates()


def test_checkpoint_roundtrip(tmp_path):
    cfg = small(neuron=NeuronConfig(kind="PLIF"), attn=AttnConfig(randomized_qk=True),
                encoder=EncoderSpec(kind="rate", seed=3))
    model = SpikingTransformer(cfg, seed=8)
    model(spikes((2, 4, 1, 16, 16), 15))  # moves BN running stats
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, seed=8)
    assert path.read_bytes()[:8] == b"STEPCKPT"
    loaded = load_checkpoint(path)
    assert loaded.cfg == model.cfg
    for (n1, a), (n2, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    assert not loaded.blocks[0].attn.q_gen.linear.weight.requires_grad
    model.eval(), loaded.eval()
    x = spikes((2, 2, 1, 16, 16), 16)
    np.testing.assert_array_equal(model(x).data, loaded(x).data)


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, SpikingTransformer(small()))
    raw = path.read_bytes()
    for bad in (b"XX" + raw[2:], raw[:-10], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            load_checkpoint(path)


@pytest.mark.parametrize("kwargs", [
    {"sps_conv_layers": 3}, {"conv_dims": 3}, {"patch_size": 6}, {"embed_dim": 12}, {"mlp_ratio": 0.5},
    {"depths": 0}, {"num_heads": 3},
])
def test_model_config_validation(kwargs):
    with pytest.raises(ConfigError):
        small(**kwargs)


def test_model_config_syncs_sub_configs():
    cfg = small(embed_dim=32, num_heads=4, step=3)
    assert cfg.attn.dim == 32 and cfg.attn.heads == 4 and cfg.encoder.steps == 3
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert dataclasses.asdict(cfg)["attn"]["dim"] == 32
