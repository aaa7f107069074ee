import csv
import io

import pytest

from spikebench.ablation import ABLATION_MODES, ablate, variants
from spikebench.data import synthetic_blobs
from spikebench.errors import ConfigError, NumericError
from spikebench.network import ModelConfig
from spikebench.train import TrainConfig

BASE = ModelConfig(step=2, patch_size=4, img_size=16, embed_dim=32, num_heads=4, num_classes=2)
TC = TrainConfig(lr=1e-2, epochs=2, batch_size=16, seed=0)


@pytest.fixture(scope="module")
def toy():
    full = synthetic_blobs(30, 2, size=16, seed=2)
    return full.subset(slice(0, 40)), full.subset(slice(40, 60))


@pytest.mark.parametrize("mode, labels", [
    ("random_attn", ["baseline", "random_qk"]),
    ("sps_depth", ["4", "2", "1"]),
    ("encoder_sweep", ["direct", "phase", "rate", "ttfs"]),
    ("qkv_generator", ["linear", "conv_bn", "sepconv_bn"]),
])
def test_variant_enumeration(mode, labels):
    assert [label for label, _ in variants(mode, BASE)] == labels


def test_unknown_mode():
    with pytest.raises(ConfigError):
        variants("dropout", BASE)


def test_variants_change_only_their_axis():
    (_, a), (_, b) = variants("random_attn", BASE)
    assert not a.attn.randomized_qk and b.attn.randomized_qk
    assert a.embed_dim == b.embed_dim and a.encoder == b.encoder
    for _, cfg in variants("encoder_sweep", BASE):
        assert cfg.encoder.steps == BASE.step and cfg.sps_conv_layers == BASE.sps_conv_layers


@pytest.mark.parametrize("mode", ABLATION_MODES)
def test_sweep_completes_with_deltas(mode, toy):
    table = ablate(mode, BASE, *toy, TC, seed=0)
    assert [r.variant for r in table.rows] == [label for label, _ in variants(mode, BASE)]
    assert all(r.status == "ok" for r in table.rows)
    assert table.rows[0].delta == 0.0
    for r in table.rows:
        assert 0.0 <= r.accuracy <= 1.0
        assert r.delta == r.accuracy - table.rows[0].accuracy
    rows = list(csv.DictReader(io.StringIO(table.to_csv())))
    assert len(rows) == len(table.rows) and rows[0]["mode"] == mode
    assert len(table.to_text().splitlines()) == len(table.rows) + 2


def test_random_attn_gap_and_frozen_norm(toy):
    table = ablate("random_attn", BASE, *toy, TC, seed=0)
    assert table.row("random_qk").qk_update_norm == 0.0
    assert table.row("baseline").qk_update_norm > 0.0
    assert table.row("random_qk").delta is not None


def test_failed_variant_is_recorded_and_run_continues(toy):
    # 18 is not divisible by the patch size, so every depth stops at some SPS stage
    base = ModelConfig(step=2, patch_size=4, img_size=18, embed_dim=32, num_heads=4, num_classes=2)
    train_data = synthetic_blobs(10, 2, size=18, seed=0)
    table = ablate("sps_depth", base, train_data, train_data, TC, seed=0)
    assert len(table.rows) == 3
    assert all(r.status.startswith("failed: ConfigError: SPS stage") for r in table.rows)
    assert all(r.accuracy is None and r.delta is None for r in table.rows)
    assert "failed" in table.to_text() and "failed" in table.to_csv()


def test_ablation_is_deterministic(toy):
    a = ablate("qkv_generator", BASE, *toy, TC, seed=4).to_csv()
    b = ablate("qkv_generator", BASE, *toy, TC, seed=4).to_csv()
    assert a == b


def test_one_failing_variant_keeps_the_others(toy, monkeypatch):
    import spikebench.ablation as ab

    real_train = ab.train

    def flaky(model, data, tc):
        if model.cfg.sps_conv_layers == 2:
            raise NumericError("non-finite loss at epoch 0 batch 0")
        return real_train(model, data, tc)

    monkeypatch.setattr(ab, "train", flaky)
    table = ablate("sps_depth", BASE, *toy, TC, seed=0)
    assert [r.status.split(":")[0] for r in table.rows] == ["ok", "failed", "ok"]
    assert table.row("1").delta == table.row("1").accuracy - table.row("4").accuracy
