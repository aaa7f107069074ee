import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spikebench.encoders import (
    EncoderSpec,
    encode,
    encode_direct,
    encode_phase,
    encode_rate,
    encode_ttfs,
    raster_text,
    read_spike_train,
    ttfs_time,
    write_spike_train,
)
from spikebench.errors import ConfigError, FormatError

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)
PHASE_AMPS = {0.0} | {2.0 ** -k for k in range(1, 9)}


def test_direct_repeats_input():
    np.testing.assert_array_equal(encode_direct(np.array(0.5), 4), [0.5] * 4)
    assert not encode_direct(np.zeros(3), 4).any()


@settings(max_examples=50, deadline=None)
@given(st.lists(unit, min_size=1, max_size=16), st.integers(1, 8))
def test_direct_mean_recovers_input(values, T):
    x = np.array(values, dtype=np.float32)
    train = encode_direct(x, T)
    assert np.all(train == x)
    assert train.mean(axis=0, dtype=np.float64).astype(np.float32).tobytes() == x.tobytes()


@pytest.mark.parametrize("x,expected", [(0.5, [0.5, 0, 0, 0]), (0.75, [0.5, 0.25, 0, 0]), (0.0, [0, 0, 0, 0])])
def test_phase_examples(x, expected):
    np.testing.assert_array_equal(encode_phase(np.array(x), 4), expected)


def bit_planes(x):
    """Reference: decompose min(floor(256 x), 255) one bit at a time, MSB first."""
    v = min(int(np.floor(256 * float(x))), 255)
    return [0.5 ** (b + 1) if v & (1 << (7 - b)) else 0.0 for b in range(8)]


@settings(max_examples=200, deadline=None)
@given(unit, st.integers(1, 20))
def test_phase_matches_bit_plane_reference(x, T):
    train = encode_phase(np.array(x, dtype=np.float32), T)
    ref = bit_planes(np.float32(x))
    np.testing.assert_array_equal(train, [ref[t % 8] for t in range(T)])
    assert set(train.tolist()) <= PHASE_AMPS


def test_phase_full_intensity_sets_every_bit():
    np.testing.assert_array_equal(encode_phase(np.array(1.0), 8), [2.0 ** -k for k in range(1, 9)])


def test_rate_edge_cases():
    assert not encode_rate(np.zeros(100), 4, seed=3).any()
    assert encode_rate(np.ones(100), 4, seed=3).all()


def test_rate_mean_within_three_sigma():
    train = encode_rate(np.full(10_000, 0.3), 4, seed=0)
    assert set(np.unique(train)) <= {0.0, 1.0}
    assert abs(train.mean() - 0.3) <= 3 * np.sqrt(0.3 * 0.7 / 40_000)


def test_rate_is_deterministic_and_seed_dependent():
    x = np.random.default_rng(0).uniform(size=(8, 3, 4))
    a, b = encode_rate(x, 5, seed=9), encode_rate(x, 5, seed=9)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != encode_rate(x, 5, seed=10).tobytes()


def test_rate_independent_of_batch_order():
    x = np.random.default_rng(1).uniform(size=(10, 6))
    ids = np.arange(10)
    full = encode_rate(x, 4, seed=2, sample_ids=ids)
    perm = np.random.default_rng(2).permutation(10)
    shuffled = encode_rate(x[perm], 4, seed=2, sample_ids=ids[perm])
    np.testing.assert_array_equal(shuffled, full[:, perm])
    chunk = encode_rate(x[7:], 4, seed=2, sample_ids=ids[7:])
    np.testing.assert_array_equal(chunk, full[:, 7:])


@pytest.mark.parametrize("x,expected", [(1.0, [1, 0, 0, 0]), (0.5, [0, 0, 1 / 3, 0]), (0.0, [0, 0, 0, 0.25])])
def test_ttfs_examples(x, expected):
    np.testing.assert_allclose(encode_ttfs(np.array(x), 4), expected, rtol=1e-7)


def test_ttfs_binary_flag():
    np.testing.assert_array_equal(encode_ttfs(np.array(0.5), 4, binary=True), [0, 0, 1, 0])


def test_ttfs_exactly_one_spike():
    x = np.random.default_rng(3).uniform(size=10_000)
    for T in (1, 4, 7):
        assert np.all((encode_ttfs(x, T) != 0).sum(axis=0) == 1)


@settings(max_examples=200, deadline=None)
@given(unit, unit, st.integers(1, 16))
def test_ttfs_monotone(x1, x2, T):
    if x1 > x2:
        assert ttfs_time(x1, T) <= ttfs_time(x2, T)


@pytest.mark.parametrize("fn", [encode_direct, encode_phase, encode_rate, encode_ttfs])
@pytest.mark.parametrize("bad", [-0.01, 1.5, np.nan])
def test_out_of_range_input_rejected(fn, bad):
    with pytest.raises(ConfigError):
        fn(np.array([0.2, bad]), 4)


@pytest.mark.parametrize("kwargs", [{"kind": "poisson"}, {"steps": 0}])
def test_encoder_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        EncoderSpec(**kwargs)


@pytest.mark.parametrize("kind", ["direct", "phase", "rate", "ttfs"])
def test_encode_dispatch_shape(kind):
    out = encode(np.full((2, 1, 4, 4), 0.6), EncoderSpec(kind=kind, steps=3))
    assert out.shape == (3, 2, 1, 4, 4) and out.dtype == np.float32


def test_dump_roundtrip_and_layout(tmp_path):
    train = encode_phase(np.random.default_rng(4).uniform(size=(2, 3)), 4)
    path = tmp_path / "t.bin"
    write_spike_train(path, train)
    raw = path.read_bytes()
    assert raw[:7] == b"STEPENC"
    assert np.frombuffer(raw[7:27], "<u4").tolist() == [1, 4, 2, 2, 3]
    assert len(raw) == 27 + 4 * train.size
    np.testing.assert_array_equal(read_spike_train(path), train)


def test_dump_rejects_corrupt_files(tmp_path):
    path = tmp_path / "t.bin"
    write_spike_train(path, np.zeros((2, 3), dtype=np.float32))
    raw = path.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"XTEPENC" + raw[7:])
    (tmp_path / "short.bin").write_bytes(raw[:-4])
    for name in ("magic.bin", "short.bin"):
        with pytest.raises(FormatError):
            read_spike_train(tmp_path / name)


def test_raster_text():
    text = raster_text(encode_ttfs(np.array([1.0, 0.5]), 4, binary=True))
    assert text.splitlines() == ["     0 | . . .", "     1 . . | ."]
