"""Static-intensity to spike-train encoders and the STEPENC dump format.

Every encoder maps ``x`` with values in [0, 1] to a float32 array of shape
``[T, *x.shape]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

ENCODER_KINDS = ("direct", "phase", "rate", "ttfs")
ENC_MAGIC = b"STEPENC"
ENC_VERSION = 1


@dataclass
class EncoderSpec:
    kind: str = "direct"
    steps: int = 4
    seed: int = 0
    ttfs_binary: bool = False

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder {self.kind!r}; expected one of {ENCODER_KINDS}")
        if self.steps < 1:
            raise ConfigError(f"encoder steps must be >= 1, got {self.steps}")


def _check_range(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.size and (not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0):
        raise ConfigError(f"encoder input must lie in [0, 1], got range [{x.min()}, {x.max()}]")
    return x


def _check_steps(T: int) -> None:
    if T < 1:
        raise ConfigError(f"steps must be >= 1, got {T}")


def encode_direct(x, T: int) -> np.ndarray:
    """Repeat the analog intensity at every step."""
    x = _check_range(x)
    _check_steps(T)
    return np.broadcast_to(x, (T,) + x.shape).copy()


def phase_levels(x) -> np.ndarray:
    """8-bit quantization ``min(floor(256 x), 255)``; x = 1 maps to 0b11111111."""
    return np.minimum(np.floor(256.0 * np.asarray(x, dtype=np.float64)), 255).astype(np.uint8)


def encode_phase(x, T: int) -> np.ndarray:
    """Step t (1-based) emits ``2**-(b+1)`` if bit ``7-b`` is set, with ``b = (t-1) mod 8``.

    For T > 8 the bit-plane cycle simply repeats.
    """
    x = _check_range(x)
    _check_steps(T)
    levels = phase_levels(x)
    out = np.zeros((T,) + x.shape, dtype=np.float32)
    for t in range(T):
        b = t % 8
        bit = (levels >> (7 - b)) & 1
        out[t] = bit * np.float32(2.0 ** -(b + 1))
    return out


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, t: int, index: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) draws that depend only on ``(seed, t, index)``."""
    with np.errstate(over="ignore"):
        key = _splitmix64(np.asarray([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        key = _splitmix64(key ^ np.uint64(t))
        h = _splitmix64(key ^ _splitmix64(np.asarray(index, dtype=np.uint64)))
    return (h >> np.uint64(40)).astype(np.float64) * (1.0 / (1 << 24))


def encode_rate(x, T: int, seed: int = 0, sample_ids=None) -> np.ndarray:
    """Bernoulli(x) spikes per step and element from a counter-based generator.

    The draw for element ``j`` of sample ``i`` at step ``t`` is keyed on
    ``(seed, t, i * elements_per_sample + j)``, where ``i`` defaults to the
    position in the batch. Passing dataset ``sample_ids`` makes the train
    independent of how samples are batched or ordered.
    """
    x = _check_range(x)
    _check_steps(T)
    if sample_ids is None:
        index = np.arange(x.size, dtype=np.uint64)
    else:
        ids = np.asarray(sample_ids, dtype=np.uint64)
        if x.ndim == 0 or ids.shape != (x.shape[0],):
            raise ConfigError(f"sample_ids shape {ids.shape} does not match batch axis of {x.shape}")
        per = np.uint64(x.size // x.shape[0])
        index = (ids[:, None] * per + np.arange(int(per), dtype=np.uint64)[None, :]).reshape(-1)
    flat = x.reshape(-1)
    out = np.empty((T, x.size), dtype=np.float32)
    for t in range(T):
        out[t] = counter_uniform(seed, t, index) < flat
    return out.reshape((T,) + x.shape)


def ttfs_time(x, T: int) -> np.ndarray:
    """1-based firing step ``min(1 + floor((1 - x) T), T)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.minimum(1 + np.floor((1.0 - x) * T), T).astype(np.int64)


def encode_ttfs(x, T: int, binary: bool = False) -> np.ndarray:
    """One spike per element at ``t*``, amplitude ``1 / t*`` (or 1 when ``binary``)."""
    x = _check_range(x)
    _check_steps(T)
    t_star = ttfs_time(x, T)
    amp = np.ones(x.shape, dtype=np.float32) if binary else (1.0 / t_star).astype(np.float32)
    steps = np.arange(1, T + 1).reshape((T,) + (1,) * x.ndim)
    return np.where(steps == t_star, amp, np.float32(0.0)).astype(np.float32)


def encode(x, spec: EncoderSpec, sample_ids=None) -> np.ndarray:
    if spec.kind == "direct":
        return encode_direct(x, spec.steps)
    if spec.kind == "phase":
        return encode_phase(x, spec.steps)
    if spec.kind == "rate":
        return encode_rate(x, spec.steps, spec.seed, sample_ids)
    return encode_ttfs(x, spec.steps, spec.ttfs_binary)


# -- dump format -----------------------------------------------------------------------
# magic "STEPENC" | version u32 | T u32 | rank u32 | extents u32 * rank | float32 [t, element]
# all integers and floats little-endian


def write_spike_train(path, train: np.ndarray) -> None:
    train = np.asarray(train, dtype="<f4")
    if train.ndim < 1:
        raise FormatError("spike train needs a leading time axis")
    shape = train.shape[1:]
    header = ENC_MAGIC + struct.pack(f"<III{len(shape)}I", ENC_VERSION, train.shape[0], len(shape), *shape)
    Path(path).write_bytes(header + train.tobytes(order="C"))


def read_spike_train(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    n = len(ENC_MAGIC)
    if raw[:n] != ENC_MAGIC:
        raise FormatError(f"bad magic {raw[:n]!r}, expected {ENC_MAGIC!r}")
    if len(raw) < n + 12:
        raise FormatError("truncated STEPENC header")
    version, steps, rank = struct.unpack_from("<III", raw, n)
    if version != ENC_VERSION:
        raise FormatError(f"unsupported STEPENC version {version}")
    off = n + 12
    if len(raw) < off + 4 * rank:
        raise FormatError("truncated STEPENC shape")
    shape = struct.unpack_from(f"<{rank}I", raw, off)
    off += 4 * rank
    count = steps * int(np.prod(shape, dtype=np.int64))
    if len(raw) - off != 4 * count:
        raise FormatError(f"STEPENC payload holds {len(raw) - off} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape((steps,) + tuple(shape)).astype(np.float32)


def raster_text(train: np.ndarray, max_elements: int = 64) -> str:
    """Plain-text raster: one line per element, one column per step."""
    train = np.asarray(train)
    flat = train.reshape(train.shape[0], -1)
    lines = []
    for j in range(min(flat.shape[1], max_elements)):
        cells = ["." if v == 0 else ("|" if v == 1 else f"{v:.3g}") for v in flat[:, j]]
        lines.append(f"{j:6d} " + " ".join(cells))
    if flat.shape[1] > max_elements:
        lines.append(f"... {flat.shape[1] - max_elements} more elements")
    return "\n".join(lines) + "\n"
