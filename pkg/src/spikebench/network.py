"""Spiking transformer assembly: SPS frontend, positional encoding, blocks and head.

The model consumes encoded spike trains ``[T, B, C, *spatial]`` and returns
logits ``[B, num_classes]`` as the mean of the per-step logits.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .attention import AttnConfig, SpikingAttention, map_to_tokens, tokens_to_map
from .encoders import EncoderSpec, encode
from .errors import ConfigError, FormatError, NumericError, StateError
from .nn import ActivityProbe, BatchNorm, Conv, Linear, Module
from .neurons import NeuronConfig, SpikingNeuron, init_params
from .tensor import Tensor, no_grad

SPS_DEPTHS = (1, 2, 4)


@dataclass
class ModelConfig:
    step: int = 4
    patch_size: int = 4
    in_channels: int = 1
    img_size: int = 28
    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: float = 4.0
    depths: int = 1
    sps_conv_layers: int = 4
    conv_dims: int = 2
    num_classes: int = 10
    attn: AttnConfig = field(default_factory=AttnConfig)
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)

    def __post_init__(self):
        if isinstance(self.attn, dict):
            self.attn = AttnConfig(**self.attn)
        if isinstance(self.neuron, dict):
            self.neuron = NeuronConfig(**self.neuron)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderSpec(**self.encoder)
        for name in ("step", "patch_size", "in_channels", "img_size", "embed_dim", "num_heads", "depths",
                     "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.sps_conv_layers not in SPS_DEPTHS:
            raise ConfigError(f"sps_conv_layers must be one of {SPS_DEPTHS}, got {self.sps_conv_layers}")
        if self.conv_dims not in (1, 2):
            raise ConfigError(f"conv_dims must be 1 or 2, got {self.conv_dims}")
        if self.patch_size & (self.patch_size - 1):
            raise ConfigError(f"patch_size must be a power of two, got {self.patch_size}")
        if self.embed_dim % 8:
            raise ConfigError(f"embed_dim must be divisible by 8 for the SPS channel ramp, got {self.embed_dim}")
        # attention and encoder follow the model-level width, heads and steps
        self.attn = dataclasses.replace(self.attn, dim=self.embed_dim, heads=self.num_heads)
        self.encoder = dataclasses.replace(self.encoder, steps=self.step)

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return (self.img_size,) * self.conv_dims

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def sps_widths(embed_dim: int, stages: int) -> list[int]:
    """Geometric ramp ending at ``embed_dim``: D/8, D/4, D/2, D for four stages."""
    return [embed_dim // 2 ** (stages - 1 - i) for i in range(stages)]


def sps_pools(patch_size: int, stages: int) -> list[int]:
    """Per-stage pooling factors whose product is ``patch_size``.

    Pool-2 goes into the last ``log2(patch_size)`` stages. When there are more
    halvings than stages, every stage pools 2 and the last one absorbs the rest.
    """
    n = int(math.log2(patch_size))
    if n <= stages:
        return [1] * (stages - n) + [2] * n
    return [2] * (stages - 1) + [2 ** (n - stages + 1)]


def _fold(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0] * x.shape[1], *x.shape[2:])


def _unfold(x: Tensor, T: int) -> Tensor:
    return x.reshape(T, x.shape[0] // T, *x.shape[1:])


class SPSStage(Module):
    """Conv -> BN -> MaxPool -> SN on ``[T, B, C, *spatial]``."""

    def __init__(self, c_in: int, c_out: int, pool: int, dims: int, neuron: NeuronConfig,
                 rng: np.random.Generator, index: int):
        super().__init__()
        self.conv = Conv(c_in, c_out, 3, rng, padding=1, dims=dims)
        self.bn = BatchNorm(c_out, axis=1)
        self.pool, self.dims, self.index = pool, dims, index
        self.sn = SpikingNeuron(neuron)

    def forward(self, x: Tensor) -> Tensor:
        T = x.shape[0]
        y = self.bn(self.conv(_fold(x)))
        if self.pool > 1:
            bad = [s for s in y.shape[2:] if s % self.pool]
            if bad:
                raise ConfigError(f"SPS stage {self.index}: spatial extent {y.shape[2:]} "
                                  f"not divisible by pool factor {self.pool}")
            y = F.max_pool(y, self.pool, self.dims)
        return self.sn(_unfold(y, T))


class SPS(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        n = cfg.sps_conv_layers
        widths = sps_widths(cfg.embed_dim, n)
        pools = sps_pools(cfg.patch_size, n)
        c_in = [cfg.in_channels] + widths[:-1]
        self.stages = [SPSStage(ci, co, p, cfg.conv_dims, cfg.neuron, rng, i)
                       for i, (ci, co, p) in enumerate(zip(c_in, widths, pools))]

    def forward(self, x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
        """Returns tokens ``[T, B, N, D]`` and their grid."""
        for stage in self.stages:
            x = stage(x)
        T, B, D = x.shape[:3]
        grid = x.shape[3:]
        tokens = x.reshape(T, B, D, -1).transpose(0, 1, 3, 2)
        return tokens, grid


class PositionalEncoding(Module):
    """``x + SN(BN(Conv3x3(x)))`` over the token grid."""

    def __init__(self, dim: int, dims: int, neuron: NeuronConfig, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv(dim, dim, 3, rng, padding=1, dims=dims)
        self.bn = BatchNorm(dim, axis=1)
        self.sn = SpikingNeuron(neuron)

    def forward(self, x: Tensor, grid) -> Tensor:
        T = x.shape[0]
        y = self.bn(self.conv(tokens_to_map(x, grid)))
        pe = self.sn(map_to_tokens(y, T))
        return x + pe


class MLP(Module):
    def __init__(self, dim: int, hidden: int, neuron: NeuronConfig, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.bn1 = BatchNorm(hidden, axis=-1)
        self.sn1 = SpikingNeuron(neuron)
        self.fc2 = Linear(hidden, dim, rng)
        self.bn2 = BatchNorm(dim, axis=-1)
        self.sn2 = SpikingNeuron(neuron)

    def forward(self, x: Tensor) -> Tensor:
        return self.sn2(self.bn2(self.fc2(self.sn1(self.bn1(self.fc1(x))))))


class Block(Module):
    """``a = Attn(x) + x``; ``out = MLP(a) + a``. Residual sums are not re-spiked."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.attn = SpikingAttention(cfg.attn, cfg.neuron, rng, cfg.conv_dims)
        self.mlp = MLP(cfg.embed_dim, cfg.hidden_dim, cfg.neuron, rng)

    def forward(self, x: Tensor, grid) -> Tensor:
        a = self.attn(x, grid) + x
        return self.mlp(a) + a


def reset_neurons(module: Module) -> None:
    """Return every neuron below ``module`` to rest, ready for a batch of any shape."""
    for m in module.modules():
        if isinstance(m, SpikingNeuron):
            m.reset()
            m.state.fresh = True


class SpikingTransformer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.sps = SPS(cfg, rng)
        self.pe = PositionalEncoding(cfg.embed_dim, cfg.conv_dims, cfg.neuron, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.depths)]
        self.head = Linear(cfg.embed_dim, cfg.num_classes, rng)

    def spiking_layers(self) -> list[tuple[str, SpikingNeuron]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, SpikingNeuron)]

    def compute_layers(self) -> list[tuple[str, Module]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, ActivityProbe)]

    def reset_state(self) -> None:
        reset_neurons(self)

    def features(self, spikes: Tensor) -> Tensor:
        """Token-averaged features per step, ``[T, B, D]``."""
        self.reset_state()
        x, grid = self.sps(spikes)
        x = self.pe(x, grid)
        for block in self.blocks:
            x = block(x, grid)
        return x.mean(axis=2)

    def forward(self, spikes) -> Tensor:
        spikes = spikes if isinstance(spikes, Tensor) else Tensor(spikes)
        expected = 3 + self.cfg.conv_dims
        if spikes.ndim != expected or spikes.shape[2] != self.cfg.in_channels:
            raise ConfigError(f"model expects [T, B, {self.cfg.in_channels}, *spatial] "
                              f"with {self.cfg.conv_dims} spatial dims, got {spikes.shape}")
        per_step = self.head(self.features(spikes))
        for t in range(per_step.shape[0]):
            if not np.all(np.isfinite(per_step.data[t])):
                raise NumericError(f"non-finite logits at time step {t}")
        return per_step.mean(axis=0)

    def classify(self, images: np.ndarray, sample_ids=None) -> Tensor:
        """Encode raw intensities ``[B, C, *spatial]`` with the configured encoder, then forward."""
        return self(encode(images, self.cfg.encoder, sample_ids))

    def start_probe(self) -> None:
        for _, m in self.spiking_layers() + self.compute_layers():
            m.start_probe()

    def stop_probe(self) -> None:
        for _, m in self.spiking_layers() + self.compute_layers():
            m.stop_probe()

    def firing_rates(self) -> dict[str, float]:
        rates = {}
        for name, m in self.spiking_layers():
            r = m.firing_rate()
            if r is None:
                raise StateError(f"no spikes recorded for {name}; run a forward pass with probes enabled")
            rates[name] = r
        return rates

    def input_activity(self) -> dict[str, float]:
        out = {}
        for name, m in self.compute_layers():
            a = m.input_activity()
            if a is None:
                raise StateError(f"no inputs recorded for {name}; run a forward pass with probes enabled")
            out[name] = a
        return out


def firing_rate_probe(model: SpikingTransformer, spikes) -> dict[str, float]:
    """Per spiking layer ``R_s`` = spikes emitted / neuron-step opportunities over one forward pass."""
    model.start_probe()
    try:
        with no_grad():
            model(spikes)
    finally:
        model.stop_probe()
    return model.firing_rates()


# -- closed-form parameter count ---------------------------------------------------------


def _neuron_param_count(neuron: NeuronConfig) -> int:
    return len(init_params(neuron))


def _generator_params(kind: str, D: int, k: int) -> int:
    bn = 2 * D
    if kind == "linear":
        return D * D + D + bn
    if kind == "conv_bn":
        return D * D + bn
    return D * k + D * D + bn


def parameter_count(cfg: ModelConfig) -> int:
    """Number of parameter scalars a freshly built model holds, computed from the config alone."""
    D, H, k = cfg.embed_dim, cfg.hidden_dim, 3 ** cfg.conv_dims
    pn = _neuron_param_count(cfg.neuron)
    widths = sps_widths(D, cfg.sps_conv_layers)
    c_in = [cfg.in_channels] + widths[:-1]
    total = sum(ci * co * k + 2 * co + pn for ci, co in zip(c_in, widths))
    total += D * D * k + 2 * D + pn
    a = cfg.attn
    if a.variant == "SEMM":
        m = a.num_experts
        attn = (m + 2) * (_generator_params("linear", D, k) + pn) + m * pn
        attn += D * m + m + 2 * m + pn
    else:
        attn = 3 * (_generator_params(a.qkv_generator, D, k) + pn) + pn
    if a.out_proj:
        attn += D * D + D + 2 * D + pn
    mlp = D * H + H + 2 * H + pn + H * D + D + 2 * D + pn
    total += cfg.depths * (attn + mlp)
    total += D * cfg.num_classes + cfg.num_classes
    return total


# -- checkpoints -------------------------------------------------------------------------
# magic "STEPCKPT" | version u32 | config length u32 | config JSON (utf-8)
# | count u32 | per entry: name length u32, name, rank u32, extents u32 * rank, float32 data
# all little-endian

CKPT_MAGIC = b"STEPCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, model: SpikingTransformer, seed: int = 0) -> None:
    cfg = json.dumps({"model": model.cfg.to_dict(), "seed": seed}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f4")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode()
        parts.append(struct.pack(f"<I{len(raw)}sI{arr.ndim}I", len(raw), raw, arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> SpikingTransformer:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a STEPCKPT file")
    try:
        version, clen = struct.unpack_from("<II", raw, 8)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off = 16
        meta = json.loads(raw[off:off + clen])
        off += clen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if off + 4 * n > len(raw):
                raise FormatError(f"{path}: truncated tensor {name}")
            state[name] = np.frombuffer(raw, "<f4", n, off).reshape(shape)
            off += 4 * n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    model = SpikingTransformer(ModelConfig.from_dict(meta["model"]), seed=meta.get("seed", 0))
    model.load_state_dict(state)
    return model
