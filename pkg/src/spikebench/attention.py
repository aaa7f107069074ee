"""Spiking self-attention variants over time-major token maps.

Activations are ``[T, B, N, D]`` tensors; stateless layers see ``T * B`` as
one batch and neurons iterate over the leading time axis. ``grid`` is the
spatial layout of the ``N`` tokens, needed only by the convolutional
generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import BatchNorm, Conv, Linear, Module
from .neurons import NeuronConfig, SpikingNeuron
from .tensor import Tensor, matmul

ATTN_VARIANTS = ("SSA", "SDSA", "SEMM")
QKV_GENERATORS = ("linear", "conv_bn", "sepconv_bn")
SCALE_POSITIONS = ("pre", "post")


@dataclass
class AttnConfig:
    variant: str = "SSA"
    qkv_generator: str = "linear"
    heads: int = 1
    dim: int = 64
    scale: float | None = None  # None: (dim / heads) ** -0.5
    num_experts: int = 1
    randomized_qk: bool = False
    scale_position: str = "pre"
    out_proj: bool = True

    def __post_init__(self):
        if self.variant not in ATTN_VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}; expected one of {ATTN_VARIANTS}")
        if self.qkv_generator not in QKV_GENERATORS:
            raise ConfigError(f"unknown qkv_generator {self.qkv_generator!r}; expected one of {QKV_GENERATORS}")
        if self.heads < 1 or self.dim < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.scale is not None and not self.scale > 0:
            raise ConfigError(f"attention scale must be > 0, got {self.scale}")
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.scale_position not in SCALE_POSITIONS:
            raise ConfigError(f"scale_position must be one of {SCALE_POSITIONS}")

    @property
    def effective_scale(self) -> float:
        return self.scale if self.scale is not None else (self.dim // self.heads) ** -0.5


def tokens_to_map(x: Tensor, grid: tuple[int, ...]) -> Tensor:
    """``[T, B, N, D]`` -> ``[T*B, D, *grid]``."""
    T, B, N, D = x.shape
    if math.prod(grid) != N:
        raise DimensionError(f"token grid {grid} does not hold {N} tokens")
    return x.reshape(T * B, N, D).transpose(0, 2, 1).reshape(T * B, D, *grid)


def map_to_tokens(y: Tensor, T: int) -> Tensor:
    """``[T*B, D, *grid]`` -> ``[T, B, N, D]``."""
    TB, D = y.shape[:2]
    return y.reshape(TB, D, -1).transpose(0, 2, 1).reshape(T, TB // T, -1, D)


def _resolve_grid(grid, n_tokens: int, dims: int) -> tuple[int, ...]:
    if grid is None:
        if dims == 1:
            return (n_tokens,)
        side = math.isqrt(n_tokens)
        if side * side != n_tokens:
            raise ConfigError(f"{n_tokens} tokens are not a square grid; pass grid explicitly")
        return (side, side)
    grid = tuple(grid)
    if len(grid) != dims:
        raise ConfigError(f"{dims}-D generator got a {len(grid)}-D token grid {grid}")
    return grid


class QKVGenerator(Module):
    """One of Q, K, V: ``SN(BN(op(x)))``.

    ``op`` is a linear map with bias (``linear``), a 1x1 convolution
    (``conv_bn``), or a 3x3 depthwise convolution followed by a 1x1 pointwise
    convolution (``sepconv_bn``) over the token grid.
    """

    def __init__(self, kind: str, dim: int, rng: np.random.Generator, neuron: NeuronConfig,
                 dims: int = 2, out_dim: int | None = None):
        super().__init__()
        if kind not in QKV_GENERATORS:
            raise ConfigError(f"unknown qkv_generator {kind!r}")
        self.kind, self.dim, self.dims = kind, dim, dims
        self.out_dim = out_dim or dim
        if kind == "linear":
            self.linear = Linear(dim, self.out_dim, rng)
        elif kind == "conv_bn":
            self.conv = Conv(dim, self.out_dim, 1, rng, dims=dims)
        else:
            self.depthwise = Conv(dim, dim, 3, rng, padding=1, groups=dim, dims=dims)
            self.pointwise = Conv(dim, self.out_dim, 1, rng, dims=dims)
        self.bn = BatchNorm(self.out_dim, axis=-1)
        self.sn = SpikingNeuron(neuron)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        for m in self.modules():
            if m is not self and hasattr(m, "reset_parameters"):
                m.reset_parameters(rng)

    def pre_activation(self, x: Tensor, grid=None) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.dim:
            raise ConfigError(f"{self.kind} generator expects [T, B, N, {self.dim}], got {x.shape}")
        if self.kind == "linear":
            return self.linear(x)
        fmap = tokens_to_map(x, _resolve_grid(grid, x.shape[2], self.dims))
        if self.kind == "conv_bn":
            y = self.conv(fmap)
        else:
            y = self.pointwise(self.depthwise(fmap))
        return map_to_tokens(y, x.shape[0])

    def forward(self, x: Tensor, grid=None) -> Tensor:
        return self.sn(self.bn(self.pre_activation(x, grid)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., N, D]`` -> ``[..., heads, N, D / heads]``."""
    *lead, N, D = x.shape
    if D % heads:
        raise ConfigError(f"{D} channels cannot be split into {heads} heads")
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.reshape(*lead, N, heads, D // heads).transpose(*perm)


def merge_heads(x: Tensor) -> Tensor:
    *lead, H, N, d = x.shape
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(*perm).reshape(*lead, N, H * d)


def ssa_forward(q: Tensor, k: Tensor, v: Tensor, neuron: SpikingNeuron, heads: int = 1,
                scale: float | None = None, scale_position: str = "pre") -> Tensor:
    """Per head ``SN(scale * (Q K^T) V)``; inputs are ``[T, ..., N, D]`` spikes.

    With ``scale_position="post"`` the scale multiplies the spikes instead,
    which makes the output non-binary.
    """
    if not (q.shape == k.shape == v.shape):
        raise ConfigError(f"Q/K/V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if scale_position not in SCALE_POSITIONS:
        raise ConfigError(f"scale_position must be one of {SCALE_POSITIONS}")
    if scale is None:
        scale = (q.shape[-1] // heads) ** -0.5
    qh, kh, vh = (split_heads(t, heads) for t in (q, k, v))
    scores = matmul(qh, kh.swapaxes(-1, -2))
    attn = merge_heads(matmul(scores, vh))
    if scale_position == "pre":
        return neuron(attn * scale)
    return neuron(attn) * scale


def sdsa_forward(q: Tensor, k: Tensor, v: Tensor, neuron: SpikingNeuron) -> Tensor:
    """``SN(sum_c Q * K)`` per token, broadcast over channels and gating ``V``. No ``N x N`` term."""
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"Q/K/V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    mask = neuron((q * k).sum(axis=-1, keepdims=True))
    return mask * v


def semm_forward(expert_outputs: list[Tensor], router: Tensor) -> Tensor:
    """``sum_i r_i * A_i`` with per-token router spikes ``router[..., N, m]``."""
    m = len(expert_outputs)
    if router.shape[-1] != m:
        raise ConfigError(f"router width {router.shape[-1]} != number of experts {m}")
    out = None
    for i, a in enumerate(expert_outputs):
        term = router[..., i:i + 1] * a
        out = term if out is None else out + term
    return out


class SpikingAttention(Module):
    """Q/K/V generation, one of SSA/SDSA/SEMM, then an optional ``SN(BN(Linear))`` projection."""

    def __init__(self, cfg: AttnConfig, neuron: NeuronConfig, rng: np.random.Generator, dims: int = 2):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim
        gen = cfg.qkv_generator
        if cfg.variant == "SEMM":
            self.q_experts = [QKVGenerator("linear", D, rng, neuron, dims) for _ in range(cfg.num_experts)]
            self.attn_sn = [SpikingNeuron(neuron) for _ in range(cfg.num_experts)]
            self.router = Linear(D, cfg.num_experts, rng)
            self.router_bn = BatchNorm(cfg.num_experts, axis=-1)
            self.router_sn = SpikingNeuron(neuron)
        else:
            self.q_gen = QKVGenerator(gen, D, rng, neuron, dims)
            self.attn_sn = SpikingNeuron(neuron)
        self.k_gen = QKVGenerator(gen if cfg.variant != "SEMM" else "linear", D, rng, neuron, dims)
        self.v_gen = QKVGenerator(gen if cfg.variant != "SEMM" else "linear", D, rng, neuron, dims)
        if cfg.out_proj:
            self.proj = Linear(D, D, rng)
            self.proj_bn = BatchNorm(D, axis=-1)
            self.proj_sn = SpikingNeuron(neuron)
        if cfg.randomized_qk:
            self.randomize_qk(int(rng.integers(2**31)))

    def query_generators(self) -> list[QKVGenerator]:
        return list(self.q_experts) if self.cfg.variant == "SEMM" else [self.q_gen]

    def randomize_qk(self, seed: int) -> None:
        """Re-draw the Q and K generators from their standard init and freeze them."""
        rng = np.random.default_rng(seed)
        for g in self.query_generators() + [self.k_gen]:
            g.reset_parameters(rng)
            for p in g.parameters():
                p.requires_grad = False
                p.grad = None

    def forward(self, x: Tensor, grid=None) -> Tensor:
        cfg = self.cfg
        k = self.k_gen(x, grid)
        v = self.v_gen(x, grid)
        if cfg.variant == "SSA":
            out = ssa_forward(self.q_gen(x, grid), k, v, self.attn_sn, cfg.heads, cfg.effective_scale,
                              cfg.scale_position)
        elif cfg.variant == "SDSA":
            out = sdsa_forward(self.q_gen(x, grid), k, v, self.attn_sn)
        else:
            experts = [ssa_forward(gen(x, grid), k, v, sn, cfg.heads, cfg.effective_scale, cfg.scale_position)
                       for gen, sn in zip(self.q_experts, self.attn_sn)]
            router = self.router_sn(self.router_bn(self.router(x)))
            out = semm_forward(experts, router)
        if cfg.out_proj:
            out = self.proj_sn(self.proj_bn(self.proj(out)))
        return out
