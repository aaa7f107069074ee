"""Analytical energy model for vanilla, quantized and spiking transformers.

Each row prices one operation of one module. Compute cells::

    vanilla    E_mac * ops
    quantized  B * R_b * E_ac * ops
    spiking    T * R_s * E_ac * ops

Memory cells are priced per bit: ``32``, ``B`` and ``32 T`` bits per stored
element. ``ops`` and ``elements`` per row kind:

    conv    F                                C_o * H * W
    qkv     3 N D^2                          3 N D
    attn_f  2 N^2 D  (spiking: N D)          2 N^2   (spiking: N D)
    linear  F                                C_o

Energies are accumulated in pJ (double precision) and reported in mJ.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field

from .errors import ConfigError

KINDS = ("vanilla", "quantized", "spiking")
OPS = ("conv", "qkv", "attn_f", "linear")
PJ_PER_MJ = 1e9

# reference totals in mJ for the 8-layer, 512-wide transformer: (compute, memory, total)
PAPER_BREAKDOWN_MJ = {
    "vanilla": (41.77, 1.39, 43.16),
    "quantized": (16.34, 0.17, 16.51),
    "spiking": (11.57, 5.59, 17.16),
}


@dataclass(frozen=True)
class EnergyConstants:
    """Per-operation energies in pJ; ``e_mem`` is per bit accessed."""

    e_mac: float = 4.6
    e_ac: float = 0.9
    e_mem: float = 3.12

    def __post_init__(self):
        for name in ("e_mac", "e_ac", "e_mem"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")


DEFAULT_CONSTANTS = EnergyConstants()


@dataclass
class Row:
    """One priced operation. Unused symbols stay ``None``; ``mult`` repeats the row."""

    module: str
    op: str
    F: float | None = None
    C_o: int | None = None
    H: int | None = None
    W: int | None = None
    N: int | None = None
    D: int | None = None
    T: int | None = None
    B: int | None = None
    R_s: float | None = None
    R_b: float | None = None
    mult: float = 1.0

    def __post_init__(self):
        if self.op not in OPS:
            raise ConfigError(f"unknown op {self.op!r}; expected one of {OPS}")
        for name in ("F", "C_o", "H", "W", "N", "D", "T", "mult"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")
        for name in ("R_s", "R_b"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.B is not None and not 1 <= self.B <= 32:
            raise ConfigError(f"bit-width B must lie in 1..32, got {self.B}")


def _need(row: Row, *names: str) -> tuple:
    values = []
    for name in names:
        v = getattr(row, name)
        if v is None:
            raise ConfigError(f"{row.module}/{row.op}: symbol {name} is required")
        values.append(v)
    return tuple(values)


def op_count(row: Row, kind: str) -> float:
    if row.op in ("conv", "linear"):
        (F,) = _need(row, "F")
        return float(F)
    N, D = _need(row, "N", "D")
    if row.op == "qkv":
        return 3.0 * N * D * D
    return float(N * D) if kind == "spiking" else 2.0 * N * N * D


def element_count(row: Row, kind: str) -> float:
    if row.op == "conv":
        C_o, H, W = _need(row, "C_o", "H", "W")
        return float(C_o * H * W)
    if row.op == "linear":
        (C_o,) = _need(row, "C_o")
        return float(C_o)
    N, D = _need(row, "N", "D")
    if row.op == "qkv":
        return 3.0 * N * D
    return float(N * D) if kind == "spiking" else 2.0 * N * N


def energy_row(row: Row, kind: str, c: EnergyConstants = DEFAULT_CONSTANTS) -> tuple[float, float]:
    """``(compute, memory)`` in pJ for one row under one model kind."""
    if kind not in KINDS:
        raise ConfigError(f"unknown kind {kind!r}; expected one of {KINDS}")
    ops = op_count(row, kind)
    elems = element_count(row, kind)
    if kind == "vanilla":
        compute = c.e_mac * ops
        memory = 32 * c.e_mem * elems
    elif kind == "quantized":
        B, R_b = _need(row, "B", "R_b")
        compute = B * R_b * c.e_ac * ops
        memory = B * c.e_mem * elems
    else:
        T, R_s = _need(row, "T", "R_s")
        compute = T * R_s * c.e_ac * ops
        memory = 32 * T * c.e_mem * elems
    return compute * row.mult, memory * row.mult


@dataclass
class EnergyReport:
    kind: str
    entries: list[tuple[str, str, float, float]] = field(default_factory=list)  # module, op, compute pJ, memory pJ

    @property
    def compute_pj(self) -> float:
        return math.fsum(e[2] for e in self.entries)

    @property
    def memory_pj(self) -> float:
        return math.fsum(e[3] for e in self.entries)

    @property
    def total_pj(self) -> float:
        return math.fsum([e[2] for e in self.entries] + [e[3] for e in self.entries])

    @property
    def compute_mj(self) -> float:
        return self.compute_pj / PJ_PER_MJ

    @property
    def memory_mj(self) -> float:
        return self.memory_pj / PJ_PER_MJ

    @property
    def total_mj(self) -> float:
        return self.total_pj / PJ_PER_MJ


def energy_total(rows: list[Row], kind: str, c: EnergyConstants = DEFAULT_CONSTANTS) -> EnergyReport:
    report = EnergyReport(kind)
    for row in rows:
        compute, memory = energy_row(row, kind, c)
        report.entries.append((row.module, row.op, compute, memory))
    return report


def flops_conv(kernel: int, c_in: int, c_out: int, out_size, groups: int = 1, dims: int = 2) -> int:
    """MACs of a convolution: ``kernel^dims * C_in / groups * C_out * prod(output extents)``."""
    if c_in % groups or c_out % groups:
        raise ConfigError(f"channels {c_in}->{c_out} not divisible by groups={groups}")
    out_size = (out_size,) if isinstance(out_size, int) else tuple(out_size)
    return kernel**dims * (c_in // groups) * c_out * math.prod(out_size)


# -- architecture enumeration ------------------------------------------------------------


def with_rates(rows: list[Row], **symbols) -> list[Row]:
    """Copy of ``rows`` with ``T``, ``B``, ``R_s`` or ``R_b`` filled in where unset."""
    out = []
    for row in rows:
        fill = {k: v for k, v in symbols.items() if getattr(row, k) is None}
        out.append(dataclasses.replace(row, **fill))
    return out


def transformer_arch(D: int = 512, L: int = 8, img_size: int = 224, patch_size: int = 16, in_channels: int = 3,
                     sps_conv_layers: int = 4, mlp_ratio: float = 4.0, conv_dims: int = 2) -> list[Row]:
    """Rows for one inference of the SPS + L-block transformer, rates left unset.

    SPS convs are priced at their pre-pool output resolution; the positional
    conv is grouped with them. Per block: QKV, ``f(Q, K, V)``, the attention
    output projection, and the two MLP linears. The classifier head is omitted.
    """
    from .network import sps_pools, sps_widths

    widths = sps_widths(D, sps_conv_layers)
    pools = sps_pools(patch_size, sps_conv_layers)
    rows = []
    size, c_in = img_size, in_channels
    spatial = lambda s: (s, s) if conv_dims == 2 else (s, 1)
    for i, (c_out, pool) in enumerate(zip(widths, pools)):
        H, W = spatial(size)
        rows.append(Row(f"sps.stage{i}", "conv", F=flops_conv(3, c_in, c_out, (H, W), dims=conv_dims),
                        C_o=c_out, H=H, W=W))
        size //= pool
        c_in = c_out
    H, W = spatial(size)
    rows.append(Row("sps.pe", "conv", F=flops_conv(3, D, D, (H, W), dims=conv_dims), C_o=D, H=H, W=W))
    N = H * W
    hidden = int(D * mlp_ratio)
    for layer in range(L):
        p = f"block{layer}"
        rows += [
            Row(f"{p}.attn", "qkv", N=N, D=D),
            Row(f"{p}.attn", "attn_f", N=N, D=D),
            Row(f"{p}.attn.proj", "linear", F=N * D * D, C_o=N * D),
            Row(f"{p}.mlp.fc1", "linear", F=N * D * hidden, C_o=N * hidden),
            Row(f"{p}.mlp.fc2", "linear", F=N * hidden * D, C_o=N * D),
        ]
    return rows


def neuron_count(rows: list[Row]) -> float:
    """Stored activations per inference, the vanilla memory element count."""
    return math.fsum(element_count(r, "vanilla") * r.mult for r in rows)


def calibrate_rate(rows: list[Row], kind: str, target_compute_mj: float,
                   c: EnergyConstants = DEFAULT_CONSTANTS, **symbols) -> float:
    """Solve for the single rate (``R_b`` or ``R_s``) that yields ``target_compute_mj``.

    Compute is linear in the rate, so the solution is one evaluation at rate 1.
    """
    key = {"quantized": "R_b", "spiking": "R_s"}.get(kind)
    if key is None:
        raise ConfigError(f"no free rate to calibrate for kind {kind!r}")
    unit = energy_total(with_rates(rows, **{key: 1.0}, **symbols), kind, c).compute_mj
    if unit == 0:
        raise ConfigError("architecture has zero compute; cannot calibrate")
    return target_compute_mj / unit


@dataclass
class BreakdownResult:
    kind: str
    rate: float | None
    compute_mj: float
    memory_mj: float
    total_mj: float
    paper_compute_mj: float
    paper_memory_mj: float
    paper_total_mj: float

    @property
    def total_rel_error(self) -> float:
        return abs(self.total_mj - self.paper_total_mj) / self.paper_total_mj

    @property
    def compute_rel_error(self) -> float:
        return abs(self.compute_mj - self.paper_compute_mj) / self.paper_compute_mj


def reproduce_breakdown(T: int = 4, B: int = 4, c: EnergyConstants = DEFAULT_CONSTANTS,
                        **arch_kwargs) -> dict[str, BreakdownResult]:
    """Vanilla from first principles; quantized and spiking with ``R_b`` and ``R_s``
    back-solved from the reference compute column, memory from first principles."""
    rows = transformer_arch(**arch_kwargs)
    out = {}
    for kind in KINDS:
        pc, pm, pt = PAPER_BREAKDOWN_MJ[kind]
        if kind == "vanilla":
            rate, rep = None, energy_total(rows, kind, c)
        elif kind == "quantized":
            rate = calibrate_rate(rows, kind, pc, c, B=B)
            rep = energy_total(with_rates(rows, B=B, R_b=min(max(rate, 0.0), 1.0)), kind, c)
        else:
            rate = calibrate_rate(rows, kind, pc, c, T=T)
            rep = energy_total(with_rates(rows, T=T, R_s=min(max(rate, 0.0), 1.0)), kind, c)
        out[kind] = BreakdownResult(kind, rate, rep.compute_mj, rep.memory_mj, rep.total_mj, pc, pm, pt)
    return out


# -- rows from a concrete model ----------------------------------------------------------


def measure_from_model(model, B: int = 8, R_b: float | None = None) -> list[Row]:
    """Rows for one sample through ``model`` with ``R_s`` taken from its probes.

    Call after a forward pass with ``model.start_probe()`` active. Each
    compute row's ``R_s`` is the measured nonzero fraction of that layer's
    input; ``f(Q, K, V)`` uses the mean firing rate of the Q and K neurons.
    """
    from .network import sps_pools, sps_widths

    cfg = model.cfg
    activity = model.input_activity()
    rates = model.firing_rates()
    T = cfg.step
    dims = cfg.conv_dims
    spatial = (lambda s: (s, s)) if dims == 2 else (lambda s: (s, 1))
    rows = []
    size, c_in = cfg.img_size, cfg.in_channels
    for i, (c_out, pool) in enumerate(zip(sps_widths(cfg.embed_dim, cfg.sps_conv_layers),
                                          sps_pools(cfg.patch_size, cfg.sps_conv_layers))):
        H, W = spatial(size)
        rows.append(Row(f"sps.stage{i}", "conv", F=flops_conv(3, c_in, c_out, (H, W), dims=dims),
                        C_o=c_out, H=H, W=W, R_s=activity[f"sps.stages.{i}.conv"]))
        size //= pool
        c_in = c_out
    H, W = spatial(size)
    D = cfg.embed_dim
    rows.append(Row("sps.pe", "conv", F=flops_conv(3, D, D, (H, W), dims=dims), C_o=D, H=H, W=W,
                    R_s=activity["pe.conv"]))
    N = H * W
    hidden = cfg.hidden_dim
    a = cfg.attn
    for layer in range(len(model.blocks)):
        p = f"blocks.{layer}"
        if a.variant == "SEMM":
            q_names = [f"{p}.attn.q_experts.{i}" for i in range(a.num_experts)]
        else:
            q_names = [f"{p}.attn.q_gen"]
        first = {"linear": "linear", "conv_bn": "conv", "sepconv_bn": "depthwise"}[
            "linear" if a.variant == "SEMM" else a.qkv_generator]
        n_gen = len(q_names) + 2
        qk_rate = sum(rates[f"{n}.sn"] for n in q_names + [f"{p}.attn.k_gen"]) / (len(q_names) + 1)
        rows.append(Row(f"{p}.attn", "qkv", N=N, D=D, R_s=activity[f"{p}.attn.k_gen.{first}"], mult=n_gen / 3))
        rows.append(Row(f"{p}.attn", "attn_f", N=N, D=D, R_s=qk_rate,
                        mult=a.num_experts if a.variant == "SEMM" else 1))
        if a.variant == "SEMM":
            rows.append(Row(f"{p}.attn.router", "linear", F=N * D * a.num_experts, C_o=N * a.num_experts,
                            R_s=activity[f"{p}.attn.router"]))
        if a.out_proj:
            rows.append(Row(f"{p}.attn.proj", "linear", F=N * D * D, C_o=N * D, R_s=activity[f"{p}.attn.proj"]))
        rows.append(Row(f"{p}.mlp.fc1", "linear", F=N * D * hidden, C_o=N * hidden, R_s=activity[f"{p}.mlp.fc1"]))
        rows.append(Row(f"{p}.mlp.fc2", "linear", F=N * hidden * D, C_o=N * D, R_s=activity[f"{p}.mlp.fc2"]))
    return with_rates(rows, T=T, B=B, R_b=R_b)


# -- output --------------------------------------------------------------------------------


def reports_csv(reports: list[EnergyReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["module", "op", "kind", "compute_J", "memory_J"])
    for rep in reports:
        for module, op, compute, memory in rep.entries:
            w.writerow([module, op, rep.kind, f"{compute * 1e-12:.6e}", f"{memory * 1e-12:.6e}"])
    return buf.getvalue()


def reports_table(reports: list[EnergyReport]) -> str:
    """Per-module total energy (mJ) with one column per kind, then compute, memory and total rows."""
    modules: dict[tuple[str, str], dict[str, float]] = {}
    for rep in reports:
        for module, op, compute, memory in rep.entries:
            modules.setdefault((module, op), {})[rep.kind] = (compute + memory) / PJ_PER_MJ
    kinds = [rep.kind for rep in reports]
    width = max([len(f"{m} ({o})") for m, o in modules] + [12])
    lines = [f"{'module':<{width}} " + " ".join(f"{k:>12}" for k in kinds)]
    for (module, op), vals in modules.items():
        cells = " ".join(f"{vals[k]:>12.4g}" if k in vals else f"{'-':>12}" for k in kinds)
        lines.append(f"{module + ' (' + op + ')':<{width}} {cells}")
    lines.append("-" * len(lines[0]))
    for label, attr in (("compute", "compute_mj"), ("memory", "memory_mj"), ("total", "total_mj")):
        lines.append(f"{label:<{width}} " + " ".join(f"{getattr(rep, attr):>12.4g}" for rep in reports))
    return "\n".join(lines) + "\n"
