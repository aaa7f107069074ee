"""Discrete-time spiking neurons with sigmoid surrogate gradients.

All five variants share one update skeleton::

    v_pre = charge(v, x)                     # variant-specific leak/integration
    s     = H(v_pre - v_threshold)           # forward: Heaviside, backward: surrogate
    v     = reset(v_pre, s)                  # s is detached here

LIF   ``v_pre = v + (x - v) / tau``
PLIF  ``v_pre = v + sigmoid(w) * (x - v)`` with one learnable scalar ``w`` per layer
CLIF  LIF charge; trace ``c <- 0.5 * c + s`` widens the surrogate by ``(1 + c)``
GLIF  ``v_pre = v + (x - g_leak * v) / tau``; fired entries reset to
      ``g_reset * v_reset + (1 - g_reset) * (v_pre - v_threshold)``
KLIF  ``v_pre = relu(v + k * (x - v))`` with learnable ``k`` (init ``1 / tau``)

The CLIF/GLIF/KLIF equations are simplified readings of those models, not
reimplementations of the original papers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .nn import Module, Parameter
from .tensor import Tensor, make_op, stack

NEURON_KINDS = ("LIF", "PLIF", "CLIF", "GLIF", "KLIF")
RESET_MODES = ("hard", "soft")
CLIF_TRACE_DECAY = 0.5


@dataclass
class NeuronConfig:
    kind: str = "LIF"
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    reset_mode: str = "hard"
    alpha: float = 4.0
    surrogate: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in NEURON_KINDS:
            raise ConfigError(f"unknown neuron kind {self.kind!r}; expected one of {NEURON_KINDS}")
        if not self.tau > 1:
            raise ConfigError(f"tau must be > 1, got {self.tau}")
        if not self.alpha > 0:
            raise ConfigError(f"surrogate alpha must be > 0, got {self.alpha}")
        if not self.v_threshold > self.v_reset:
            raise ConfigError(f"v_threshold ({self.v_threshold}) must exceed v_reset ({self.v_reset})")
        if self.reset_mode not in RESET_MODES:
            raise ConfigError(f"reset_mode must be one of {RESET_MODES}, got {self.reset_mode!r}")
        if self.surrogate != "sigmoid":
            raise ConfigError(f"only the sigmoid surrogate is implemented, got {self.surrogate!r}")


@dataclass
class NeuronState:
    """Membrane potential plus variant-specific auxiliary tensors (CLIF trace, GLIF gates)."""

    v: Tensor | None = None
    aux: dict = field(default_factory=dict)
    fresh: bool = True


def surrogate_grad(v_pre, cfg: NeuronConfig) -> np.ndarray:
    """``alpha * sigma(alpha (v - V_th)) * (1 - sigma(alpha (v - V_th)))``.

    Evaluated on ``|v - V_th|`` so the result is exactly symmetric about the
    threshold and never overflows.
    """
    v = v_pre.data if isinstance(v_pre, Tensor) else np.asarray(v_pre)
    z = cfg.alpha * np.abs(v - cfg.v_threshold)
    e = np.exp(-z)
    s = e / (1.0 + e)
    return (cfg.alpha * s * (1.0 - s)).astype(v.dtype if np.issubdtype(v.dtype, np.floating) else np.float64)


def spike(v_pre: Tensor, cfg: NeuronConfig, scale: np.ndarray | None = None) -> Tensor:
    """Heaviside step ``v_pre >= V_th`` whose backward is the sigmoid surrogate (times ``scale``)."""
    out = (v_pre.data >= cfg.v_threshold).astype(v_pre.dtype)

    def backward(g):
        sg = surrogate_grad(v_pre.data, cfg)
        if scale is not None:
            sg = sg * scale
        return (g * sg,)

    return make_op(out, (v_pre,), backward, "spike")


def init_params(cfg: NeuronConfig) -> dict[str, Parameter]:
    """Learnable per-layer scalars for the variants that have them."""
    if cfg.kind == "PLIF":
        # float64 so that sigma(w) rounded to float32 can hit any float32 decay exactly
        return {"w": Parameter(-math.log(cfg.tau - 1.0), dtype=np.float64)}
    if cfg.kind == "GLIF":
        return {"leak_gate": Parameter(0.0), "reset_gate": Parameter(0.0)}
    if cfg.kind == "KLIF":
        return {"k": Parameter(1.0 / cfg.tau)}
    return {}


def reset_state(state: NeuronState, cfg: NeuronConfig) -> NeuronState:
    """Potential back to ``v_reset`` everywhere, auxiliary tensors cleared; parameters untouched."""
    if state.v is None:
        return NeuronState()
    return NeuronState(v=Tensor(np.full(state.v.shape, cfg.v_reset, dtype=state.v.dtype)))


def neuron_step(state: NeuronState, x_t, cfg: NeuronConfig,
                params: dict[str, Parameter] | None = None) -> tuple[Tensor, NeuronState]:
    """Advance one time step. Returns binary spikes and the next state."""
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite input to {cfg.kind} neuron")
    params = params or {}
    v = state.v
    if v is None or (state.fresh and v.shape != x.shape):
        v = Tensor(np.full(x.shape, cfg.v_reset, dtype=x.dtype))
    elif v.shape != x.shape:
        raise DimensionError(f"{cfg.kind} input shape {x.shape} != state shape {v.shape}")

    aux: dict = {}
    scale = None
    kind = cfg.kind
    if kind in ("LIF", "CLIF"):
        v_pre = v + (x - v) * (1.0 / cfg.tau)
    elif kind == "PLIF":
        v_pre = v + (x - v) * params["w"].sigmoid().astype(x.dtype)
    elif kind == "GLIF":
        g_leak = params["leak_gate"].sigmoid()
        g_reset = params["reset_gate"].sigmoid()
        aux["leak_gate"], aux["reset_gate"] = g_leak.data, g_reset.data
        v_pre = v + (x - v * g_leak) * (1.0 / cfg.tau)
    else:
        v_pre = (v + (x - v) * params["k"]).relu()

    if kind == "CLIF":
        trace = state.aux.get("trace")
        if trace is None:
            trace = np.zeros(x.shape, dtype=x.dtype)
        scale = 1.0 + trace

    s = spike(v_pre, cfg, scale)
    fired = s.data
    if kind == "GLIF":
        target = (v_pre - cfg.v_threshold) * (1.0 - g_reset) + g_reset * cfg.v_reset
        v_next = v_pre * (1.0 - fired) + target * fired
    elif cfg.reset_mode == "hard":
        v_next = v_pre * (1.0 - fired) + cfg.v_reset * fired
    else:
        v_next = v_pre - cfg.v_threshold * fired

    if kind == "CLIF":
        aux["trace"] = CLIF_TRACE_DECAY * trace + fired
    aux["v_pre"] = v_pre.data
    return s, NeuronState(v=v_next, aux=aux, fresh=False)


class SpikingNeuron(Module):
    """Stateful neuron layer. ``forward`` consumes a time-major sequence ``[T, ...]``."""

    def __init__(self, cfg: NeuronConfig):
        super().__init__()
        self.cfg = cfg
        self._param_names = tuple(init_params(cfg))
        for name, p in init_params(cfg).items():
            setattr(self, name, p)
        self.state = NeuronState()
        self.probing = False
        self.spike_count = 0.0
        self.opportunities = 0

    def neuron_params(self) -> dict[str, Parameter]:
        return {name: getattr(self, name) for name in self._param_names}

    def step(self, x_t) -> Tensor:
        s, self.state = neuron_step(self.state, x_t, self.cfg, self.neuron_params())
        if self.probing:
            self.spike_count += float(s.data.sum(dtype=np.float64))
            self.opportunities += s.size
        return s

    def forward(self, x: Tensor) -> Tensor:
        return stack([self.step(x[t]) for t in range(x.shape[0])], axis=0)

    def reset(self) -> None:
        self.state = reset_state(self.state, self.cfg)

    def start_probe(self) -> None:
        self.probing = True
        self.spike_count = 0.0
        self.opportunities = 0

    def stop_probe(self) -> None:
        self.probing = False

    def firing_rate(self) -> float | None:
        if not self.opportunities:
            return None
        return self.spike_count / self.opportunities

    def pin_decay(self, decay) -> None:
        """PLIF only: choose ``w`` so that ``sigmoid(w)`` rounded to float32 equals ``float32(decay)``."""
        if self.cfg.kind != "PLIF":
            raise ConfigError("pin_decay applies to PLIF neurons only")
        target = np.float32(decay)
        if not 0 < target < 1:
            raise ConfigError(f"decay must lie in (0, 1), got {decay}")
        w = np.float64(-math.log(1.0 / float(target) - 1.0))
        for _ in range(10000):
            got = Tensor(w).sigmoid().astype(np.float32).data
            if got == target:
                self.w.data[...] = w
                return
            w = np.nextafter(w, np.inf if got < target else -np.inf)
        raise NumericError(f"no w with float32(sigmoid(w)) == {target!r}")


def make_neuron(cfg: NeuronConfig) -> SpikingNeuron:
    return SpikingNeuron(cfg)
