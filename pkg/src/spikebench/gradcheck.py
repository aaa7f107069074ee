"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, detect_anomaly, no_grad


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, evaluated without building a graph."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad(), detect_anomaly():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(x)).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(x)).data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max over coordinates of ``|autodiff - central difference| / max(1, |central difference|)``.

    ``x`` is promoted to float64 so that the finite differences are meaningful;
    parameters captured inside ``f`` are promoted by numpy as they combine with it.
    Raises :class:`NumericError` naming the op if any intermediate is non-finite.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    with detect_anomaly():
        out = f(xt)
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    numeric = numerical_grad(f, x, eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def _probe_input(module, rng: np.random.Generator) -> np.ndarray | None:
    from .nn import BatchNorm, Conv, Linear

    if isinstance(module, Linear):
        return rng.standard_normal((3, module.in_features))
    if isinstance(module, Conv):
        return rng.standard_normal((2, module.in_channels) + (5,) * module.dims)
    if isinstance(module, BatchNorm):
        shape = [4, 3, 3]
        shape[module.axis] = module.num_features
        return rng.standard_normal(shape)
    return None


def layer_grad_check(model, seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """``grad_check`` of every linear, convolution and batch-norm layer of ``model``.

    Spiking neurons are excluded: their backward is a surrogate by design and
    has no finite-difference counterpart. BN runs with batch statistics.
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for name, module in model.named_modules():
        x = _probe_input(module, rng)
        if x is None:
            continue
        w = rng.standard_normal(module(Tensor(x)).shape)
        errors[name] = grad_check(lambda t, m=module, w=w: (m(t) * Tensor(w)).sum(), x, eps)
    return errors
