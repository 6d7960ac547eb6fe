"""Finite-difference gradient checks and brute-force reference simulators.

These are deliberately independent of the vectorized code paths they check:
the scalar LIF simulator is a plain Python loop, and numerical gradients
come from central differences evaluated in float64.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import tensor as tn
from .neurons import LIFConfig, NeuronKind


def numerical_grad(f: Callable[[], float], param: tn.Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``param``."""
    flat = param.data.reshape(-1)
    g = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g.reshape(param.shape)


def analytic_grads(loss_fn: Callable[[], tn.Tensor], params: Iterable[tn.Parameter]) -> dict:
    params = list(params)
    for p in params:
        p.zero_grad()
    with tn.GradTape() as tape:
        loss = loss_fn()
    tn.backward(tape, loss)
    return {p.name: p.grad.astype(np.float64) for p in params}


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_gradients(loss_fn, params, eps: float = 1e-3) -> dict:
    """Per-parameter relative error between tape and finite-difference gradients.

    ``loss_fn`` must build its graph from the parameters' current data; run
    inside ``tensor.precision(np.float64)`` for meaningful differences.
    """
    params = list(params)
    tape_grads = analytic_grads(loss_fn, params)

    def value():
        with tn.no_grad():
            return loss_fn().item()

    return {p.name: relative_error(tape_grads[p.name], numerical_grad(value, p, eps)) for p in params}


def scalar_lif_trace(inputs, cfg: LIFConfig, amplitude: float = 1.0):
    """Loop-based single-neuron simulation in float32 scalars.

    Returns ``(membranes, spikes)`` lists of length ``len(inputs)``; the
    membrane is the value compared against the thresholds (before reset).
    """
    f32 = np.float32
    tau, vth, a = f32(cfg.tau), f32(cfg.v_th), f32(amplitude)
    u, b_prev = f32(0.0), f32(0.0)
    membranes, spikes = [], []
    for x in inputs:
        u = tau * u * (f32(1.0) - abs(b_prev)) + f32(x)
        if u >= vth:
            b = f32(1.0)
        elif cfg.kind is not NeuronKind.BINARY and u <= -vth:
            b = f32(-1.0)
        else:
            b = f32(0.0)
        membranes.append(u)
        spikes.append(a * b if cfg.kind is NeuronKind.TRAINABLE_TERNARY else b)
        b_prev = b
    return membranes, spikes
