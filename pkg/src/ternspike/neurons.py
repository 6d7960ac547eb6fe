"""Binary, ternary and trainable-ternary leaky integrate-and-fire neurons.

All three share one membrane update::

    u[t] = tau * u[t-1] * (1 - |b[t-1]|) + I[t]

where ``b`` is the normalized spike (``{0,1}`` or ``{-1,0,1}``) and ``I`` the
weighted input.  A neuron that fired is hard-reset to zero through the
``(1 - |b|)`` factor, which is treated as a constant during backpropagation.
The trainable-ternary neuron emits ``a * b`` with one learnable amplitude
``a`` per layer; its thresholds never involve ``a``.

The forward spike is an exact step.  Backward uses a rectangular surrogate
of half-width ``surrogate_width`` centred on each threshold.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Parameter, Tensor, add, mul, record, working_dtype


class NeuronKind(str, enum.Enum):
    BINARY = "binary"
    TERNARY = "ternary"
    TRAINABLE_TERNARY = "trainable_ternary"

    @classmethod
    def parse(cls, value) -> "NeuronKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ConfigurationError(f"unknown neuron kind {value!r}; choose from {[k.value for k in cls]}")

    @property
    def is_ternary(self) -> bool:
        return self is not NeuronKind.BINARY


@dataclass(frozen=True)
class LIFConfig:
    kind: NeuronKind = NeuronKind.TERNARY
    tau: float = 0.25
    v_th: float = 1.0
    surrogate_width: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", NeuronKind.parse(self.kind))
        if not 0.0 <= self.tau < 1.0:
            raise ConfigurationError(f"tau must lie in [0, 1), got {self.tau}")
        if not self.v_th > 0:
            raise ConfigurationError(f"v_th must be positive, got {self.v_th}")
        if not self.surrogate_width > 0:
            raise ConfigurationError(f"surrogate_width must be positive, got {self.surrogate_width}")

    def with_kind(self, kind) -> "LIFConfig":
        return replace(self, kind=NeuronKind.parse(kind))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "tau": self.tau, "v_th": self.v_th, "surrogate_width": self.surrogate_width}

    @classmethod
    def from_dict(cls, d: dict) -> "LIFConfig":
        unknown = set(d) - {"kind", "tau", "v_th", "surrogate_width"}
        if unknown:
            raise ConfigurationError(f"unknown neuron fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NeuronLayerState:
    """Membrane potentials and last emitted spikes of one layer.

    ``base`` holds the normalized spikes ``b`` that drive the reset; for the
    trainable-ternary kind ``o_prev == a * base``.
    """

    u: Tensor
    o_prev: Tensor
    base: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "NeuronLayerState":
        z = np.zeros(shape, dtype=working_dtype())
        return cls(Tensor(z), Tensor(z), z)


def surrogate_grad(u, cfg: LIFConfig) -> np.ndarray:
    """d(spike)/du of the rectangular surrogate, evaluated elementwise."""
    u = np.asarray(u.data if isinstance(u, Tensor) else u)
    w = cfg.surrogate_width
    height = u.dtype.type(1.0 / (2.0 * w)) if u.dtype.kind == "f" else 1.0 / (2.0 * w)
    g = (np.abs(u - cfg.v_th) <= w) * height
    if cfg.kind.is_ternary:
        g = g + (np.abs(u + cfg.v_th) <= w) * height
    return g.astype(u.dtype if u.dtype.kind == "f" else working_dtype())


def fire(u: np.ndarray, cfg: LIFConfig) -> np.ndarray:
    """Exact normalized spikes for membrane values ``u``."""
    b = (u >= cfg.v_th).astype(u.dtype)
    if cfg.kind.is_ternary:
        b -= (u <= -cfg.v_th).astype(u.dtype)
    return b


def _relaxed(u: np.ndarray, cfg: LIFConfig) -> np.ndarray:
    # Piecewise-linear spike whose derivative is exactly the surrogate.
    w = cfg.surrogate_width
    ramp = np.clip((u - cfg.v_th + w) / (2 * w), 0, 1)
    if cfg.kind.is_ternary:
        ramp = ramp - np.clip((-u - cfg.v_th + w) / (2 * w), 0, 1)
    return ramp.astype(u.dtype)


def spike(u: Tensor, cfg: LIFConfig, relaxed: bool = False) -> Tensor:
    """Differentiable firing op: exact step forward, surrogate backward.

    With ``relaxed=True`` the forward value is replaced by the ramp whose
    derivative the surrogate is; only gradient-check harnesses use this.
    """
    sg = surrogate_grad(u.data, cfg)
    out = _relaxed(u.data, cfg) if relaxed else fire(u.data, cfg)
    return record(out, (u,), lambda g: (g * sg,), "spike")


def _check(state: NeuronLayerState, current: Tensor) -> None:
    if state.u.shape != current.shape:
        raise DimensionError(f"input current {current.shape} does not match membrane {state.u.shape}")


def _integrate(state: NeuronLayerState, current: Tensor, cfg: LIFConfig) -> Tensor:
    # The reset factor is a constant, so no gradient flows through it.
    dt = state.u.data.dtype.type
    leak = dt(cfg.tau) * (dt(1) - np.abs(state.base))
    return add(mul(state.u, Tensor(leak)), current)


def _lif_step(state, current, cfg, relaxed):
    _check(state, current)
    u = _integrate(state, current, cfg)
    b = spike(u, cfg, relaxed)
    base = fire(u.data, cfg) if relaxed else b.data
    return u, b, base


def _require(cfg: LIFConfig, kind: NeuronKind) -> None:
    if cfg.kind is not kind:
        raise ConfigurationError(f"{kind.value} step called with a {cfg.kind.value} neuron config")


def binary_step(state: NeuronLayerState, current: Tensor, cfg: LIFConfig, relaxed: bool = False):
    _require(cfg, NeuronKind.BINARY)
    u, b, base = _lif_step(state, current, cfg, relaxed)
    return b, NeuronLayerState(u, b, base)


def ternary_step(state: NeuronLayerState, current: Tensor, cfg: LIFConfig, relaxed: bool = False):
    _require(cfg, NeuronKind.TERNARY)
    u, b, base = _lif_step(state, current, cfg, relaxed)
    return b, NeuronLayerState(u, b, base)


def trainable_ternary_step(
    state: NeuronLayerState, current: Tensor, cfg: LIFConfig, amp: Parameter, relaxed: bool = False
):
    _require(cfg, NeuronKind.TRAINABLE_TERNARY)
    if not np.all(np.isfinite(amp.data)):
        raise ConfigurationError(f"spike amplitude {amp.name!r} is not finite")
    u, b, base = _lif_step(state, current, cfg, relaxed)
    o = mul(amp, b)
    return o, NeuronLayerState(u, o, base)


def step(state: NeuronLayerState, current: Tensor, cfg: LIFConfig, amp: Optional[Parameter] = None, relaxed=False):
    """Advance one timestep for any neuron kind; returns ``(spikes, new_state)``."""
    if cfg.kind is NeuronKind.TRAINABLE_TERNARY:
        if amp is None:
            raise ConfigurationError("trainable-ternary neurons need a spike amplitude")
        return trainable_ternary_step(state, current, cfg, amp, relaxed)
    if cfg.kind is NeuronKind.TERNARY:
        return ternary_step(state, current, cfg, relaxed)
    return binary_step(state, current, cfg, relaxed)


def spike_alphabet(cfg: LIFConfig, amplitude: float = 1.0) -> tuple:
    if cfg.kind is NeuronKind.BINARY:
        return (0.0, 1.0)
    a = amplitude if cfg.kind is NeuronKind.TRAINABLE_TERNARY else 1.0
    return (-a, 0.0, a)
