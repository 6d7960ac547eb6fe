"""Time-unrolled spiking networks built from a declarative layer list.

Execution is layer-major: activations carry the T timesteps folded into the
leading (batch) axis, ordered time-major.  Layers before the first neuron
layer see the identical real-valued input at every timestep, so they run once
and their output is tiled T times.  Each neuron layer then unrolls its own
membrane recursion over the T slices.  The final weighted layer never fires;
logits are its output averaged over the timesteps.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError
from .neurons import LIFConfig, NeuronKind, NeuronLayerState, step
from .tensor import Parameter, Tensor


class LayerKind(str, enum.Enum):
    CONV = "conv"
    LINEAR = "linear"
    NORM = "norm"
    NEURON = "neuron"
    RESIDUAL = "residual"
    POOL = "pool"
    FLATTEN = "flatten"


WEIGHTED = (LayerKind.CONV, LayerKind.LINEAR)


@dataclass
class LayerSpec:
    kind: LayerKind
    name: str
    out_channels: Optional[int] = None
    kernel_size: Optional[int] = None
    stride: int = 1
    padding: int = 0
    units: Optional[int] = None
    bias: bool = True
    neuron: Optional[LIFConfig] = None
    source: Optional[str] = None
    pool_size: int = 2

    def __post_init__(self):
        try:
            self.kind = LayerKind(self.kind)
        except ValueError:
            raise ConfigurationError(
                f"layer {self.name!r}: unknown kind {self.kind!r}; choose from {[k.value for k in LayerKind]}"
            ) from None
        if isinstance(self.neuron, dict):
            self.neuron = LIFConfig.from_dict(self.neuron)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "name": self.name}
        for key in _LAYER_FIELDS[self.kind]:
            value = getattr(self, key)
            d[key] = value.to_dict() if isinstance(value, LIFConfig) else value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.get("kind")
        try:
            allowed = {"kind", "name", *_LAYER_FIELDS[LayerKind(kind)]}
        except ValueError:
            raise ConfigurationError(f"layer {d.get('name')!r}: unknown kind {kind!r}") from None
        unknown = set(d) - allowed
        if unknown:
            raise ConfigurationError(f"layer {d.get('name')!r}: unknown fields {sorted(unknown)}")
        return cls(**d)


_LAYER_FIELDS = {
    LayerKind.CONV: ("out_channels", "kernel_size", "stride", "padding", "bias"),
    LayerKind.LINEAR: ("units", "bias"),
    LayerKind.NORM: (),
    LayerKind.NEURON: ("neuron",),
    LayerKind.RESIDUAL: ("source",),
    LayerKind.POOL: ("pool_size",),
    LayerKind.FLATTEN: (),
}


@dataclass
class NetworkSpec:
    input_shape: tuple
    layers: list
    timesteps: int = 2
    encoder: str = "direct"
    readout: str = "mean_potential"

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec.from_dict(l) for l in self.layers]

    # -- structure ---------------------------------------------------------

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def neuron_layers(self) -> list:
        return [l for l in self.layers if l.kind is LayerKind.NEURON]

    def weighted_layers(self) -> list:
        return [l for l in self.layers if l.kind in WEIGHTED]

    def real_input_layers(self) -> list:
        """Weighted layers fed by real values rather than spikes (computed in FLOPs)."""
        out = []
        for l in self.layers:
            if l.kind is LayerKind.NEURON:
                break
            if l.kind in WEIGHTED:
                out.append(l.name)
        return out

    def shapes(self) -> dict:
        """Validate the layer chain and return each layer's per-sample output shape."""
        if self.timesteps < 1:
            raise ConfigurationError(f"timesteps must be >= 1, got {self.timesteps}")
        if self.encoder != "direct":
            raise ConfigurationError(f"unsupported encoder {self.encoder!r}")
        if self.readout != "mean_potential":
            raise ConfigurationError(f"unsupported readout {self.readout!r}")
        if not self.layers:
            raise ConfigurationError("network has no layers")
        if self.layers[-1].kind is LayerKind.NEURON:
            raise ConfigurationError(f"layer {self.layers[-1].name!r}: the readout layer must not spike")
        shape = self.input_shape
        out = {}
        for l in self.layers:
            if not l.name or l.name in out:
                raise ConfigurationError(f"layer names must be unique and non-empty, got {l.name!r}")
            shape = _infer(l, shape, out)
            out[l.name] = shape
        return out

    def with_neuron_kind(self, kind) -> "NetworkSpec":
        layers = [
            LayerSpec(**{**l.__dict__, "neuron": l.neuron.with_kind(kind)}) if l.kind is LayerKind.NEURON else l
            for l in self.layers
        ]
        return NetworkSpec(self.input_shape, layers, self.timesteps, self.encoder, self.readout)

    def with_timesteps(self, timesteps: int) -> "NetworkSpec":
        return NetworkSpec(self.input_shape, list(self.layers), int(timesteps), self.encoder, self.readout)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "timesteps": self.timesteps,
            "encoder": self.encoder,
            "readout": self.readout,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown network fields: {sorted(unknown)}")
        spec = cls(**d)
        spec.shapes()
        return spec

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


def _infer(l: LayerSpec, shape: tuple, seen: dict) -> tuple:
    where = f"layer {l.name!r} ({l.kind.value})"
    if l.kind is LayerKind.CONV:
        if len(shape) != 3:
            raise ConfigurationError(f"{where}: needs a (C,H,W) input, got {shape}")
        if not l.out_channels or not l.kernel_size:
            raise ConfigurationError(f"{where}: out_channels and kernel_size are required")
        try:
            h = tn.conv_output_size(shape[1], l.kernel_size, l.stride, l.padding)
            w = tn.conv_output_size(shape[2], l.kernel_size, l.stride, l.padding)
        except ConfigurationError as e:
            raise ConfigurationError(f"{where}: {e}") from None
        return (l.out_channels, h, w)
    if l.kind is LayerKind.LINEAR:
        if len(shape) != 1:
            raise ConfigurationError(f"{where}: needs a flat input, got {shape}; insert a flatten layer")
        if not l.units:
            raise ConfigurationError(f"{where}: units is required")
        return (l.units,)
    if l.kind is LayerKind.NEURON:
        if l.neuron is None:
            raise ConfigurationError(f"{where}: missing neuron config")
        return shape
    if l.kind is LayerKind.RESIDUAL:
        if l.source not in seen:
            raise ConfigurationError(f"{where}: source {l.source!r} is not an earlier layer")
        if seen[l.source] != shape:
            raise ConfigurationError(f"{where}: shape {shape} does not match source {l.source!r} {seen[l.source]}")
        return shape
    if l.kind is LayerKind.POOL:
        if len(shape) != 3 or shape[1] % l.pool_size or shape[2] % l.pool_size:
            raise ConfigurationError(f"{where}: {shape} not divisible by pool size {l.pool_size}")
        return (shape[0], shape[1] // l.pool_size, shape[2] // l.pool_size)
    if l.kind is LayerKind.FLATTEN:
        return (int(np.prod(shape)),)
    return shape  # NORM


# ---------------------------------------------------------------------------
# parameters


def init_params(spec: NetworkSpec, seed: int = 0) -> tuple:
    """Kaiming fan-in weights, zero biases, unit norm scale, amplitudes 1.0.

    Returns ``(params, buffers)``; buffers hold normalization running stats.
    """
    rng = np.random.default_rng(seed)
    shapes = spec.shapes()
    params, buffers = {}, {}
    prev = spec.input_shape
    for l in spec.layers:
        n = l.name
        if l.kind is LayerKind.CONV:
            fan_in = prev[0] * l.kernel_size**2
            w = rng.standard_normal((l.out_channels, prev[0], l.kernel_size, l.kernel_size))
            params[f"{n}.weight"] = Parameter(w * np.sqrt(2.0 / fan_in), f"{n}.weight")
            if l.bias:
                params[f"{n}.bias"] = Parameter(np.zeros(l.out_channels), f"{n}.bias")
        elif l.kind is LayerKind.LINEAR:
            w = rng.standard_normal((l.units, prev[0]))
            params[f"{n}.weight"] = Parameter(w * np.sqrt(2.0 / prev[0]), f"{n}.weight")
            if l.bias:
                params[f"{n}.bias"] = Parameter(np.zeros(l.units), f"{n}.bias")
        elif l.kind is LayerKind.NORM:
            c = prev[0]
            params[f"{n}.gamma"] = Parameter(np.ones(c), f"{n}.gamma")
            params[f"{n}.beta"] = Parameter(np.zeros(c), f"{n}.beta")
            buffers[f"{n}.running_mean"] = np.zeros(c, dtype=np.float32)
            buffers[f"{n}.running_var"] = np.ones(c, dtype=np.float32)
        elif l.kind is LayerKind.NEURON and l.neuron.kind is NeuronKind.TRAINABLE_TERNARY:
            params[f"{n}.amplitude"] = Parameter(np.asarray(1.0), f"{n}.amplitude")
        prev = shapes[n]
    return params, buffers


# ---------------------------------------------------------------------------
# forward


@dataclass
class LayerTrace:
    """Per-timestep history of one neuron layer, each array shaped (T, N, ...)."""

    membrane: np.ndarray
    post_reset: np.ndarray
    spikes: np.ndarray
    base: np.ndarray
    kind: NeuronKind
    amplitude: float = 1.0


@dataclass
class ForwardRecord:
    layers: dict = field(default_factory=dict)
    logits: Optional[np.ndarray] = None
    timesteps: int = 1


def forward(
    spec: NetworkSpec,
    params: dict,
    batch,
    buffers: Optional[dict] = None,
    *,
    train: bool = False,
    record: bool = False,
    relaxed: bool = False,
):
    """Run the network on ``batch`` (N, *input_shape); returns ``(logits, record)``.

    ``record`` is ``None`` unless ``record=True``.  In ``train`` mode norm
    layers use batch statistics and update their running buffers in place.
    """
    spec.shapes()
    batch = np.asarray(batch)
    if batch.shape[1:] != spec.input_shape:
        raise ConfigurationError(f"batch shape {batch.shape[1:]} does not match network input {spec.input_shape}")
    buffers = buffers if buffers is not None else {}
    T, N = spec.timesteps, batch.shape[0]
    rec = ForwardRecord(timesteps=T) if record else None

    x = Tensor(batch)
    temporal = False
    acts = {}
    for l in spec.layers:
        n = l.name
        if l.kind is LayerKind.NEURON:
            if not temporal:
                x = tn.tile_rows(x, T) if T > 1 else x
                temporal = True
            x = _neuron_layer(l, x, N, T, params.get(f"{n}.amplitude"), rec, relaxed)
        elif l.kind is LayerKind.CONV:
            x = tn.conv2d(x, _param(params, n, "weight"), params.get(f"{n}.bias"), l.stride, l.padding)
        elif l.kind is LayerKind.LINEAR:
            x = tn.linear(x, _param(params, n, "weight"), params.get(f"{n}.bias"))
        elif l.kind is LayerKind.NORM:
            x = tn.batch_norm(
                x,
                _param(params, n, "gamma"),
                _param(params, n, "beta"),
                _buffer(buffers, n, "running_mean"),
                _buffer(buffers, n, "running_var"),
                training=train,
            )
        elif l.kind is LayerKind.POOL:
            x = tn.avg_pool2d(x, l.pool_size)
        elif l.kind is LayerKind.FLATTEN:
            x = tn.flatten(x)
        elif l.kind is LayerKind.RESIDUAL:
            src, src_temporal = acts[l.source]
            if temporal and not src_temporal and T > 1:
                src = tn.tile_rows(src, T)
            x = tn.add(x, src)
        acts[n] = (x, temporal)

    if temporal and T > 1:
        logits = tn.mean(tn.reshape(x, (T, N) + x.shape[1:]), axis=0)
    else:
        logits = x
    if rec is not None:
        rec.logits = logits.data.copy()
    return logits, rec


def _param(params: dict, layer: str, key: str) -> Parameter:
    try:
        return params[f"{layer}.{key}"]
    except KeyError:
        raise ConfigurationError(f"layer {layer!r}: missing parameter {key!r}") from None


def _buffer(buffers: dict, layer: str, key: str) -> np.ndarray:
    try:
        return buffers[f"{layer}.{key}"]
    except KeyError:
        raise ConfigurationError(f"layer {layer!r}: missing buffer {key!r}") from None


def _neuron_layer(l: LayerSpec, x: Tensor, N: int, T: int, amp, rec, relaxed) -> Tensor:
    cfg = l.neuron
    if cfg.kind is NeuronKind.TRAINABLE_TERNARY and amp is None:
        raise ConfigurationError(f"layer {l.name!r}: trainable-ternary neuron has no amplitude parameter")
    state = NeuronLayerState.zeros((N,) + x.shape[1:])
    outs, trace = [], []
    for t in range(T):
        current = tn.take_rows(x, t * N, (t + 1) * N) if T > 1 else x
        o, state = step(state, current, cfg, amp, relaxed)
        outs.append(o)
        if rec is not None:
            u = state.u.data
            trace.append((u, u * (1 - np.abs(state.base)), o.data, state.base))
    if rec is not None:
        m, p, s, b = (np.stack(a) for a in zip(*trace))
        a = float(amp.data) if amp is not None else 1.0
        rec.layers[l.name] = LayerTrace(m, p, s, b, cfg.kind, a)
    return tn.concat(outs) if T > 1 else outs[0]


class Network:
    """Spec plus parameters and buffers; a thin convenience over :func:`forward`."""

    def __init__(self, spec: NetworkSpec, params: dict, buffers: Optional[dict] = None):
        self.spec = spec
        self.params = params
        self.buffers = buffers if buffers is not None else {}

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int = 0) -> "Network":
        return cls(spec, *init_params(spec, seed))

    def __call__(self, batch, *, train=False, record=False, relaxed=False):
        return forward(self.spec, self.params, batch, self.buffers, train=train, record=record, relaxed=relaxed)

    def parameters(self) -> list:
        return list(self.params.values())


# ---------------------------------------------------------------------------
# presets

PRESETS = ("mlp-mnist", "cnn-mnist", "resnet-mini")


def build_small_cnn(
    preset_name: str,
    neuron_kind=NeuronKind.TERNARY,
    timesteps: int = 2,
    input_shape: tuple = (1, 28, 28),
    num_classes: int = 10,
    neuron: Optional[LIFConfig] = None,
) -> NetworkSpec:
    """Desk-scale network presets: ``mlp-mnist``, ``cnn-mnist``, ``resnet-mini``."""
    cfg = (neuron or LIFConfig()).with_kind(neuron_kind)
    L = LayerSpec

    def block(i, out, stride=1, pool=False):
        layers = [
            L("conv", f"conv{i}", out_channels=out, kernel_size=3, stride=stride, padding=1),
            L("norm", f"bn{i}"),
        ]
        if pool:
            layers.append(L("pool", f"pool{i}", pool_size=2))
        layers.append(L("neuron", f"lif{i}", neuron=cfg))
        return layers

    if preset_name == "mlp-mnist":
        layers = [
            L("flatten", "flatten"),
            L("linear", "fc1", units=256),
            L("norm", "bn1"),
            L("neuron", "lif1", neuron=cfg),
            L("linear", "fc2", units=256),
            L("norm", "bn2"),
            L("neuron", "lif2", neuron=cfg),
            L("linear", "fc3", units=num_classes),
        ]
    elif preset_name == "cnn-mnist":
        layers = [
            *block(1, 16, pool=True),
            *block(2, 32, pool=True),
            L("flatten", "flatten"),
            L("linear", "fc", units=num_classes),
        ]
    elif preset_name == "resnet-mini":
        layers = [
            *block(1, 8),
            *block(2, 8),
            *block(3, 8),
            L("residual", "res1", source="lif1"),
            *block(4, 16, pool=True),
            *block(5, 16),
            *block(6, 16),
            L("residual", "res2", source="lif4"),
            L("pool", "pool", pool_size=2),
            L("flatten", "flatten"),
            L("linear", "fc", units=num_classes),
        ]
    else:
        raise ConfigurationError(f"unknown preset {preset_name!r}; available presets: {', '.join(PRESETS)}")
    spec = NetworkSpec(input_shape, layers, timesteps)
    spec.shapes()
    return spec
