"""Inference energy model: FLOPs for the real-valued input layer, synaptic
operations (SOPs) for spike-driven layers, and sign evaluations in neurons.

``SOPs = sum over spike-fed layers of s * T * A`` where ``s`` is the firing
sparsity of the layer's input, ``T`` the timestep count and ``A`` the number
of additions the equivalent ANN layer would perform.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import ConfigurationError, ContractError, FormatError
from .network import LayerKind, NetworkSpec

PJ = 1e-12
FJ = 1e-15


@dataclass(frozen=True)
class CostTable:
    energy_per_flop: float = 12.5 * PJ
    energy_per_sop: float = 77 * FJ
    energy_per_sign: float = 3.7 * PJ

    def __post_init__(self):
        for name in ("energy_per_flop", "energy_per_sop", "energy_per_sign"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass
class EnergyReport:
    flops: float
    sops: float
    signs: float
    timesteps: Optional[int] = None
    mean_sparsity: Optional[float] = None
    ann_additions: dict = field(default_factory=dict)
    cost: CostTable = field(default_factory=CostTable)

    @property
    def flop_energy(self) -> float:
        return self.flops * self.cost.energy_per_flop

    @property
    def sop_energy(self) -> float:
        return self.sops * self.cost.energy_per_sop

    @property
    def sign_energy(self) -> float:
        return self.signs * self.cost.energy_per_sign

    @property
    def total(self) -> float:
        """Total energy in joules."""
        return self.flop_energy + self.sop_energy + self.sign_energy

    @property
    def total_ann_additions(self) -> int:
        return sum(self.ann_additions.values())

    def to_text(self) -> str:
        rows = [
            ("flops", f"{self.flops:.6g}", f"{self.flop_energy * 1e6:.4f} uJ"),
            ("sops", f"{self.sops:.6g}", f"{self.sop_energy * 1e6:.4f} uJ"),
            ("signs", f"{self.signs:.6g}", f"{self.sign_energy * 1e6:.4f} uJ"),
            ("total", "", f"{self.total * 1e6:.4f} uJ"),
        ]
        lines = ["item\tcount\tenergy"] + ["\t".join(r) for r in rows]
        if self.mean_sparsity is not None:
            lines.append(f"mean_sparsity\t{self.mean_sparsity:.6g}\t")
        if self.timesteps is not None:
            lines.append(f"timesteps\t{self.timesteps}\t")
        for name, a in self.ann_additions.items():
            lines.append(f"ann_additions[{name}]\t{a}\t")
        return "\n".join(lines) + "\n"


def _macs(spec: NetworkSpec) -> dict:
    shapes = spec.shapes()
    prev = spec.input_shape
    out = {}
    for l in spec.layers:
        if l.kind is LayerKind.CONV:
            o, h, w = shapes[l.name]
            out[l.name] = o * h * w * prev[0] * l.kernel_size**2
        elif l.kind is LayerKind.LINEAR:
            out[l.name] = l.units * prev[0]
        prev = shapes[l.name]
    return out


def count_ann_additions(spec: NetworkSpec) -> dict:
    """Per-image ANN addition count ``A`` of every spike-fed weighted layer."""
    real = set(spec.real_input_layers())
    return {k: v for k, v in _macs(spec).items() if k not in real}


def count_flops(spec: NetworkSpec, timesteps: Optional[int] = None) -> int:
    """FLOPs of the real-valued input layers: 2 per multiply-accumulate per timestep."""
    T = spec.timesteps if timesteps is None else timesteps
    macs = _macs(spec)
    return sum(2 * macs[n] * T for n in spec.real_input_layers())


def count_signs(spec: NetworkSpec, timesteps: Optional[int] = None) -> int:
    """Threshold comparisons: one per binary neuron-step, two per ternary one."""
    T = spec.timesteps if timesteps is None else timesteps
    shapes = spec.shapes()
    total = 0
    for l in spec.neuron_layers():
        n = 1
        for d in shapes[l.name]:
            n *= d
        total += n * T * (2 if l.neuron.kind.is_ternary else 1)
    return total


def input_sources(spec: NetworkSpec) -> dict:
    """Map each spike-fed weighted layer to the neuron layers feeding it."""
    current, seen, out = (), {}, {}
    for l in spec.layers:
        if l.kind is LayerKind.NEURON:
            current = (l.name,)
        elif l.kind is LayerKind.RESIDUAL:
            current = tuple(dict.fromkeys(current + seen[l.source]))
        elif l.kind in (LayerKind.CONV, LayerKind.LINEAR, LayerKind.NORM):
            if l.kind is not LayerKind.NORM and current:
                out[l.name] = current
            current = ()
        seen[l.name] = current
    return out


def estimate(
    spec: NetworkSpec,
    sparsity: Union[float, dict],
    timesteps: Optional[int] = None,
    cost: CostTable = CostTable(),
) -> EnergyReport:
    """Energy of one inference of ``spec``.

    ``sparsity`` is either one mean value or a mapping from neuron layer
    name to its firing sparsity; a layer fed by several neuron layers
    (residual joins) uses their mean.
    """
    T = spec.timesteps if timesteps is None else int(timesteps)
    if T < 1:
        raise ContractError(f"timesteps must be >= 1, got {T}")
    names = [l.name for l in spec.neuron_layers()]
    per_layer = {n: float(sparsity) for n in names} if not isinstance(sparsity, dict) else dict(sparsity)
    for n, s in per_layer.items():
        if not 0.0 <= s <= 1.0:
            raise ContractError(f"sparsity of {n!r} must lie in [0, 1], got {s}")
    missing = set(names) - set(per_layer)
    if missing:
        raise ContractError(f"no sparsity given for neuron layers {sorted(missing)}")

    A = count_ann_additions(spec)
    sources = input_sources(spec)
    sops = 0.0
    for layer, a in A.items():
        srcs = sources.get(layer, ())
        s = sum(per_layer[n] for n in srcs) / len(srcs) if srcs else 1.0
        sops += s * T * a
    mean_s = sum(per_layer.values()) / len(per_layer) if per_layer else 0.0
    return EnergyReport(
        flops=count_flops(spec, T),
        sops=sops,
        signs=count_signs(spec, T),
        timesteps=T,
        mean_sparsity=mean_s,
        ann_additions=A,
        cost=cost,
    )


def estimate_from_counts(flops, sops, signs, cost: CostTable = CostTable(), **extra) -> EnergyReport:
    """Energy from externally supplied operation counts."""
    for name, v in (("flops", flops), ("sops", sops), ("signs", signs)):
        if v < 0:
            raise ContractError(f"{name} must be nonnegative, got {v}")
    return EnergyReport(float(flops), float(sops), float(signs), cost=cost, **extra)


def implied_ann_additions(sops: float, sparsity: float, timesteps: int) -> float:
    """Invert ``sops = s * T * A`` for ``A``."""
    if not sparsity > 0 or not timesteps > 0:
        raise ContractError("sparsity and timesteps must be positive")
    return sops / (sparsity * timesteps)


_SUFFIX = {"": 1.0, "k": 1e3, "m": 1e6, "g": 1e9}
_UNITS = {"j": 1.0, "mj": 1e-3, "uj": 1e-6, "nj": 1e-9, "pj": PJ, "fj": FJ}
_NUMBER = re.compile(r"^\s*([-+]?[0-9.]+(?:[eE][-+]?\d+)?)\s*([A-Za-z%]*)\s*$")


def _parse_value(key: str, text: str, lineno: int) -> float:
    m = _NUMBER.match(text)
    if not m:
        raise FormatError(f"line {lineno}: cannot parse value {text!r} for {key!r}")
    value, unit = float(m.group(1)), m.group(2).lower()
    if unit == "%":
        return value / 100
    if key.startswith("energy_per_"):
        if unit not in _UNITS:
            raise FormatError(f"line {lineno}: unknown energy unit {m.group(2)!r}")
        return value * _UNITS[unit]
    if unit not in _SUFFIX:
        raise FormatError(f"line {lineno}: unknown magnitude suffix {m.group(2)!r}")
    return value * _SUFFIX[unit]


COUNT_KEYS = ("flops", "sops", "signs", "sparsity", "timesteps", "energy_per_flop", "energy_per_sop", "energy_per_sign")


def parse_counts(text: str) -> dict:
    """Parse a ``key = value`` counts file (``#`` comments, ``M``/``K`` suffixes, ``%``)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower().replace("sign", "signs") if key.lower() == "sign" else key.lower()
        if key not in COUNT_KEYS:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value, lineno)
    for key in ("flops", "sops", "signs"):
        if key not in out:
            raise FormatError(f"counts file lacks {key!r}")
    return out


def report_from_counts(counts: dict) -> EnergyReport:
    defaults = CostTable()
    cost = CostTable(
        counts.get("energy_per_flop", defaults.energy_per_flop),
        counts.get("energy_per_sop", defaults.energy_per_sop),
        counts.get("energy_per_sign", defaults.energy_per_sign),
    )
    T = counts.get("timesteps")
    return estimate_from_counts(
        counts["flops"],
        counts["sops"],
        counts["signs"],
        cost,
        timesteps=int(T) if T is not None else None,
        mean_sparsity=counts.get("sparsity"),
    )
