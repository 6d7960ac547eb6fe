"""Training-to-inference conversion of trainable-ternary networks.

A trainable-ternary layer emits ``a * b`` with ``b`` in ``{-1, 0, 1}``.  Any
layer that consumes those spikes linearly can absorb ``a``::

    K * (a * B) == (a * K) * B

so the converted network emits only normalized ternary spikes while its
outputs stay the same.  Pooling and flattening commute with the scale and
are looked through; a normalization layer that directly consumes spikes
absorbs ``a`` into its scale and running mean instead.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConversionError, VerificationError
from .network import LayerKind, LayerSpec, NetworkSpec
from .neurons import NeuronKind
from .training import Checkpoint


@dataclass
class ConversionReport:
    folded: dict = field(default_factory=dict)
    consumers: dict = field(default_factory=dict)
    extensions: list = field(default_factory=list)
    max_deviation: Optional[float] = None
    alphabet_ok: dict = field(default_factory=dict)
    pattern_match: dict = field(default_factory=dict)
    first_divergence: Optional[str] = None

    @property
    def verified(self) -> bool:
        return self.max_deviation is not None

    def to_dict(self) -> dict:
        return {
            "folded_amplitudes": self.folded,
            "consumers": self.consumers,
            "extensions": self.extensions,
            "max_abs_logit_deviation": self.max_deviation,
            "alphabet_ok": self.alphabet_ok,
            "pattern_match": self.pattern_match,
            "first_divergence": self.first_divergence,
        }

    def to_text(self) -> str:
        lines = ["# conversion report"]
        for name, a in self.folded.items():
            lines.append(f"amplitude\t{name}\t{a:.9g}\tfolded_into\t{','.join(self.consumers.get(name, []))}")
        for note in self.extensions:
            lines.append(f"extension\t{note}")
        if self.verified:
            lines.append(f"max_abs_logit_deviation\t{self.max_deviation:.3e}")
            for name in self.alphabet_ok:
                lines.append(
                    f"layer\t{name}\talphabet_ok={self.alphabet_ok[name]}\tpattern_match={self.pattern_match.get(name)}"
                )
            if self.first_divergence:
                lines.append(f"first_divergence\t{self.first_divergence}")
        return "\n".join(lines) + "\n"


def fold_amplitudes(checkpoint: Checkpoint, report: Optional[ConversionReport] = None) -> Checkpoint:
    """Return a copy of ``checkpoint`` whose neurons emit normalized ternary spikes.

    Every weighted layer consuming amplitude-``a`` spikes gets ``a * K``;
    biases are untouched.  Raises :class:`ConversionError` when a residual
    join mixes spikes of different amplitudes.
    """
    spec = checkpoint.spec
    report = report if report is not None else ConversionReport()
    trainable = [l for l in spec.neuron_layers() if l.neuron.kind is NeuronKind.TRAINABLE_TERNARY]
    if not trainable:
        warnings.warn("checkpoint has no trainable-ternary neurons; conversion is a no-op", stacklevel=2)
        return copy.deepcopy(checkpoint)

    params = {k: np.array(v, dtype=np.float32, copy=True) for k, v in checkpoint.params.items()}
    buffers = {k: np.array(v, dtype=np.float32, copy=True) for k, v in checkpoint.buffers.items()}

    # amplitude carried by each activation, with the neuron layers it came from;
    # None marks real-valued (non-spike) activations
    amp, producers = None, ()
    seen = {}
    for l in spec.layers:
        n = l.name
        if l.kind is LayerKind.NEURON:
            if l.neuron.kind is NeuronKind.TRAINABLE_TERNARY:
                a = params.pop(f"{n}.amplitude").astype(np.float32).reshape(())
                report.folded[n] = float(a)
                amp = a
            else:
                amp = np.float32(1.0)
            producers = (n,)
        elif l.kind is LayerKind.RESIDUAL:
            other_amp, other_prod = seen[l.source]
            if amp is None or other_amp is None:
                amp, producers = None, ()
            elif amp != other_amp:
                raise ConversionError(
                    f"residual join {n!r} adds spikes of amplitude {float(amp):.6g} from {', '.join(producers)} "
                    f"to amplitude {float(other_amp):.6g} from {', '.join(other_prod)}; cannot fold unequal amplitudes"
                )
            else:
                producers = tuple(dict.fromkeys(producers + other_prod))
                report.extensions.append(f"residual {n}: equal amplitudes on joined branches")
        elif l.kind in (LayerKind.CONV, LayerKind.LINEAR):
            if amp is not None and amp != 1:
                params[f"{n}.weight"] = (amp * params[f"{n}.weight"]).astype(np.float32)
                for p in producers:
                    report.consumers.setdefault(p, []).append(n)
            amp, producers = None, ()
        elif l.kind is LayerKind.NORM:
            if amp is not None and amp != 1:
                if amp == 0:
                    raise ConversionError(f"norm {n!r} consumes spikes of amplitude 0; its running mean cannot absorb it")
                # gamma * (a*b - m) / s == (a*gamma) * (b - m/a) / s
                params[f"{n}.gamma"] = (amp * params[f"{n}.gamma"]).astype(np.float32)
                buffers[f"{n}.running_mean"] = (buffers[f"{n}.running_mean"] / amp).astype(np.float32)
                for p in producers:
                    report.consumers.setdefault(p, []).append(n)
                report.extensions.append(f"norm {n}: amplitude folded into normalization scale (inference only)")
            amp, producers = None, ()
        seen[n] = (amp, producers)

    layers = [
        LayerSpec(**{**l.__dict__, "neuron": l.neuron.with_kind(NeuronKind.TERNARY)})
        if l.kind is LayerKind.NEURON and l.neuron.kind is NeuronKind.TRAINABLE_TERNARY
        else l
        for l in spec.layers
    ]
    new_spec = NetworkSpec(spec.input_shape, layers, spec.timesteps, spec.encoder, spec.readout)
    notes = dict(checkpoint.notes)
    notes["converted_from_trainable_ternary"] = report.folded
    return Checkpoint(
        new_spec,
        params,
        buffers,
        checkpoint.epoch,
        list(checkpoint.history),
        checkpoint.train_config,
        notes,
    )


def _same_topology(a: NetworkSpec, b: NetworkSpec) -> bool:
    if a.input_shape != b.input_shape or a.timesteps != b.timesteps or len(a.layers) != len(b.layers):
        return False
    return all(x.kind is y.kind and x.name == y.name for x, y in zip(a.layers, b.layers))


def verify_equivalence(
    original: Checkpoint,
    converted: Checkpoint,
    probe,
    tolerance: float = 1e-5,
    report: Optional[ConversionReport] = None,
    batch_size: int = 256,
    strict: bool = True,
) -> ConversionReport:
    """Compare logits and firing patterns of two checkpoints on ``probe``.

    Firing patterns (the normalized spikes ``b``) must agree exactly at every
    neuron layer and timestep, the converted network must emit only
    ``{-1, 0, 1}``, and logits must agree within ``tolerance``.  With
    ``strict`` a failure raises :class:`VerificationError` naming the first
    diverging layer.
    """
    from . import tensor as tn

    if not _same_topology(original.spec, converted.spec):
        raise VerificationError("original and converted checkpoints have different topologies")
    report = report if report is not None else ConversionReport()
    probe = np.asarray(probe, dtype=np.float32)
    net_a, net_b = original.network(), converted.network()
    names = [l.name for l in original.spec.neuron_layers()]
    deviation = 0.0
    alphabet = {n: True for n in names}
    pattern = {n: True for n in names}
    first = None
    with tn.no_grad():
        for i in range(0, len(probe), batch_size):
            xb = probe[i : i + batch_size]
            la, ra = net_a(xb, record=True)
            lb, rb = net_b(xb, record=True)
            deviation = max(deviation, float(np.max(np.abs(la.data - lb.data))))
            for n in names:
                sb = rb.layers[n].spikes
                if not np.all(np.isin(sb, (-1.0, 0.0, 1.0))):
                    alphabet[n] = False
                diff = ra.layers[n].base != rb.layers[n].base
                if diff.any():
                    pattern[n] = False
                    if first is None:
                        t, *idx = np.argwhere(diff)[0]
                        first = f"{n} at timestep {t}, sample {i + idx[0]}, index {tuple(idx[1:])}"
    report.max_deviation = deviation
    report.alphabet_ok = alphabet
    report.pattern_match = pattern
    report.first_divergence = first
    ok = deviation <= tolerance and all(alphabet.values()) and all(pattern.values())
    if strict and not ok:
        where = first or next((n for n in names if not alphabet[n]), "readout")
        raise VerificationError(
            f"conversion not output-invariant: max |logit deviation| {deviation:.3e} "
            f"(tolerance {tolerance:g}); first divergence: {where}"
        )
    return report


def convert(checkpoint: Checkpoint, probe=None, tolerance: float = 1e-5) -> tuple:
    """Fold amplitudes and, when a probe batch is given, verify the result."""
    report = ConversionReport()
    converted = fold_amplitudes(checkpoint, report)
    if probe is not None:
        verify_equivalence(checkpoint, converted, probe, tolerance, report)
    return converted, report
