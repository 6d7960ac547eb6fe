"""Information capacity, spike entropy and membrane-potential profiles.

All entropies and capacities are in bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError
from .network import ForwardRecord, LayerKind, NetworkSpec


def capacity(shape, alphabet_size: int) -> float:
    """Maximum entropy of a feature map: ``prod(shape) * log2(alphabet_size)``."""
    dims = tuple(int(d) for d in shape)
    if not dims or any(d <= 0 for d in dims):
        raise ContractError(f"capacity needs positive dimensions, got {shape}")
    if alphabet_size < 2:
        raise ContractError(f"alphabet size must be >= 2, got {alphabet_size}")
    return math.prod(dims) * math.log2(alphabet_size)


def entropy(p) -> float:
    """Shannon entropy of a probability vector, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ContractError("entropy needs a nonnegative vector summing to 1")
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum()) + 0.0


@dataclass
class CapacityReport:
    layer: str
    shape: tuple
    binary_bits: float
    ternary_bits: float
    real_bits: float

    @property
    def ternary_ratio(self) -> float:
        return self.ternary_bits / self.binary_bits

    @property
    def real_ratio(self) -> float:
        return self.real_bits / self.binary_bits


def capacity_report(spec: NetworkSpec) -> list:
    """Binary / ternary / 32-bit real capacity of every neuron layer's output map."""
    shapes = spec.shapes()
    out = []
    for l in spec.layers:
        if l.kind is LayerKind.NEURON:
            s = shapes[l.name]
            out.append(CapacityReport(l.name, s, capacity(s, 2), capacity(s, 3), capacity(s, 2**32)))
    return out


@dataclass
class MembraneHistogram:
    layer: str
    timestep: int
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float


def _histogram(values: np.ndarray, bins: int):
    values = values.astype(np.float64).ravel()
    mu, sd = float(values.mean()), float(values.std())
    if sd == 0:
        lo, hi = mu - 0.5, mu + 0.5
    else:
        lo = max(mu - 4 * sd, float(values.min()))
        hi = min(mu + 4 * sd, float(values.max()))
    # values beyond the window land in the edge bins so counts stay complete
    counts, edges = np.histogram(np.clip(values, lo, hi), bins=bins, range=(lo, hi))
    return counts, edges, mu, sd


def membrane_profile(record: Optional[ForwardRecord], bins: int = 64, post_reset: bool = False) -> dict:
    """Histogram membranes per (layer, timestep) and summarize each layer.

    Returns ``{"histograms": [MembraneHistogram...], "layers": {name: (mean, std)}}``.
    Pre-reset potentials are used unless ``post_reset`` is set.
    """
    if record is None or not record.layers:
        raise ContractError("membrane_profile needs a record with retained membranes")
    hists, layers = [], {}
    for name, trace in record.layers.items():
        data = trace.post_reset if post_reset else trace.membrane
        for t in range(data.shape[0]):
            counts, edges, mu, sd = _histogram(data[t], bins)
            hists.append(MembraneHistogram(name, t, edges, counts, mu, sd))
        flat = data.astype(np.float64)
        layers[name] = (float(flat.mean()), float(flat.std()))
    return {"histograms": hists, "layers": layers}


def spike_stats(record: Optional[ForwardRecord]) -> dict:
    """Per-layer rates of +1, -1 and 0 spikes and their empirical entropy."""
    if record is None or not record.layers:
        raise ContractError("spike_stats needs a record with retained spikes")
    out = {}
    for name, trace in record.layers.items():
        b = trace.base
        n = b.size
        pos = int(np.count_nonzero(b > 0)) / n
        neg = int(np.count_nonzero(b < 0)) / n
        zero = 1.0 - pos - neg
        out[name] = {"pos": pos, "neg": neg, "zero": zero, "entropy": entropy([pos, neg, max(zero, 0.0)])}
    return out


def merge_spike_counts(records) -> dict:
    """Aggregate spike stats over several records (e.g. evaluation batches)."""
    counts = {}
    for rec in records:
        for name, trace in rec.layers.items():
            c = counts.setdefault(name, np.zeros(3, dtype=np.int64))
            b = trace.base
            c += (np.count_nonzero(b > 0), np.count_nonzero(b < 0), np.count_nonzero(b == 0))
    out = {}
    for name, c in counts.items():
        p = c / c.sum()
        out[name] = {"pos": float(p[0]), "neg": float(p[1]), "zero": float(p[2]), "entropy": entropy(p)}
    return out
