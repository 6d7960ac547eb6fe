"""Hermetic self-checks run by ``ternspike selftest``.

Each check returns ``(ok, detail)``.  No datasets or network access are used.
"""

from __future__ import annotations

import math
import os
import tempfile
import time

import numpy as np

from . import tensor as tn
from .analysis import capacity
from .data import load_idx, write_idx
from .energy import estimate_from_counts, implied_ann_additions
from .gradcheck import check_gradients, scalar_lif_trace
from .network import LayerSpec, Network, NetworkSpec, init_params
from .neurons import LIFConfig, NeuronKind, NeuronLayerState, step
from .reparam import convert
from .training import Checkpoint


def check_neuron_trace(n_sequences: int = 200, steps: int = 10, seed: int = 0):
    rng = np.random.default_rng(seed)
    cfg = LIFConfig(NeuronKind.TERNARY)
    inputs = (rng.standard_normal((n_sequences, steps)) * 1.5).astype(np.float32)
    state = NeuronLayerState.zeros((n_sequences,))
    mem, spk = [], []
    for t in range(steps):
        o, state = step(state, tn.Tensor(inputs[:, t]), cfg)
        mem.append(state.u.data)
        spk.append(o.data)
    mem, spk = np.stack(mem, 1), np.stack(spk, 1)
    for i in range(n_sequences):
        m, s = scalar_lif_trace(inputs[i], cfg)
        if not (np.array_equal(mem[i], np.array(m, np.float32)) and np.array_equal(spk[i], np.array(s, np.float32))):
            return False, f"sequence {i} diverges from the scalar simulator"
    return True, f"{n_sequences} sequences x {steps} steps bit-exact"


def check_op_gradients(seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    with tn.precision(np.float64):
        x = tn.Parameter(rng.standard_normal((2, 3, 5, 5)), "x")
        k = tn.Parameter(rng.standard_normal((4, 3, 3, 3)), "k")
        b = tn.Parameter(rng.standard_normal(4), "b")
        labels = rng.integers(0, 4, size=2)

        def conv_loss():
            y = tn.conv2d(x, k, b, stride=2, padding=1)
            return tn.softmax_cross_entropy(tn.reduce_sum(tn.reduce_sum(y, axis=3), axis=2), labels)

        worst = max(worst, *check_gradients(conv_loss, [x, k, b]).values())

        g = tn.Parameter(rng.uniform(0.5, 1.5, 3), "gamma")
        beta = tn.Parameter(rng.standard_normal(3), "beta")
        z = tn.Parameter(rng.standard_normal((4, 3, 2, 2)), "z")
        w = rng.standard_normal((4, 3, 2, 2))

        def bn_loss():
            rm, rv = np.zeros(3), np.ones(3)
            y = tn.batch_norm(z, g, beta, rm, rv, training=True)
            return tn.reduce_sum(tn.mul(tn.exp(tn.scale(y, 0.3)), tn.Tensor(w)))

        worst = max(worst, *check_gradients(bn_loss, [z, g, beta]).values())
    return worst < 1e-3, f"max relative error {worst:.2e}"


def tiny_spiking_mlp(kind=NeuronKind.TRAINABLE_TERNARY, timesteps: int = 2) -> NetworkSpec:
    """Two weighted layers around one 8-neuron spiking layer."""
    return NetworkSpec(
        (4,),
        [
            LayerSpec("linear", "fc1", units=8),
            LayerSpec("neuron", "lif", neuron=LIFConfig(kind)),
            LayerSpec("linear", "fc2", units=3),
        ],
        timesteps,
    )


def surrogate_gradient_errors(seed: int = 0, kind=NeuronKind.TRAINABLE_TERNARY, eps: float = 1e-6) -> dict:
    """Tape vs finite differences on the relaxed (ramp-spike) forward pass.

    The detached reset factor is piecewise constant in the parameters, so the
    relaxed loss jumps wherever a membrane crosses a threshold; ``eps`` must
    stay small enough that no difference quotient straddles such a jump.
    """
    rng = np.random.default_rng(seed)
    spec = tiny_spiking_mlp(kind)
    with tn.precision(np.float64):
        params, _ = init_params(spec, seed)
        params = {k: tn.Parameter(v.data.astype(np.float64) * 1.5, k) for k, v in params.items()}
        if "lif.amplitude" in params:
            params["lif.amplitude"].data[...] = 0.8
        x = rng.standard_normal((6, 4))
        y = rng.integers(0, 3, size=6)
        net = Network(spec, params)

        def loss():
            logits, _ = net(x, relaxed=True)
            return tn.softmax_cross_entropy(logits, y)

        return check_gradients(loss, params.values(), eps)


def check_surrogate_gradients():
    errs = surrogate_gradient_errors()
    worst = max(errs.values())
    return worst < 1e-2, f"max relative error {worst:.2e} over {sorted(errs)}"


def check_table4():
    binary = estimate_from_counts(3.54e6, 71.20e6, 0.11e6).total
    ternary = estimate_from_counts(3.54e6, 79.21e6, 0.23e6).total
    overhead = (ternary - binary) / binary * 100
    ok = (
        abs(binary - 50.14e-6) / 50.14e-6 < 0.005
        and abs(ternary - 51.20e-6) / 51.20e-6 < 0.005
        and abs(overhead - 2.11) < 0.1
    )
    return ok, f"binary {binary * 1e6:.3f} uJ, ternary {ternary * 1e6:.3f} uJ, overhead {overhead:.2f}%"


def check_sop_consistency():
    a_bin = implied_ann_additions(71.20e6, 0.1642, 2)
    a_ter = implied_ann_additions(79.21e6, 0.1827, 2)
    rel = abs(a_bin - a_ter) / a_bin
    return rel < 1e-3, f"A = {a_bin / 1e6:.2f}M vs {a_ter / 1e6:.2f}M ({rel * 100:.3f}%)"


def check_capacity(seed: int = 0):
    rng = np.random.default_rng(seed)
    for _ in range(100):
        shape = tuple(int(d) for d in rng.integers(1, 65, size=3))
        if abs(capacity(shape, 3) / capacity(shape, 2) - math.log2(3)) > 1e-12:
            return False, f"ternary/binary ratio wrong for {shape}"
        if capacity(shape, 2**32) / capacity(shape, 2) != 32:
            return False, f"real/binary ratio wrong for {shape}"
    return True, "100 random shapes"


def check_reparam(seed: int = 0):
    rng = np.random.default_rng(seed)
    spec = tiny_spiking_mlp(NeuronKind.TRAINABLE_TERNARY, timesteps=3)
    params, buffers = init_params(spec, seed)
    params["lif.amplitude"].data[...] = 0.37
    ckpt = Checkpoint.from_network(Network(spec, params, buffers))
    probe = (rng.standard_normal((64, 4)) * 2).astype(np.float32)
    _, report = convert(ckpt, probe)
    return True, f"max logit deviation {report.max_deviation:.1e}"


def check_idx_roundtrip(seed: int = 0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(4, 2, 2), dtype=np.uint8)
    labels = np.array([3, 1, 4, 1], dtype=np.uint8)
    with tempfile.TemporaryDirectory() as d:
        write_idx(os.path.join(d, "img"), images)
        write_idx(os.path.join(d, "lab"), labels)
        x = load_idx(os.path.join(d, "img"))
        y = load_idx(os.path.join(d, "lab"))
    ok = x.shape == (4, 1, 2, 2) and np.array_equal(x[:, 0] * 255, images) and list(y) == [3, 1, 4, 1]
    return ok, "4 images, 4 labels"


CHECKS = [
    ("neuron-trace-oracle", check_neuron_trace),
    ("op-gradients", check_op_gradients),
    ("surrogate-gradients", check_surrogate_gradients),
    ("table4-energy", check_table4),
    ("sop-consistency", check_sop_consistency),
    ("capacity-ratios", check_capacity),
    ("reparam-equivalence", check_reparam),
    ("idx-roundtrip", check_idx_roundtrip),
]


def run(out=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}\t{name}\t{time.perf_counter() - start:.2f}s\t{detail}")
    return all_ok
