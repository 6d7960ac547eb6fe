"""Surrogate-gradient BPTT training, evaluation and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import tensor as tn
from .data import DatasetHandle, Split
from .errors import ConfigurationError, FormatError, TrainingDiverged
from .network import Network, NetworkSpec, forward, init_params
from .tensor import Parameter

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    seed: int = 0
    optimizer: str = "sgd"
    lr_schedule: str = "cosine"
    grad_clip: float = 5.0
    val_fraction: float = 0.1
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.optimizer = self.optimizer.lower().replace("sgd-momentum", "sgd")
        self.lr_schedule = self.lr_schedule.lower()
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}; choose from {SCHEDULES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("learning_rate and weight_decay must be >= 0, momentum in [0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizers


def _decays(p: Parameter) -> bool:
    # Decaying the spike amplitude would bias spikes toward zero.
    return not p.name.endswith(".amplitude")


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            g = p.grad + self.weight_decay * p.data if _decays(p) else p.grad
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.data = (p.data - np.float32(lr) * v).astype(p.data.dtype)


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p in self.params:
            g = p.grad + self.weight_decay * p.data if _decays(p) else p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.data.dtype)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(params, weight_decay=cfg.weight_decay)
    return SGD(params, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 0:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1 + math.cos(math.pi * min(step, total) / total))


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if max_norm and total > max_norm:
        scale = np.float32(max_norm / (total + 1e-12))
        for p in params:
            p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict
    buffers: dict = field(default_factory=dict)
    epoch: int = 0
    history: list = field(default_factory=list)
    train_config: Optional[dict] = None
    notes: dict = field(default_factory=dict)

    def network(self) -> Network:
        """Materialize an independent :class:`Network` (arrays are copied)."""
        params = {k: Parameter(np.array(v, copy=True), k) for k, v in self.params.items()}
        buffers = {k: np.array(v, dtype=np.float32, copy=True) for k, v in self.buffers.items()}
        return Network(self.spec, params, buffers)

    @classmethod
    def from_network(cls, net: Network, **kw) -> "Checkpoint":
        return cls(
            net.spec,
            {k: p.data.copy() for k, p in net.params.items()},
            {k: b.copy() for k, b in net.buffers.items()},
            **kw,
        )

    def save(self, path) -> None:
        """Zip archive: ``manifest.json`` plus one ``TSPK`` file per tensor."""
        manifest = {
            "format": "ternspike-checkpoint",
            "version": 1,
            "spec": self.spec.to_dict(),
            "epoch": self.epoch,
            "history": self.history,
            "train_config": self.train_config,
            "notes": self.notes,
            "params": sorted(self.params),
            "buffers": sorted(self.buffers),
        }
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as z:
            z.writestr("manifest.json", json.dumps(manifest, indent=2))
            for group, tensors in (("params", self.params), ("buffers", self.buffers)):
                for name, arr in tensors.items():
                    z.writestr(f"{group}/{name}.tspk", tn.tensor_to_bytes(np.asarray(arr, dtype=np.float32)))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            z = zipfile.ZipFile(path)
        except zipfile.BadZipFile:
            raise FormatError(f"{path} is not a checkpoint archive") from None
        with z:
            manifest = json.loads(z.read("manifest.json"))
            if manifest.get("format") != "ternspike-checkpoint":
                raise FormatError(f"{path}: unrecognized manifest format {manifest.get('format')!r}")
            params = {n: tn.tensor_from_bytes(z.read(f"params/{n}.tspk")) for n in manifest["params"]}
            buffers = {n: tn.tensor_from_bytes(z.read(f"buffers/{n}.tspk")) for n in manifest["buffers"]}
        return cls(
            NetworkSpec.from_dict(manifest["spec"]),
            params,
            buffers,
            manifest["epoch"],
            manifest["history"],
            manifest.get("train_config"),
            manifest.get("notes", {}),
        )


# ---------------------------------------------------------------------------
# evaluation


def _check_data(spec: NetworkSpec, images: np.ndarray) -> None:
    if tuple(images.shape[1:]) != spec.input_shape:
        raise ConfigurationError(f"data shape {images.shape[1:]} does not match network input {spec.input_shape}")


def evaluate_network(net: Network, images, labels, batch_size: int = 256) -> dict:
    """Top-1 accuracy, mean loss and firing sparsity of ``net`` on a dataset.

    Sparsity counts every nonzero spike (both signs) over all neuron outputs.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    _check_data(net.spec, images)
    correct, loss_sum = 0, 0.0
    fired, total = {}, {}
    with tn.no_grad():
        for i in range(0, len(labels), batch_size):
            xb, yb = images[i : i + batch_size], labels[i : i + batch_size]
            logits, rec = net(xb, record=True)
            loss_sum += tn.softmax_cross_entropy(logits, yb).item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            for name, trace in rec.layers.items():
                fired[name] = fired.get(name, 0) + int(np.count_nonzero(trace.base))
                total[name] = total.get(name, 0) + trace.base.size
    n = max(len(labels), 1)
    sparsity = {k: fired[k] / total[k] for k in fired}
    return {
        "accuracy": correct / n,
        "loss": loss_sum / n,
        "sparsity": sparsity,
        "mean_sparsity": (sum(fired.values()) / sum(total.values())) if total else 0.0,
    }


def evaluate(checkpoint: Checkpoint, images, labels, batch_size: int = 256) -> dict:
    return evaluate_network(checkpoint.network(), images, labels, batch_size)


# ---------------------------------------------------------------------------
# training


def _locate_nonfinite(net: Network, xb) -> str:
    for name, p in net.params.items():
        if not np.all(np.isfinite(p.data)):
            return name.split(".")[0]
    with tn.no_grad(), np.errstate(all="ignore"):
        logits, rec = net(xb, record=True)
    for name, trace in rec.layers.items():
        if not np.all(np.isfinite(trace.membrane)):
            return name
    return net.spec.layers[-1].name


def _split_validation(train: Split, fraction: float, rng) -> tuple:
    if fraction <= 0:
        return train, None
    order = rng.permutation(len(train))
    n_val = max(1, int(round(fraction * len(train))))
    val, keep = order[:n_val], np.sort(order[n_val:])
    return Split(train.images[keep], train.labels[keep]), Split(train.images[val], train.labels[val])


def train(
    spec: NetworkSpec,
    data,
    cfg: TrainConfig,
    callback: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """Train ``spec`` on ``data`` (a :class:`DatasetHandle` or a train :class:`Split`).

    Returns the checkpoint with the best validation accuracy, or the final
    epoch when ``cfg.val_fraction`` is 0.
    """
    spec.shapes()
    train_split = data.train if isinstance(data, DatasetHandle) else data
    _check_data(spec, train_split.images)
    rng = np.random.default_rng(cfg.seed)
    train_split, val_split = _split_validation(train_split, cfg.val_fraction, rng)

    net = Network(spec, *init_params(spec, cfg.seed))
    params = net.parameters()
    opt = make_optimizer(params, cfg)
    steps_per_epoch = math.ceil(len(train_split) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    history, best, best_acc = [], None, -1.0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_split))
        loss_sum, correct, seen = 0.0, 0, 0
        for i in range(0, len(order), cfg.batch_size):
            if step >= total_steps:
                break
            idx = order[i : i + cfg.batch_size]
            xb, yb = train_split.images[idx], train_split.labels[idx]
            for p in params:
                p.zero_grad()
            with tn.GradTape() as tape:
                logits, _ = net(xb, train=True)
                loss = tn.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, _locate_nonfinite(net, xb), step)
            tn.backward(tape, loss)
            # NaN membranes never cross a threshold, so a finite loss can hide them
            if not np.isfinite(clip_grad_norm(params, cfg.grad_clip)):
                raise TrainingDiverged(epoch, _locate_nonfinite(net, xb), step)
            lr = learning_rate(cfg, step, total_steps)
            if lr > 0:
                opt.step(lr)
            step += 1
            loss_sum += loss.item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(yb)

        entry = {
            "epoch": epoch,
            "steps": step,
            "train_loss": loss_sum / max(seen, 1),
            "train_accuracy": correct / max(seen, 1),
        }
        if val_split is not None:
            m = evaluate_network(net, val_split.images, val_split.labels)
            entry.update(val_accuracy=m["accuracy"], val_loss=m["loss"], val_sparsity=m["mean_sparsity"])
        history.append(entry)
        logger.info("epoch %d: %s", epoch, entry)
        if callback:
            callback(entry)
        score = entry.get("val_accuracy", epoch)
        if val_split is None or score > best_acc:
            best_acc = score
            best = Checkpoint.from_network(net, epoch=epoch, train_config=cfg.to_dict())
        if step >= total_steps:
            break

    best.history = history
    return best
