"""Run configuration: one JSON document, overridable field by field from the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .errors import ConfigurationError
from .network import NetworkSpec, build_small_cnn
from .neurons import NeuronKind
from .training import TrainConfig


@dataclass
class RunConfig:
    """Everything needed to reproduce one training run.

    ``network`` (an explicit spec document) takes precedence over ``preset``.
    """

    preset: str = "cnn-mnist"
    neuron: str = "ternary"
    timesteps: int = 2
    network: Optional[dict] = None
    dataset: str = "mnist"
    data_dir: Optional[str] = None
    train_limit: Optional[int] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint: str = "run.ckpt"
    metrics: Optional[str] = "metrics.tsv"

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.neuron = NeuronKind.parse(self.neuron).value
        if self.timesteps < 1:
            raise ConfigurationError("timesteps must be >= 1")

    @property
    def seed(self) -> int:
        return self.train.seed

    def network_spec(self, input_shape=(1, 28, 28), num_classes: int = 10) -> NetworkSpec:
        if self.network is not None:
            spec = NetworkSpec.from_dict(self.network)
            return spec.with_neuron_kind(self.neuron).with_timesteps(self.timesteps)
        return build_small_cnn(self.preset, self.neuron, self.timesteps, tuple(input_shape), num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config is not valid JSON: {e}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_json(f.read())

    def override(self, **values) -> "RunConfig":
        """Return a copy with non-``None`` values replaced; ``train.*`` keys go to the training block."""
        top = self.to_dict()
        for key, value in values.items():
            if value is None:
                continue
            if key.startswith("train."):
                sub = key[len("train.") :]
                if sub not in top["train"]:
                    raise ConfigurationError(f"unknown training field {sub!r}")
                top["train"][sub] = value
            elif key in top:
                top[key] = value
            else:
                raise ConfigurationError(f"unknown config key {key!r}")
        return RunConfig.from_dict(top)
