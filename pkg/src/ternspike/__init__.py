"""Ternary-spike spiking neural networks on a small numpy autodiff core."""

from .errors import (
    ConfigurationError,
    ContractError,
    ConversionError,
    DimensionError,
    FormatError,
    TernSpikeError,
    TrainingDiverged,
    VerificationError,
)
from .neurons import LIFConfig, NeuronKind
from .network import LayerSpec, Network, NetworkSpec, build_small_cnn
from .training import Checkpoint, TrainConfig, evaluate, train
from .reparam import ConversionReport, convert, fold_amplitudes, verify_equivalence
from .analysis import capacity, entropy
from .energy import CostTable, EnergyReport, estimate, estimate_from_counts
from .config import RunConfig

__version__ = "0.1.0"
