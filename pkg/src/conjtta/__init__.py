"""Test-time adaptation with conjugate pseudo-labels.

Subpackages are small and importable on their own; the names below are the
ones most scripts need.
"""

from .errors import (
    ConfigError,
    ConjTTAError,
    ContractError,
    DimensionError,
    DivergenceError,
    DomainError,
    NumericalError,
    ParseError,
)
from .losses import LossSpec, conjugate_loss, conjugate_pseudolabel, fenchel_gap, make_loss, supervised_loss
from .models import Model, linear_model, load_model, mlp_model, save_model, train_source
from .datagen import GaussianShiftSpec, make_benchmark
from .tta import TTAConfig, adapt_online, grid_search, make_stream, tta_step
from .meta import MetaConfig, MetaLossNet, meta_train
from .estimators import SourceClassifier, TestTimeAdapter

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConjTTAError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "DomainError",
    "NumericalError",
    "ParseError",
    "LossSpec",
    "conjugate_loss",
    "conjugate_pseudolabel",
    "fenchel_gap",
    "make_loss",
    "supervised_loss",
    "Model",
    "linear_model",
    "load_model",
    "mlp_model",
    "save_model",
    "train_source",
    "GaussianShiftSpec",
    "make_benchmark",
    "TTAConfig",
    "adapt_online",
    "grid_search",
    "make_stream",
    "tta_step",
    "MetaConfig",
    "MetaLossNet",
    "meta_train",
    "SourceClassifier",
    "TestTimeAdapter",
]
