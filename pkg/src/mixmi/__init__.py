"""Mixture-based multiple imputation for multivariable clinical time
series.

Missing measurements are filled per (variable, time-slot) fiber by a
mixture of three predictors over patients: a cross-sectional linear
regression on the other variables, a temporal linear regression on the
same variable's other time slots, and a per-patient Gaussian-process
smoother. Mixing weights are learned by EM and individualized per
patient at inference time. Multiple chained passes average into the
final imputation.
"""

from .engine import ImputationConfig, WeightsReport, run
from .errors import (ConfigError, DataError, GpUntrainableError, MixmiError,
                     NumericalError, UntrainableFiberError)
from .tensor import (MeasurementTensor, StandardizationParams, TimeTensor,
                     destandardize, read_dense_csv, read_long_csv,
                     standardize, tensorize, write_dense_csv)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "GpUntrainableError", "ImputationConfig",
    "MeasurementTensor", "MixmiError", "NumericalError",
    "StandardizationParams", "TimeTensor", "UntrainableFiberError",
    "WeightsReport", "destandardize", "read_dense_csv", "read_long_csv",
    "run", "standardize", "tensorize", "write_dense_csv", "__version__",
]
