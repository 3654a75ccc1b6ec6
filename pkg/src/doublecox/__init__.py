"""Double-Cox shared gamma-frailty survival models.

Weibull and Gompertz baselines whose scale and shape both carry Cox-type
covariate effects, a cluster-level gamma frailty integrated out in closed
form, maximum-likelihood fitting, standard-error and profile-likelihood
intervals, synthetic data with calibrated censoring, and a Monte-Carlo
study driver.
"""

from importlib import resources
from pathlib import Path

from .estimation import ConditioningError, FitOptions, FitResult, InvalidDataError, fit
from .intervals import Interval, covers, profile_interval, se_interval
from .likelihood import Dataset, MarginalLikelihood, marginal_loglik
from .model import DomainError, Family, ModelSpec, ParameterVector, SubjectRecord
from .simulation import (
    CalibrationError,
    CensoringPlan,
    SimConfig,
    calibrate_theta,
    generate_dataset,
    read_dataset_csv,
    write_dataset_csv,
)

__version__ = "0.1.0"


def example_dataset_path() -> Path:
    """Path of the bundled Weibull example (300 subjects, 30 clusters, sigma2 = 0.5)."""
    return Path(str(resources.files(__package__) / "data" / "example_weibull.csv"))


__all__ = [
    "CalibrationError",
    "CensoringPlan",
    "ConditioningError",
    "Dataset",
    "DomainError",
    "Family",
    "FitOptions",
    "FitResult",
    "Interval",
    "InvalidDataError",
    "MarginalLikelihood",
    "ModelSpec",
    "ParameterVector",
    "SimConfig",
    "SubjectRecord",
    "calibrate_theta",
    "covers",
    "example_dataset_path",
    "fit",
    "generate_dataset",
    "marginal_loglik",
    "profile_interval",
    "read_dataset_csv",
    "se_interval",
    "write_dataset_csv",
]
