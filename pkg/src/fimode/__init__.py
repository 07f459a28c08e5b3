"""fimode: zero-shot ODE vector-field inference from sparse, noisy series.

Pipeline: sample polynomial ODE systems, simulate and corrupt them, pretrain
an in-context neural operator against the known generators, then estimate
vector fields for new systems from their observations alone and score the
re-integrated trajectories.
"""

from .datagen import (
    DatasetRecord,
    GeneratorConfig,
    NormalizationTransform,
    ObservationSeries,
    ObservationSet,
    fit_normalization,
    generate_dataset,
    generate_record,
    read_dataset,
    write_dataset,
)
from .evaluation import EvalReport, evaluate_dataset, make_estimator, r2_accuracy, r2_score
from .fields import PolynomialVectorField, StatePoint, canonicalize, enumerate_monomials, eval_field
from .model import ContextEncoding, FieldOperator, ModelConfig, load_model, save_model, tokenize
from .solver import SolverConfig, TimeGrid, Trajectory, convergence_order, integrate
from .training import Checkpoint, TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ContextEncoding",
    "DatasetRecord",
    "EvalReport",
    "FieldOperator",
    "GeneratorConfig",
    "ModelConfig",
    "NormalizationTransform",
    "ObservationSeries",
    "ObservationSet",
    "PolynomialVectorField",
    "SolverConfig",
    "StatePoint",
    "TimeGrid",
    "TrainConfig",
    "Trajectory",
    "canonicalize",
    "convergence_order",
    "enumerate_monomials",
    "eval_field",
    "evaluate_dataset",
    "fit_normalization",
    "generate_dataset",
    "generate_record",
    "integrate",
    "load_model",
    "make_estimator",
    "r2_accuracy",
    "r2_score",
    "read_dataset",
    "save_model",
    "tokenize",
    "train_loop",
    "write_dataset",
]
