"""Joint multi-state Cox regression and patient-similarity learning."""
from .dataset import (
    MultiStateDataset,
    PreprocessReport,
    TransitionSpec,
    correlation_filter,
    load_dataset,
    preprocess,
    read_dataset,
    standardize,
    write_dataset,
)
from .errors import TrajclustError
from .optimizer import FitResult, GridSearchResult, Hyperparams, baseline_fit, fit, grid_search, objective
from .simulation import SimulationConfig, SimulatedCohort, generate, generate_companion

__version__ = "0.1.0"
