"""Counterfactually fair prediction through symmetric representations.

The package splits into an exact structural-model engine (:mod:`cfrep.scm`),
learned generative stand-ins (:mod:`cfrep.genmodel`), the representation
construction itself (:mod:`cfrep.representation`), downstream training
procedures (:mod:`cfrep.methods`), metrics, data handling, and a config-driven
experiment runner with a CLI.
"""

from .data import Dataset, Schema, generate_synthetic, load_csv, schema_from_file, split, standardize
from .experiment import ExperimentConfig, load_config, run_experiment, verify_config
from .genmodel import Cvae, Dcevae, VaeBackend, VaeTrainConfig, train_cvae, train_dcevae
from .methods import (FitConfig, LinearModel, LogisticModel, TrainMethod,
                      fit, train_method)
from .metrics import (DensityData, MetricsReport, accuracy, density_data,
                      group_total_effect, mse, total_effect)
from .representation import (PathSpec, Representation, SymmetricFn, apply_symmetric,
                             cf_representation, pcf_representation,
                             representation_matrix)
from .scm import Scm, ScmBackend, law_school_scm, scm_from_file, synthetic_scm

__version__ = "0.1.0"

__all__ = [
    "Dataset", "Schema", "generate_synthetic", "load_csv", "schema_from_file",
    "split", "standardize",
    "ExperimentConfig", "load_config", "run_experiment", "verify_config",
    "Cvae", "Dcevae", "VaeBackend", "VaeTrainConfig", "train_cvae", "train_dcevae",
    "FitConfig", "LinearModel", "LogisticModel", "TrainMethod", "fit", "train_method",
    "DensityData", "MetricsReport", "accuracy", "density_data",
    "group_total_effect", "mse", "total_effect",
    "PathSpec", "Representation", "SymmetricFn", "apply_symmetric",
    "cf_representation", "pcf_representation", "representation_matrix",
    "Scm", "ScmBackend", "law_school_scm", "scm_from_file", "synthetic_scm",
    "__version__",
]
