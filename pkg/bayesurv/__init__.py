"""
bayesurv: Bayesian parametric survival models.

Fit proportional-hazards or accelerated-failure-time models with a flexible
baseline hazard, time-varying effects and cluster random effects; sample the
posterior with NUTS; predict survival curves; compare models by WAIC or LOO.
"""
from .data import Dataset, DatasetSchema, load_dataset
from .formula import parse_formula
from .model import ModelSpec, SplineOptions, build_model_spec
from .sampler import SamplerConfig, map_estimate, sample

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DatasetSchema",
    "ModelSpec",
    "SamplerConfig",
    "SplineOptions",
    "__version__",
    "build_model_spec",
    "load_dataset",
    "map_estimate",
    "parse_formula",
    "sample",
]
