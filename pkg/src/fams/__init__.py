"""Fair and informative learning across many subgroups.

Submodules are loaded on first attribute access, so importing a light module
(for example the fairness metrics) does not pull in the training code.
"""
from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "SeededRng": "numerics",
    "MlpTopology": "stochastic_net",
    "GaussianWeightDist": "stochastic_net",
    "init_dist": "stochastic_net",
    "kl_divergence": "stochastic_net",
    "predict_mc": "stochastic_net",
    "SubgroupDataset": "data",
    "SyntheticSpec": "data",
    "generate_synthetic": "data",
    "load_tabular_splits": "data",
    "adult_schema": "data",
    "ScoredDataset": "fairness_metrics",
    "sufficiency_gap": "fairness_metrics",
    "dp_gap": "fairness_metrics",
    "eo_gap": "fairness_metrics",
    "BilevelConfig": "trainers",
    "train": "trainers",
    "train_fams": "trainers",
    "BoundReport": "bounds",
    "check_theorem1": "bounds",
    "theorem2_bound": "bounds",
    "lambda_sweep": "bounds",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
