"""Offline imitation from observation-only success examples.

The package trains a positive-unlabeled discriminator on task-specific
states, turns its scores into discounted trajectory weights, and fits a
weighted behavior-cloning policy. Plain cloning and an occupancy-matching
dual baseline are included for comparison, together with synthetic
environments, dataset corruption tools, and a CSV/SVG reporting harness.
"""

from twbc.data import (
    Dataset,
    DatasetFormatError,
    NormStats,
    RunConfig,
    Trajectory,
    load_dataset,
    minibatch_iter,
    new_dataset,
    normalize_state,
    save_dataset,
)

__all__ = [
    "Dataset",
    "DatasetFormatError",
    "NormStats",
    "RunConfig",
    "Trajectory",
    "load_dataset",
    "minibatch_iter",
    "new_dataset",
    "normalize_state",
    "save_dataset",
]

__version__ = "0.1.0"
