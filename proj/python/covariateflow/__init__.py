"""Covariate-shift detection with a conditional normalizing flow.

The heavy lifting lives in the compiled `_core` extension; this package
re-exports its public surface.
"""

from covariateflow._core import (
    ConfigError,
    DataError,
    FlowModel,
    NormalizationStats,
    NumericError,
    apply_corruption,
    auroc,
    compute_stats,
    corruption_kinds,
    fpr_at_tpr,
    load_checkpoint,
    nsd_value,
    read_netpbm,
    save_checkpoint,
    score_dataset,
    severity_parameter,
    synth_images,
    train,
    write_netpbm,
)

__all__ = [
    "ConfigError",
    "DataError",
    "FlowModel",
    "NormalizationStats",
    "NumericError",
    "apply_corruption",
    "auroc",
    "compute_stats",
    "corruption_kinds",
    "fpr_at_tpr",
    "load_checkpoint",
    "nsd_value",
    "read_netpbm",
    "save_checkpoint",
    "score_dataset",
    "severity_parameter",
    "synth_images",
    "train",
    "write_netpbm",
]

__version__ = "0.1.0"
