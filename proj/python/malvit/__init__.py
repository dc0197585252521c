"""Multi-attribute vision transformer robustness toolkit (C++ core)."""

from ._core import (
    MalvitError,
    Model,
    __version__,
    attack,
    balanced_accuracy,
    evaluate_clean,
    evaluate_robust,
    load_dataset,
    read_attribute_table,
    run_cli,
    synth,
)

__all__ = [
    "MalvitError",
    "Model",
    "__version__",
    "attack",
    "balanced_accuracy",
    "evaluate_clean",
    "evaluate_robust",
    "load_dataset",
    "read_attribute_table",
    "run_cli",
    "synth",
]
