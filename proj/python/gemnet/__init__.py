"""Python bindings for gemnet."""

import json

from ._gemnet import (
    GemnetError,
    Model,
    generate,
    oracle_accuracy,
    resample_ftir,
    run_cli,
    select_threshold,
    validate_xrf,
)

__all__ = [
    "GemnetError",
    "Model",
    "generate",
    "generate_records",
    "oracle_accuracy",
    "resample_ftir",
    "run_cli",
    "select_threshold",
    "validate_xrf",
]


def generate_records(spec, n, seed=None):
    """Synthetic corpus as a list of dicts."""
    return [json.loads(line) for line in generate(spec, n, seed)]
