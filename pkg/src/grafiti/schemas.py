"""JSON schemas of the machine-readable reports (draft 2020-12)."""

from __future__ import annotations

import jsonschema

from .training import REPORT_SCHEMA_VERSION

METRICS_SCHEMA_VERSION = "1.0"

_number = {"type": "number"}
_mean_std = {
    "type": "object",
    "required": ["mean", "std"],
    "properties": {"mean": _number, "std": {"type": "number", "minimum": 0}},
}

METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "grafiti evaluation metrics",
    "type": "object",
    "required": ["schema_version", "label", "split", "folds", "mse_mean", "mse_std", "baselines"],
    "properties": {
        "schema_version": {"const": METRICS_SCHEMA_VERSION},
        "label": {"type": "string"},
        "split": {"enum": ["train", "validation", "test", "all"]},
        "folds": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["fold", "checkpoint", "instances", "mse"],
                "properties": {
                    "fold": {"type": ["integer", "null"]},
                    "checkpoint": {"type": "string"},
                    "instances": {"type": "integer", "minimum": 1},
                    "mse": {"type": "number", "minimum": 0},
                    "carry_forward_mse": {"type": "number", "minimum": 0},
                    "channel_mean_mse": {"type": "number", "minimum": 0},
                },
            },
        },
        "mse_mean": {"type": "number", "minimum": 0},
        "mse_std": {"type": "number", "minimum": 0},
        "baselines": {
            "type": "object",
            "properties": {"carry_forward": _mean_std, "channel_mean": _mean_std},
        },
    },
}

_epoch = {
    "type": "object",
    "required": ["epoch", "train_mse", "val_mse", "lr", "seconds"],
    "properties": {
        "epoch": {"type": "integer", "minimum": 1},
        "train_mse": _number,
        "val_mse": _number,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "seconds": {"type": "number", "minimum": 0},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "grafiti training report",
    "type": "object",
    "required": ["schema_version", "label", "hyperparameters", "folds", "test_mse_mean", "test_mse_std", "train_config"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "label": {"enum": ["GraFITi", "GraFITi\\T"]},
        "hyperparameters": {
            "type": "object",
            "required": ["layers", "heads", "hidden"],
            "properties": {k: {"type": "integer", "minimum": 1} for k in ("layers", "heads", "hidden")},
        },
        "folds": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["fold", "train_mse", "validation_mse", "test_mse", "epochs", "best_epoch", "seconds_per_batch"],
                "properties": {"epochs": {"type": "array", "items": _epoch}},
            },
        },
        "test_mse_mean": _number,
        "test_mse_std": {"type": "number", "minimum": 0},
        "train_config": {"type": "object"},
        "search": {"type": "array"},
        "baselines": {"type": "object"},
    },
}


def validate(document: dict, schema: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``document`` does not conform."""
    jsonschema.validate(document, schema)
