"""JSON schema for ``summary.json``."""

from __future__ import annotations

import jsonschema

from .errors import ParseError

_num_or_null = {"type": ["number", "null"]}

_stat = {
    "type": "object",
    "required": ["u_statistic", "p_value", "a12", "significant", "effect_label", "direction"],
    "properties": {
        "u_statistic": {"type": "number", "minimum": 0},
        "p_value": {"type": "number", "minimum": 0, "maximum": 1},
        "a12": {"type": "number", "minimum": 0, "maximum": 1},
        "significant": {"type": "boolean"},
        "effect_label": {"enum": ["NEGLIGIBLE", "SMALL", "MEDIUM", "LARGE"]},
        "direction": {"enum": ["up", "down", "none"]},
    },
    "additionalProperties": False,
}

_cell = {
    "type": "object",
    "required": ["runs", "failed", "median_target_huber", "median_convergence_time_s", "median_uq_wall_time_s"],
    "properties": {
        "runs": {"type": "integer", "minimum": 1},
        "failed": {"type": "integer", "minimum": 0},
        "median_target_huber": _num_or_null,
        "median_convergence_time_s": _num_or_null,
        "median_uq_wall_time_s": _num_or_null,
    },
    "additionalProperties": False,
}

_uq_row = {
    "type": "object",
    "required": ["evolution", "huber", "precision_at", "precision_pairs", "time_s"],
    "properties": {
        "evolution": {"type": "string"},
        "huber": {"type": "object", "additionalProperties": _num_or_null},
        "precision_at": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "precision_pairs": {"type": "object"},
        "time_s": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
    },
}

SUMMARY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ppt summary",
    "type": "object",
    "required": ["format", "cells", "comparisons", "timing", "uq"],
    "properties": {
        "format": {"const": "ppt-summary/1"},
        # evolution -> "VARIANT/uq_method" -> cell
        "cells": {"type": "object", "minProperties": 1,
                  "additionalProperties": {"type": "object", "minProperties": 1, "additionalProperties": _cell}},
        # evolution -> variant -> test of variant vs PPT
        "comparisons": {"type": "object", "additionalProperties": {"type": "object", "additionalProperties": _stat}},
        "timing": {
            "type": "object",
            "required": ["pretraining", "tuning"],
            "properties": {
                "pretraining": {"type": "object"},
                "tuning": {"type": "object", "additionalProperties": {
                    "type": "object",
                    "required": ["prompt_tuning_s", "fine_tuning_s"],
                    "properties": {"prompt_tuning_s": _num_or_null, "fine_tuning_s": _num_or_null,
                                   "fine_vs_prompt": _stat},
                }},
            },
        },
        "uq": {"type": "array", "items": _uq_row},
    },
    "additionalProperties": False,
}


def validate_summary(summary: dict) -> None:
    try:
        jsonschema.validate(summary, SUMMARY_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "summary"
        raise ParseError(f"summary.json invalid at {where}: {exc.message}") from None
