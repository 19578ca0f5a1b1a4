"""Experiment configuration: YAML documents checked against a JSON schema."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema
import yaml

from .edge_encoder import EDGE_MODES
from .search_space import MODALITIES
from .vertex_encoder import VARIANTS


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


def _obj(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


_INT = {"type": "integer"}
_POS = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_PNUM = {"type": "number", "exclusiveMinimum": 0}
_BOOL = {"type": "boolean"}

SCHEMA = _obj(
    {
        "seed": _INT,
        "out": {"type": "string"},
        "workers": _POS,
        "dataset": _obj(
            {
                "kind": {"enum": ["synthetic", "files"]},
                "root": {"type": "string"},
                "n_subjects": _POS,
                "frames": _POS,
                "delay": {"type": "integer", "minimum": 0, "maximum": 25},
                "noise": {"type": "number", "minimum": 0},
                "world_seed": _INT,
                "with_categories": _BOOL,
            }
        ),
        "preprocess": _obj({"stride": _POS, "frame_rate": _PNUM}),
        "network": _obj(
            {
                "widths": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3},
                "n_nodes": _POS,
                "n_reg": _POS,
                "param_mode": {"enum": ["ip", "ps"]},
                "modality": {"enum": list(MODALITIES)},
                "lstm_layers": _POS,
                "face_scale": _PNUM,
            }
        ),
        "search": _obj(
            {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": _POS,
                "lr_alpha": _PNUM,
                "lr_weight": _PNUM,
                "epsilon": _PNUM,
                "depth_search": _BOOL,
                "eval_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "mask_rule": {"enum": ["exclusive", "inclusive"]},
                "tol": _NUM,
                "patience": _POS,
            }
        ),
        "graph": _obj(
            {
                "alignment": {"enum": ["none", "block_maximization", "block_distillation"]},
                "target_depth": _POS,
                "distill_mode": {"enum": ["distill", "fixed_depth_search"]},
                "distill_epochs": {"type": "integer", "minimum": 0},
            }
        ),
        "vertex": _obj({"variant": {"enum": list(VARIANTS)}, "lw_mode": {"enum": ["top5", "hist"]}}),
        "edge": _obj(
            {
                "mode": {"enum": list(EDGE_MODES)},
                "heads": _POS,
                "kernel_extent": _POS,
                "channels": _POS,
            }
        ),
        "train": _obj(
            {
                "epochs": {"type": "integer", "minimum": 0},
                "lr": _PNUM,
                "weight_decay": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 0},
                "head_hidden": _POS,
                "dropout": {"type": "number", "minimum": 0, "maximum": 1},
                "standardize": _BOOL,
            }
        ),
        "cv": _obj({"folds": {"oneOf": [{"type": "integer", "minimum": 2}, {"const": "loso"}]}, "seed": _INT}),
    }
)

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "workers": 1,
    "dataset": {
        "kind": "synthetic",
        "root": "",
        "n_subjects": 4,
        "frames": 600,
        "delay": 7,
        "noise": 0.0,
        "world_seed": 1234,
        "with_categories": False,
    },
    "preprocess": {"stride": 40, "frame_rate": 25.0},
    "network": {
        "widths": [64, 128, 256],
        "n_nodes": 4,
        "n_reg": 3,
        "param_mode": "ip",
        "modality": "audio_face",
        "lstm_layers": 3,
        "face_scale": 0.02,
    },
    "search": {
        "epochs": 300,
        "batch_size": 60,
        "lr_alpha": 0.05,
        "lr_weight": 0.001,
        "epsilon": 0.01,
        "depth_search": True,
        "eval_fraction": 0.2,
        "mask_rule": "exclusive",
        "tol": 1e-4,
        "patience": 10,
    },
    "graph": {"alignment": "block_maximization", "target_depth": 2, "distill_mode": "distill", "distill_epochs": 300},
    "vertex": {"variant": "oplw_ven", "lw_mode": "top5"},
    "edge": {"mode": "multi_ern", "heads": 2, "kernel_extent": 3, "channels": 4},
    "train": {
        "epochs": 500,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "batch_size": 0,
        "head_hidden": 64,
        "dropout": 0.3,
        "standardize": True,
    },
    "cv": {"folds": 5, "seed": 0},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _describe(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "enum":
        return f"{path}: {err.instance!r} is not allowed; expected one of {err.validator_value}"
    if err.validator == "additionalProperties":
        return f"{path}: {err.message}"
    return f"{path}: {err.message}"


def check_config(doc: dict) -> dict:
    """Validate a (partial) config document and fill in defaults."""
    if not isinstance(doc, dict):
        raise ConfigError(["<root>: configuration must be a mapping"])
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        raise ConfigError([_describe(e) for e in errors])
    cfg = _merge(DEFAULTS, doc)
    w = cfg["network"]["widths"]
    extra = []
    if any(b % a for a, b in zip(w, w[1:])):
        extra.append(f"network.widths: each width must divide the next, got {w}")
    if cfg["dataset"]["kind"] == "files" and not cfg["dataset"]["root"]:
        extra.append("dataset.root: required when dataset.kind is 'files'")
    if cfg["edge"]["channels"] % cfg["edge"]["heads"]:
        extra.append("edge.channels: must be divisible by edge.heads")
    if extra:
        raise ConfigError(extra)
    return cfg


def validate_config(path: str | Path | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML: {exc}"]) from exc
    return check_config(doc)


def config_hash(cfg: dict, sections=None) -> str:
    part = cfg if sections is None else {k: cfg[k] for k in sections}
    return hashlib.sha256(json.dumps(part, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
