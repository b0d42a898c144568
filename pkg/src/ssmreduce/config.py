"""JSON training configs: schema, dotted overrides and presets."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .exceptions import ConfigError
from .train import ReductionPolicy, TrainConfig

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_NONNEG = {"type": "number", "minimum": 0}

ATTEMPTS_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "oneOf": [
        {"properties": {"kind": {"const": "equidistant_in_warmup"}, "k": _POS_INT},
         "additionalProperties": False},
        {"properties": {"kind": {"const": "fixed_interval"}, "every": _POS_INT, "start": _POS_INT},
         "required": ["every"], "additionalProperties": False},
        {"properties": {"kind": {"const": "windowed"}, "start": _NONNEG_INT, "end": _POS_INT, "k": _POS_INT},
         "required": ["start", "end"], "additionalProperties": False},
    ],
}

POLICY_SCHEMA = {
    "type": "object",
    "required": ["tau", "attempts", "frac-gate", "min-steps-between", "enabled"],
    "additionalProperties": False,
    "properties": {
        "tau": {"type": "number", "minimum": 0, "maximum": 1},
        "attempts": ATTEMPTS_SCHEMA,
        "frac-gate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "min-steps-between": _NONNEG_INT,
        "enabled": {"type": "boolean"},
    },
}

TASK_SCHEMA = {
    "type": "object",
    "required": ["name"],
    "properties": {
        "name": {"enum": ["teacher_lti", "delayed_copy", "mnist_seq"]},
        "paper-row": {"enum": ["mnist", "cifar10", "listops", "imdb", "aan", "pathfinder"]},
    },
}

SCHEMA = {
    "type": "object",
    "required": ["depth", "h", "n", "steps", "batch", "base-lr", "lr-factor", "weight-decay",
                 "dropout", "warmup-fraction", "seed", "task", "policy"],
    "additionalProperties": False,
    "properties": {
        "depth": _NONNEG_INT,
        "h": _POS_INT,
        "n": _POS_INT,
        "steps": _POS_INT,
        "batch": _POS_INT,
        "base-lr": {"type": "number", "exclusiveMinimum": 0},
        "lr-factor": {"type": "number", "exclusiveMinimum": 0},
        "weight-decay": _NONNEG,
        "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "warmup-fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": _NONNEG_INT,
        "task": TASK_SCHEMA,
        "policy": POLICY_SCHEMA,
        "lr-schedule": {"enum": ["warmup_cosine", "constant"]},
        "norm": {"enum": ["layer", "none"]},
        "activation": {"enum": ["gelu", "identity"]},
        "pooling": {"enum": ["mean", "last", "none"]},
        "r-min": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "r-max": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "max-phase": {"type": "number", "exclusiveMinimum": 0},
        "eval-every": _NONNEG_INT,
        "eval-batch": _POS_INT,
        "checkpoint-every": _NONNEG_INT,
        "snapshot-every": _NONNEG_INT,
        "track-every": _NONNEG_INT,
        "tracked-r": {"type": "array", "items": _POS_INT},
        "scan-mode": {"enum": ["scan", "sequential"]},
    },
}

# hyperparameter table rows: depth, h, n, steps, batch, lr-factor, weight-decay, dropout
PAPER_ROWS = {
    "cifar10": (6, 512, 384, 180_000, 50, 0.25, 0.05, 0.1),
    "listops": (6, 128, 256, 80_000, 32, 0.5, 0.05, 0.0),
    "imdb": (1, 256, 192, 50_000, 32, 0.1, 0.05, 0.1),
    "aan": (6, 128, 256, 100_000, 64, 0.5, 0.05, 0.1),
    "pathfinder": (6, 192, 256, 500_000, 64, 0.25, 0.05, 0.0),
    "mnist": (1, 8, 256, 200_000, 50, 1.0, 0.0, 0.1),
}


def _path(err: jsonschema.ValidationError):
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate(doc: dict):
    """Raise :class:`ConfigError` naming the first offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), e.message))
    if errors:
        e = errors[0]
        if e.validator == "oneOf" and e.context:
            e = min(e.context, key=lambda c: len(c.message))
            path = ".".join(["policy", "attempts"] + [str(p) for p in e.absolute_path])
            raise ConfigError(e.message, path)
        raise ConfigError(e.message, _path(e))


def parse_value(text: str):
    """Override values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides):
    """Apply ``key.sub=value`` overrides; snake_case keys are accepted."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", item)
        key, _, value = item.partition("=")
        parts = [p.strip().replace("_", "-") for p in key.split(".")]
        if parts and parts[0] == "task":
            # task parameters are passed through verbatim
            parts = ["task"] + [p.replace("-", "_") if p != "paper-row" else p for p in parts[1:]]
        node = doc
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = parse_value(value)
    return doc


def apply_paper_scale(doc: dict):
    """Replace the model and schedule with the original-scale hyperparameters."""
    task = doc.get("task", {})
    row = task.get("paper-row") or ("mnist" if task.get("name") == "mnist_seq" else None)
    if row is None:
        raise ConfigError("no original-scale hyperparameters for this task; set task.paper-row", "task.paper-row")
    depth, h, n, steps, batch, lr_factor, wd, dropout = PAPER_ROWS[row]
    doc = copy.deepcopy(doc)
    doc.update({"depth": depth, "h": h, "n": n, "steps": steps, "batch": batch,
                "lr-factor": lr_factor, "weight-decay": wd, "dropout": dropout,
                "norm": "layer", "activation": "gelu"})
    policy = doc.setdefault("policy", {})
    if row == "mnist":
        doc.update({"lr-schedule": "constant", "base-lr": 4e-4, "warmup-fraction": 0.0})
        policy["attempts"] = {"kind": "fixed_interval", "every": 10_000}
    else:
        doc.update({"lr-schedule": "warmup_cosine", "base-lr": 1e-3, "warmup-fraction": 0.1})
        policy["attempts"] = ({"kind": "windowed", "start": 1000, "end": 3000, "k": 2} if row == "imdb"
                              else {"kind": "equidistant_in_warmup", "k": 4})
    return doc


def load_document(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", str(path))
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}", str(path)) from exc


def to_train_config(doc: dict) -> TrainConfig:
    validate(doc)
    p = doc["policy"]
    policy = ReductionPolicy(tau=float(p["tau"]), attempts=dict(p["attempts"]), frac_gate=float(p["frac-gate"]),
                             min_steps_between=int(p["min-steps-between"]), enabled=bool(p["enabled"]))
    task = {k: v for k, v in doc["task"].items() if k != "paper-row"}
    extras = {k.replace("-", "_"): v for k, v in doc.items() if k not in SCHEMA["required"]}
    if "tracked_r" in extras:
        extras["tracked_r"] = tuple(extras["tracked_r"])
    return TrainConfig(depth=doc["depth"], H=doc["h"], n=doc["n"], steps=doc["steps"], batch=doc["batch"],
                       base_lr=float(doc["base-lr"]), lr_factor=float(doc["lr-factor"]),
                       weight_decay=float(doc["weight-decay"]), dropout=float(doc["dropout"]),
                       warmup_fraction=float(doc["warmup-fraction"]), seed=int(doc["seed"]),
                       task=task, policy=policy, **extras)


def to_document(cfg: TrainConfig) -> dict:
    """Inverse of :func:`to_train_config` (kebab-case keys)."""
    d = cfg.to_dict()
    pol = d.pop("policy")
    doc = {k.replace("_", "-"): v for k, v in d.items() if k not in ("H", "task")}
    doc["h"] = cfg.H
    doc["task"] = dict(cfg.task)
    doc["policy"] = {k.replace("_", "-"): v for k, v in pol.items()}
    return {k: v for k, v in doc.items() if v is not None}


def load_config(path, overrides=(), seed=None, paper_scale=False) -> TrainConfig:
    doc = load_document(path)
    if paper_scale:
        doc = apply_paper_scale(doc)
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = int(seed)
    return to_train_config(doc)
