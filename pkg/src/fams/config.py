"""Experiment configuration: a YAML document validated into plain dataclasses.

Example::

    method: fams
    seed: 0
    repeats: 4
    output_dir: runs/adult
    dataset:
      tabular:
        train_path: data/adult/adult.data
        test_path: data/adult/adult.test
        format: adult
        train_per_group: 500
    trainer:
      lam: 0.4
      topology: {hidden: [64, 32]}
    metrics: {bins: 10}

Every validation error names the offending field path, e.g. ``trainer.lam``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError

__all__ = ["COMMANDS", "ExperimentConfig", "load_config", "parse_config"]

COMMANDS = ("train", "evaluate", "sweep", "verify-bounds", "audit")
METHODS = ("fams", "erm", "snn", "group_dro")

_SYNTHETIC_KEYS = {"n_groups", "input_dim", "samples_per_group", "group_similarity", "weight_scale",
                   "bias_scale", "valid_per_group", "test_per_group"}
_TABULAR_KEYS = {"train_path", "test_path", "format", "schema", "train_per_group", "valid_per_group",
                 "test_per_group"}
_SCHEMA_KEYS = {"numeric", "categorical", "label", "positive_label", "sensitive", "columns"}
_AUDIT_KEYS = {"path", "score_column", "label_column", "group_column"}
_METRIC_KEYS = {"bins", "weighting", "empty_bin_policy"}
_BOUND_KEYS = {"L", "delta", "tolerance", "mc_samples", "oracle_samples_per_group"}
_TOP_KEYS = {"command", "method", "seed", "repeats", "output_dir", "dataset", "trainer", "metrics",
             "bounds", "sweep", "evaluate"}


def _check_keys(block, allowed, path):
    if not isinstance(block, dict):
        raise ConfigError(f"{path}: expected a mapping")
    extra = set(block) - allowed
    if extra:
        raise ConfigError(f"{path}.{sorted(extra)[0]}: unknown field")


def _int(v, path, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{path}: must be >= {lo}")
    return v


def _real(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {v!r}")
    return float(v)


@dataclass
class ExperimentConfig:
    command: str | None = None
    method: str = "fams"
    seed: int = 0
    repeats: int = 1
    output_dir: str = "runs/out"
    dataset: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=lambda: {"bins": 10, "weighting": "group",
                                                   "empty_bin_policy": "nearest"})
    bounds: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)

    @property
    def dataset_kind(self) -> str:
        return next(iter(self.dataset))

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}

    def signature(self) -> dict:
        """What identifies the data a report was computed on."""
        return {"dataset": self.dataset, "metrics": self.metrics}


def parse_config(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a parsed YAML mapping. Relative data paths resolve against ``base_dir``."""
    if doc is None:
        doc = {}
    _check_keys(doc, _TOP_KEYS, "config")
    cfg = ExperimentConfig()
    if "command" in doc and doc["command"] is not None:
        if doc["command"] not in COMMANDS:
            raise ConfigError(f"command: must be one of {COMMANDS}")
        cfg.command = doc["command"]
    if "method" in doc:
        if doc["method"] not in METHODS:
            raise ConfigError(f"method: must be one of {METHODS}")
        cfg.method = doc["method"]
    if "seed" in doc:
        cfg.seed = _int(doc["seed"], "seed", 0)
    if "repeats" in doc:
        cfg.repeats = _int(doc["repeats"], "repeats", 1)
    if "output_dir" in doc:
        cfg.output_dir = str(doc["output_dir"])

    ds = doc.get("dataset")
    if not isinstance(ds, dict) or len(ds) != 1:
        raise ConfigError("dataset: exactly one of 'synthetic', 'tabular' or 'scores' is required")
    kind, block = next(iter(ds.items()))
    block = dict(block or {})
    if kind == "synthetic":
        _check_keys(block, _SYNTHETIC_KEYS, "dataset.synthetic")
    elif kind == "tabular":
        _check_keys(block, _TABULAR_KEYS, "dataset.tabular")
        if "train_path" not in block:
            raise ConfigError("dataset.tabular.train_path: required")
        fmt = block.setdefault("format", "csv")
        if fmt not in ("adult", "csv"):
            raise ConfigError("dataset.tabular.format: must be 'adult' or 'csv'")
        if fmt == "csv":
            schema = block.get("schema")
            if schema is None:
                raise ConfigError("dataset.tabular.schema: required for format 'csv'")
            _check_keys(schema, _SCHEMA_KEYS, "dataset.tabular.schema")
            for key in ("label", "positive_label", "sensitive"):
                if key not in schema:
                    raise ConfigError(f"dataset.tabular.schema.{key}: required")
        for key in ("train_path", "test_path"):
            if block.get(key) is not None and base_dir is not None:
                block[key] = str((base_dir / block[key]).resolve()) if not Path(block[key]).is_absolute() \
                    else block[key]
    elif kind == "scores":
        _check_keys(block, _AUDIT_KEYS, "dataset.scores")
        if "path" not in block:
            raise ConfigError("dataset.scores.path: required")
        if base_dir is not None and not Path(block["path"]).is_absolute():
            block["path"] = str((base_dir / block["path"]).resolve())
    else:
        raise ConfigError(f"dataset.{kind}: unknown dataset kind")
    for key in ("train_per_group", "valid_per_group", "test_per_group", "n_groups", "input_dim",
                "samples_per_group"):
        if block.get(key) is not None:
            _int(block[key], f"dataset.{kind}.{key}", 1)
    cfg.dataset = {kind: block}

    if "trainer" in doc:
        from .trainers import BilevelConfig

        tr = doc["trainer"] or {}
        allowed = {f.name for f in fields(BilevelConfig)} | {"lambda"}
        _check_keys(tr, allowed, "trainer")
        tr = dict(tr)
        if "lambda" in tr:
            tr["lam"] = tr.pop("lambda")
        if "topology" in tr:
            topo = tr["topology"]
            _check_keys(topo, {"hidden", "layer_sizes", "activation"}, "trainer.topology")
            if ("hidden" in topo) == ("layer_sizes" in topo):
                raise ConfigError("trainer.topology: give exactly one of 'hidden' or 'layer_sizes'")
        if "seed" in tr:
            raise ConfigError("trainer.seed: set the top-level 'seed' instead")
        defaults = BilevelConfig()
        for name, value in tr.items():
            if name == "topology":
                continue
            default = getattr(defaults, name)
            if isinstance(default, int):
                tr[name] = _int(value, f"trainer.{name}")
            elif isinstance(default, float):
                tr[name] = _real(value, f"trainer.{name}")
            elif isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"trainer.{name}: expected a string, got {value!r}")
        cfg.trainer = tr

    if "metrics" in doc:
        m = doc["metrics"] or {}
        _check_keys(m, _METRIC_KEYS, "metrics")
        merged = dict(cfg.metrics, **m)
        _int(merged["bins"], "metrics.bins", 2)
        if merged["weighting"] not in ("group", "global", "unweighted"):
            raise ConfigError("metrics.weighting: must be 'group', 'global' or 'unweighted'")
        if merged["empty_bin_policy"] != "nearest":
            raise ConfigError("metrics.empty_bin_policy: only 'nearest' is supported")
        cfg.metrics = merged

    if "bounds" in doc:
        b = doc["bounds"] or {}
        _check_keys(b, _BOUND_KEYS, "bounds")
        if b.get("delta") is not None and not 0 < _real(b["delta"], "bounds.delta") < 1:
            raise ConfigError("bounds.delta: must lie in (0, 1)")
        if b.get("L") is not None and _real(b["L"], "bounds.L") <= 0:
            raise ConfigError("bounds.L: must be > 0")
        cfg.bounds = dict(b)

    if "sweep" in doc:
        s = doc["sweep"] or {}
        _check_keys(s, {"lambdas"}, "sweep")
        lams = s.get("lambdas")
        if not isinstance(lams, list) or len(lams) < 3:
            raise ConfigError("sweep.lambdas: need a list of at least three values")
        cfg.sweep = {"lambdas": [_real(v, f"sweep.lambdas[{i}]") for i, v in enumerate(lams)]}

    if "evaluate" in doc:
        e = doc["evaluate"] or {}
        _check_keys(e, {"model"}, "evaluate")
        if "model" not in e:
            raise ConfigError("evaluate.model: required")
        model = e["model"]
        if base_dir is not None and not Path(model).is_absolute():
            model = str((base_dir / model).resolve())
        cfg.evaluate = {"model": model}
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return parse_config(doc, path.parent)
