"""YAML run configuration: parsing, validation and a stable content hash.

Layout::

    dataset:
      synthetic: {n, d_x, nonlinear, seed, tasks: [{name, kind, n_outputs, noise, angle, scale}]}
      # or
      csv: {path, tasks: [{name, kind, n_outputs}]}
      splits: [0.7, 0.1, 0.2]
      normalize: true
    model: {widths: [32, 16], activation: elu}
    training: {epochs, pretrain_epochs, batch_size, learning_rate, weight_decay, scheduler, selection, ...}
    method: {name: bayesagg, s_regression, s_classification, mc_samples, prior_variance, ...}
    output_dir: runs/example
    seeds: [0, 1, 2]
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import Dataset, SyntheticSpec, SyntheticTask, TaskSpec, generate_synthetic, load_csv, normalize_targets
from .errors import ConfigError, UnknownMethod
from .trainer import METHODS, MethodConfig, ModelConfig, TrainConfig

SELECTION_RULES = ("delta_m", "loss")


@dataclass
class RunConfig:
    dataset: dict[str, Any]
    model: ModelConfig
    training: dict[str, Any]
    method: MethodConfig
    output_dir: Path
    seeds: list[int]
    selection: str = "delta_m"
    source: str | None = None
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, method=dataclasses.replace(self.method), **self.training)

    def data_seed(self, seed: int) -> int:
        syn = self.dataset.get("synthetic") or {}
        return int(syn["seed"]) if "seed" in syn else seed

    def build_dataset(self, seed: int) -> Dataset:
        """Dataset for a run seed; synthetic data is regenerated per seed unless pinned."""
        ds_cfg = self.dataset
        splits = tuple(ds_cfg["splits"])
        data_seed = self.data_seed(seed)
        if "synthetic" in ds_cfg:
            syn = dict(ds_cfg["synthetic"])
            tasks = tuple(SyntheticTask(**t) for t in syn.pop("tasks"))
            syn.pop("seed", None)
            ds = generate_synthetic(SyntheticSpec(tasks=tasks, seed=data_seed, splits=splits, **syn))
        else:
            csv_cfg = ds_cfg["csv"]
            path = Path(csv_cfg["path"])
            if not path.is_absolute() and self.source is not None:
                path = Path(self.source).parent / path
            ds = load_csv(path, [TaskSpec(**t) for t in csv_cfg["tasks"]], splits, data_seed)
        if ds_cfg.get("normalize", True) and any(t.kind == "regression" for t in ds.tasks):
            ds, _ = normalize_targets(ds)
        return ds

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """A new config with dotted-key overrides applied to the raw mapping."""
        raw = copy.deepcopy(self.raw)
        for key, value in overrides.items():
            node = raw
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ConfigError(key, "cannot override inside a non-mapping", self.source)
            node[parts[-1]] = value
        return parse_config(raw, self.source)

    def resolved(self) -> dict[str, Any]:
        """Fully-defaulted mapping; what gets written to config.resolved and hashed."""
        training = dataclasses.asdict(TrainConfig(method=MethodConfig(self.method.name), **self.training))
        training.pop("seed")
        training.pop("method")
        training["betas"] = list(training["betas"])
        training["selection"] = self.selection
        return {
            "dataset": copy.deepcopy(self.dataset),
            "model": {"widths": list(self.model.widths), "activation": self.model.activation},
            "training": training,
            "method": dataclasses.asdict(self.method),
            "output_dir": str(self.output_dir),
            "seeds": list(self.seeds),
        }

    def hash(self) -> str:
        text = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _require_mapping(value, name: str, source) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(name, "expected a mapping", source)
    return value


def _check_keys(section: dict, allowed, name: str, source) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", "unknown field", source)


def _parse_tasks(items, name: str, source, synthetic: bool) -> list[dict]:
    if not isinstance(items, list) or not items:
        raise ConfigError(name, "expected a non-empty list of tasks", source)
    allowed = {f.name for f in dataclasses.fields(SyntheticTask if synthetic else TaskSpec)}
    tasks, seen = [], set()
    for i, t in enumerate(items):
        t = _require_mapping(t, f"{name}[{i}]", source)
        _check_keys(t, allowed, f"{name}[{i}]", source)
        if "name" not in t:
            raise ConfigError(f"{name}[{i}].name", "missing", source)
        if t["name"] in seen:
            raise ConfigError(f"{name}[{i}].name", f"duplicate task {t['name']!r}", source)
        seen.add(t["name"])
        try:
            (SyntheticTask(**t).spec() if synthetic else TaskSpec(**t))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}[{i}]", str(exc), source) from None
        tasks.append(dict(t))
    return tasks


def _parse_dataset(raw, source) -> dict:
    ds = _require_mapping(raw, "dataset", source)
    _check_keys(ds, {"synthetic", "csv", "splits", "normalize"}, "dataset", source)
    has_syn, has_csv = "synthetic" in ds, "csv" in ds
    if has_syn == has_csv:
        raise ConfigError("dataset", "exactly one of dataset.synthetic or dataset.csv is required", source)
    out: dict[str, Any] = {}
    splits = ds.get("splits", [0.7, 0.1, 0.2])
    if not (isinstance(splits, list) and len(splits) == 3 and all(isinstance(v, (int, float)) and v >= 0 for v in splits)
            and sum(splits) > 0):
        raise ConfigError("dataset.splits", "expected three non-negative fractions", source)
    out["splits"] = [float(v) for v in splits]
    out["normalize"] = bool(ds.get("normalize", True))
    if has_syn:
        syn = _require_mapping(ds["synthetic"], "dataset.synthetic", source)
        _check_keys(syn, {"n", "d_x", "nonlinear", "seed", "tasks"}, "dataset.synthetic", source)
        body = {k: syn[k] for k in ("n", "d_x", "nonlinear", "seed") if k in syn}
        for key in ("n", "d_x"):
            if key in body and (not isinstance(body[key], int) or body[key] < 1):
                raise ConfigError(f"dataset.synthetic.{key}", "expected a positive integer", source)
        body["tasks"] = _parse_tasks(syn.get("tasks"), "dataset.synthetic.tasks", source, synthetic=True)
        out["synthetic"] = body
    else:
        csv_cfg = _require_mapping(ds["csv"], "dataset.csv", source)
        _check_keys(csv_cfg, {"path", "tasks"}, "dataset.csv", source)
        if not isinstance(csv_cfg.get("path"), str):
            raise ConfigError("dataset.csv.path", "expected a file path", source)
        out["csv"] = {"path": csv_cfg["path"],
                      "tasks": _parse_tasks(csv_cfg.get("tasks"), "dataset.csv.tasks", source, synthetic=False)}
    return out


def parse_config(raw: dict, source: str | None = None) -> RunConfig:
    raw = _require_mapping(raw, "<root>", source)
    _check_keys(raw, {"dataset", "model", "training", "method", "output_dir", "seeds"}, "<root>", source)
    if "dataset" not in raw:
        raise ConfigError("dataset", "missing", source)
    dataset = _parse_dataset(raw["dataset"], source)

    model_raw = _require_mapping(raw.get("model"), "model", source)
    _check_keys(model_raw, {"widths", "activation"}, "model", source)
    widths = model_raw.get("widths", [32, 16])
    if not (isinstance(widths, list) and widths and all(isinstance(w, int) and w > 0 for w in widths)):
        raise ConfigError("model.widths", "expected a non-empty list of positive integers", source)
    activation = model_raw.get("activation", "elu")
    if activation not in ("relu", "elu", "tanh", "identity"):
        raise ConfigError("model.activation", f"unknown activation {activation!r}", source)
    model = ModelConfig(tuple(widths), activation)

    method_raw = dict(_require_mapping(raw.get("method"), "method", source))
    _check_keys(method_raw, {f.name for f in dataclasses.fields(MethodConfig)}, "method", source)
    try:
        method = MethodConfig(**method_raw)
    except UnknownMethod:
        raise ConfigError("method.name", f"unknown method {method_raw.get('name')!r}; expected one of "
                          f"{', '.join(METHODS)}", source) from None
    if not 0 <= method.s_regression <= 1 or not 0 <= method.s_classification <= 1:
        raise ConfigError("method.s", "exponents must lie in [0, 1]", source)
    if method.mc_samples < 2:
        raise ConfigError("method.mc_samples", "need at least 2 samples", source)
    if method.mode not in ("diagonal", "full"):
        raise ConfigError("method.mode", "expected diagonal or full", source)

    training = dict(_require_mapping(raw.get("training"), "training", source))
    selection = training.pop("selection", "delta_m")
    if selection not in SELECTION_RULES:
        raise ConfigError("training.selection", f"expected one of {', '.join(SELECTION_RULES)}", source)
    allowed = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "method"}
    _check_keys(training, allowed, "training", source)
    if "betas" in training:
        training["betas"] = tuple(training["betas"])
    try:
        TrainConfig(method=method, **training)
    except (TypeError, ValueError) as exc:
        raise ConfigError("training", str(exc), source) from None
    if training.get("scheduler", "none") not in ("none", "step", "plateau"):
        raise ConfigError("training.scheduler", "expected none, step or plateau", source)

    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not (isinstance(seeds, list) and seeds and all(isinstance(s, int) and s >= 0 for s in seeds)):
        raise ConfigError("seeds", "expected a non-negative integer or a list of them", source)
    out_dir = raw.get("output_dir", "runs")
    if not isinstance(out_dir, str):
        raise ConfigError("output_dir", "expected a path", source)
    return RunConfig(dataset, model, training, method, Path(out_dir), list(seeds), selection, source, copy.deepcopy(raw))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("<file>", "config file not found", str(path)) from None
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML: {exc}", str(path)) from None
    return parse_config(raw, str(path))
