"""Versioned YAML run configuration with line-anchored validation errors."""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass
from pathlib import Path

import yaml

from .aggregators import AggregatorConfigError, AggregatorSpec
from .attacks import AttackSpec
from .data import generate_synthetic, load_idx, train_eval_split
from .fedsim import TrainConfig, TrainConfigError
from .tensor import Dataset, ModelSpec

SCHEMA_VERSION = 1
REQUIRED = object()

# section -> key -> (accepted types, default)
SCHEMA = {
    "data": {
        "kind": (str, REQUIRED),
        "num_classes": (int, 10),
        "input_dim": (int, 64),
        "samples_per_class": (int, 200),
        "margin": ((int, float), 5.0),
        "noise": ((int, float), 1.0),
        "seed": (int, 0),
        "eval_fraction": ((int, float), 0.25),
        "images": (str, None),
        "labels": (str, None),
        "eval_images": (str, None),
        "eval_labels": (str, None),
    },
    "model": {
        "architecture": (str, REQUIRED),
        "hidden_dim": (int, 0),
    },
    "train": {
        "n_users": (int, REQUIRED),
        "n_byzantine": (int, 0),
        "rounds": (int, REQUIRED),
        "batch_size": (int, REQUIRED),
        "lr": ((int, float, list), 0.25),
        "momentum": ((int, float), 0.9),
        "momentum_schedule": (str, "constant"),
        "smoothness": ((int, float, type(None)), None),
        "strong_convexity": ((int, float, type(None)), None),
        "local_steps": (int, 1),
        "local_lr": ((int, float), 0.1),
        "clip_norm": ((int, float), 2.0),
        "noise_multiplier": ((int, float), 0.0),
        "partition_concentration": ((int, float), 0.5),
        "num_groups": (int, 10),
        "compression_rate": ((int, float), 10.0),
        "sketch_blocks": (int, 10),
        "resample_sketch": (bool, False),
        "attack_space": (str, "compressed"),
        "eval_every": (int, 50),
        "delta": (float, 1e-5),
        "seed": (int, 0),
    },
    "aggregator": {
        "rule": (str, REQUIRED),
        "b": ((int, type(None)), None),
        "nnm": (bool, False),
        "krum_neighbours": ((int, type(None)), None),
    },
    "attack": {
        "kind": (str, "none"),
        "params": (dict, {}),
    },
    "kappa": {
        "n": (int, 7),
        "b": (int, 2),
        "d": (int, 64),
        "k": (int, 32),
        "p": (int, 2),
        "trials": (int, 100),
        "seed": (int, 0),
    },
    "output": {
        "dir": ((str, type(None)), None),
    },
}
OPTIONAL_SECTIONS = ("attack", "kappa", "output")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-5`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+][0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def read_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


class ConfigError(ValueError):
    """Invalid configuration; the message names the file and line."""


def _marks(node, path=(), out=None):
    """Map key paths to 1-based line numbers from a composed YAML node tree."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            sub = path + (key.value,)
            out[sub] = key.start_mark.line + 1
            _marks(value, sub, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, value in enumerate(node.value):
            _marks(value, path + (i,), out)
    return out


class _Doc:
    def __init__(self, source: str, text: str):
        self.source = source
        try:
            self.raw = yaml.load(text, Loader=_Loader)
            node = yaml.compose(text, Loader=_Loader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark else 1
            raise ConfigError(f"{source}:{line}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
        self.lines = _marks(node) if node is not None else {}

    def error(self, path, message):
        line = self._line(path)
        where = ".".join(str(p) for p in path) or "<root>"
        return ConfigError(f"{self.source}:{line}: {where}: {message}")

    def _line(self, path):
        path = tuple(path)
        while path not in self.lines and path:
            path = path[:-1]
        return self.lines.get(path, 1)


def _type_ok(value, types):
    types = types if isinstance(types, tuple) else (types,)
    if isinstance(value, bool) and bool not in types:
        return False
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return True
    return isinstance(value, types)


def _resolve(doc: _Doc, raw, prefix=()) -> dict:
    if not isinstance(raw, dict):
        raise doc.error(prefix, "expected a mapping at the top level")
    if "schema_version" not in raw:
        raise doc.error(prefix + ("schema_version",), "missing required field")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise doc.error(prefix + ("schema_version",), f"unsupported schema version {raw['schema_version']!r}")
    unknown = set(raw) - set(SCHEMA) - {"schema_version"}
    if unknown:
        key = sorted(unknown)[0]
        raise doc.error(prefix + (key,), "unknown section")
    resolved = {"schema_version": SCHEMA_VERSION}
    for section, fields in SCHEMA.items():
        values = raw.get(section)
        if values is None:
            if section not in OPTIONAL_SECTIONS:
                raise doc.error(prefix + (section,), "missing required section")
            if section == "kappa":
                continue
            values = {}
        if not isinstance(values, dict):
            raise doc.error(prefix + (section,), "expected a mapping")
        for key in values:
            if key not in fields:
                raise doc.error(prefix + (section, key), "unknown key")
        out = {}
        for key, (types, default) in fields.items():
            if key not in values:
                if default is REQUIRED:
                    raise doc.error(prefix + (section,), f"missing required field '{key}'")
                out[key] = copy.deepcopy(default)
                continue
            value = values[key]
            if not (value is None and default is None) and not _type_ok(value, types):
                raise doc.error(prefix + (section, key), f"bad type {type(value).__name__}")
            out[key] = float(value) if types is float else value
        resolved[section] = out
    return resolved


def _lr_schedule(doc, lr, prefix):
    if not isinstance(lr, list):
        return ((None, float(lr)),)
    sched = []
    for i, entry in enumerate(lr):
        if not isinstance(entry, dict) or set(entry) - {"until", "lr"} or "lr" not in entry:
            raise doc.error(prefix + ("train", "lr", i), "schedule entries need 'lr' and optional 'until'")
        sched.append((entry.get("until"), float(entry["lr"])))
    return tuple(sched)


@dataclass(frozen=True)
class RunConfig:
    resolved: dict
    train: TrainConfig
    source: str

    @property
    def data(self) -> dict:
        return self.resolved["data"]

    @property
    def kappa(self) -> dict | None:
        return self.resolved.get("kappa")

    @property
    def output_dir(self) -> str | None:
        return self.resolved["output"]["dir"]


def build(resolved: dict, doc: _Doc, prefix=()) -> RunConfig:
    model = resolved["model"]
    t = resolved["train"]
    agg = resolved["aggregator"]
    atk = resolved["attack"]
    data = resolved["data"]
    if data["kind"] not in ("synthetic", "idx"):
        raise doc.error(prefix + ("data", "kind"), f"unknown data kind {data['kind']!r}")
    if data["kind"] == "idx" and not (data["images"] and data["labels"]):
        raise doc.error(prefix + ("data",), "idx data needs 'images' and 'labels'")
    if data["kind"] == "idx":
        # anchor relative paths at the config file so manifests re-run from anywhere
        base = Path(doc.source).parent
        for key in ("images", "labels", "eval_images", "eval_labels"):
            if data[key]:
                data[key] = str((base / data[key]).resolve())
    try:
        spec = ModelSpec(model["architecture"], data["input_dim"], model["hidden_dim"], data["num_classes"])
    except ValueError as exc:
        raise doc.error(prefix + ("model",), str(exc)) from None
    try:
        aggregator = AggregatorSpec(
            agg["rule"], t["n_byzantine"] if agg["b"] is None else agg["b"], agg["nnm"], agg["krum_neighbours"]
        )
    except AggregatorConfigError as exc:
        raise doc.error(prefix + ("aggregator", "rule"), str(exc)) from None
    try:
        attack = AttackSpec(atk["kind"], dict(atk["params"]))
    except ValueError as exc:
        raise doc.error(prefix + ("attack", "params" if atk["params"] else "kind"), str(exc)) from None
    fields = {k: v for k, v in t.items() if k != "lr"}
    try:
        train = TrainConfig(
            model=spec,
            aggregator=aggregator,
            attack=attack,
            lr_schedule=_lr_schedule(doc, t["lr"], prefix),
            **fields,
        )
    except TrainConfigError as exc:
        raise doc.error(prefix + ("train",), str(exc)) from None
    return RunConfig(resolved, train, doc.source)


def parse(text: str, source: str = "<string>") -> RunConfig:
    doc = _Doc(source, text)
    raw = doc.raw
    if isinstance(raw, dict) and "manifest_version" in raw:
        if "config" not in raw:
            raise doc.error((), "manifest has no 'config' section")
        return build(_resolve(doc, raw["config"], ("config",)), doc, ("config",))
    return build(_resolve(doc, raw), doc)


def from_dict(resolved: dict, source: str = "<dict>") -> RunConfig:
    """Validate an already-parsed mapping (as stored in a manifest)."""
    return parse(yaml.safe_dump(resolved, sort_keys=False), source)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read: {exc.strerror}") from None
    return parse(text, str(path))


def with_overrides(resolved: dict, overrides: dict) -> dict:
    """Deep-merge ``overrides`` (section -> key -> value) into a copy of ``resolved``."""
    out = copy.deepcopy(resolved)
    for section, values in overrides.items():
        if isinstance(values, dict) and isinstance(out.get(section), dict):
            out[section].update(copy.deepcopy(values))
        else:
            out[section] = copy.deepcopy(values)
    return out


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training and evaluation sets described by the ``data`` section."""
    d = cfg.data
    if d["kind"] == "synthetic":
        full = generate_synthetic(d["num_classes"], d["input_dim"], d["samples_per_class"], d["margin"], d["seed"], d["noise"])
        return train_eval_split(full, d["eval_fraction"], d["seed"])
    train = load_idx(d["images"], d["labels"])
    if d["eval_images"] and d["eval_labels"]:
        parts = train, load_idx(d["eval_images"], d["eval_labels"])
    else:
        parts = train_eval_split(train, d["eval_fraction"], d["seed"])
    for part in parts:
        if len(part) and part.num_features != d["input_dim"]:
            raise ConfigError(f"{cfg.source}: data.input_dim is {d['input_dim']} but images have {part.num_features} pixels")
    return parts
