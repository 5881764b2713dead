"""Experiment configuration: a JSON document with nested sections.

Every field has a default, so ``{}`` is a valid (if slow) config. Unknown
keys are rejected. Errors name the offending field by its dotted path, e.g.
``dataset.train_images``.

Example::

    {
      "stage": "both",
      "seed": 0,
      "dataset": {"kind": "synthetic", "samples": 2000, "classes": 4, "size": 8, "sigma": 0.05},
      "clients": 2,
      "partition": {"mode": "iid"},
      "search": {"rounds": 40, "cells": 3, "channels": 8, "nodes": 5},
      "eval": {"rounds": 100, "cells": 6, "channels": 8},
      "bandit": {"space_size": 120, "alpha": 0.1, "beta": 4.0}
    }
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class SyntheticData:
    kind: str = "synthetic"
    samples: int = 2000
    classes: int = 4
    size: int = 8
    channels: int = 1
    sigma: float = 0.05
    # extra samples drawn from the same templates and held out for testing
    test_samples: int = 0


@dataclass(frozen=True)
class IdxData:
    kind: str = "idx"
    train_images: str = ""
    train_labels: str = ""
    test_images: str | None = None
    test_labels: str | None = None
    num_classes: int = 10
    downsample: int | None = None
    # seeded subsets; None keeps every sample
    train_samples: int | None = None
    test_samples: int | None = None


@dataclass(frozen=True)
class Partition:
    mode: str = "iid"
    fraction: float = 0.2
    label: int = 0


@dataclass(frozen=True)
class SearchStage:
    rounds: int = 120
    exploit_rounds: int = 10
    batch_size: int = 64
    cells: int = 8
    channels: int = 16
    nodes: int = 7
    k: int = 2


@dataclass(frozen=True)
class EvalStage:
    rounds: int = 1500
    exploit_rounds: int = 10
    batch_size: int = 96
    cells: int = 16
    channels: int = 16


@dataclass(frozen=True)
class BanditParams:
    space_size: int = 120
    alpha: float = 0.1
    beta: float = 4.0
    literal_unsampled: bool = False
    max_ho_rounds: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    stage: str = "both"
    seed: int = 0
    output_dir: str = "hanf-run"
    dataset: SyntheticData | IdxData = field(default_factory=SyntheticData)
    clients: int = 2
    partition: Partition = field(default_factory=Partition)
    val_fraction: float = 0.5
    clip_norm: float = 5.0
    search: SearchStage = field(default_factory=SearchStage)
    eval: EvalStage = field(default_factory=EvalStage)
    bandit: BanditParams = field(default_factory=BanditParams)
    genotype: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        return validate(dataclasses.replace(self, **changes))


# -- parsing -----------------------------------------------------------------------

_SECTIONS = {"partition": Partition, "search": SearchStage, "eval": EvalStage, "bandit": BanditParams}


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, Mapping):
        raise ConfigError(path, f"expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")
    kwargs = {}
    for name, value in raw.items():
        where = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(fields[name].type, value, where)
    return cls(**kwargs)


def _coerce(annotation: str, value: Any, path: str):
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "may not be null")
    base = annotation.replace(" | None", "")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value  # nested sections are handled by the caller


def from_dict(raw: Mapping, base_dir: Path | None = None) -> ExperimentConfig:
    """Build and validate a config; relative file paths resolve against ``base_dir``."""
    if not isinstance(raw, Mapping):
        raise ConfigError("<root>", "config must be a JSON object")
    raw = dict(raw)
    nested = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            nested[name] = _build(cls, raw.pop(name), name)
    if "dataset" in raw:
        ds = raw.pop("dataset")
        kind = ds.get("kind", "synthetic") if isinstance(ds, Mapping) else None
        if kind not in ("synthetic", "idx"):
            raise ConfigError("dataset.kind", f"must be 'synthetic' or 'idx', got {kind!r}")
        ds = _build(SyntheticData if kind == "synthetic" else IdxData, ds, "dataset")
        if base_dir is not None and kind == "idx":
            ds = dataclasses.replace(
                ds,
                **{
                    k: str(base_dir / getattr(ds, k))
                    for k in ("train_images", "train_labels", "test_images", "test_labels")
                    if getattr(ds, k)
                },
            )
        nested["dataset"] = ds
    top = _build(ExperimentConfig, raw, "")
    cfg = dataclasses.replace(top, **nested)
    if base_dir is not None and cfg.genotype:
        cfg = dataclasses.replace(cfg, genotype=str(base_dir / cfg.genotype))
    return validate(cfg)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError("--config", f"{path} is not valid JSON ({err})") from None
    return from_dict(raw, base_dir=path.parent)


# -- validation ------------------------------------------------------------------------


def _need(ok: bool, path: str, message: str) -> None:
    if not ok:
        raise ConfigError(path, message)


def _positive(value, path: str) -> None:
    _need(value >= 1, path, f"must be at least 1, got {value}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    _need(cfg.stage in ("search", "eval", "both"), "stage", f"must be search, eval or both, got {cfg.stage!r}")
    _need(cfg.seed >= 0, "seed", f"must be non-negative, got {cfg.seed}")
    _positive(cfg.clients, "clients")
    _need(0.0 < cfg.val_fraction < 1.0, "val_fraction", f"must lie in (0, 1), got {cfg.val_fraction}")
    _need(cfg.clip_norm > 0 and math.isfinite(cfg.clip_norm), "clip_norm", f"must be positive, got {cfg.clip_norm}")

    ds = cfg.dataset
    if isinstance(ds, SyntheticData):
        _positive(ds.samples, "dataset.samples")
        _need(ds.classes >= 2, "dataset.classes", f"must be at least 2, got {ds.classes}")
        _positive(ds.size, "dataset.size")
        _positive(ds.channels, "dataset.channels")
        _need(ds.sigma >= 0, "dataset.sigma", f"must be non-negative, got {ds.sigma}")
        _need(ds.test_samples >= 0, "dataset.test_samples", f"must be non-negative, got {ds.test_samples}")
        num_classes = ds.classes
    else:
        for key in ("train_images", "train_labels"):
            value = getattr(ds, key)
            _need(bool(value), f"dataset.{key}", "is required for idx datasets")
            _need(Path(value).is_file(), f"dataset.{key}", f"file not found: {value}")
        _need(
            (ds.test_images is None) == (ds.test_labels is None),
            "dataset.test_images",
            "test_images and test_labels must be given together",
        )
        for key in ("test_images", "test_labels"):
            value = getattr(ds, key)
            if value is not None:
                _need(Path(value).is_file(), f"dataset.{key}", f"file not found: {value}")
        _need(ds.num_classes >= 2, "dataset.num_classes", f"must be at least 2, got {ds.num_classes}")
        if ds.downsample is not None:
            _positive(ds.downsample, "dataset.downsample")
        for key in ("train_samples", "test_samples"):
            if getattr(ds, key) is not None:
                _positive(getattr(ds, key), f"dataset.{key}")
        num_classes = ds.num_classes

    p = cfg.partition
    _need(p.mode in ("iid", "label_skew"), "partition.mode", f"must be iid or label_skew, got {p.mode!r}")
    if p.mode == "label_skew":
        _need(0.0 < p.fraction < 1.0, "partition.fraction", f"must lie in (0, 1), got {p.fraction}")
        _need(0 <= p.label < num_classes, "partition.label", f"must be a class index below {num_classes}")
        _need(cfg.clients >= 2, "clients", "label skew needs at least 2 clients")

    for name, st in (("search", cfg.search), ("eval", cfg.eval)):
        _need(st.rounds >= 0, f"{name}.rounds", f"must be non-negative, got {st.rounds}")
        _positive(st.exploit_rounds, f"{name}.exploit_rounds")
        _positive(st.batch_size, f"{name}.batch_size")
        _need(st.cells >= 2, f"{name}.cells", f"must be at least 2, got {st.cells}")
        _positive(st.channels, f"{name}.channels")
    _need(cfg.search.nodes >= 3, "search.nodes", f"must be at least 3, got {cfg.search.nodes}")
    _positive(cfg.search.k, "search.k")

    b = cfg.bandit
    _positive(b.space_size, "bandit.space_size")
    _need(0.0 <= b.alpha <= 1.0, "bandit.alpha", f"must lie in [0, 1], got {b.alpha}")
    _need(b.beta > 0, "bandit.beta", f"must be positive, got {b.beta}")
    if b.max_ho_rounds is not None:
        _positive(b.max_ho_rounds, "bandit.max_ho_rounds")

    if cfg.stage == "eval":
        _need(cfg.genotype is not None, "genotype", "the eval stage needs a genotype file (--genotype)")
    if cfg.genotype is not None:
        _need(Path(cfg.genotype).is_file(), "genotype", f"file not found: {cfg.genotype}")
    return cfg
