"""Pipeline configuration: a YAML file mapped onto nested dataclasses, plus flag overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from .core import LESIONS, Lesion
from .ingest import Scope, Source
from .llm import CacheMode

# knobs that never change outputs (replay reproduces recorded completions); kept out of the config hash
RUNTIME_ONLY = {("workers",), ("backend", "max_concurrent_llm"), ("backend", "cache_mode")}


class ConfigError(ValueError):
    pass


@dataclass
class SourceSettings:
    sources: list[str] = field(default_factory=lambda: [Source.FIXTURE.value])
    scope: str = Scope.TOP_ONE.value
    offline: bool = True
    corpus_dir: Optional[str] = None  # None: packaged fixture corpus


@dataclass
class ChunkSettings:
    size: int = 256
    overlap: int = 32


@dataclass
class BackendSettings:
    llm: str = "fixture"  # fixture | http
    model: str = "gpt-4"
    embedder: str = "hashing-bow-v1:dim=256"
    cache_mode: str = CacheMode.STRICT_REPLAY.value  # live calls need an explicit opt-in
    cache_dir: Optional[str] = None  # None: <output_dir>/cache/llm
    temperature: float = 0.1
    max_tokens: int = 1024
    max_concurrent_llm: int = 4


@dataclass
class PathSettings:
    dataset: Optional[str] = None  # None: packaged fixture patients
    curation: Optional[str] = None
    shots: Optional[str] = None
    output_dir: str = "runs/default"


@dataclass
class EvalSettings:
    test_fraction: float = 0.2
    cv_folds: Optional[int] = None
    dt_max_depth: int = 6
    rf_trees: int = 100
    rf_max_depth: int = 8
    gbt_trees: int = 100
    gbt_learning_rate: float = 0.1
    gbt_max_depth: int = 3
    min_samples_leaf: int = 2


@dataclass
class PipelineConfig:
    sources: SourceSettings = field(default_factory=SourceSettings)
    chunking: ChunkSettings = field(default_factory=ChunkSettings)
    retrieval_k: int = 5
    backend: BackendSettings = field(default_factory=BackendSettings)
    paths: PathSettings = field(default_factory=PathSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    lesions: list[str] = field(default_factory=lambda: [l.value for l in LESIONS])
    seed: int = 0
    ablation: bool = False
    workers: int = 1
    failure_threshold: float = 0.05

    def validate(self) -> "PipelineConfig":
        try:
            for s in self.sources.sources:
                Source(s)
            Scope(self.sources.scope)
            CacheMode.parse(self.backend.cache_mode)
            for l in self.lesions:
                Lesion(l)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.chunking.size < 1 or not 0 <= self.chunking.overlap < self.chunking.size:
            raise ConfigError("chunking needs size >= 1 and 0 <= overlap < size")
        if self.retrieval_k < 1:
            raise ConfigError("retrieval_k must be positive")
        if self.backend.temperature < 0:
            raise ConfigError("temperature must be non-negative")
        if self.backend.llm not in ("fixture", "http"):
            raise ConfigError(f"unknown llm backend {self.backend.llm!r}")
        if self.workers < 1 or self.backend.max_concurrent_llm < 1:
            raise ConfigError("workers and max_concurrent_llm must be positive")
        if not 0 <= self.failure_threshold <= 1:
            raise ConfigError("failure_threshold must lie in [0, 1]")
        if not 0 < self.evaluation.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.evaluation.cv_folds is not None and self.evaluation.cv_folds < 2:
            raise ConfigError("cv_folds must be at least 2")
        return self

    @property
    def cache_mode(self) -> CacheMode:
        return CacheMode.parse(self.backend.cache_mode)

    @property
    def lesion_list(self) -> list[Lesion]:
        return [Lesion(l) for l in self.lesions]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """sha256 of the output-relevant settings.

        Worker counts and file locations are left out; manifests record the
        content hashes of the inputs instead.
        """
        d = self.to_dict()
        for path in RUNTIME_ONLY | {("paths",), ("sources", "corpus_dir"), ("backend", "cache_dir")}:
            node = d
            for key in path[:-1]:
                node = node[key]
            node.pop(path[-1], None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}".lstrip(".")) if sub else value
    return cls(**kwargs)


_NESTED = {
    (PipelineConfig, "sources"): SourceSettings,
    (PipelineConfig, "chunking"): ChunkSettings,
    (PipelineConfig, "backend"): BackendSettings,
    (PipelineConfig, "paths"): PathSettings,
    (PipelineConfig, "evaluation"): EvalSettings,
}


def _resolve(base: Path, value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else (base / p))


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None) -> PipelineConfig:
    """Read YAML (or defaults when ``path`` is None) and apply dotted-key overrides.

    Relative input paths in the file resolve against the file's directory.
    """
    data: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from None
        base = path.parent
    try:
        cfg = _build(PipelineConfig, data, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.sources.corpus_dir = _resolve(base, cfg.sources.corpus_dir)
    for name in ("dataset", "curation", "shots", "output_dir"):
        setattr(cfg.paths, name, _resolve(base, getattr(cfg.paths, name)))
    cfg.backend.cache_dir = _resolve(base, cfg.backend.cache_dir)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = getattr(node, p)
        if not hasattr(node, leaf):
            raise ConfigError(f"unknown override {key!r}")
        if dataclasses.is_dataclass(getattr(node, leaf)):
            raise ConfigError(f"override {key!r} names a section; use a dotted key such as {key}.<field>")
        setattr(node, leaf, value)
    return cfg.validate()
