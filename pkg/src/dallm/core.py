"""Dataset model shared by every pipeline stage.

A :class:`Dataset` is an ordered feature schema plus one :class:`Row` per
patient.  Each row carries the validated raw record (:class:`PatientCase`)
and a value map holding one entry per schema feature, ``None`` meaning
missing.  Datasets are treated as immutable: every operation here returns a
new object.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional, Union

import numpy as np

log = logging.getLogger(__name__)

FeatureValue = Union[float, bool, str, None]

NAME_PATTERN = re.compile(r"^[a-z][a-z0-9_]*$")
COLLISION_SUFFIX = "__generated"


class Lesion(str, Enum):
    ATELECTASIS = "atelectasis"
    CONSOLIDATION = "consolidation"
    ENLARGED_CARDIAC_SILHOUETTE = "enlarged_cardiac_silhouette"
    PLEURAL_EFFUSION = "pleural_effusion"
    PLEURAL_ABNORMALITY = "pleural_abnormality"

    @property
    def display_name(self) -> str:
        return self.value.replace("_", " ")


LESIONS: tuple[Lesion, ...] = tuple(Lesion)


class Gender(str, Enum):
    FEMALE = "female"
    MALE = "male"
    UNKNOWN = "unknown"


class FeatureKind(str, Enum):
    NUMERIC = "numeric"
    BOOLEAN = "boolean"
    CATEGORICAL = "categorical"


class Provenance(str, Enum):
    ORIGINAL = "original"
    LLM_DISCOVERED = "llm_discovered"
    EXPERT_ADDED = "expert_added"


class DatasetError(ValueError):
    pass


class MalformedRecordError(DatasetError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateIdError(DatasetError):
    pass


class UnknownFeatureError(DatasetError):
    pass


class UnknownPatientError(DatasetError):
    pass


class TypeConflictError(DatasetError):
    pass


def normalize_name(raw: str) -> str:
    """Map free text like ``"Smoking History"`` to ``smoking_history``."""
    name = re.sub(r"[^a-z0-9]+", "_", raw.strip().lower()).strip("_")
    if not name:
        raise ValueError(f"cannot normalize feature name {raw!r}")
    if not name[0].isalpha():
        name = "f_" + name
    return name


@dataclass(frozen=True)
class FeatureDescriptor:
    name: str
    kind: FeatureKind
    units: Optional[str] = None
    provenance: Provenance = Provenance.ORIGINAL

    def __post_init__(self):
        if not NAME_PATTERN.match(self.name):
            raise ValueError(f"invalid feature name {self.name!r}")
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "units": self.units,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureDescriptor":
        return cls(
            name=d["name"],
            kind=FeatureKind(d["kind"]),
            units=d.get("units"),
            provenance=Provenance(d.get("provenance", "original")),
        )


VITALS: tuple[str, ...] = ("temperature", "heartrate", "resprate", "o2sat", "sbp", "dbp")

ORIGINAL_SCHEMA: tuple[FeatureDescriptor, ...] = (
    FeatureDescriptor("age", FeatureKind.NUMERIC, "years"),
    FeatureDescriptor("gender", FeatureKind.CATEGORICAL),
    FeatureDescriptor("temperature", FeatureKind.NUMERIC, "degrees Fahrenheit"),
    FeatureDescriptor("heartrate", FeatureKind.NUMERIC, "beats per minute"),
    FeatureDescriptor("resprate", FeatureKind.NUMERIC, "breaths per minute"),
    FeatureDescriptor("o2sat", FeatureKind.NUMERIC, "percent"),
    FeatureDescriptor("sbp", FeatureKind.NUMERIC, "mmHg"),
    FeatureDescriptor("dbp", FeatureKind.NUMERIC, "mmHg"),
)
ORIGINAL_FEATURES: tuple[str, ...] = tuple(d.name for d in ORIGINAL_SCHEMA)


@dataclass(frozen=True)
class PatientCase:
    """One validated clinical record as it appears in the source data."""

    id: str
    age: Optional[int]
    gender: Gender
    temperature: Optional[float]
    heartrate: Optional[float]
    resprate: Optional[float]
    o2sat: Optional[float]
    sbp: Optional[float]
    dbp: Optional[float]
    report: str
    labels: Mapping[Lesion, bool]

    def __post_init__(self):
        if not self.id:
            raise ValueError("patient id must be non-empty")
        object.__setattr__(self, "gender", Gender(self.gender))
        if self.age is not None and self.age < 0:
            raise ValueError(f"age must be >= 0, got {self.age}")
        for name in VITALS:
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.o2sat is not None and not 0 <= self.o2sat <= 100:
            raise ValueError(f"o2sat must lie in [0, 100], got {self.o2sat}")
        if self.sbp is not None and self.dbp is not None and self.sbp < self.dbp:
            raise ValueError(f"sbp ({self.sbp}) below dbp ({self.dbp})")
        labels = {Lesion(k): bool(v) for k, v in self.labels.items()}
        if set(labels) != set(LESIONS):
            raise ValueError(f"labels must cover exactly {[l.value for l in LESIONS]}")
        object.__setattr__(self, "labels", {l: labels[l] for l in LESIONS})

    def original_values(self) -> dict[str, FeatureValue]:
        return {
            "age": None if self.age is None else float(self.age),
            "gender": self.gender.value,
            **{name: getattr(self, name) for name in VITALS},
        }

    @property
    def positive_lesions(self) -> list[Lesion]:
        return [l for l in LESIONS if self.labels[l]]


@dataclass(frozen=True)
class Row:
    case: PatientCase
    values: Mapping[str, FeatureValue]

    @property
    def id(self) -> str:
        return self.case.id


@dataclass(frozen=True)
class DatasetMetadata:
    seed: Optional[int] = None
    backend: Optional[str] = None
    ablation: bool = False
    standardized: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "backend": self.backend,
            "ablation": self.ablation,
            "standardized": list(self.standardized),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetMetadata":
        return cls(
            seed=d.get("seed"),
            backend=d.get("backend"),
            ablation=bool(d.get("ablation", False)),
            standardized=tuple(d.get("standardized", ())),
        )


def check_value(desc: FeatureDescriptor, value) -> FeatureValue:
    """Coerce ``value`` to the descriptor's kind or raise TypeConflictError."""
    if value is None:
        return None
    if desc.kind is FeatureKind.NUMERIC:
        if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise TypeConflictError(f"{desc.name}: expected number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise TypeConflictError(f"{desc.name}: non-finite value {value!r}")
        return value
    if desc.kind is FeatureKind.BOOLEAN:
        if not isinstance(value, (bool, np.bool_)):
            raise TypeConflictError(f"{desc.name}: expected boolean, got {value!r}")
        return bool(value)
    if not isinstance(value, str):
        raise TypeConflictError(f"{desc.name}: expected category string, got {value!r}")
    return value


@dataclass(frozen=True)
class Dataset:
    schema: tuple[FeatureDescriptor, ...]
    rows: tuple[Row, ...]
    metadata: DatasetMetadata = DatasetMetadata()
    # load-time diagnostics; not part of dataset identity
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "rows", tuple(self.rows))
        names = [d.name for d in self.schema]
        if len(set(names)) != len(names):
            raise DatasetError(f"duplicate feature names in schema: {names}")
        by_name = dict(zip(names, self.schema))
        seen = set()
        for row in self.rows:
            if row.id in seen:
                raise DuplicateIdError(f"duplicate patient id {row.id!r}")
            seen.add(row.id)
            extra = set(row.values) - set(names)
            if extra:
                raise UnknownFeatureError(f"row {row.id}: values for unknown features {sorted(extra)}")
            for name, value in row.values.items():
                check_value(by_name[name], value)

    @property
    def feature_names(self) -> list[str]:
        return [d.name for d in self.schema]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.rows]

    def descriptor(self, name: str) -> FeatureDescriptor:
        for d in self.schema:
            if d.name == name:
                return d
        raise UnknownFeatureError(f"unknown feature {name!r}")

    def column(self, name: str) -> list[FeatureValue]:
        self.descriptor(name)
        return [r.values.get(name) for r in self.rows]

    def labels(self, lesion: Lesion) -> np.ndarray:
        lesion = Lesion(lesion)
        return np.array([r.case.labels[lesion] for r in self.rows], dtype=int)

    def row(self, patient_id: str) -> Row:
        for r in self.rows:
            if r.id == patient_id:
                return r
        raise UnknownPatientError(f"unknown patient id {patient_id!r}")

    def __len__(self) -> int:
        return len(self.rows)


def make_dataset(
    cases: Iterable[PatientCase],
    extra_schema: Iterable[FeatureDescriptor] = (),
    extra_values: Optional[Mapping[str, Mapping[str, FeatureValue]]] = None,
    metadata: DatasetMetadata = DatasetMetadata(),
) -> Dataset:
    """Build a dataset whose original features mirror the cases."""
    schema = ORIGINAL_SCHEMA + tuple(extra_schema)
    extra_values = extra_values or {}
    rows = []
    for case in cases:
        values = {d.name: None for d in schema}
        values.update(case.original_values())
        values.update(extra_values.get(case.id, {}))
        rows.append(Row(case, values))
    return Dataset(schema, rows, metadata)


def replace_values(dataset: Dataset, updates: Mapping[str, Mapping[str, FeatureValue]]) -> Dataset:
    """Overwrite cells of existing features, e.g. to score generated vitals.

    Patients or features absent from ``updates`` keep their values.  The
    result is an analysis view: its original-feature cells may no longer
    match the underlying records.
    """
    known = set(dataset.ids)
    for pid in updates:
        if pid not in known:
            raise UnknownPatientError(f"unknown patient id {pid!r}")
    rows = []
    for r in dataset.rows:
        upd = updates.get(r.id, {})
        for name in upd:
            dataset.descriptor(name)
        rows.append(Row(r.case, {**r.values, **upd}))
    return Dataset(dataset.schema, rows, dataset.metadata)


# --------------------------------------------------------------------------
# standardization


ZERO_VARIANCE_RTOL = 1e-12


class FeatureStats(NamedTuple):
    mean: float
    std: float
    zero_variance: bool = False


def feature_stats(values: Iterable[FeatureValue]) -> FeatureStats:
    """Population mean/std over the non-missing entries."""
    arr = np.array([v for v in values if v is not None], dtype=float)
    if arr.size == 0:
        raise DatasetError("feature has no observed values")
    mean = float(arr.mean())
    std = float(arr.std(ddof=0))
    # a constant column can come out with std ~1e-13 from rounding in the mean
    return FeatureStats(mean, std, std <= ZERO_VARIANCE_RTOL * max(1.0, abs(mean)))


def standardize(dataset: Dataset, feature_names: Iterable[str]) -> tuple[Dataset, dict[str, FeatureStats]]:
    """Z-score the named numeric features using population statistics.

    Zero-variance features are returned unscaled with ``zero_variance`` set.
    """
    feature_names = list(feature_names)
    stats: dict[str, FeatureStats] = {}
    for name in feature_names:
        desc = dataset.descriptor(name)
        if desc.kind is not FeatureKind.NUMERIC:
            raise DatasetError(f"{name} is not numeric")
        try:
            stats[name] = feature_stats(dataset.column(name))
        except DatasetError:
            raise DatasetError(f"feature {name!r} is entirely missing") from None
        if stats[name].zero_variance:
            log.warning("feature %s has zero variance; left unscaled", name)
    rows = []
    for r in dataset.rows:
        values = dict(r.values)
        for name, st in stats.items():
            v = values.get(name)
            if v is not None and not st.zero_variance:
                values[name] = (v - st.mean) / st.std
        rows.append(Row(r.case, values))
    scaled = tuple(n for n in feature_names if not stats[n].zero_variance)
    meta = replace(dataset.metadata, standardized=tuple(dict.fromkeys(dataset.metadata.standardized + scaled)))
    return Dataset(dataset.schema, rows, meta), stats


def destandardize(value: float, stats: FeatureStats) -> float:
    if stats.zero_variance:
        return value
    return value * stats.std + stats.mean


# --------------------------------------------------------------------------
# merging


def merge_augmented(
    base: Dataset,
    additions: Mapping[str, Mapping[str, FeatureValue]],
    new_schema: Iterable[FeatureDescriptor],
) -> Dataset:
    """Append generated feature columns to ``base``.

    New columns go after the existing ones, sorted by name.  A new feature
    whose name is already taken keeps the original column intact and is
    stored under ``<name>__generated``.
    """
    existing = set(base.feature_names)
    renamed: dict[str, FeatureDescriptor] = {}
    for desc in new_schema:
        if normalize_name(desc.name) != desc.name:
            raise DatasetError(f"descriptor name {desc.name!r} is not normalized")
        if desc.name in renamed:
            raise DatasetError(f"duplicate new descriptor {desc.name!r}")
        target = desc
        if desc.name in existing:
            target = replace(desc, name=desc.name + COLLISION_SUFFIX)
            if target.name in existing:
                raise DatasetError(f"column {target.name!r} already exists")
        renamed[desc.name] = target

    known = set(base.ids)
    for pid, vals in additions.items():
        if pid not in known:
            raise UnknownPatientError(f"unknown patient id {pid!r}")
        for name, value in vals.items():
            if name not in renamed:
                raise UnknownFeatureError(f"addition for undeclared feature {name!r}")
            check_value(renamed[name], value)

    appended = sorted(renamed.values(), key=lambda d: d.name)
    rows = []
    for r in base.rows:
        values = dict(r.values)
        vals = additions.get(r.id, {})
        for src, desc in renamed.items():
            values[desc.name] = check_value(desc, vals.get(src))
        rows.append(Row(r.case, values))
    return Dataset(base.schema + tuple(appended), rows, base.metadata)


# --------------------------------------------------------------------------
# serialization

ID_COLUMN = "id"
REPORT_COLUMN = "report"
LABEL_COLUMNS: tuple[str, ...] = tuple(l.value for l in LESIONS)
RESERVED_COLUMNS = (ID_COLUMN, REPORT_COLUMN) + LABEL_COLUMNS

_TRUE = {"1", "true", "yes"}
_FALSE = {"0", "false", "no"}


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt:
        if fmt not in ("csv", "jsonlines"):
            raise ValueError(f"unknown format {fmt!r}")
        return fmt
    return "jsonlines" if path.suffix in (".jsonl", ".jsonlines") else "csv"


def _parse_cell(desc: FeatureDescriptor, raw, line: int, warnings: list[str]) -> FeatureValue:
    if raw is None or (isinstance(raw, str) and raw.strip() == ""):
        return None
    if desc.kind is FeatureKind.NUMERIC:
        if isinstance(raw, bool):
            raise MalformedRecordError(line, f"{desc.name}: boolean where number expected")
        try:
            v = float(raw)
        except (TypeError, ValueError):
            v = math.nan
        if not math.isfinite(v):
            warnings.append(f"line {line}: unparseable {desc.name} value {raw!r} treated as missing")
            return None
        return v
    if desc.kind is FeatureKind.BOOLEAN:
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
        warnings.append(f"line {line}: unparseable {desc.name} value {raw!r} treated as missing")
        return None
    return str(raw)


def _parse_label(raw, line: int, lesion: str) -> bool:
    if isinstance(raw, bool):
        return raw
    if raw is None:
        raise MalformedRecordError(line, f"missing label {lesion}")
    s = str(raw).strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise MalformedRecordError(line, f"bad label {lesion}={raw!r}")


def _record_to_row(rec: Mapping, schema: tuple[FeatureDescriptor, ...], line: int, warnings: list[str]) -> Row:
    pid = rec.get(ID_COLUMN)
    if pid is None or str(pid).strip() == "":
        raise MalformedRecordError(line, "missing patient id")
    values = {d.name: _parse_cell(d, rec.get(d.name), line, warnings) for d in schema}
    labels = {l: _parse_label(rec.get(l.value), line, l.value) for l in LESIONS}
    age = values.get("age")
    if age is not None and age != int(age):
        raise MalformedRecordError(line, f"age must be an integer, got {age}")
    gender = values.get("gender")
    gender_norm = {"f": "female", "m": "male"}.get(str(gender).lower(), str(gender).lower()) if gender else "unknown"
    if gender_norm not in {g.value for g in Gender}:
        raise MalformedRecordError(line, f"unknown gender {gender!r}")
    values["gender"] = gender_norm
    try:
        case = PatientCase(
            id=str(pid),
            age=None if age is None else int(age),
            gender=Gender(gender_norm),
            report=str(rec.get(REPORT_COLUMN) or ""),
            labels=labels,
            **{v: values.get(v) for v in VITALS},
        )
    except ValueError as exc:
        raise MalformedRecordError(line, f"patient {pid}: {exc}") from None
    return Row(case, values)


def load_dataset(
    path: Union[str, Path],
    format: Optional[str] = None,
    extra_features: Iterable[FeatureDescriptor] = (),
) -> Dataset:
    """Read a dataset from CSV or JSON Lines.

    The schema comes from the ``<file>.meta.json`` sidecar when present,
    otherwise it is the eight original features plus ``extra_features``.
    Unparseable numeric cells become missing and are counted in
    ``Dataset.warnings``; invariant violations raise MalformedRecordError.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    fmt = _infer_format(path, format)
    meta = DatasetMetadata()
    side = sidecar_path(path)
    if side.exists():
        payload = json.loads(side.read_text(encoding="utf-8"))
        schema = tuple(FeatureDescriptor.from_dict(d) for d in payload["schema"])
        meta = DatasetMetadata.from_dict(payload.get("metadata", {}))
    else:
        schema = ORIGINAL_SCHEMA + tuple(extra_features)
    allowed = set(RESERVED_COLUMNS) | {d.name for d in schema}

    warnings: list[str] = []
    rows: list[Row] = []
    seen: dict[str, int] = {}

    def add(rec: Mapping, line: int):
        unknown = set(rec) - allowed
        if unknown:
            raise MalformedRecordError(line, f"unknown columns {sorted(unknown)}")
        row = _record_to_row(rec, schema, line, warnings)
        if row.id in seen:
            raise DuplicateIdError(f"line {line}: duplicate patient id {row.id!r} (first at line {seen[row.id]})")
        seen[row.id] = line
        rows.append(row)

    if fmt == "csv":
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in (ID_COLUMN, REPORT_COLUMN, *LABEL_COLUMNS) if c not in header]
            missing += [d.name for d in schema if d.name not in header]
            if missing:
                raise MalformedRecordError(1, f"header lacks columns {missing}")
            for rec in reader:
                if None in rec:
                    raise MalformedRecordError(reader.line_num, "too many fields")
                add(rec, reader.line_num)
    else:
        with path.open(encoding="utf-8") as fh:
            for lineno, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                try:
                    rec = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise MalformedRecordError(lineno, f"invalid JSON: {exc.msg}") from None
                if not isinstance(rec, dict):
                    raise MalformedRecordError(lineno, "record is not an object")
                add(rec, lineno)

    for w in warnings:
        log.warning(w)
    return Dataset(schema, rows, meta, warnings=tuple(warnings))


def _format_cell(value: FeatureValue) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_dataset(dataset: Dataset, path: Union[str, Path], format: Optional[str] = None) -> Path:
    """Write ``dataset`` plus its schema sidecar; returns the data path.

    Views whose original-feature cells disagree with the underlying records
    (standardized or value-replaced datasets) are refused because they cannot
    be reloaded faithfully.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    for r in dataset.rows:
        if any(r.values.get(k) != v for k, v in r.case.original_values().items()):
            raise DatasetError(f"row {r.id}: original cells differ from the record; derived views are not saveable")
    names = dataset.feature_names
    columns = [ID_COLUMN, *names, REPORT_COLUMN, *LABEL_COLUMNS]
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for r in dataset.rows:
                writer.writerow(
                    [r.id]
                    + [_format_cell(r.values.get(n)) for n in names]
                    + [r.case.report]
                    + ["true" if r.case.labels[l] else "false" for l in LESIONS]
                )
    else:
        with path.open("w", encoding="utf-8") as fh:
            for r in dataset.rows:
                rec: dict = {ID_COLUMN: r.id}
                for n in names:
                    v = r.values.get(n)
                    if v is not None:
                        rec[n] = v
                rec[REPORT_COLUMN] = r.case.report
                for l in LESIONS:
                    rec[l.value] = r.case.labels[l]
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    payload = {
        "format_version": 1,
        "schema": [d.to_dict() for d in dataset.schema],
        "metadata": dataset.metadata.to_dict(),
    }
    sidecar_path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
