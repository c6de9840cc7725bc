"""Prompt rendering and completion parsing.

Prompt wording lives in ``templates/*.txt`` (``{placeholder}`` syntax); this
module only assembles the pieces.  Parsers are JSON-first with a line-based
fallback, and never invent a value they cannot read.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .core import (
    VITALS,
    FeatureDescriptor,
    FeatureKind,
    Lesion,
    PatientCase,
    Provenance,
    normalize_name,
)
from .llm import Completion

log = logging.getLogger(__name__)

NO_CONTEXT = "(no retrieved context)"
DEFAULT_EVIDENCE_K = 5

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


class PromptError(ValueError):
    pass


class FeatureParseError(ValueError):
    pass


class ValueParseError(ValueError):
    pass


# --------------------------------------------------------------------------
# templates

_template_dir: Optional[Path] = None


def set_template_dir(path: Optional[Union[str, Path]]) -> None:
    """Load templates from ``path`` instead of the packaged defaults."""
    global _template_dir
    _template_dir = Path(path) if path is not None else None
    load_template.cache_clear()


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if _template_dir is not None and (_template_dir / name).exists():
        text = (_template_dir / name).read_text(encoding="utf-8")
    else:
        text = resources.files("dallm.templates").joinpath(name).read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def fill(template: str, **values: str) -> str:
    """Substitute ``{name}`` placeholders in one pass.

    Inserted text is never re-scanned, so braces inside a report are safe.
    """

    def sub(m: re.Match) -> str:
        key = m.group(1)
        if key not in values:
            raise KeyError(f"template placeholder {{{key}}} has no value")
        return str(values[key])

    return _PLACEHOLDER.sub(sub, template)


# --------------------------------------------------------------------------
# expert questions


class QuestionCategory(str, Enum):
    GENERAL_KNOWLEDGE = "general_knowledge"
    OBSERVATIONAL = "observational"
    PHYSICAL = "physical"
    LABORATORY = "laboratory"
    PATIENT_CHARACTERISTICS = "patient_characteristics"


@dataclass(frozen=True)
class ExpertQuestion:
    id: int
    category: QuestionCategory
    template: str

    def text(self, lesion: Lesion) -> str:
        return fill(self.template, lesion=Lesion(lesion).display_name)


def expert_questions() -> tuple[ExpertQuestion, ...]:
    raw = json.loads(load_template("expert_questions.json"))
    qs = tuple(ExpertQuestion(q["id"], QuestionCategory(q["category"]), q["template"]) for q in raw)
    if [q.id for q in qs] != list(range(1, 8)):
        raise PromptError("expected exactly seven expert questions with ids 1..7")
    return qs


@dataclass(frozen=True)
class ExpertPrompt:
    question_id: int
    question: str
    text: str


def format_evidence(chunks: Sequence) -> str:
    """Chunks as ``[chunk_id] text`` paragraphs, or the no-context marker."""
    if not chunks:
        return NO_CONTEXT
    return "\n\n".join(f"[{c.chunk_id}] {c.text}" for c in chunks)


def render_expert_question(question: ExpertQuestion, lesion: Lesion, evidence: Sequence = ()) -> ExpertPrompt:
    q = question.text(lesion)
    return ExpertPrompt(question.id, q, fill(load_template("expert_question.txt"), question=q,
                                             evidence=format_evidence(evidence)))


def render_expert_questions(lesion: Lesion, evidence: Optional[Mapping[int, Sequence]] = None) -> list[ExpertPrompt]:
    evidence = evidence or {}
    return [render_expert_question(q, lesion, evidence.get(q.id, ())) for q in expert_questions()]


# --------------------------------------------------------------------------
# data prompts

_VITAL_LABELS = {
    "temperature": "temperature in degrees Fahrenheit",
    "heartrate": "heart rate in beats per minute",
    "resprate": "respiratory rate in breaths per minute",
    "o2sat": "peripheral oxygen saturation in percent",
    "sbp": "systolic blood pressure in mmHg",
    "dbp": "diastolic blood pressure in mmHg",
}


def _demographics(case: PatientCase) -> dict[str, str]:
    return {
        "patient_id": case.id,
        "age": "unknown" if case.age is None else str(case.age),
        "gender": case.gender.value,
        "report": case.report.strip() or "(no report)",
    }


def render_existing_value_prompt(case: PatientCase, target_features: Sequence[str]) -> str:
    """Ask for the case's vitals from report and demographics alone."""
    targets = list(target_features)
    if not targets:
        raise PromptError("at least one target feature is required")
    bad = [t for t in targets if t not in VITALS]
    if bad:
        raise PromptError(f"targets must be vitals, got {bad}")
    if not case.report.strip():
        raise PromptError(f"patient {case.id} has an empty report")
    lines = "\n".join(f"- {t}: {_VITAL_LABELS[t]}" for t in targets)
    keys = ", ".join(f'"{t}"' for t in targets)
    return fill(load_template("existing_values.txt"), features=lines, keys=keys, **_demographics(case))


def describe_feature(desc: FeatureDescriptor) -> str:
    meta = desc.kind.value + (f", {desc.units}" if desc.units else "")
    return f"- {desc.name} ({meta})"


def format_ack(entries: Sequence) -> str:
    return "\n\n".join(
        f"Q{e.question_id} [{Lesion(e.lesion).display_name}]: {e.question}\nA: {e.answer.strip()}" for e in entries
    )


def render_ack_block(entries: Sequence) -> str:
    return fill(load_template("ack_block.txt"), entries=format_ack(entries)) + "\n\n"


def render_value_generation_prompt(
    ack: Sequence,
    features: Sequence[FeatureDescriptor],
    evidence: Sequence,
    case: PatientCase,
    ablation: bool = False,
) -> str:
    """Combine prior knowledge, feature list, retrieved passages and the patient.

    With ``ablation`` the prior-knowledge block is left out and nothing else
    changes, so the two variants differ by exactly that block.
    """
    if not features:
        raise PromptError("features must be non-empty")
    ack_block = "" if ablation or not ack else render_ack_block(ack)
    return fill(
        load_template("value_generation.txt"),
        ack_block=ack_block,
        features="\n".join(describe_feature(f) for f in features),
        evidence=format_evidence(evidence),
        **_demographics(case),
    )


@dataclass(frozen=True)
class Exemplar:
    text: str
    features: tuple[FeatureDescriptor, ...]

    @classmethod
    def from_dict(cls, d: Mapping) -> "Exemplar":
        feats = tuple(
            FeatureDescriptor(normalize_name(f["name"]), FeatureKind(f["kind"]), f.get("units"),
                              Provenance.LLM_DISCOVERED)
            for f in d["features"]
        )
        return cls(d["text"], feats)


def load_exemplars(path: Optional[Union[str, Path]] = None) -> list[Exemplar]:
    if path is None:
        raw = resources.files("dallm.fixtures").joinpath("discovery_shots.json").read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    return [Exemplar.from_dict(d) for d in json.loads(raw)]


def _feature_json(features: Iterable[FeatureDescriptor]) -> str:
    return json.dumps([{"name": f.name, "kind": f.kind.value, "units": f.units} for f in features],
                      ensure_ascii=False)


def render_feature_discovery_prompt(ack: Sequence, shots: Sequence[Exemplar]) -> str:
    if not shots:
        raise PromptError("feature discovery needs at least one exemplar")
    shot_text = "\n\n".join(
        f"Example {i}:\nText: {s.text.strip()}\nFeatures: {_feature_json(s.features)}" for i, s in enumerate(shots, 1)
    )
    return fill(load_template("feature_discovery.txt"), shots=shot_text, ack=format_ack(ack) or NO_CONTEXT)


# --------------------------------------------------------------------------
# parsing

_KIND_SYNONYMS = {
    "numeric": FeatureKind.NUMERIC, "number": FeatureKind.NUMERIC, "numerical": FeatureKind.NUMERIC,
    "continuous": FeatureKind.NUMERIC, "float": FeatureKind.NUMERIC, "integer": FeatureKind.NUMERIC,
    "int": FeatureKind.NUMERIC, "real": FeatureKind.NUMERIC,
    "boolean": FeatureKind.BOOLEAN, "bool": FeatureKind.BOOLEAN, "binary": FeatureKind.BOOLEAN,
    "yes/no": FeatureKind.BOOLEAN,
    "categorical": FeatureKind.CATEGORICAL, "category": FeatureKind.CATEGORICAL,
    "nominal": FeatureKind.CATEGORICAL, "ordinal": FeatureKind.CATEGORICAL, "text": FeatureKind.CATEGORICAL,
    "string": FeatureKind.CATEGORICAL,
}

_BULLET = re.compile(
    r"^\s*(?:[-*•]|\d+[.)])\s+(?P<name>[^():\n]+?)\s*\((?P<meta>[^()]*)\)\s*(?:[:\-–].*)?$"
)
_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.S)


def _text(completion: Union[Completion, str]) -> str:
    return completion.text if isinstance(completion, Completion) else str(completion)


def _find_json(text: str, kind: type) -> Optional[Any]:
    """First JSON value of type ``kind`` embedded in ``text``."""
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    opener = "[" if kind is list else "{"
    decoder = json.JSONDecoder()
    for cand in candidates:
        cand = cand.strip()
        for i, ch in enumerate(cand):
            if ch != opener:
                continue
            try:
                value, _ = decoder.raw_decode(cand, i)
            except json.JSONDecodeError:
                continue
            if isinstance(value, kind):
                return value
    return None


def parse_kind(raw: Any) -> Optional[FeatureKind]:
    if not isinstance(raw, str):
        return None
    return _KIND_SYNONYMS.get(raw.strip().lower())


def parse_feature_list(completion: Union[Completion, str]) -> list[FeatureDescriptor]:
    """Descriptors from a JSON array or ``- name (kind, units)`` bullets.

    Items without a recognizable kind are dropped.  Names are normalized and
    the first occurrence of a name wins.
    """
    text = _text(completion)
    items: list[tuple[str, Any, Any]] = []
    data = _find_json(text, list)
    if data is None:
        obj = _find_json(text, dict)
        if obj is not None and isinstance(obj.get("features"), list):
            data = obj["features"]
    if data is not None:
        for item in data:
            if isinstance(item, dict):
                items.append((item.get("name", item.get("feature")), item.get("kind", item.get("type")),
                              item.get("units", item.get("unit"))))
    else:
        for line in text.splitlines():
            m = _BULLET.match(line)
            if m:
                meta = [p.strip() for p in m.group("meta").split(",")]
                items.append((m.group("name"), meta[0], ", ".join(p for p in meta[1:] if p) or None))

    out: dict[str, FeatureDescriptor] = {}
    for name, kind, units in items:
        k = parse_kind(kind)
        if not isinstance(name, str) or k is None:
            log.warning("dropping feature item %r (kind %r)", name, kind)
            continue
        try:
            norm = normalize_name(name)
        except ValueError:
            continue
        if norm in out:
            continue
        units = units.strip() if isinstance(units, str) and units.strip() else None
        out[norm] = FeatureDescriptor(norm, k, units, Provenance.LLM_DISCOVERED)
    if not out:
        raise FeatureParseError("no parseable features in completion")
    return list(out.values())


class Confidence(str, Enum):
    PARSED_JSON = "parsed_json"
    PARSED_LINE = "parsed_line"
    UNPARSED = "unparsed"


@dataclass(frozen=True)
class ParsedFeatureValue:
    name: str
    raw: str
    value: Union[float, bool, str, None]
    units: Optional[str]
    confidence: Confidence

    @property
    def parsed(self) -> bool:
        return self.confidence is not Confidence.UNPARSED


BOOLEAN_WORDS = {"yes": True, "true": True, "present": True, "no": False, "false": False, "absent": False}

MISSING_WORDS = {
    "", "unknown", "n/a", "na", "none", "null", "not available", "not applicable", "not stated",
    "not mentioned", "not reported", "unclear", "?", "-",
}

_UNIT_FAMILIES = {
    "fahrenheit": {"f", "°f", "degf", "deg f", "fahrenheit", "degrees fahrenheit", "degree fahrenheit",
                   "degrees f", "deg fahrenheit"},
    "celsius": {"c", "°c", "degc", "deg c", "celsius", "degrees celsius", "degree celsius", "degrees c"},
    "percent": {"%", "percent", "pct", "per cent"},
    "per_minute": {"bpm", "/min", "per minute", "beats per minute", "breaths per minute", "beats/min",
                   "breaths/min", "rpm", "min-1", "/minute"},
    "mmhg": {"mmhg", "mm hg", "mm of mercury"},
    "years": {"y", "yr", "yrs", "year", "years", "years old", "y/o"},
}

_NUMBER = re.compile(r"^([-+]?(?:\d+(?:\.\d*)?|\.\d+))\s*(.*?)$")
_LINE = re.compile(r"^\s*(?:[-*•]\s*)?(?P<name>[A-Za-z][A-Za-z0-9 _/\-]*?)\s*[:=]\s*(?P<value>.*?)\s*$")


def unit_family(units: Optional[str]) -> Optional[str]:
    if not units:
        return None
    u = " ".join(units.lower().replace(".", " ").split())
    for fam, spellings in _UNIT_FAMILIES.items():
        if u in spellings:
            return fam
    return "other:" + u.replace(" ", "")


def celsius_to_fahrenheit(c: float) -> float:
    return c * 9.0 / 5.0 + 32.0


def _convert(desc: FeatureDescriptor, raw: Any) -> tuple[Union[float, bool, str, None], Optional[str]]:
    """Typed value and units for ``raw``, or ``(None, None)`` if unreadable."""
    if raw is None:
        return None, None
    if isinstance(raw, str) and raw.strip().lower().rstrip(".") in MISSING_WORDS:
        return None, None
    if desc.kind is FeatureKind.BOOLEAN:
        if isinstance(raw, bool):
            return raw, None
        if isinstance(raw, str):
            word = raw.strip().lower().rstrip(".")
            if word in BOOLEAN_WORDS:
                return BOOLEAN_WORDS[word], None
        return None, None
    if desc.kind is FeatureKind.CATEGORICAL:
        if isinstance(raw, bool) or isinstance(raw, (list, dict)):
            return None, None
        if isinstance(raw, (int, float)):
            return (None, None) if not math.isfinite(raw) else (str(raw), None)
        return raw.strip(), None
    # numeric
    if isinstance(raw, bool):
        return None, None
    if isinstance(raw, (int, float)):
        return (float(raw), desc.units) if math.isfinite(raw) else (None, None)
    if not isinstance(raw, str):
        return None, None
    m = _NUMBER.match(raw.strip())
    if not m:
        return None, None
    value = float(m.group(1))
    unit_text = m.group(2).strip()
    if not unit_text:
        return value, desc.units
    got, want = unit_family(unit_text), unit_family(desc.units)
    if want is None:
        return value, unit_text
    if got == want:
        return value, desc.units
    if got == "celsius" and want == "fahrenheit":
        return celsius_to_fahrenheit(value), desc.units
    return None, None


def _raw_string(raw: Any) -> str:
    return raw if isinstance(raw, str) else json.dumps(raw)


def parse_feature_values(completion: Union[Completion, str], schema: Sequence[FeatureDescriptor]) -> list[ParsedFeatureValue]:
    """Typed values for the schema features mentioned in a completion.

    Accepts a JSON object (values may be ``{"value", "units"}`` objects) or
    ``name: value [units]`` lines.  Names outside the schema are ignored with
    a warning; underscores are ignored when that picks out exactly one schema
    name.  Values that cannot be read come back as ``unparsed`` with no
    value.  Results follow schema order.
    """
    if not schema:
        raise ValueParseError("schema must be non-empty")
    by_name = {d.name: d for d in schema}
    # "heart_rate" finds "heartrate" when exactly one schema name compacts to it
    compact: dict[str, list[str]] = {}
    for d in schema:
        compact.setdefault(d.name.replace("_", ""), []).append(d.name)
    text = _text(completion)

    pairs: list[tuple[str, Any, Optional[str]]] = []
    source = Confidence.PARSED_JSON
    obj = _find_json(text, dict)
    if obj is not None and len(obj) == 1:
        (only,) = obj.values()
        if isinstance(only, dict) and normalize_key(next(iter(obj))) not in by_name:
            obj = only
    if obj is not None:
        for k, v in obj.items():
            units = None
            if isinstance(v, dict):
                units = v.get("units") if isinstance(v.get("units"), str) else None
                v = v.get("value")
            pairs.append((k, v, units))
    else:
        source = Confidence.PARSED_LINE
        for line in text.splitlines():
            m = _LINE.match(line)
            if m:
                pairs.append((m.group("name"), m.group("value"), None))
    if not pairs:
        raise ValueParseError("completion contains no feature/value pairs")

    found: dict[str, ParsedFeatureValue] = {}
    for key, raw, units in pairs:
        name = normalize_key(key)
        if name not in by_name and len(compact.get(name.replace("_", ""), [])) == 1:
            name = compact[name.replace("_", "")][0]
        if name not in by_name:
            log.warning("ignoring value for unknown feature %r", key)
            continue
        if name in found:
            continue
        desc = by_name[name]
        if units and raw is not None and not isinstance(raw, bool):
            raw = f"{raw} {units}"
        value, out_units = _convert(desc, raw)
        conf = source if value is not None else Confidence.UNPARSED
        found[name] = ParsedFeatureValue(name, _raw_string(raw), value, out_units if value is not None else None, conf)
    return [found[d.name] for d in schema if d.name in found]


def normalize_key(key: Any) -> str:
    try:
        return normalize_name(str(key))
    except ValueError:
        return ""


def render_feature_values(values: Sequence[ParsedFeatureValue], schema: Sequence[FeatureDescriptor]) -> str:
    """Serialize parsed values back to the JSON shape the parser reads."""
    units_of = {d.name: d.units for d in schema}
    out: dict[str, Any] = {}
    for v in values:
        if not v.parsed:
            out[v.name] = None
        elif v.units is not None and v.units != units_of.get(v.name):
            out[v.name] = {"value": v.value, "units": v.units}
        else:
            out[v.name] = v.value
    return json.dumps(out, ensure_ascii=False)


def render_feature_list(features: Sequence[FeatureDescriptor]) -> str:
    return _feature_json(features)
