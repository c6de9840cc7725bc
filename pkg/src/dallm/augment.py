"""The three augmentation phases and the Gaussian baseline generator."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import (
    LESIONS,
    VITALS,
    Dataset,
    FeatureDescriptor,
    FeatureKind,
    FeatureValue,
    Lesion,
    Provenance,
    feature_stats,
    normalize_name,
)
from .kstore import VectorIndex
from .llm import LLMClient, LLMError
from .prompts import (
    DEFAULT_EVIDENCE_K,
    Exemplar,
    FeatureParseError,
    expert_questions,
    parse_feature_list,
    parse_feature_values,
    render_existing_value_prompt,
    render_expert_question,
    render_feature_discovery_prompt,
    render_value_generation_prompt,
)

log = logging.getLogger(__name__)

DEFAULT_FAILURE_THRESHOLD = 0.05


class AugmentError(RuntimeError):
    pass


class AckBuildError(AugmentError):
    def __init__(self, lesion: Lesion, question_id: int, cause: Exception):
        super().__init__(f"ACK entry ({Lesion(lesion).value}, Q{question_id}) failed: {cause}")
        self.lesion = lesion
        self.question_id = question_id
        self.cause = cause


class FailureRateExceeded(AugmentError):
    pass


class CurationError(AugmentError):
    pass


# --------------------------------------------------------------------------
# phase II: augmented clinical knowledge


@dataclass(frozen=True)
class ACKEntry:
    lesion: Lesion
    question_id: int
    question: str
    evidence_ids: tuple[str, ...]
    answer: str
    fingerprint: str

    def to_dict(self) -> dict:
        return {
            "lesion": Lesion(self.lesion).value,
            "question_id": self.question_id,
            "question": self.question,
            "evidence_ids": list(self.evidence_ids),
            "answer": self.answer,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ACKEntry":
        return cls(Lesion(d["lesion"]), d["question_id"], d["question"], tuple(d["evidence_ids"]),
                   d["answer"], d["fingerprint"])


@dataclass(frozen=True)
class AugmentedClinicalKnowledge:
    entries: Mapping[Lesion, tuple[ACKEntry, ...]]
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for lesion, items in self.entries.items():
            if len(items) != 7:
                raise AugmentError(f"lesion {Lesion(lesion).value} has {len(items)} ACK entries, expected 7")

    def for_lesions(self, lesions: Iterable[Lesion]) -> list[ACKEntry]:
        return [e for l in lesions for e in self.entries.get(Lesion(l), ())]

    def all_entries(self) -> list[ACKEntry]:
        return self.for_lesions(LESIONS)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def to_json(self) -> str:
        payload = {
            "metadata": dict(self.metadata),
            "entries": {Lesion(l).value: [e.to_dict() for e in v] for l, v in self.entries.items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AugmentedClinicalKnowledge":
        payload = json.loads(text)
        entries = {Lesion(l): tuple(ACKEntry.from_dict(e) for e in v) for l, v in payload["entries"].items()}
        ordered = {l: entries[l] for l in LESIONS if l in entries}
        return cls(ordered, payload.get("metadata", {}))


def build_ack(
    index: VectorIndex,
    lesions: Iterable[Lesion],
    k: int,
    client: LLMClient,
    workers: int = 1,
) -> AugmentedClinicalKnowledge:
    """Answer the seven expert questions for every lesion by retrieval + completion."""
    lesions = [Lesion(l) for l in lesions]
    for l in lesions:
        if l not in index.partitions:
            raise AugmentError(f"index has no chunks for lesion {l.value!r}")
    questions = expert_questions()
    jobs = [(l, q) for l in lesions for q in questions]

    def run(job) -> ACKEntry:
        lesion, q = job
        hits = index.search(q.text(lesion), k, lesion)
        evidence = [index.chunk(cid) for cid, _ in hits]
        prompt = render_expert_question(q, lesion, evidence)
        try:
            comp = client.complete(prompt.text)
        except LLMError as exc:
            raise AckBuildError(lesion, q.id, exc) from exc
        answer = comp.text.strip() or "(empty answer)"
        entry = ACKEntry(lesion, q.id, prompt.question, tuple(c.chunk_id for c in evidence), answer, comp.fingerprint)
        return entry, comp.backend

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, jobs))
    entries = {l: tuple(e for e, _ in results if e.lesion == l) for l in lesions}
    meta = {
        "index_embedder": index.descriptor,
        "index_chunks": len(index),
        "k": k,
        # backends that produced the answers (the cache remembers them on replay)
        "backend": ",".join(sorted({b for _, b in results})),
        "model": client.config.model,
        "temperature": client.config.temperature,
    }
    return AugmentedClinicalKnowledge(entries, meta)


# --------------------------------------------------------------------------
# phase III: features


def discover_features(
    ack: AugmentedClinicalKnowledge,
    shots: Sequence[Exemplar],
    client: LLMClient,
) -> list[FeatureDescriptor]:
    """Few-shot feature discovery, one completion per lesion, unioned in lesion order."""
    out: dict[str, FeatureDescriptor] = {}
    for lesion in LESIONS:
        entries = ack.entries.get(lesion)
        if not entries:
            continue
        comp = client.complete(render_feature_discovery_prompt(entries, shots))
        for desc in parse_feature_list(comp):
            out.setdefault(desc.name, desc)
    if not out:
        raise FeatureParseError("feature discovery produced no features")
    return list(out.values())


def _descriptor(d: Mapping, provenance: Provenance) -> FeatureDescriptor:
    return FeatureDescriptor(normalize_name(d["name"]), FeatureKind(d["kind"]), d.get("units"), provenance)


def load_curation(path: Union[str, Path]) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        return []
    entries = json.loads(text)
    if not isinstance(entries, list):
        raise CurationError("curation file must hold a JSON list")
    return entries


def apply_expert_curation(
    discovered: Sequence[FeatureDescriptor],
    curation: Union[str, Path, Sequence[Mapping]],
) -> list[FeatureDescriptor]:
    """Apply reviewed ``add`` / ``remove`` / ``rename`` actions in file order.

    Surviving discovered features keep their order; additions follow in the
    order they were listed and are tagged ``expert_added``.
    """
    actions = load_curation(curation) if isinstance(curation, (str, Path)) else list(curation)
    current: dict[str, FeatureDescriptor] = {d.name: d for d in discovered}
    added: list[str] = []
    for i, act in enumerate(actions):
        kind = act.get("action")
        desc = act.get("descriptor") or {}
        if "name" not in desc:
            raise CurationError(f"entry {i}: descriptor needs a name")
        name = normalize_name(desc["name"])
        if kind == "add":
            if name in current:
                raise CurationError(f"entry {i}: feature {name!r} already exists")
            current[name] = _descriptor(desc, Provenance.EXPERT_ADDED)
            added.append(name)
        elif kind == "remove":
            if name not in current:
                raise CurationError(f"entry {i}: cannot remove unknown feature {name!r}")
            del current[name]
            if name in added:
                added.remove(name)
        elif kind == "rename":
            new = normalize_name(act.get("new_name") or desc.get("new_name") or "")
            if name not in current:
                raise CurationError(f"entry {i}: cannot rename unknown feature {name!r}")
            if new in current:
                raise CurationError(f"entry {i}: rename target {new!r} already exists")
            old = current[name]
            current = {
                (new if n == name else n): (FeatureDescriptor(new, old.kind, old.units, old.provenance) if n == name else d)
                for n, d in current.items()
            }
            added = [new if n == name else n for n in added]
        else:
            raise CurationError(f"entry {i}: unknown action {kind!r}")
    kept = [d for n, d in current.items() if n not in added]
    return kept + [current[n] for n in added]


@dataclass
class GenerationResult:
    """Per-patient generated values plus everything needed to trace them."""

    values: dict[str, dict[str, FeatureValue]]
    prompts: dict[str, str]
    fingerprints: dict[str, str]
    evidence: dict[str, tuple[str, ...]]
    failures: dict[str, str]
    ablation: bool

    def prompt_log(self) -> str:
        lines = [
            json.dumps({"patient_id": pid, "fingerprint": self.fingerprints[pid],
                        "evidence_ids": list(self.evidence[pid]), "prompt": self.prompts[pid]},
                       ensure_ascii=False, sort_keys=True)
            for pid in sorted(self.prompts)
        ]
        return "\n".join(lines) + ("\n" if lines else "")


def patient_evidence(index: VectorIndex, case, k: int) -> tuple[list[Lesion], list]:
    """Top-k chunks from each positive lesion's partition (all lesions if none)."""
    lesions = case.positive_lesions or [l for l in LESIONS if l in index.partitions]
    lesions = [l for l in lesions if l in index.partitions]
    chunks = []
    query = case.report if case.report.strip() else " ".join(l.display_name for l in lesions)
    for l in lesions:
        chunks.extend(index.chunk(cid) for cid, _ in index.search(query, k, l))
    return lesions, chunks


def generate_values(
    dataset: Dataset,
    features: Sequence[FeatureDescriptor],
    ack: Optional[AugmentedClinicalKnowledge],
    index: VectorIndex,
    client: LLMClient,
    ablation: bool = False,
    k: int = DEFAULT_EVIDENCE_K,
    workers: int = 1,
    failure_threshold: float = DEFAULT_FAILURE_THRESHOLD,
) -> GenerationResult:
    """One four-source prompt per patient; parsed values become cells.

    Values the parser cannot read stay missing.  Patient-level failures are
    collected and only abort the run when their share exceeds
    ``failure_threshold``.
    """
    features = list(features)
    if not features:
        raise AugmentError("features must be non-empty")

    def run(row):
        lesions, evidence = patient_evidence(index, row.case, k)
        ack_entries = [] if ablation or ack is None else ack.for_lesions(lesions)
        prompt = render_value_generation_prompt(ack_entries, features, evidence, row.case, ablation)
        ev_ids = tuple(c.chunk_id for c in evidence)
        try:
            comp = client.complete(prompt)
            parsed = parse_feature_values(comp, features)
        except (LLMError, ValueError) as exc:
            return row.id, prompt, None, ev_ids, None, f"{type(exc).__name__}: {exc}"
        vals = {p.name: p.value for p in parsed if p.parsed}
        return row.id, prompt, comp.fingerprint, ev_ids, vals, None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, dataset.rows))
    results.sort(key=lambda r: r[0])

    out = GenerationResult({}, {}, {}, {}, {}, ablation)
    for pid, prompt, fp, ev_ids, vals, err in results:
        out.prompts[pid] = prompt
        out.evidence[pid] = ev_ids
        out.fingerprints[pid] = fp or ""
        if err is not None:
            out.failures[pid] = err
            log.warning("value generation failed for %s: %s", pid, err)
        else:
            out.values[pid] = vals
    rate = len(out.failures) / max(1, len(dataset))
    if rate > failure_threshold:
        first = next(iter(out.failures.items()))
        raise FailureRateExceeded(
            f"{len(out.failures)}/{len(dataset)} patients failed ({rate:.1%} > {failure_threshold:.1%}); "
            f"first: {first[0]}: {first[1]}"
        )
    return out


def generate_existing_values(
    dataset: Dataset,
    targets: Sequence[str],
    client: LLMClient,
    workers: int = 1,
    failure_threshold: float = DEFAULT_FAILURE_THRESHOLD,
) -> dict[str, dict[str, FeatureValue]]:
    """Ask the model for vitals it is not shown (the existing-value experiment)."""
    schema = [dataset.descriptor(t) for t in targets]

    def run(row):
        try:
            comp = client.complete(render_existing_value_prompt(row.case, targets))
            parsed = parse_feature_values(comp, schema)
        except (LLMError, ValueError) as exc:
            return row.id, None, f"{type(exc).__name__}: {exc}"
        return row.id, {p.name: p.value for p in parsed if p.parsed}, None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = sorted(pool.map(run, dataset.rows), key=lambda r: r[0])
    failures = {pid: err for pid, _, err in results if err}
    if len(failures) / max(1, len(dataset)) > failure_threshold:
        raise FailureRateExceeded(f"{len(failures)}/{len(dataset)} existing-value prompts failed")
    return {pid: vals for pid, vals, err in results if err is None}


def gaussian_baseline(dataset: Dataset, feature_names: Sequence[str] = VITALS, seed: int = 0) -> dict[str, dict[str, float]]:
    """Context-free values: standard normal draws mapped through each
    feature's population mean and std.  Zero-variance features are skipped."""
    names = []
    stats = {}
    for name in feature_names:
        if dataset.descriptor(name).kind is not FeatureKind.NUMERIC:
            raise AugmentError(f"{name} is not numeric")
        st = feature_stats(dataset.column(name))
        if st.zero_variance:
            log.warning("skipping zero-variance feature %s", name)
            continue
        names.append(name)
        stats[name] = st
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((len(dataset), len(names)))
    return {
        r.id: {name: float(stats[name].mean + stats[name].std * z[i, j]) for j, name in enumerate(names)}
        for i, r in enumerate(dataset.rows)
    }


@dataclass
class AugmentationRun:
    run_id: str
    config: Mapping
    discovered_count: int
    coverage: dict[str, float]
    ablation: bool
    expert_added: list[str]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": dict(self.config),
            "discovered_count": self.discovered_count,
            "coverage": self.coverage,
            "ablation": self.ablation,
            "expert_added": self.expert_added,
        }


def coverage_stats(values: Mapping[str, Mapping[str, FeatureValue]], features: Sequence[FeatureDescriptor],
                   patient_ids: Sequence[str]) -> dict[str, float]:
    n = max(1, len(patient_ids))
    return {
        f.name: sum(1 for pid in patient_ids if values.get(pid, {}).get(f.name) is not None) / n
        for f in features
    }


def summarize_run(config: Mapping, features: Sequence[FeatureDescriptor], result: GenerationResult,
                  patient_ids: Sequence[str]) -> AugmentationRun:
    blob = json.dumps({"config": config, "fingerprints": result.fingerprints}, sort_keys=True, default=str)
    return AugmentationRun(
        run_id=hashlib.sha256(blob.encode()).hexdigest()[:16],
        config=config,
        discovered_count=sum(1 for f in features if f.provenance is Provenance.LLM_DISCOVERED),
        coverage=coverage_stats(result.values, features, patient_ids),
        ablation=result.ablation,
        expert_added=[f.name for f in features if f.provenance is Provenance.EXPERT_ADDED],
    )
