"""Rule-based offline stand-in for an LLM.

It reads the ``TASK:`` line every packaged template starts with and answers
from the prompt text alone, so golden pipeline runs need neither network nor
credentials.  Answers are deterministic but carry no clinical judgement.
"""

from __future__ import annotations

import hashlib
import json
import re
from typing import Callable, Optional

from .llm import FunctionBackend, GenerationConfig

# (pattern, name, kind, units) scanned by the discovery task
LEXICON: list[tuple[str, str, str, Optional[str]]] = [
    (r"dyspn|shortness of breath|breathless", "dyspnea", "boolean", None),
    (r"cough", "cough", "boolean", None),
    (r"fever|pyrexi|febrile", "fever", "boolean", None),
    (r"chest pain|pleuritic", "chest_pain", "boolean", None),
    (r"edema|oedema|swelling", "peripheral_edema", "boolean", None),
    (r"orthopn", "orthopnea", "boolean", None),
    (r"smok", "smoking_history", "categorical", None),
    (r"asbestos", "asbestos_exposure", "boolean", None),
    (r"surgery|postoperative|post-operative", "recent_surgery", "boolean", None),
    (r"heart failure|cardiac failure", "heart_failure", "boolean", None),
    (r"hypertension", "hypertension", "boolean", None),
    (r"white (blood )?cell|leukocyt|wbc", "white_cell_count", "numeric", "10^9/L"),
    (r"c-reactive|crp", "crp", "numeric", "mg/L"),
    (r"bnp|natriuretic", "bnp", "numeric", "pg/mL"),
    (r"body mass|obes|overweight", "bmi", "numeric", "kg/m2"),
    (r"trauma|injur", "chest_trauma", "boolean", None),
    (r"malignan|cancer|tumou?r", "malignancy_history", "boolean", None),
]

ANSWER_WORDS = 80  # per retrieved passage

NORMAL_VITALS = {"temperature": 98.6, "heartrate": 80, "resprate": 16, "o2sat": 97, "sbp": 120, "dbp": 78}


def _section(prompt: str, start: str, end: Optional[str]) -> str:
    i = prompt.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = prompt.find(end, i) if end else -1
    return prompt[i:j if j >= 0 else None]


def _stable_unit(*parts: str) -> float:
    h = hashlib.sha256("|".join(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") / 2**64


def _answer_question(prompt: str) -> str:
    passages = _section(prompt, "Retrieved passages:\n", "\n\nAnswer:").strip()
    if not passages or passages.startswith("(no retrieved context)"):
        return "The reference material does not cover this question."
    points = []
    for para in passages.split("\n\n"):
        text = re.sub(r"^\[[^\]]*\]\s*", "", para)
        points.append(" ".join(text.split()[:ANSWER_WORDS]))
    return "Relevant points from the references: " + " ... ".join(points)


def _discover(prompt: str) -> str:
    knowledge = _section(prompt, "Clinical knowledge:\n", "\n\nList the clinical features").lower()
    found = [
        {"name": name, "kind": kind, "units": units}
        for pattern, name, kind, units in LEXICON
        if re.search(pattern, knowledge)
    ]
    if not found:
        found = [{"name": "dyspnea", "kind": "boolean", "units": None}]
    return json.dumps(found)


def _generate_values(prompt: str) -> str:
    feats = re.findall(r"^- ([a-z][a-z0-9_]*) \((numeric|boolean|categorical)(?:, [^)]*)?\)$",
                       _section(prompt, "### Features to fill\n", "\n\n"), re.M)
    report = _section(prompt, "Radiology report:\n", "\n\nRespond").lower()
    pid = _section(prompt, "Patient: ", "\n").strip()
    lexicon = {name: pattern for pattern, name, _, _ in LEXICON}
    out: dict = {}
    for name, kind in feats:
        pattern = lexicon.get(name, re.escape(name.replace("_", " ")))
        hit = re.search(pattern, report) is not None
        if kind == "boolean":
            out[name] = "yes" if hit else "no"
        elif kind == "numeric":
            out[name] = round(10 * _stable_unit(pid, name) + (5 if hit else 0), 2)
        else:
            out[name] = "reported" if hit else "unknown"
    return json.dumps(out)


def _existing_values(prompt: str) -> str:
    keys = re.findall(r'"([a-z0-9_]+)"', _section(prompt, "Use exactly these keys: ", "\n") or "")
    return json.dumps({k: NORMAL_VITALS[k] for k in keys if k in NORMAL_VITALS})


HANDLERS: dict[str, Callable[[str], str]] = {
    "expert_question": _answer_question,
    "feature_discovery": _discover,
    "value_generation": _generate_values,
    "existing_values": _existing_values,
}


def fixture_response(prompt: str, config: Optional[GenerationConfig] = None) -> str:
    m = re.match(r"TASK: (\w+)", prompt)
    if not m or m.group(1) not in HANDLERS:
        return "I cannot answer this request."
    return HANDLERS[m.group(1)](prompt)


def fixture_backend() -> FunctionBackend:
    return FunctionBackend(fixture_response, descriptor="fixture-mock-v1")
