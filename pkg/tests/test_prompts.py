import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dallm.augment import ACKEntry
from dallm.core import VITALS, FeatureDescriptor, FeatureKind, Lesion, Provenance
from dallm.kstore import KnowledgeChunk
from dallm.llm import CacheStatus, Completion
from dallm.prompts import (
    NO_CONTEXT,
    Confidence,
    FeatureParseError,
    PromptError,
    QuestionCategory,
    ValueParseError,
    celsius_to_fahrenheit,
    expert_questions,
    load_exemplars,
    parse_feature_list,
    parse_feature_values,
    render_ack_block,
    render_existing_value_prompt,
    render_expert_questions,
    render_feature_discovery_prompt,
    render_feature_values,
    render_value_generation_prompt,
)

from conftest import make_case

NUM = FeatureKind.NUMERIC
BOOL = FeatureKind.BOOLEAN
CAT = FeatureKind.CATEGORICAL

SCHEMA = [
    FeatureDescriptor("temperature", NUM, "F"),
    FeatureDescriptor("o2sat", NUM, "%"),
    FeatureDescriptor("dyspnea", BOOL, None, Provenance.LLM_DISCOVERED),
    FeatureDescriptor("smoking_history", CAT, None, Provenance.LLM_DISCOVERED),
]


def ack_entries(lesion=Lesion.ATELECTASIS, n=7):
    qs = expert_questions()
    return [ACKEntry(lesion, q.id, q.text(lesion), ("c#1",), f"answer {q.id} about lung", "f" * 64) for q in qs[:n]]


def chunks(n=2):
    return [KnowledgeChunk(f"atelectasis/fixture:a#{i:04d}", Lesion.ATELECTASIS, "fixture:a", f"passage {i}", (0, 2))
            for i in range(n)]


# expert questions


def test_seven_questions_partition():
    qs = expert_questions()
    assert [q.id for q in qs] == list(range(1, 8))
    counts = Counter(q.category for q in qs)
    assert [counts[c] for c in QuestionCategory] == [2, 1, 2, 1, 1]
    assert all("{lesion}" in q.template for q in qs)


def test_question_one_atelectasis():
    prompts = render_expert_questions(Lesion.ATELECTASIS)
    assert len(prompts) == 7 and [p.question_id for p in prompts] == list(range(1, 8))
    assert "What are the symptoms associated with atelectasis?" in prompts[0].text


@pytest.mark.parametrize("other", [l for l in Lesion if l is not Lesion.ATELECTASIS])
def test_lesions_differ_only_at_substitution(other):
    a = render_expert_questions(Lesion.ATELECTASIS)
    b = render_expert_questions(other)
    for pa, pb in zip(a, b):
        assert pa.text != pb.text
        assert pa.text.replace("atelectasis", "<L>") == pb.text.replace(other.display_name, "<L>")


def test_expert_prompt_evidence_and_marker():
    with_ev = render_expert_questions(Lesion.ATELECTASIS, {1: chunks()})
    assert "[atelectasis/fixture:a#0000] passage 0" in with_ev[0].text
    assert NO_CONTEXT in with_ev[1].text


# existing-value prompt


def test_existing_value_prompt_units_and_keys():
    case = make_case(report="Small left effusion.")
    prompt = render_existing_value_prompt(case, VITALS)
    assert "temperature in degrees Fahrenheit" in prompt
    for v in VITALS:
        assert f'"{v}"' in prompt
    assert "Small left effusion." in prompt and "Age: 60" in prompt and "female" in prompt.lower()


def test_existing_value_prompt_no_leak():
    case = make_case(temperature=101.3, heartrate=113.0, resprate=27.0, o2sat=88.0, sbp=141.0, dbp=93.0, age=52)
    prompt = render_existing_value_prompt(case, VITALS)
    for v in VITALS:
        value = getattr(case, v)
        assert f"{value:g}" not in prompt and str(value) not in prompt


def test_existing_value_single_key():
    prompt = render_existing_value_prompt(make_case(), ["o2sat"])
    keys_line = [l for l in prompt.splitlines() if "Use exactly these keys" in l][0]
    assert keys_line.count('"') == 2 and '"o2sat"' in keys_line


@pytest.mark.parametrize("targets, report", [([], "r"), (["age"], "r"), (["o2sat"], "  ")])
def test_existing_value_preconditions(targets, report):
    with pytest.raises(PromptError):
        render_existing_value_prompt(make_case(report=report), targets)


# value generation


def test_ablation_differs_exactly_by_ack_block():
    args = (ack_entries(), SCHEMA, chunks(), make_case())
    full = render_value_generation_prompt(*args, ablation=False)
    abl = render_value_generation_prompt(*args, ablation=True)
    block = render_ack_block(args[0])
    assert full.count(block) == 1
    assert full.replace(block, "", 1) == abl
    assert "Prior clinical knowledge" not in abl


def test_value_prompt_source_order():
    p = render_value_generation_prompt(ack_entries(), SCHEMA, chunks(), make_case(report="RPT"))
    marks = [p.index(s) for s in ("answer 1 about lung", "- dyspnea (boolean)", "passage 0", "RPT")]
    assert marks == sorted(marks)


def test_value_prompt_no_context_marker():
    p = render_value_generation_prompt(ack_entries(), SCHEMA, [], make_case())
    assert NO_CONTEXT in p


def test_value_prompt_deterministic_and_needs_features():
    args = (ack_entries(), SCHEMA, chunks(), make_case())
    assert render_value_generation_prompt(*args) == render_value_generation_prompt(*args)
    with pytest.raises(PromptError):
        render_value_generation_prompt(ack_entries(), [], [], make_case())


# discovery


def test_discovery_prompt_shots_before_ack():
    shots = load_exemplars()
    assert len(shots) == 2
    p = render_feature_discovery_prompt(ack_entries(), shots)
    assert p.index("Example 1:") < p.index("Example 2:") < p.index("Q1 [atelectasis]")
    assert p == render_feature_discovery_prompt(ack_entries(), shots)
    with pytest.raises(PromptError):
        render_feature_discovery_prompt(ack_entries(), [])


# feature-list parsing


def test_parse_feature_list_json():
    (d,) = parse_feature_list('[{"name":"Dyspnea","kind":"boolean"}]')
    assert d.name == "dyspnea" and d.kind is BOOL and d.provenance is Provenance.LLM_DISCOVERED


def test_parse_feature_list_bullet():
    (d,) = parse_feature_list("- smoking history (categorical)")
    assert d.name == "smoking_history" and d.kind is CAT


def test_parse_feature_list_dedup_and_units():
    text = "- Fever (boolean)\n- fever (numeric, F)\n* CRP (numeric, mg/L)\n1. Cough (yes/no)"
    feats = parse_feature_list(text)
    assert [(f.name, f.kind, f.units) for f in feats] == [("fever", BOOL, None), ("crp", NUM, "mg/L"),
                                                          ("cough", BOOL, None)]


def test_parse_feature_list_accepts_completion():
    comp = Completion('[{"name":"BNP","kind":"numeric","units":"pg/mL"}]', "m", "f", CacheStatus.MOCKED)
    assert parse_feature_list(comp)[0].units == "pg/mL"


@pytest.mark.parametrize("text", ["", "no features here", '[{"name":"x","kind":"colour"}]'])
def test_parse_feature_list_nothing(text):
    with pytest.raises(FeatureParseError):
        parse_feature_list(text)


# value parsing


def by_name(values):
    return {v.name: v for v in values}


def test_parse_values_json():
    out = by_name(parse_feature_values('{"temperature": 98.6, "dyspnea": "yes"}', SCHEMA))
    assert out["temperature"].value == 98.6 and out["temperature"].units == "F"
    assert out["dyspnea"].value is True
    assert out["temperature"].confidence is Confidence.PARSED_JSON


def test_parse_values_line_percent():
    (v,) = parse_feature_values("o2sat: 97%", SCHEMA)
    assert v.value == 97.0 and v.units == "%" and v.confidence is Confidence.PARSED_LINE


def test_parse_values_unknown_not_guessed():
    (v,) = parse_feature_values("temperature: unknown", SCHEMA)
    assert v.confidence is Confidence.UNPARSED and v.value is None


def test_parse_values_celsius_converted():
    (v,) = parse_feature_values('{"temperature": "37 C"}', SCHEMA)
    assert v.value == pytest.approx(98.6) and v.units == "F"
    assert celsius_to_fahrenheit(100) == 212


def test_parse_values_unit_mismatch_unparsed():
    (v,) = parse_feature_values("temperature: 98.6 mmHg", SCHEMA)
    assert not v.parsed


def test_parse_values_unknown_names_ignored(caplog):
    out = parse_feature_values('{"bogus": 1, "o2sat": 95}', SCHEMA)
    assert [v.name for v in out] == ["o2sat"]
    assert "bogus" in caplog.text


@pytest.mark.parametrize("text", ["", "I cannot help with that.", "[1, 2]"])
def test_parse_values_wholly_unparseable(text):
    with pytest.raises(ValueParseError):
        parse_feature_values(text, SCHEMA)


def test_parse_values_empty_schema():
    with pytest.raises(ValueParseError):
        parse_feature_values('{"a": 1}', [])


KIND_OK = {NUM: lambda v: isinstance(v, float), BOOL: lambda v: isinstance(v, bool), CAT: lambda v: isinstance(v, str)}

json_scalars = st.one_of(st.none(), st.booleans(), st.integers(-1000, 1000),
                         st.floats(allow_nan=True, allow_infinity=True), st.text(max_size=12),
                         st.sampled_from(["yes", "absent", "98.6 F", "37 C", "97%", "12 mmHg", "n/a"]))


@settings(max_examples=300, deadline=None)
@given(st.dictionaries(st.sampled_from([d.name for d in SCHEMA] + ["other"]), json_scalars, min_size=1))
def test_parsed_values_respect_kind_and_reparse(obj):
    values = parse_feature_values(json.dumps(obj), SCHEMA)
    kinds = {d.name: d.kind for d in SCHEMA}
    for v in values:
        assert v.value is None if not v.parsed else KIND_OK[kinds[v.name]](v.value)
    if values:
        again = parse_feature_values(render_feature_values(values, SCHEMA), SCHEMA)
        assert [(v.name, v.value, v.units) for v in again] == [(v.name, v.value, v.units) for v in values]
