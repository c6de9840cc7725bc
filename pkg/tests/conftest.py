from importlib import resources
from pathlib import Path

import pytest

from dallm.core import LESIONS, Gender, Lesion, PatientCase, make_dataset
from dallm.ingest import Scope, Source, SourceQuery, build_corpus
from dallm.kstore import build_index
from dallm.synthetic import synthetic_dataset

FIXTURE_CORPUS = Path(str(resources.files("dallm.fixtures").joinpath("corpus")))


def make_case(pid="p1", positive=(), report="Lungs are clear.", **overrides):
    vitals = dict(age=60, gender=Gender.FEMALE, temperature=98.6, heartrate=80.0, resprate=16.0,
                  o2sat=97.0, sbp=120.0, dbp=80.0)
    vitals.update(overrides)
    labels = {l: l in {Lesion(p) for p in positive} for l in LESIONS}
    return PatientCase(pid, report=report, labels=labels, **vitals)


@pytest.fixture
def small_dataset():
    return synthetic_dataset(40, seed=3)


@pytest.fixture
def tiny_dataset():
    cases = [
        make_case("a", positive=["pleural_effusion"], heartrate=90.0),
        make_case("b", heartrate=70.0, gender=Gender.MALE),
        make_case("c", positive=["atelectasis"], heartrate=None),
    ]
    return make_dataset(cases)


@pytest.fixture(scope="session")
def fixture_corpus():
    return build_corpus(LESIONS, [SourceQuery(Source.FIXTURE, "x", Scope.FIRST_PAGE, FIXTURE_CORPUS)])


@pytest.fixture(scope="session")
def fixture_index(fixture_corpus):
    return build_index(fixture_corpus, size=64, overlap=8)


# acceptance criteria append "PASS|FAIL ..." lines here; printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
