import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dallm.core import LESIONS, Lesion
from dallm.ingest import (
    FIRST_PAGE_CAP,
    FIXTURE_TIMESTAMP,
    EmptyCorpusError,
    LiveFetcher,
    NetworkUnreachableError,
    RawDocument,
    Scope,
    Source,
    SourceQuery,
    build_corpus,
    fetch_documents,
    load_corpus,
    save_corpus,
    strip_html,
)


def write_corpus(root, layout):
    for term, files in layout.items():
        d = root / term
        d.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            (d / name).write_text(text)
    return root


@pytest.fixture
def three_docs(tmp_path):
    return write_corpus(tmp_path / "corpus", {
        "atelectasis": {"b.txt": "Second doc.", "a.txt": "First doc.", "c.html": "<p>Third &amp; last</p>"},
    })


def test_first_page_returns_all_in_file_name_order(three_docs):
    docs = fetch_documents(SourceQuery(Source.FIXTURE, "atelectasis", Scope.FIRST_PAGE, three_docs))
    assert [d.ref for d in docs] == ["atelectasis/a.txt", "atelectasis/b.txt", "atelectasis/c.html"]
    assert docs[2].body == "Third &amp; last"
    assert all(d.retrieved_at == FIXTURE_TIMESTAMP for d in docs)


def test_top_one_returns_first_file(three_docs):
    docs = fetch_documents(SourceQuery(Source.FIXTURE, "atelectasis", Scope.TOP_ONE, three_docs))
    assert [d.ref for d in docs] == ["atelectasis/a.txt"]


def test_fixture_fetch_is_deterministic(three_docs):
    q = SourceQuery(Source.FIXTURE, "atelectasis", Scope.FIRST_PAGE, three_docs)
    assert fetch_documents(q) == fetch_documents(q)


@pytest.mark.parametrize("kwargs", [dict(term=" "), dict(corpus_path=None)])
def test_query_invariants(kwargs, tmp_path):
    args = dict(source=Source.FIXTURE, term="atelectasis", scope=Scope.TOP_ONE, corpus_path=tmp_path)
    args.update(kwargs)
    with pytest.raises(ValueError):
        SourceQuery(**args)


def test_raw_document_needs_body():
    with pytest.raises(ValueError):
        RawDocument(Source.FIXTURE, "t", "t", "ref", "  ", FIXTURE_TIMESTAMP)


@pytest.mark.parametrize(
    "markup, expected",
    [
        ("<h1>Title</h1><p>Body   text</p>", "Title\nBody text"),
        ("<script>var x=1;</script><p>kept</p><style>p{}</style>", "kept"),
        ("<nav><a>menu</a></nav><div>main<br>line</div>", "main\nline"),
        ("<ul><li>one</li><li>two</li></ul>", "one\ntwo"),
        ("<p>a &lt; b</p>", "a &lt; b"),
        ("<title>Page</title><p>x</p>", "x"),
        ("plain words", "plain words"),
    ],
)
def test_strip_html_rules(markup, expected):
    assert strip_html(markup) == expected


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.sampled_from(list("ab <>/&;pdivscrt\n\"=")), max_size=80))
def test_strip_html_is_idempotent(markup):
    once = strip_html(markup)
    assert strip_html(once) == once


def two_doc_corpus(root, skip=()):
    layout = {l.value: {"01.txt": f"{l.display_name} overview.", "02.txt": f"{l.display_name} care."}
              for l in LESIONS if l not in skip}
    return write_corpus(root, layout)


def test_build_corpus_five_lesions_two_docs(tmp_path):
    root = two_doc_corpus(tmp_path / "c")
    template = SourceQuery(Source.FIXTURE, "x", Scope.FIRST_PAGE, root)
    corpus = build_corpus(LESIONS, [template], tmp_path / "out", parallelism=3)
    assert list(corpus) == list(LESIONS)
    assert all(len(v) == 2 for v in corpus.values())
    assert load_corpus(tmp_path / "out") == corpus


def test_one_empty_source_still_covers_lesion(tmp_path, caplog):
    full = two_doc_corpus(tmp_path / "full")
    empty = write_corpus(tmp_path / "empty", {"unrelated": {"x.txt": "x"}})
    templates = [SourceQuery(Source.FIXTURE, "x", Scope.FIRST_PAGE, empty),
                 SourceQuery(Source.FIXTURE, "x", Scope.FIRST_PAGE, full)]
    corpus = build_corpus([Lesion.ATELECTASIS], templates)
    assert len(corpus[Lesion.ATELECTASIS]) == 2
    assert "contributed no documents" in caplog.text


def test_lesion_without_documents_is_fatal(tmp_path):
    root = two_doc_corpus(tmp_path / "c", skip=[Lesion.PLEURAL_ABNORMALITY])
    template = SourceQuery(Source.FIXTURE, "x", Scope.FIRST_PAGE, root)
    with pytest.raises(EmptyCorpusError, match="pleural_abnormality"):
        build_corpus(LESIONS, [template])


def test_duplicate_documents_are_dropped(tmp_path):
    root = two_doc_corpus(tmp_path / "c")
    t = SourceQuery(Source.FIXTURE, "x", Scope.FIRST_PAGE, root)
    corpus = build_corpus([Lesion.CONSOLIDATION], [t, t])
    refs = [(d.source, d.ref) for d in corpus[Lesion.CONSOLIDATION]]
    assert len(refs) == len(set(refs)) == 2


def test_save_corpus_layout(tmp_path):
    doc = RawDocument(Source.FIXTURE, "atelectasis", "T", "atelectasis/a.txt", "Body.", FIXTURE_TIMESTAMP)
    save_corpus({Lesion.ATELECTASIS: [doc]}, tmp_path)
    assert (tmp_path / "atelectasis" / "000.txt").read_text() == "Body.\n"
    meta = json.loads((tmp_path / "atelectasis" / "000.json").read_text())
    assert meta["ref"] == "atelectasis/a.txt" and "body" not in meta


# live fetcher against a fake session ------------------------------------


class FakeResponse:
    def __init__(self, payload=None, text="", status=200):
        self._payload = payload
        self.text = text
        self.status_code = status

    def json(self):
        return self._payload

    def raise_for_status(self):
        if self.status_code >= 400:
            raise RuntimeError(f"HTTP {self.status_code}")


class FakeWiki:
    def __init__(self, n_hits):
        self.n_hits = n_hits
        self.calls = []

    def get(self, url, params=None, timeout=None):
        self.calls.append(params)
        if params["action"] == "query":
            hits = [{"title": f"Article {i}"} for i in range(self.n_hits)]
            return FakeResponse({"query": {"search": hits}})
        return FakeResponse({"parse": {"text": f"<p>{params['page']} body</p><script>x</script>"}})


def test_wikipedia_first_page_is_capped():
    session = FakeWiki(40)
    fetcher = LiveFetcher(session, min_interval=0)
    docs = fetcher.fetch(SourceQuery(Source.WIKIPEDIA, "pleural effusion", Scope.FIRST_PAGE))
    assert len(docs) == FIRST_PAGE_CAP
    assert docs[0].body == "Article 0 body"
    assert docs[0].ref.endswith("/wiki/Article_0")


def test_wikipedia_top_one():
    fetcher = LiveFetcher(FakeWiki(5), min_interval=0)
    docs = fetcher.fetch(SourceQuery(Source.WIKIPEDIA, "atelectasis", Scope.TOP_ONE))
    assert [d.title for d in docs] == ["Article 0"]


def test_radiopaedia_search_parses_article_links():
    page = ('<a href="/articles/atelectasis?lang=us">Atelectasis</a>'
            '<a href="/articles/lobar-collapse">Lobar <b>collapse</b></a>'
            '<a href="/cases/123">a case</a>')

    class Session:
        def get(self, url, params=None, timeout=None):
            if url.endswith("/search"):
                return FakeResponse(text=page)
            return FakeResponse(text=f'<div class="article-section"><p>{url}</p></div>')

    docs = LiveFetcher(Session(), min_interval=0).fetch(SourceQuery(Source.RADIOPAEDIA, "atelectasis"))
    assert [d.title for d in docs] == ["Atelectasis", "Lobar collapse"]
    assert docs[1].body == "https://radiopaedia.org/articles/lobar-collapse"


def test_network_unreachable_is_distinguished():
    class Down:
        def get(self, url, params=None, timeout=None):
            raise ConnectionError("no route")

    with pytest.raises(NetworkUnreachableError):
        LiveFetcher(Down(), min_interval=0).fetch(SourceQuery(Source.WIKIPEDIA, "atelectasis"))


def test_empty_result_is_not_an_error():
    assert LiveFetcher(FakeWiki(0), min_interval=0).fetch(SourceQuery(Source.WIKIPEDIA, "zzz")) == []


def test_bad_document_is_skipped(caplog):
    class Flaky(FakeWiki):
        def get(self, url, params=None, timeout=None):
            if params["action"] == "parse" and params["page"] == "Article 1":
                return FakeResponse({"parse": {}})
            return super().get(url, params, timeout)

    docs = LiveFetcher(Flaky(3), min_interval=0).fetch(SourceQuery(Source.WIKIPEDIA, "x"))
    assert [d.title for d in docs] == ["Article 0", "Article 2"]
    assert "skipping Article 1" in caplog.text
