"""Knowledge-document acquisition per lesion.

Documents come either from an on-disk fixture corpus (the default for tests
and offline runs) or from Wikipedia / Radiopaedia search pages.  Everything
downstream reads the persisted corpus directory, never the network.
"""

from __future__ import annotations

import html
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from html.parser import HTMLParser
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union
from urllib.parse import quote, urljoin

from .core import LESIONS, Lesion, normalize_name

log = logging.getLogger(__name__)

FIXTURE_TIMESTAMP = "1970-01-01T00:00:00Z"
FIRST_PAGE_CAP = 25
FIXTURE_SUFFIXES = (".txt", ".md", ".html", ".htm")


class Source(str, Enum):
    WIKIPEDIA = "wikipedia"
    RADIOPAEDIA = "radiopaedia"
    FIXTURE = "fixture"


class Scope(str, Enum):
    TOP_ONE = "top_one"
    FIRST_PAGE = "first_page"


class IngestError(RuntimeError):
    pass


class NetworkUnreachableError(IngestError):
    pass


class EmptyCorpusError(IngestError):
    pass


@dataclass(frozen=True)
class SourceQuery:
    source: Source
    term: str
    scope: Scope = Scope.FIRST_PAGE
    corpus_path: Optional[Path] = None

    def __post_init__(self):
        object.__setattr__(self, "source", Source(self.source))
        object.__setattr__(self, "scope", Scope(self.scope))
        if not self.term or not self.term.strip():
            raise ValueError("query term must be non-empty")
        if self.source is Source.FIXTURE:
            if self.corpus_path is None:
                raise ValueError("fixture source requires a corpus path")
            object.__setattr__(self, "corpus_path", Path(self.corpus_path))


@dataclass(frozen=True)
class RawDocument:
    source: Source
    term: str
    title: str
    ref: str  # url for live sources, relative file id for fixtures
    body: str
    retrieved_at: str

    def __post_init__(self):
        object.__setattr__(self, "source", Source(self.source))
        if not self.body.strip():
            raise ValueError(f"document {self.ref} has an empty body")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source"] = self.source.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RawDocument":
        return cls(**{k: d[k] for k in ("source", "term", "title", "ref", "body", "retrieved_at")})


# --------------------------------------------------------------------------
# HTML to text

_SKIP_TAGS = {"script", "style", "nav", "header", "footer", "aside", "noscript", "form", "svg", "template", "iframe"}
_BLOCK_TAGS = {
    "p", "div", "br", "li", "ul", "ol", "tr", "td", "th", "table", "section", "article",
    "h1", "h2", "h3", "h4", "h5", "h6", "blockquote", "pre", "dd", "dt", "figcaption", "main",
}
_VOID_TAGS = {"br", "img", "hr", "meta", "link", "input", "wbr", "source", "area", "base", "col", "embed"}


class _TextExtractor(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self.skip_depth = 0
        self.title: Optional[str] = None
        self._in_title = False

    def handle_starttag(self, tag, attrs):
        if tag in _SKIP_TAGS:
            if tag not in _VOID_TAGS:
                self.skip_depth += 1
            return
        if tag == "title":
            self._in_title = True
        if tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_startendtag(self, tag, attrs):
        if tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if tag in _SKIP_TAGS:
            self.skip_depth = max(0, self.skip_depth - 1)
            return
        if tag == "title":
            self._in_title = False
        if tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_data(self, data):
        if self._in_title:
            self.title = (self.title or "") + data
            return
        if self.skip_depth == 0:
            self.parts.append(data)


def _normalize_lines(text: str) -> str:
    lines = (" ".join(line.split()) for line in text.splitlines())
    return "\n".join(line for line in lines if line)


def strip_html(markup: str) -> str:
    """Reduce HTML to plain text.

    Rules: drop script/style/navigation/header/footer/aside/form content,
    the <title> element and comments; break lines at block elements
    (headings, paragraphs, list items, table cells); collapse whitespace
    inside lines and drop blank lines.  ``&``, ``<`` and ``>`` stay
    entity-escaped in the output so stripping is idempotent.
    """
    parser = _TextExtractor()
    parser.feed(markup)
    parser.close()
    return html.escape(_normalize_lines("".join(parser.parts)), quote=False)


def html_title(markup: str) -> Optional[str]:
    parser = _TextExtractor()
    parser.feed(markup)
    parser.close()
    return " ".join(parser.title.split()) if parser.title else None


# --------------------------------------------------------------------------
# fetching


def _fixture_documents(query: SourceQuery) -> list[RawDocument]:
    term_dir = query.corpus_path / normalize_name(query.term)
    if not term_dir.is_dir():
        log.warning("fixture corpus has no directory for %r", query.term)
        return []
    files = sorted(p for p in term_dir.iterdir() if p.is_file() and p.suffix in FIXTURE_SUFFIXES)
    docs = []
    for p in files:
        raw = p.read_text(encoding="utf-8")
        if p.suffix in (".html", ".htm"):
            body, title = strip_html(raw), html_title(raw)
        else:
            body, title = _normalize_lines(raw), None
        if not body:
            log.warning("skipping empty fixture document %s", p)
            continue
        if title is None:
            title = body.splitlines()[0][:120]
        ref = p.relative_to(query.corpus_path).as_posix()
        docs.append(RawDocument(Source.FIXTURE, query.term, title, ref, body, FIXTURE_TIMESTAMP))
        if query.scope is Scope.TOP_ONE:
            break
    return docs


class RateLimiter:
    """Enforces a minimum interval between requests across threads."""

    def __init__(self, min_interval: float = 1.0):
        self.min_interval = min_interval
        self._lock = threading.Lock()
        self._last = 0.0

    def wait(self):
        with self._lock:
            delay = self._last + self.min_interval - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            self._last = time.monotonic()


class LiveFetcher:
    """Search-and-download client for the two live sources.

    ``session`` only needs a requests-style ``get(url, params=..., timeout=...)``
    returning an object with ``status_code``, ``text``, ``json()`` and
    ``raise_for_status()``.
    """

    WIKI_API = "https://en.wikipedia.org/w/api.php"
    WIKI_PAGE = "https://en.wikipedia.org/wiki/"
    RADIOPAEDIA = "https://radiopaedia.org"
    USER_AGENT = "dallm-ingest/0.1 (research use)"

    def __init__(self, session=None, min_interval: float = 1.0, timeout: float = 20.0):
        if session is None:
            import requests

            session = requests.Session()
            session.headers["User-Agent"] = self.USER_AGENT
        self.session = session
        self.limiter = RateLimiter(min_interval)
        self.timeout = timeout

    def _get(self, url: str, params: Optional[dict] = None):
        self.limiter.wait()
        try:
            resp = self.session.get(url, params=params, timeout=self.timeout)
        except OSError as exc:
            raise NetworkUnreachableError(f"{url}: {exc}") from exc
        except Exception as exc:  # requests.ConnectionError and friends
            if type(exc).__name__ in ("ConnectionError", "Timeout", "ConnectTimeout", "ReadTimeout"):
                raise NetworkUnreachableError(f"{url}: {exc}") from exc
            raise
        resp.raise_for_status()
        return resp

    def search(self, query: SourceQuery) -> list[tuple[str, str]]:
        """Return ``(title, url)`` hits from the first result page."""
        if query.source is Source.WIKIPEDIA:
            data = self._get(
                self.WIKI_API,
                {"action": "query", "list": "search", "srsearch": query.term,
                 "srlimit": FIRST_PAGE_CAP, "format": "json"},
            ).json()
            hits = [(h["title"], self.WIKI_PAGE + quote(h["title"].replace(" ", "_")))
                    for h in data.get("query", {}).get("search", [])]
        elif query.source is Source.RADIOPAEDIA:
            page = self._get(self.RADIOPAEDIA + "/search", {"q": query.term, "scope": "articles"}).text
            hits = []
            for href, label in re.findall(r'<a[^>]+href="(/articles/[^"#?]+)[^"]*"[^>]*>(.*?)</a>', page, re.S):
                title = strip_html(label) or href.rsplit("/", 1)[-1]
                url = urljoin(self.RADIOPAEDIA, href)
                if url not in {u for _, u in hits}:
                    hits.append((html.unescape(title).split("\n")[0], url))
        else:
            raise ValueError(f"{query.source} is not a live source")
        if len(hits) > FIRST_PAGE_CAP:
            log.info("capping %d hits for %r at %d", len(hits), query.term, FIRST_PAGE_CAP)
            hits = hits[:FIRST_PAGE_CAP]
        return hits

    def download(self, query: SourceQuery, title: str, url: str) -> RawDocument:
        if query.source is Source.WIKIPEDIA:
            data = self._get(
                self.WIKI_API,
                {"action": "parse", "page": title, "prop": "text", "format": "json", "formatversion": 2},
            ).json()
            markup = data["parse"]["text"]
        else:
            markup = self._get(url).text
            main = re.search(r'<div[^>]+class="[^"]*article-section[^"]*"[^>]*>(.*)', markup, re.S)
            if main:
                markup = main.group(1)
        body = strip_html(markup)
        stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        return RawDocument(query.source, query.term, title, url, body, stamp)

    def fetch(self, query: SourceQuery) -> list[RawDocument]:
        hits = self.search(query)
        if query.scope is Scope.TOP_ONE:
            hits = hits[:1]
        docs = []
        for title, url in hits:
            try:
                docs.append(self.download(query, title, url))
            except NetworkUnreachableError:
                raise
            except Exception as exc:
                log.warning("skipping %s (%s): %s", title, url, exc)
        return docs


def fetch_documents(query: SourceQuery, fetcher: Optional[LiveFetcher] = None) -> list[RawDocument]:
    """Retrieve the documents for one query.

    An empty list means the source returned nothing; failures raise.
    """
    if query.source is Source.FIXTURE:
        docs = _fixture_documents(query)
    else:
        docs = (fetcher or LiveFetcher()).fetch(query)
    if not docs:
        log.warning("source %s returned no documents for %r", query.source.value, query.term)
    return docs


def lesion_queries(
    lesion: Lesion,
    sources: Sequence[Source],
    scope: Scope,
    corpus_path: Optional[Path] = None,
) -> list[SourceQuery]:
    lesion = Lesion(lesion)
    return [
        SourceQuery(s, lesion.value if Source(s) is Source.FIXTURE else lesion.display_name, scope,
                    corpus_path if Source(s) is Source.FIXTURE else None)
        for s in sources
    ]


def build_corpus(
    lesions: Iterable[Lesion],
    sources: Sequence[Union[SourceQuery, Callable[[Lesion], SourceQuery]]],
    corpus_dir: Optional[Union[str, Path]] = None,
    fetcher: Optional[LiveFetcher] = None,
    parallelism: int = 1,
) -> dict[Lesion, list[RawDocument]]:
    """Fetch every (lesion, source) pair and optionally persist the corpus.

    ``sources`` are query templates: either callables mapping a lesion to a
    :class:`SourceQuery`, or queries whose term is replaced by the lesion.
    Documents are ordered by (lesion, source, rank) whatever the completion
    order.  A lesion with no documents across all sources is a hard error.
    """
    lesions = [Lesion(l) for l in lesions]
    if not sources:
        raise ValueError("at least one source must be configured")

    def make(template, lesion: Lesion) -> SourceQuery:
        if callable(template):
            return template(lesion)
        term = lesion.value if template.source is Source.FIXTURE else lesion.display_name
        return SourceQuery(template.source, term, template.scope, template.corpus_path)

    jobs = [(l, i, make(t, l)) for l in lesions for i, t in enumerate(sources)]
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(pool.map(lambda job: fetch_documents(job[2], fetcher), jobs))

    corpus: dict[Lesion, list[RawDocument]] = {l: [] for l in lesions}
    for (lesion, _, query), docs in zip(jobs, results):
        if not docs:
            log.warning("lesion %s: source %s contributed no documents", lesion.value, query.source.value)
        seen = {(d.source, d.ref) for d in corpus[lesion]}
        for d in docs:
            if (d.source, d.ref) in seen:
                continue
            seen.add((d.source, d.ref))
            corpus[lesion].append(d)
    for lesion, docs in corpus.items():
        if not docs:
            raise EmptyCorpusError(f"no documents retrieved for lesion {lesion.value!r} from any source")
    if corpus_dir is not None:
        save_corpus(corpus, corpus_dir)
    return corpus


def save_corpus(corpus: Mapping[Lesion, Sequence[RawDocument]], corpus_dir: Union[str, Path]) -> Path:
    """One directory per lesion; ``NNN.txt`` body plus ``NNN.json`` metadata per document."""
    root = Path(corpus_dir)
    for lesion, docs in corpus.items():
        d = root / Lesion(lesion).value
        d.mkdir(parents=True, exist_ok=True)
        for stale in d.glob("[0-9][0-9][0-9].*"):
            stale.unlink()
        for i, doc in enumerate(docs):
            (d / f"{i:03d}.txt").write_text(doc.body + "\n", encoding="utf-8")
            meta = {k: v for k, v in doc.to_dict().items() if k != "body"}
            (d / f"{i:03d}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load_corpus(corpus_dir: Union[str, Path]) -> dict[Lesion, list[RawDocument]]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")
    corpus: dict[Lesion, list[RawDocument]] = {}
    for lesion in LESIONS:
        d = root / lesion.value
        if not d.is_dir():
            continue
        docs = []
        for meta_path in sorted(d.glob("[0-9][0-9][0-9].json")):
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            body = meta_path.with_suffix(".txt").read_text(encoding="utf-8").rstrip("\n")
            docs.append(RawDocument.from_dict({**meta, "body": body}))
        corpus[lesion] = docs
    return corpus
