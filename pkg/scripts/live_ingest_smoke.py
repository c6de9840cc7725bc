"""Fetch one lesion from a live source and query it; needs network access.

Not part of the test suite.  Useful for checking that the live fetchers
still match the sites' current page structure.
"""

import click

from dallm.core import Lesion
from dallm.ingest import LiveFetcher, Scope, Source, SourceQuery, build_corpus
from dallm.kstore import build_index


@click.command()
@click.option("--lesion", type=click.Choice([l.value for l in Lesion]), default=Lesion.PLEURAL_EFFUSION.value,
              show_default=True)
@click.option("--source", type=click.Choice([Source.WIKIPEDIA.value, Source.RADIOPAEDIA.value]),
              default=Source.WIKIPEDIA.value, show_default=True)
@click.option("--scope", type=click.Choice([s.value for s in Scope]), default=Scope.TOP_ONE.value, show_default=True)
@click.option("--query", default="typical chest radiograph findings", show_default=True)
@click.option("--k", default=3, show_default=True)
def main(lesion, source, scope, query, k):
    lesion = Lesion(lesion)
    corpus = build_corpus([lesion], [SourceQuery(Source(source), "x", Scope(scope))], fetcher=LiveFetcher())
    docs = corpus[lesion]
    click.echo(f"fetched {len(docs)} document(s): " + ", ".join(d.title for d in docs))
    index = build_index(corpus)
    for cid, score in index.search(query, k, lesion):
        text = index.chunk(cid).text
        click.echo(f"{score:.4f}\t{cid}\t{text[:100]}")


if __name__ == "__main__":
    main()
