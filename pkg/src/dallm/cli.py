"""``dallm`` command line: one command per pipeline stage plus ``run-all``.

Every command reads the same config, writes fixed-name artifacts under the
output directory and records a manifest in ``manifests/<command>.json``.

Exit codes: 0 ok, 2 config error, 3 upstream artifact missing, 4 backend
failure, 5 failure rate exceeded.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import click

from . import augment as aug
from .config import ConfigError, PipelineConfig, load_config
from .core import VITALS, Dataset, DatasetError, FeatureDescriptor, load_dataset, merge_augmented, save_dataset
from .evaluation.harness import (
    ClassifierKind,
    ClassifierSpec,
    EvaluationError,
    MseTable,
    compare_feature_sets,
    format_mse_tables,
    mse_table,
    write_mse_tables,
    write_report,
)
from .ingest import IngestError, LiveFetcher, Scope, Source, SourceQuery, build_corpus, load_corpus
from .kstore import EmbeddingError, KStoreError, RemoteEmbedder, build_index, embedder_from_descriptor, load_index
from .llm import BackendError, CacheMode, GenerationConfig, HttpChatBackend, LLMClient, LLMError, ReplayCache
from .mock import fixture_backend
from .prompts import FeatureParseError, load_exemplars

log = logging.getLogger("dallm")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_BACKEND, EXIT_FAILURE_RATE = 0, 2, 3, 4, 5

# fixed artifact names relative to the output directory
CORPUS = "corpus"
INDEX = "index.json"
ACK = "ack.json"
DISCOVERED = "features_discovered.json"
CURATED = "features_curated.json"
VARIANT_FILES = {
    "augmented": "augmented.csv",
    "augmented_expert": "augmented_expert.csv",
    "ablation": "augmented_ablation.csv",
}
PROMPTS = {False: "prompts_augmented.jsonl", True: "prompts_ablation.jsonl"}
RUN_SUMMARY = "augmentation_run.json"
MANIFESTS = "manifests"


class MissingArtifact(Exception):
    pass


def _sha256_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(p.relative_to(path).as_posix().encode() + b"\0")
            h.update(hashlib.sha256(p.read_bytes()).digest())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _fixture(name: str) -> Path:
    return Path(str(resources.files("dallm.fixtures").joinpath(name)))


class Pipeline:
    """Resolved config plus artifact helpers shared by the commands."""

    def __init__(self, cfg: PipelineConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.out.mkdir(parents=True, exist_ok=True)

    # paths ----------------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifact(f"missing {p}; run `dallm {producer}` first")
        return p

    @property
    def dataset_path(self) -> Path:
        p = Path(self.cfg.paths.dataset) if self.cfg.paths.dataset else _fixture("patients.csv")
        if not p.exists():
            raise MissingArtifact(f"dataset not found: {p}")
        return p

    @property
    def corpus_source(self) -> Path:
        return Path(self.cfg.sources.corpus_dir) if self.cfg.sources.corpus_dir else _fixture("corpus")

    @property
    def curation_path(self) -> Path:
        return Path(self.cfg.paths.curation) if self.cfg.paths.curation else _fixture("curation.json")

    @property
    def shots_path(self) -> Path:
        return Path(self.cfg.paths.shots) if self.cfg.paths.shots else _fixture("discovery_shots.json")

    # resources ------------------------------------------------------------

    def dataset(self) -> Dataset:
        return load_dataset(self.dataset_path)

    def embedder(self):
        desc = self.cfg.backend.embedder
        if desc.startswith("remote:"):
            if self.cfg.sources.offline:
                raise ConfigError("remote embedder requested in offline mode")
            _, model, dim = desc.split(":")
            return RemoteEmbedder(model, int(dim.removeprefix("dim=")))
        try:
            return embedder_from_descriptor(desc)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def client(self) -> LLMClient:
        mode = self.cfg.cache_mode
        if mode is CacheMode.STRICT_REPLAY:
            backend = None  # replay never needs credentials
        elif self.cfg.backend.llm == "fixture" or self.cfg.sources.offline:
            backend = fixture_backend()
        else:
            backend = HttpChatBackend()
        cache_dir = Path(self.cfg.backend.cache_dir) if self.cfg.backend.cache_dir else self.path("cache/llm")
        gen = GenerationConfig(self.cfg.backend.temperature, self.cfg.backend.max_tokens, self.cfg.backend.model)
        cache = None if mode is CacheMode.LIVE else ReplayCache(cache_dir)
        return LLMClient(backend, cache, mode, self.cfg.backend.max_concurrent_llm, gen)

    # outputs --------------------------------------------------------------

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        return p

    def write_json(self, name: str, payload) -> Path:
        return self.write_text(name, json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n")

    def manifest(self, command: str, inputs: dict[str, Path], outputs: list[Path],
                 fingerprints: Optional[list[str]] = None, extra: Optional[dict] = None) -> Path:
        """Record config hash plus content hashes of everything read and written."""

        def rel(p: Path) -> str:
            try:
                return p.relative_to(self.out).as_posix()
            except ValueError:
                return f"<external>/{p.name}"

        payload = {
            "command": command,
            "config_hash": self.cfg.hash(),
            "inputs": {k: {"path": rel(p), "sha256": _sha256_path(p)} for k, p in sorted(inputs.items())},
            "outputs": {rel(p): _sha256_path(p) for p in sorted(outputs)},
        }
        if fingerprints is not None:
            fps = sorted(f for f in fingerprints if f)
            payload["llm"] = {
                "model": self.cfg.backend.model,
                "temperature": self.cfg.backend.temperature,
                "completions": len(fps),
                "fingerprints_sha256": hashlib.sha256("\n".join(fps).encode()).hexdigest(),
            }
        if extra:
            payload.update(extra)
        return self.write_json(f"{MANIFESTS}/{command}.json", payload)


# --------------------------------------------------------------------------
# stage implementations


def run_ingest(p: Pipeline) -> None:
    cfg = p.cfg
    sources = [Source.FIXTURE] if cfg.sources.offline else [Source(s) for s in cfg.sources.sources]
    scope = Scope(cfg.sources.scope)
    templates = [SourceQuery(s, "placeholder", scope, p.corpus_source if s is Source.FIXTURE else None) for s in sources]
    fetcher = None if sources == [Source.FIXTURE] else LiveFetcher()
    out = p.path(CORPUS)
    build_corpus(cfg.lesion_list, templates, out, fetcher, parallelism=cfg.workers)
    inputs = {"fixture_corpus": p.corpus_source} if Source.FIXTURE in sources else {}
    p.manifest("ingest", inputs, [out], extra={"sources": [s.value for s in sources], "scope": scope.value})


def run_index(p: Pipeline) -> None:
    corpus_dir = p.require(CORPUS, "ingest")
    corpus = load_corpus(corpus_dir)
    index = build_index(corpus, p.cfg.chunking.size, p.cfg.chunking.overlap, p.embedder())
    out = index.save(p.path(INDEX))
    p.manifest("index", {"corpus": corpus_dir}, [out], extra={"chunks": len(index), "embedder": index.descriptor})


def run_ack(p: Pipeline) -> None:
    index_path = p.require(INDEX, "index")
    index = load_index(index_path, p.embedder())
    ack = aug.build_ack(index, p.cfg.lesion_list, p.cfg.retrieval_k, p.client(), p.cfg.workers)
    out = p.write_text(ACK, ack.to_json())
    p.manifest("ack", {"index": index_path}, [out], [e.fingerprint for e in ack.all_entries()],
               extra={"entries": len(ack)})


def _load_ack(p: Pipeline) -> aug.AugmentedClinicalKnowledge:
    return aug.AugmentedClinicalKnowledge.from_json(p.require(ACK, "ack").read_text(encoding="utf-8"))


def _descriptors(path: Path) -> list[FeatureDescriptor]:
    return [FeatureDescriptor.from_dict(d) for d in json.loads(path.read_text(encoding="utf-8"))]


def run_discover(p: Pipeline) -> None:
    ack = _load_ack(p)
    client = p.client()
    fingerprints: list[str] = []

    class _Tracking:
        # records fingerprints of the discovery completions for the manifest
        descriptor = client.descriptor
        config = client.config

        def complete(self, prompt, config=None):
            comp = client.complete(prompt, config)
            fingerprints.append(comp.fingerprint)
            return comp

    discovered = aug.discover_features(ack, load_exemplars(p.shots_path), _Tracking())
    curated = aug.apply_expert_curation(discovered, p.curation_path)
    outs = [
        p.write_json(DISCOVERED, [d.to_dict() for d in discovered]),
        p.write_json(CURATED, [d.to_dict() for d in curated]),
    ]
    p.manifest("discover", {"ack": p.path(ACK), "shots": p.shots_path, "curation": p.curation_path}, outs,
               fingerprints, extra={"discovered": len(discovered), "curated": len(curated)})


def run_augment(p: Pipeline, ablation: bool) -> None:
    """Generate values for the union of discovered and curated features.

    One generation pass serves both variants: ``augmented`` keeps the
    discovered columns, ``augmented_expert`` the curated ones.  With
    ``ablation`` a second pass without the prior-knowledge block feeds the
    ``ablation`` variant (curated columns).
    """
    cfg = p.cfg
    ack = _load_ack(p)
    discovered = _descriptors(p.require(DISCOVERED, "discover"))
    curated = _descriptors(p.require(CURATED, "discover"))
    index = load_index(p.require(INDEX, "index"), p.embedder())
    data = p.dataset()
    union = list({d.name: d for d in discovered + curated}.values())
    client = p.client()
    outputs, fingerprints = [], []
    passes = [False, True] if ablation else [False]
    for abl in passes:
        result = aug.generate_values(data, union, ack, index, client, abl, cfg.retrieval_k, cfg.workers,
                                     cfg.failure_threshold)
        fingerprints += list(result.fingerprints.values())
        outputs.append(p.write_text(PROMPTS[abl], result.prompt_log()))
        variants = [("ablation", curated)] if abl else [("augmented", discovered), ("augmented_expert", curated)]
        for name, feats in variants:
            keep = {f.name for f in feats}
            values = {pid: {k: v for k, v in vals.items() if k in keep} for pid, vals in result.values.items()}
            outputs.append(save_dataset(merge_augmented(data, values, feats), p.path(VARIANT_FILES[name])))
        if not abl:
            summary = aug.summarize_run({"config_hash": cfg.hash()}, curated, result, data.ids)
            outputs.append(p.write_json(RUN_SUMMARY, summary.to_dict()))
    if not ablation:
        stale = p.path(VARIANT_FILES["ablation"])
        for f in (stale, stale.with_name(stale.name + ".meta.json"), p.path(PROMPTS[True])):
            f.unlink(missing_ok=True)
    p.manifest("augment", {"ack": p.path(ACK), "features_discovered": p.path(DISCOVERED),
                           "features_curated": p.path(CURATED), "index": p.path(INDEX),
                           "dataset": p.dataset_path}, outputs, fingerprints, extra={"ablation": ablation})


def run_baseline(p: Pipeline, generator: str) -> None:
    data = p.dataset()
    if generator == "gaussian":
        values = aug.gaussian_baseline(data, VITALS, p.cfg.seed)
    else:
        values = aug.generate_existing_values(data, VITALS, p.client(), p.cfg.workers, p.cfg.failure_threshold)
    table = mse_table(values, data, [f for f in VITALS if any(f in v for v in values.values())], generator)
    out = p.write_json(f"baseline_{generator}.json", {
        "generator": generator,
        "seed": p.cfg.seed,
        "mse": table.per_feature,
        "mean_mse": table.mean,
        "counts": table.counts,
        "values": values,
    })
    p.manifest(f"baseline_{generator}", {"dataset": p.dataset_path}, [out])


def classifier_specs(cfg: PipelineConfig) -> list[ClassifierSpec]:
    e, seed = cfg.evaluation, cfg.seed
    return [
        ClassifierSpec(ClassifierKind.DECISION_TREE, max_depth=e.dt_max_depth, min_samples_leaf=e.min_samples_leaf, seed=seed),
        ClassifierSpec(ClassifierKind.RANDOM_FOREST, max_depth=e.rf_max_depth, n_trees=e.rf_trees,
                       min_samples_leaf=e.min_samples_leaf, seed=seed),
        ClassifierSpec(ClassifierKind.GRADIENT_BOOSTED_TREES, max_depth=e.gbt_max_depth, n_trees=e.gbt_trees,
                       learning_rate=e.gbt_learning_rate, min_samples_leaf=e.min_samples_leaf, seed=seed),
    ]


def run_eval(p: Pipeline) -> None:
    variants = {"original": p.dataset()}
    inputs = {"dataset": p.dataset_path}
    for name, fname in VARIANT_FILES.items():
        path = p.path(fname)
        if name != "ablation":
            p.require(fname, "augment")
        elif not path.exists():
            continue
        variants[name] = load_dataset(path)
        inputs[name] = path
    e = p.cfg.evaluation
    report = compare_feature_sets(variants, p.cfg.lesion_list, classifier_specs(p.cfg), p.cfg.seed,
                                  e.test_fraction, e.cv_folds, p.cfg.workers)
    outs = write_report(report, p.out)
    p.manifest("eval", inputs, outs, extra={"feature_sets": list(variants)})


def run_report(p: Pipeline) -> None:
    tables, inputs = [], {}
    for gen in ("gaussian", "llm"):
        path = p.path(f"baseline_{gen}.json")
        if path.exists():
            d = json.loads(path.read_text(encoding="utf-8"))
            tables.append(MseTable(d["mse"], d["mean_mse"], gen, d["counts"]))
            inputs[f"baseline_{gen}"] = path
    metrics_txt = p.require("metrics.txt", "eval")
    inputs["metrics"] = metrics_txt
    outs = []
    parts = []
    if tables:
        outs.append(write_mse_tables(tables, p.path("mse_table.csv")))
        mse_text = format_mse_tables(tables) + "\n"
        outs.append(p.write_text("mse_table.txt", mse_text))
        parts.append("Mean squared error of generated vitals (z-scored with ground-truth statistics)\n\n" + mse_text)
    parts.append("Classification by feature set (macro average over lesions)\n\n" + metrics_txt.read_text(encoding="utf-8"))
    outs.append(p.write_text("report.txt", "\n".join(parts)))
    p.manifest("report", inputs, outs)


# --------------------------------------------------------------------------
# click wiring


def common_options(fn: Callable) -> Callable:
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
                     help="YAML pipeline config (defaults apply when omitted)."),
        click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path),
                     help="Artifact directory (overrides paths.output_dir)."),
        click.option("--offline/--online", default=None, help="Restrict to packaged fixtures and the mock LLM."),
        click.option("--seed", type=int, help="Seed for baselines, splits and classifiers."),
        click.option("--cache-mode", type=click.Choice(["live", "record", "strict-replay", "strict_replay"]),
                     help="LLM cache policy."),
        click.option("--workers", type=int, help="Worker pool size (does not change outputs)."),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _pipeline(config_path, output_dir, offline, seed, cache_mode, workers, extra: Optional[dict] = None) -> Pipeline:
    overrides = {
        "sources.offline": offline,
        "seed": seed,
        "backend.cache_mode": cache_mode,
        "workers": workers,
        "paths.output_dir": str(output_dir.resolve()) if output_dir else None,
    }
    overrides.update(extra or {})
    cfg = load_config(config_path, overrides)
    return Pipeline(cfg, Path(cfg.paths.output_dir))


def guarded(fn: Callable) -> Callable:
    """Map pipeline failures onto exit codes with a one-line diagnostic."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, f"config error: {exc}")
        except (MissingArtifact, FileNotFoundError) as exc:
            _fail(EXIT_MISSING, f"missing input: {exc}")
        except aug.CurationError as exc:
            _fail(EXIT_CONFIG, f"curation error: {exc}")
        except aug.FailureRateExceeded as exc:
            _fail(EXIT_FAILURE_RATE, f"failure rate exceeded: {exc}")
        except (LLMError, BackendError, aug.AugmentError, IngestError, EmbeddingError, FeatureParseError) as exc:
            _fail(EXIT_BACKEND, f"backend failure: {exc}")
        except (DatasetError, EvaluationError, KStoreError) as exc:
            _fail(EXIT_CONFIG, f"invalid input: {exc}")

    return wrapper


def _fail(code: int, message: str):
    click.echo(f"dallm: {message}", err=True)
    sys.exit(code)


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def cli(verbose: int):
    """Knowledge-grounded augmentation of clinical tabular data."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _simple_command(name: str, runner: Callable[[Pipeline], None], help_text: str):
    @cli.command(name=name, help=help_text)
    @common_options
    @guarded
    def command(config_path, output_dir, offline, seed, cache_mode, workers):
        p = _pipeline(config_path, output_dir, offline, seed, cache_mode, workers)
        runner(p)
        click.echo(f"{name}: ok ({p.out})")

    return command


@cli.command(name="ingest")
@common_options
@click.option("--sources", help="Comma-separated sources: wikipedia, radiopaedia, fixture.")
@click.option("--scope", type=click.Choice([s.value for s in Scope]), help="Documents kept per query.")
@click.option("--corpus-dir", type=click.Path(file_okay=False), help="Fixture corpus to read from.")
@guarded
def ingest_cmd(config_path, output_dir, offline, seed, cache_mode, workers, sources, scope, corpus_dir):
    """Fetch reference documents into corpus/."""
    extra = {
        "sources.sources": sources.split(",") if sources else None,
        "sources.scope": scope,
        "sources.corpus_dir": str(Path(corpus_dir).resolve()) if corpus_dir else None,
    }
    p = _pipeline(config_path, output_dir, offline, seed, cache_mode, workers, extra)
    run_ingest(p)
    click.echo(f"ingest: ok ({p.out})")


ack = _simple_command("ack", run_ack, "Answer the expert questions per lesion (ack.json).")
discover = _simple_command("discover", run_discover, "Discover candidate features and apply the curation file.")
evaluate = _simple_command("eval", run_eval, "Train classifiers on every feature-set variant.")
report = _simple_command("report", run_report, "Render the MSE and classification tables.")


@cli.command(name="index")
@common_options
@click.option("--query", help="Search the saved index instead of building it.")
@click.option("--k", type=int, default=5, show_default=True)
@click.option("--lesion", help="Restrict the query to one lesion partition.")
@guarded
def index_cmd(config_path, output_dir, offline, seed, cache_mode, workers, query, k, lesion):
    """Chunk and embed corpus/ into index.json, or query it."""
    p = _pipeline(config_path, output_dir, offline, seed, cache_mode, workers)
    if query is None:
        run_index(p)
        click.echo(f"index: ok ({p.out})")
        return
    idx = load_index(p.require(INDEX, "index"), p.embedder())
    try:
        hits = idx.search(query, k, lesion)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for chunk_id, score in hits:
        click.echo(f"{score:.4f}\t{chunk_id}")


@cli.command(name="augment")
@common_options
@click.option("--ablation/--no-ablation", default=None, help="Also run the pass without prior knowledge.")
@guarded
def augment_cmd(config_path, output_dir, offline, seed, cache_mode, workers, ablation):
    """Generate feature values and write the augmented dataset variants."""
    p = _pipeline(config_path, output_dir, offline, seed, cache_mode, workers, {"ablation": ablation})
    run_augment(p, p.cfg.ablation)
    click.echo(f"augment: ok ({p.out})")


@cli.command(name="baseline")
@common_options
@click.option("--generator", type=click.Choice(["gaussian", "llm"]), default="gaussian", show_default=True)
@guarded
def baseline_cmd(config_path, output_dir, offline, seed, cache_mode, workers, generator):
    """Regenerate the vitals and score them against the recorded values."""
    p = _pipeline(config_path, output_dir, offline, seed, cache_mode, workers)
    run_baseline(p, generator)
    click.echo(f"baseline ({generator}): ok ({p.out})")


@cli.command(name="run-all")
@common_options
@click.option("--ablation/--no-ablation", default=None)
@guarded
def run_all(config_path, output_dir, offline, seed, cache_mode, workers, ablation):
    """ingest, index, ack, discover, augment, both baselines, eval and report."""
    p = _pipeline(config_path, output_dir, offline, seed, cache_mode, workers, {"ablation": ablation})
    run_ingest(p)
    run_index(p)
    run_ack(p)
    run_discover(p)
    run_augment(p, p.cfg.ablation)
    run_baseline(p, "gaussian")
    run_baseline(p, "llm")
    run_eval(p)
    run_report(p)
    click.echo(f"run-all: ok ({p.out})")


def main():
    cli()


if __name__ == "__main__":
    main()
