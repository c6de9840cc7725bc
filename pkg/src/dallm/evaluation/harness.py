"""Measurement side: normalized-MSE tables and feature-set classification reports."""

from __future__ import annotations

import csv
import io
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from ..core import (
    LESIONS,
    Dataset,
    FeatureKind,
    FeatureValue,
    Lesion,
    feature_stats,
    replace_values,
)
from .metrics import MetricsRow, binary_metrics
from .trees import (
    DecisionTreeClassifier,
    GradientBoostingClassifier,
    RandomForestClassifier,
    default_max_features,
    normalize_importance,
)

RELEVANCE_THRESHOLD = 1e-6
RELEVANCE_NOTE = (
    "#rel_features = number of input features with normalized impurity-decrease "
    f"importance > {RELEVANCE_THRESHOLD:g} (tree models; not an attention-based count)"
)


class EvaluationError(ValueError):
    pass


# --------------------------------------------------------------------------
# MSE


@dataclass(frozen=True)
class MseTable:
    per_feature: dict[str, float]
    mean: float
    generator: str = ""
    counts: dict[str, int] = field(default_factory=dict)


def mse_table(
    generated: Union[Dataset, Mapping[str, Mapping[str, FeatureValue]]],
    truth: Dataset,
    features: Sequence[str],
    generator: str = "",
) -> MseTable:
    """Per-feature MSE in z-score space, both sides scaled with truth statistics.

    Only rows where both values are present count.  ``generated`` may be a
    dataset or a ``patient -> feature -> value`` map applied onto ``truth``.
    """
    if not isinstance(generated, Dataset):
        generated = replace_values(truth, generated)
    if sorted(generated.ids) != sorted(truth.ids):
        raise EvaluationError("generated and truth datasets cover different patients")
    gen_rows = {r.id: r for r in generated.rows}
    per: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name in features:
        st = feature_stats(truth.column(name))
        if st.zero_variance:
            raise EvaluationError(f"feature {name!r} has zero variance in the truth data")
        sq = []
        for r in truth.rows:
            t, g = r.values.get(name), gen_rows[r.id].values.get(name)
            if t is None or g is None:
                continue
            sq.append(((g - st.mean) / st.std - (t - st.mean) / st.std) ** 2)
        if not sq:
            raise EvaluationError(f"no rows with both generated and true {name!r}")
        per[name] = float(np.mean(sq))
        counts[name] = len(sq)
    return MseTable(per, float(np.mean(list(per.values()))), generator, counts)


def write_mse_tables(tables: Sequence[MseTable], path: Union[str, Path]) -> Path:
    path = Path(path)
    features = list(tables[0].per_feature) if tables else []
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generator", *features, "mean"])
        for t in tables:
            w.writerow([t.generator, *(f"{t.per_feature[f]:.6f}" for f in features), f"{t.mean:.6f}"])
    return path


def format_mse_tables(tables: Sequence[MseTable]) -> str:
    if not tables:
        return ""
    features = list(tables[0].per_feature)
    header = ["Generator", *features, "Mean"]
    body = [[t.generator, *(f"{t.per_feature[f]:.3f}" for f in features), f"{t.mean:.3f}"] for t in tables]
    return _aligned([header] + body)


# --------------------------------------------------------------------------
# classification


class ClassifierKind(str, Enum):
    DECISION_TREE = "decision_tree"
    RANDOM_FOREST = "random_forest"
    GRADIENT_BOOSTED_TREES = "gradient_boosted_trees"


DISPLAY_NAMES = {
    ClassifierKind.DECISION_TREE: "DecisionTree",
    ClassifierKind.RANDOM_FOREST: "RandomForest",
    ClassifierKind.GRADIENT_BOOSTED_TREES: "GradientBoostedTrees",
}


@dataclass(frozen=True)
class ClassifierSpec:
    kind: ClassifierKind
    max_depth: Optional[int] = None
    n_trees: int = 100
    learning_rate: float = 0.1
    feature_subsample: Optional[float] = None  # RF: fraction of features per split, None = sqrt(p)
    min_samples_leaf: int = 1
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", ClassifierKind(self.kind))
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        if self.n_trees < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees and min_samples_leaf must be positive")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.feature_subsample is not None and not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must lie in (0, 1]")

    @property
    def name(self) -> str:
        return DISPLAY_NAMES[self.kind]

    def build(self, n_features: int):
        if self.kind is ClassifierKind.DECISION_TREE:
            return DecisionTreeClassifier(self.max_depth, self.min_samples_leaf, None, self.seed)
        if self.kind is ClassifierKind.RANDOM_FOREST:
            if self.feature_subsample is None:
                mf = default_max_features(n_features)
            else:
                mf = max(1, int(round(self.feature_subsample * n_features)))
            return RandomForestClassifier(self.n_trees, self.max_depth, self.min_samples_leaf, mf,
                                          self.bootstrap, self.seed)
        return GradientBoostingClassifier(self.n_trees, self.learning_rate, self.max_depth or 3,
                                          self.min_samples_leaf, 1.0, self.seed)


def default_specs(seed: int = 0) -> list[ClassifierSpec]:
    return [
        ClassifierSpec(ClassifierKind.DECISION_TREE, max_depth=6, min_samples_leaf=5, seed=seed),
        ClassifierSpec(ClassifierKind.RANDOM_FOREST, max_depth=8, n_trees=100, min_samples_leaf=2, seed=seed),
        ClassifierSpec(ClassifierKind.GRADIENT_BOOSTED_TREES, max_depth=3, n_trees=100, learning_rate=0.1,
                       min_samples_leaf=5, seed=seed),
    ]


class TabularEncoder:
    """Imputes and encodes schema features into a float matrix.

    Statistics are fitted on training rows only: median for numeric, mode for
    boolean and categorical; categoricals are one-hot encoded over the
    categories seen in training.
    """

    def __init__(self, dataset: Dataset, features: Optional[Sequence[str]] = None):
        self.features = list(features) if features is not None else dataset.feature_names
        self.kinds = {f: dataset.descriptor(f).kind for f in self.features}
        self.fill: dict[str, FeatureValue] = {}
        self.categories: dict[str, list[str]] = {}
        self.columns: list[str] = []
        self.sources: list[str] = []

    def fit(self, dataset: Dataset, rows: Sequence[int]) -> "TabularEncoder":
        self.columns, self.sources = [], []
        for f in self.features:
            vals = [dataset.rows[i].values.get(f) for i in rows]
            present = [v for v in vals if v is not None]
            kind = self.kinds[f]
            if kind is FeatureKind.NUMERIC:
                self.fill[f] = float(np.median(present)) if present else 0.0
                self.columns.append(f)
                self.sources.append(f)
            elif kind is FeatureKind.BOOLEAN:
                counts = Counter(present)
                self.fill[f] = counts[True] > counts[False]
                self.columns.append(f)
                self.sources.append(f)
            else:
                counts = Counter(present)
                self.fill[f] = min(counts, key=lambda c: (-counts[c], c)) if counts else None
                cats = sorted(counts)
                self.categories[f] = cats
                for c in cats:
                    self.columns.append(f"{f}={c}")
                    self.sources.append(f)
        return self

    def transform(self, dataset: Dataset, rows: Sequence[int]) -> np.ndarray:
        out = np.zeros((len(rows), len(self.columns)))
        for r_i, i in enumerate(rows):
            values = dataset.rows[i].values
            col = 0
            for f in self.features:
                v = values.get(f)
                if v is None:
                    v = self.fill[f]
                kind = self.kinds[f]
                if kind is FeatureKind.CATEGORICAL:
                    cats = self.categories[f]
                    if v in cats:
                        out[r_i, col + cats.index(v)] = 1.0
                    col += len(cats)
                else:
                    out[r_i, col] = float(v)
                    col += 1
        return out


def stratified_split(labels: Sequence[int], test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled holdout; returns sorted (train, test) row indices."""
    y = np.asarray(labels).astype(int)
    rng = np.random.default_rng(seed)
    test = []
    for c in (0, 1):
        idx = np.nonzero(y == c)[0]
        rng.shuffle(idx)
        test.extend(idx[: int(round(len(idx) * test_fraction))].tolist())
    test = np.array(sorted(test), dtype=int)
    train = np.setdiff1d(np.arange(len(y)), test)
    if len(train) == 0 or len(test) == 0:
        raise EvaluationError("split produced an empty train or test set")
    return train, test


def stratified_folds(labels: Sequence[int], n_folds: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    y = np.asarray(labels).astype(int)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=int)
    for c in (0, 1):
        idx = np.nonzero(y == c)[0]
        rng.shuffle(idx)
        fold_of[idx] = np.arange(len(idx)) % n_folds
    return [(np.nonzero(fold_of != k)[0], np.nonzero(fold_of == k)[0]) for k in range(n_folds)]


@dataclass
class FittedModel:
    spec: ClassifierSpec
    model: object
    encoder: TabularEncoder
    target: Lesion

    def scores(self, dataset: Dataset, rows: Sequence[int]) -> np.ndarray:
        return self.model.predict_proba(self.encoder.transform(dataset, rows))

    def source_importances(self) -> dict[str, float]:
        """Normalized importance summed back onto schema features (one-hot columns merged)."""
        imp = normalize_importance(self.model.raw_importances)
        out = {f: 0.0 for f in self.encoder.features}
        for col, src in zip(imp, self.encoder.sources):
            out[src] += float(col)
        return out


def train_classifier(
    spec: ClassifierSpec,
    dataset: Dataset,
    target: Lesion,
    split: tuple[Sequence[int], Sequence[int]],
    features: Optional[Sequence[str]] = None,
) -> FittedModel:
    train, _ = split
    if len(train) == 0:
        raise EvaluationError("empty training split")
    y = dataset.labels(target)[np.asarray(train)]
    if len(set(y.tolist())) < 2:
        raise EvaluationError(f"training target {Lesion(target).value} has a single class")
    enc = TabularEncoder(dataset, features).fit(dataset, train)
    X = enc.transform(dataset, train)
    model = spec.build(X.shape[1]).fit(X, y)
    return FittedModel(spec, model, enc, Lesion(target))


def relevant_feature_count(fitted: FittedModel, threshold: float = RELEVANCE_THRESHOLD) -> int:
    return sum(1 for v in fitted.source_importances().values() if v > threshold)


def compute_metrics(fitted: FittedModel, dataset: Dataset, test_rows: Sequence[int], target: Optional[Lesion] = None) -> MetricsRow:
    if len(test_rows) == 0:
        raise EvaluationError("empty test split")
    target = Lesion(target) if target is not None else fitted.target
    y = dataset.labels(target)[np.asarray(test_rows)]
    return binary_metrics(fitted.scores(dataset, test_rows), y, relevant_feature_count(fitted))


# --------------------------------------------------------------------------
# feature-set comparison


@dataclass(frozen=True)
class ReportRow:
    feature_set: str
    lesion: str
    classifier: str
    n_features: int
    metrics: MetricsRow


@dataclass
class MetricsReport:
    rows: list[ReportRow]
    rollups: list[ReportRow]
    importances: list[tuple[str, str, str, str, float]]  # feature_set, lesion, classifier, feature, value

    @property
    def feature_sets(self) -> list[str]:
        return list(dict.fromkeys(r.feature_set for r in self.rows))

    def rollup(self, feature_set: str, classifier: str) -> MetricsRow:
        for r in self.rollups:
            if r.feature_set == feature_set and r.classifier == classifier:
                return r.metrics
        raise KeyError((feature_set, classifier))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature_set", "lesion", "classifier", "n_features", "accuracy", "auc", "precision",
                    "f1", "recall", "rel_features", "flags"])
        for r in self.rows + self.rollups:
            m = r.metrics
            w.writerow([r.feature_set, r.lesion, r.classifier, r.n_features, _f(m.accuracy), _f(m.auc),
                        _f(m.precision), _f(m.f1), _f(m.recall),
                        "" if m.relevant_features is None else _f(m.relevant_features), ";".join(m.flags)])
        return buf.getvalue()

    def importance_csv(self, classifier: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature_set", "lesion", "feature", "importance"])
        for fs, lesion, clf, feat, val in self.importances:
            if clf == classifier:
                w.writerow([fs, lesion, feat, f"{val:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        """Macro-averaged table grouped by feature set."""
        header = ["Feature set", "Model", "Accuracy", "AUC", "Precision", "F-1", "Recall", "#Rel. Features"]
        lines = [header]
        for fs in self.feature_sets:
            group = [r for r in self.rollups if r.feature_set == fs]
            for i, r in enumerate(group):
                m = r.metrics
                label = f"{fs} (# feat: {r.n_features})" if i == 0 else ""
                lines.append([label, r.classifier, _f(m.accuracy, 4), _f(m.auc, 4), _f(m.precision, 4),
                              _f(m.f1, 4), _f(m.recall, 4), _f(m.relevant_features, 1)])
            lines.append(None)
        return _aligned(lines) + "\n" + RELEVANCE_NOTE + "\n"


def _f(v, digits: int = 6) -> str:
    if v is None:
        return "NA"
    if isinstance(v, int):
        return str(v)
    return f"{v:.{digits}f}"


def _aligned(rows: Sequence[Optional[Sequence[str]]]) -> str:
    real = [r for r in rows if r is not None]
    widths = [max(len(str(r[i])) for r in real) for i in range(len(real[0]))]
    sep = "-+-".join("-" * w for w in widths)
    out = []
    for i, r in enumerate(rows):
        if r is None:
            out.append(sep)
            continue
        out.append(" | ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0:
            out.append(sep)
    return "\n".join(out)


def _mean_rows(rows: Sequence[MetricsRow]) -> MetricsRow:
    aucs = [r.auc for r in rows if r.auc is not None]
    rel = [r.relevant_features for r in rows if r.relevant_features is not None]
    flags = tuple(sorted({f for r in rows for f in r.flags}))
    return MetricsRow(
        float(np.mean([r.accuracy for r in rows])),
        float(np.mean(aucs)) if aucs else None,
        float(np.mean([r.precision for r in rows])),
        float(np.mean([r.recall for r in rows])),
        float(np.mean([r.f1 for r in rows])),
        float(np.mean(rel)) if rel else None,
        flags,
    )


def _check_variants(variants: Mapping[str, Dataset]) -> None:
    items = list(variants.items())
    if not items:
        raise EvaluationError("no feature-set variants given")
    ref_name, ref = items[0]
    ref_labels = [r.case.labels for r in ref.rows]
    for name, ds in items[1:]:
        if ds.ids != ref.ids:
            raise EvaluationError(f"variant {name!r} rows do not match {ref_name!r}")
        if [r.case.labels for r in ds.rows] != ref_labels:
            raise EvaluationError(f"variant {name!r} labels differ from {ref_name!r}")


def compare_feature_sets(
    variants: Mapping[str, Dataset],
    lesions: Iterable[Lesion] = LESIONS,
    specs: Optional[Sequence[ClassifierSpec]] = None,
    seed: int = 0,
    test_fraction: float = 0.2,
    cv_folds: Optional[int] = None,
    workers: int = 1,
) -> MetricsReport:
    """Train every classifier on every variant for every lesion.

    All variants use the same split per lesion.  Rollups are macro averages
    over lesions.  With ``cv_folds`` each cell averages stratified folds
    instead of a single holdout.
    """
    _check_variants(variants)
    specs = list(specs) if specs is not None else default_specs(seed)
    lesions = [Lesion(l) for l in lesions]
    ref = next(iter(variants.values()))
    splits = {
        l: (stratified_folds(ref.labels(l), cv_folds, seed) if cv_folds else [stratified_split(ref.labels(l), test_fraction, seed)])
        for l in lesions
    }
    tasks = [(name, l, spec) for name in variants for l in lesions for spec in specs]

    def run(task):
        name, lesion, spec = task
        ds = variants[name]
        rows, imps = [], []
        for split in splits[lesion]:
            fitted = train_classifier(spec, ds, lesion, split)
            rows.append(compute_metrics(fitted, ds, split[1], lesion))
            imps.append(fitted.source_importances())
        merged_imp = {f: float(np.mean([i[f] for i in imps])) for f in imps[0]}
        return rows[0] if len(rows) == 1 else _mean_rows(rows), merged_imp

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run, tasks))

    report_rows, importances = [], []
    for (name, lesion, spec), (metrics, imp) in zip(tasks, results):
        n_feat = len(variants[name].feature_names)
        report_rows.append(ReportRow(name, lesion.value, spec.name, n_feat, metrics))
        for feat, val in imp.items():
            importances.append((name, lesion.value, spec.name, feat, val))
    rollups = []
    for name in variants:
        for spec in specs:
            group = [r.metrics for r in report_rows if r.feature_set == name and r.classifier == spec.name]
            rollups.append(ReportRow(name, "macro", spec.name, len(variants[name].feature_names), _mean_rows(group)))
    return MetricsReport(report_rows, rollups, importances)


def write_report(report: MetricsReport, out_dir: Union[str, Path]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.csv", out / "metrics.txt"]
    paths[0].write_text(report.to_csv(), encoding="utf-8")
    paths[1].write_text(report.to_text(), encoding="utf-8")
    for clf in dict.fromkeys(r.classifier for r in report.rows):
        p = out / f"importance_{clf}.csv"
        p.write_text(report.importance_csv(clf), encoding="utf-8")
        paths.append(p)
    return paths
