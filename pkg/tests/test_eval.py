import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dallm.core import LESIONS, VITALS, FeatureDescriptor, FeatureKind, Lesion, Provenance, make_dataset, standardize
from dallm.evaluation.harness import (
    RELEVANCE_NOTE,
    ClassifierKind,
    ClassifierSpec,
    EvaluationError,
    TabularEncoder,
    compare_feature_sets,
    compute_metrics,
    format_mse_tables,
    mse_table,
    relevant_feature_count,
    stratified_folds,
    stratified_split,
    train_classifier,
    write_mse_tables,
    write_report,
)
from dallm.synthetic import planted_signal_variants, synthetic_dataset

from conftest import make_case

DT = ClassifierSpec(ClassifierKind.DECISION_TREE, max_depth=3)
FAST = [
    DT,
    ClassifierSpec(ClassifierKind.RANDOM_FOREST, n_trees=10, max_depth=4),
    ClassifierSpec(ClassifierKind.GRADIENT_BOOSTED_TREES, n_trees=20, learning_rate=0.5, max_depth=2),
]


# MSE


def test_mse_identity(small_dataset):
    table = mse_table(small_dataset, small_dataset, VITALS)
    assert all(v == 0 for v in table.per_feature.values()) and table.mean == 0


def test_mse_unit_offset(small_dataset):
    z, stats = standardize(small_dataset, VITALS)
    shifted = {r.id: {f: r.values[f] + stats[f].std for f in VITALS if r.values[f] is not None}
               for r in small_dataset.rows}
    table = mse_table(shifted, small_dataset, VITALS, generator="offset")
    for v in table.per_feature.values():
        assert v == pytest.approx(1.0, abs=1e-9)
    assert table.mean == pytest.approx(np.mean(list(table.per_feature.values())))


def test_mse_skips_missing(tiny_dataset):
    gen = {"a": {"heartrate": 90.0}, "b": {"heartrate": 70.0}, "c": {"heartrate": 75.0}}
    table = mse_table(gen, tiny_dataset, ["heartrate"])
    assert table.counts == {"heartrate": 2} and table.mean == 0.0


def test_mse_errors(tiny_dataset, small_dataset):
    with pytest.raises(EvaluationError):
        mse_table(small_dataset, tiny_dataset, ["heartrate"])
    with pytest.raises(EvaluationError):
        mse_table(tiny_dataset, tiny_dataset, ["temperature"])  # constant in truth


def test_mse_table_files(tmp_path, small_dataset):
    t = mse_table(small_dataset, small_dataset, VITALS, "same")
    path = write_mse_tables([t], tmp_path / "mse.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["generator", *VITALS, "mean"] and rows[1][0] == "same"
    assert "Mean" in format_mse_tables([t])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=40, max_size=40))
def test_mse_equals_mean_squared_noise(noise):
    ds = synthetic_dataset(40, seed=9)
    _, stats = standardize(ds, ["heartrate"])
    gen = {r.id: {"heartrate": r.values["heartrate"] + e * stats["heartrate"].std} for r, e in zip(ds.rows, noise)}
    table = mse_table(gen, ds, ["heartrate"])
    assert table.per_feature["heartrate"] == pytest.approx(np.mean(np.square(noise)), abs=1e-9)


# splits and encoding


def test_stratified_split():
    y = np.array([1] * 20 + [0] * 80)
    train, test = stratified_split(y, 0.2, seed=1)
    assert len(test) == 20 and y[test].sum() == 4
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(100))
    assert np.array_equal(test, stratified_split(y, 0.2, seed=1)[1])


def test_stratified_split_empty_side():
    with pytest.raises(EvaluationError):
        stratified_split([1, 0], 0.2)


def test_folds_partition():
    y = np.array([1] * 10 + [0] * 15)
    folds = stratified_folds(y, 5, seed=0)
    tests = np.concatenate([t for _, t in folds])
    assert sorted(tests.tolist()) == list(range(25))
    assert all(y[t].sum() == 2 for _, t in folds)


def test_encoder_imputes_from_train_only():
    cases = [make_case("a", heartrate=60.0), make_case("b", heartrate=None), make_case("c", heartrate=100.0),
             make_case("d", heartrate=1000.0)]
    extra = [FeatureDescriptor("smoking", FeatureKind.CATEGORICAL, None, Provenance.LLM_DISCOVERED),
             FeatureDescriptor("cough", FeatureKind.BOOLEAN, None, Provenance.LLM_DISCOVERED)]
    values = {"a": {"smoking": "never", "cough": True}, "b": {"smoking": None, "cough": None},
              "c": {"smoking": "never", "cough": False}, "d": {"smoking": "current", "cough": False}}
    ds = make_dataset(cases, extra, values)
    enc = TabularEncoder(ds, ["heartrate", "smoking", "cough"]).fit(ds, [0, 1, 2])
    assert enc.columns == ["heartrate", "smoking=never", "cough"]
    X = enc.transform(ds, [1, 3])
    assert X.tolist() == [[80.0, 1.0, 0.0], [1000.0, 0.0, 0.0]]  # ties in the boolean mode go to False


# training


def test_train_errors(small_dataset):
    with pytest.raises(EvaluationError):
        train_classifier(DT, small_dataset, Lesion.ATELECTASIS, ([], [0]))
    rows = [i for i, y in enumerate(small_dataset.labels(Lesion.ATELECTASIS)) if y == 0]
    with pytest.raises(EvaluationError):
        train_classifier(DT, small_dataset, Lesion.ATELECTASIS, (rows, [0]))


@pytest.mark.parametrize("kwargs", [{"max_depth": 0}, {"n_trees": 0}, {"learning_rate": 1.2},
                                    {"feature_subsample": 0.0}, {"min_samples_leaf": 0}])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        ClassifierSpec(ClassifierKind.RANDOM_FOREST, **kwargs)


def test_one_feature_stump_counts_one():
    base, aug = planted_signal_variants(200, seed=2)
    lesion = Lesion.PLEURAL_EFFUSION
    split = stratified_split(aug.labels(lesion), 0.2, 0)
    fitted = train_classifier(ClassifierSpec(ClassifierKind.DECISION_TREE, max_depth=1), aug, lesion, split)
    assert relevant_feature_count(fitted) == 1
    assert max(fitted.source_importances(), key=fitted.source_importances().get) == "oracle_signal"


def test_noise_columns_bounded():
    base, aug = planted_signal_variants(300, seed=4)
    lesion = Lesion.PLEURAL_EFFUSION
    split = stratified_split(aug.labels(lesion), 0.2, 0)
    fitted = train_classifier(ClassifierSpec(ClassifierKind.DECISION_TREE, max_depth=2), aug, lesion, split)
    # a depth-2 tree has at most three internal nodes
    assert 1 <= relevant_feature_count(fitted) <= 3
    imp = fitted.source_importances()
    assert sum(imp.values()) == pytest.approx(1.0, abs=1e-9)


def test_compute_metrics_bounds(small_dataset):
    lesion = Lesion.PLEURAL_EFFUSION
    split = stratified_split(small_dataset.labels(lesion), 0.25, 0)
    fitted = train_classifier(FAST[1], small_dataset, lesion, split)
    m = compute_metrics(fitted, small_dataset, split[1])
    for v in (m.accuracy, m.precision, m.recall, m.f1):
        assert 0 <= v <= 1
    assert m.relevant_features == relevant_feature_count(fitted)


# comparison


@pytest.fixture(scope="module")
def planted_report():
    base, aug = planted_signal_variants(300, seed=0)
    return compare_feature_sets({"original": base, "augmented": aug}, [Lesion.PLEURAL_EFFUSION], FAST, seed=0)


def test_planted_signal_improves(planted_report):
    for spec in FAST:
        o, a = planted_report.rollup("original", spec.name), planted_report.rollup("augmented", spec.name)
        assert a.f1 > o.f1 and a.auc > o.auc


def test_report_shapes(planted_report, tmp_path):
    rows = list(csv.DictReader(io.StringIO(planted_report.to_csv())))
    assert len(rows) == 2 * 3 * 2  # (per lesion + macro) x classifiers x feature sets
    assert {r["lesion"] for r in rows} == {"pleural_effusion", "macro"}
    text = planted_report.to_text()
    assert "original (# feat: 8)" in text and "augmented (# feat: 9)" in text
    assert RELEVANCE_NOTE in text
    names = sorted(p.name for p in write_report(planted_report, tmp_path))
    assert names == ["importance_DecisionTree.csv", "importance_GradientBoostedTrees.csv",
                     "importance_RandomForest.csv", "metrics.csv", "metrics.txt"]


def test_identical_variants_identical_rows(small_dataset):
    rep = compare_feature_sets({"a": small_dataset, "b": small_dataset}, LESIONS[:2], FAST[:1])
    by_set = {fs: [r.metrics for r in rep.rows if r.feature_set == fs] for fs in ("a", "b")}
    assert by_set["a"] == by_set["b"]


def test_workers_do_not_change_report(small_dataset):
    one = compare_feature_sets({"a": small_dataset}, LESIONS[:2], FAST, workers=1)
    many = compare_feature_sets({"a": small_dataset}, LESIONS[:2], FAST, workers=4)
    assert one.to_csv() == many.to_csv()


def test_cv_rollup(small_dataset):
    rep = compare_feature_sets({"a": small_dataset}, [Lesion.PLEURAL_EFFUSION], FAST[:1], cv_folds=3)
    assert len(rep.rows) == 1 and 0 <= rep.rows[0].metrics.accuracy <= 1


def test_variant_mismatch(small_dataset):
    other = synthetic_dataset(39, seed=3)
    with pytest.raises(EvaluationError):
        compare_feature_sets({"a": small_dataset, "b": other}, LESIONS[:1], FAST[:1])
    relabeled = make_dataset([make_case(r.id, positive=["atelectasis"]) for r in small_dataset.rows])
    with pytest.raises(EvaluationError):
        compare_feature_sets({"a": small_dataset, "b": relabeled}, LESIONS[:1], FAST[:1])
