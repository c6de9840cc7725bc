import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dallm.evaluation.metrics import binary_metrics, midranks, roc_auc
from dallm.evaluation.trees import (
    DecisionTreeClassifier,
    GradientBoostingClassifier,
    RandomForestClassifier,
    RegressionTree,
    best_split,
    gini,
)

from oracles import exhaustive_best_split, pairwise_auc

XOR_X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
XOR_Y = np.array([0, 1, 1, 0])


def train_accuracy(model, X, y):
    return float((model.predict(X) == y).mean())


# CART


def test_separable_pair():
    X, y = np.array([[0.0], [1.0]]), np.array([0, 1])
    tree = DecisionTreeClassifier(max_depth=1).fit(X, y)
    assert train_accuracy(tree, X, y) == 1.0
    assert tree.root.threshold == 0.5


@pytest.mark.parametrize("depth, lo, hi", [(2, 1.0, 1.0), (1, 0.0, 0.75)])
def test_xor(depth, lo, hi):
    tree = DecisionTreeClassifier(max_depth=depth).fit(XOR_X, XOR_Y)
    assert lo <= train_accuracy(tree, XOR_X, XOR_Y) <= hi


def test_xor_root_split_has_zero_gain():
    # no axis cut helps on its own; the tree still takes the first one
    f, thr, gain = exhaustive_best_split(XOR_X.tolist(), XOR_Y.tolist())
    split = best_split(XOR_X, XOR_Y)
    assert gain == 0 and (split.feature, split.threshold, split.gain) == (f, thr, 0.0)


def test_constant_features_have_no_split():
    assert best_split(np.ones((4, 2)), XOR_Y) is None


@settings(max_examples=150, deadline=None)
@given(
    n=st.integers(2, 30),
    p=st.integers(1, 4),
    leaf=st.integers(1, 3),
    seed=st.integers(0, 10_000),
)
def test_best_split_matches_oracle(n, p, leaf, seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 5, size=(n, p)).astype(float)
    y = rng.integers(0, 2, size=n)
    got = best_split(X, y, min_samples_leaf=leaf)
    want = exhaustive_best_split(X.tolist(), y.tolist(), leaf)
    if want is None:
        assert got is None
    else:
        assert (got.feature, got.threshold) == (want[0], want[1])
        assert got.gain == pytest.approx(float(want[2]), abs=1e-9)


def test_gini():
    assert gini(np.array([0, 0, 1, 1])) == 0.5
    assert gini(np.array([1, 1])) == 0.0
    assert gini(np.array([])) == 0.0


def test_tree_respects_min_leaf_and_depth():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(200, 3)), rng.integers(0, 2, 200)
    tree = DecisionTreeClassifier(max_depth=4, min_samples_leaf=7).fit(X, y)
    assert tree.depth() <= 4

    def leaves(node):
        return [node] if node.is_leaf else leaves(node.left) + leaves(node.right)

    assert min(l.n_samples for l in leaves(tree.root)) >= 7


def test_regression_tree_fits_steps():
    X = np.arange(8, dtype=float)[:, None]
    y = np.where(X[:, 0] < 4, -1.0, 2.0)
    assert np.allclose(RegressionTree(max_depth=1).fit(X, y).predict(X), y)


# forests and boosting


def test_single_tree_forest_equals_cart():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(80, 4)), rng.integers(0, 2, 80)
    forest = RandomForestClassifier(n_trees=1, max_depth=5, max_features=None, bootstrap=False, seed=3).fit(X, y)
    cart = DecisionTreeClassifier(max_depth=5).fit(X, y)
    Xt = rng.normal(size=(50, 4))
    assert np.array_equal(forest.predict(Xt), cart.predict(Xt))


def noisy_problem(seed, n=150, p=5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    logits = 2 * X[:, 0] - X[:, 1] + 0.5 * rng.normal(size=n)
    return X, (logits > 0).astype(int)


@pytest.mark.parametrize("seed", range(5))
def test_gbt_loss_non_increasing(seed):
    X, y = noisy_problem(seed)
    gbt = GradientBoostingClassifier(n_trees=50, learning_rate=0.3, max_depth=2).fit(X, y)
    loss = np.array(gbt.train_loss)
    assert len(loss) == 51
    assert np.all(np.diff(loss) <= 1e-12)
    assert loss[-1] < loss[0]


@pytest.mark.parametrize("lr", [0.0, 1.5])
def test_gbt_learning_rate_bounds(lr):
    with pytest.raises(ValueError):
        GradientBoostingClassifier(learning_rate=lr)


@pytest.mark.parametrize(
    "model",
    [
        DecisionTreeClassifier(max_depth=4),
        RandomForestClassifier(n_trees=15, max_depth=4, seed=2),
        GradientBoostingClassifier(n_trees=20, max_depth=2),
    ],
    ids=["dt", "rf", "gbt"],
)
def test_importances_sum_to_one(model):
    X, y = noisy_problem(7)
    model.fit(X, y)
    imp = model.feature_importances
    assert imp.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(imp >= 0)
    assert np.argmax(imp) == 0
    assert np.all((model.predict_proba(X) >= 0) & (model.predict_proba(X) <= 1))


def test_models_deterministic_under_seed():
    X, y = noisy_problem(3)
    a = RandomForestClassifier(n_trees=10, seed=5).fit(X, y).predict_proba(X)
    b = RandomForestClassifier(n_trees=10, seed=5).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_stump_forest_counts_used_features():
    rng = np.random.default_rng(0)
    k = 3
    y = rng.integers(0, 2, 300)
    informative = np.column_stack([y ^ (rng.random(300) < 0.2) for _ in range(k)]).astype(float)
    X = np.hstack([informative, np.ones((300, 4))])  # constant columns can never split
    forest = RandomForestClassifier(n_trees=60, max_depth=1, max_features=2, seed=1).fit(X, y)
    used = set().union(*(t.used_features() for t in forest.trees))
    assert used == set(range(k))
    assert int((forest.feature_importances > 1e-6).sum()) == k


# metrics


@pytest.mark.parametrize(
    "scores, labels, auc",
    [([0.9, 0.8, 0.4, 0.3], [1, 1, 0, 0], 1.0), ([0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0], 0.75),
     ([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0], 0.5), ([0.1, 0.9], [1, 0], 0.0)],
)
def test_auc_examples(scores, labels, auc):
    assert roc_auc(scores, labels) == auc
    assert pairwise_auc(scores, labels) == auc


def test_midranks():
    assert midranks(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 1.0]), st.booleans()), min_size=1, max_size=60))
def test_auc_matches_pairwise(pairs):
    scores, labels = zip(*pairs)
    got, want = roc_auc(scores, labels), pairwise_auc(scores, labels)
    assert (got is None) == (want is None)
    if want is not None:
        assert abs(got - want) <= 1e-12


def test_all_negative_predictions_flagged():
    m = binary_metrics([0.1, 0.2, 0.3, 0.4], [1, 0, 1, 0])
    assert m.recall == 0 and m.precision == 0 and m.f1 == 0
    assert "precision_undefined" in m.flags
    assert m.auc == 0.25  # one concordant pair of four


def test_one_class_auc_flag():
    m = binary_metrics([0.9, 0.2], [0, 0])
    assert m.auc is None and "auc_undefined" in m.flags and "recall_undefined" in m.flags


def test_threshold_and_f1():
    m = binary_metrics([0.5, 0.49, 0.7, 0.1], [1, 1, 0, 0])
    assert (m.precision, m.recall, m.accuracy) == (0.5, 0.5, 0.5)
    assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=40), st.randoms())
def test_metrics_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = binary_metrics(*zip(*pairs))
    b = binary_metrics(*zip(*shuffled))
    assert (a.accuracy, a.precision, a.recall, a.f1, a.flags) == (b.accuracy, b.precision, b.recall, b.f1, b.flags)
    assert (a.auc is None and b.auc is None) or a.auc == pytest.approx(b.auc, abs=1e-12)
    for v in (a.accuracy, a.precision, a.recall, a.f1):
        assert 0 <= v <= 1


def test_empty_metrics_rejected():
    with pytest.raises(ValueError):
        binary_metrics([], [])
