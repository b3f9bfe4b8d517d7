"""Random forest classifier with z-score standardization and nested CV.

Training follows a fixed protocol: an outer 5-fold stratified CV where each
fold fits its own scaler and runs a randomized hyperparameter search scored
by an inner 3-fold CV, then a final stratified 80/20 fit using the modal
hyperparameters across folds. Scalers are always fitted on training rows
only. Everything is deterministic given (data, seed): per-tree random
streams are derived from (master seed, tree index) with splitmix64, so
results do not depend on thread scheduling or worker count.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _cart
from .features import FeatureMatrix
from .metrics import auc
from .seeding import derive_seed

STRATEGIES = ("sqrt", "log2", "frac30", "frac50", "frac80")
N_ESTIMATORS_RANGE = (100, 400)
MAX_DEPTH_RANGE = (3, 10)
MIN_SPLIT_CHOICES = (2, 5, 10)
MIN_LEAF_CHOICES = (1, 2, 4)

OUTER_FOLDS = 5
INNER_FOLDS = 3
SEARCH_ITERS = 20


def tree_seed(master_seed: int, tree_index: int) -> int:
    """Per-tree stream seed: splitmix64 mix of (master seed, tree index)."""
    return derive_seed(master_seed, tree_index)


@dataclass(frozen=True)
class RFHyperParams:
    n_estimators: int
    max_depth: int
    min_samples_split: int
    min_samples_leaf: int
    max_features_strategy: str

    def check(self):
        if not N_ESTIMATORS_RANGE[0] <= self.n_estimators <= N_ESTIMATORS_RANGE[1]:
            raise ValueError(f"n_estimators {self.n_estimators} outside {N_ESTIMATORS_RANGE}")
        if not MAX_DEPTH_RANGE[0] <= self.max_depth <= MAX_DEPTH_RANGE[1]:
            raise ValueError(f"max_depth {self.max_depth} outside {MAX_DEPTH_RANGE}")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_features_strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.max_features_strategy!r}")
        return self

    def as_dict(self):
        return {"n_estimators": self.n_estimators, "max_depth": self.max_depth,
                "min_samples_split": self.min_samples_split,
                "min_samples_leaf": self.min_samples_leaf,
                "max_features_strategy": self.max_features_strategy}


def strategy_feature_count(strategy: str, n_features: int) -> int:
    if strategy == "sqrt":
        k = math.ceil(math.sqrt(n_features))
    elif strategy == "log2":
        k = math.ceil(math.log2(n_features)) if n_features > 1 else 1
    elif strategy.startswith("frac"):
        k = -(-int(strategy[4:]) * n_features // 100)  # exact integer ceil
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return max(1, min(k, n_features))


@dataclass
class ScalerParams:
    mean: np.ndarray
    std: np.ndarray  # population std
    fitted_on: int


def fit_scaler(X: np.ndarray, rows=None) -> ScalerParams:
    """Per-feature mean/std over the given row subset (all rows if None)."""
    sub = X if rows is None else X[np.asarray(rows)]
    if sub.shape[0] == 0:
        raise ValueError("cannot fit scaler on an empty row subset")
    return ScalerParams(mean=sub.mean(axis=0), std=sub.std(axis=0),
                        fitted_on=int(sub.shape[0]))


def apply_scaler(params: ScalerParams, X: np.ndarray) -> np.ndarray:
    """z-score transform; zero-variance features map to 0."""
    std = params.std
    safe = np.where(std > 0.0, std, 1.0)
    out = (X - params.mean) / safe
    return np.where(std > 0.0, out, 0.0)


def gini(labels) -> float:
    """CART impurity 1 - sum_c p_c^2."""
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("gini of empty label set")
    _, counts = np.unique(y, return_counts=True)
    p = counts / y.size
    return float(1.0 - np.sum(p * p))


@dataclass
class TreeNode:
    """Nested view of one fitted tree; feature is None at leaves."""
    value: float  # class-1 proportion
    count: int
    feature: Optional[int] = None
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self):
        return self.feature is None


@dataclass
class FlatTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    def to_node(self, nid: int = 0) -> TreeNode:
        if self.feature[nid] < 0:
            return TreeNode(value=float(self.value[nid]), count=int(self.count[nid]))
        return TreeNode(value=float(self.value[nid]), count=int(self.count[nid]),
                        feature=int(self.feature[nid]),
                        threshold=float(self.threshold[nid]),
                        left=self.to_node(int(self.left[nid])),
                        right=self.to_node(int(self.right[nid])))


def _scan_threshold(m: int) -> int:
    # crossover between presorted-scan and gather-sort split search, tuned
    # empirically; both paths select identical splits
    return max(16, m // 40)


def _fit_trees(X, y, hp: RFHyperParams, seeds, bootstrap: bool):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y8 = np.ascontiguousarray(y, dtype=np.uint8)
    rank, vor, order = _cart.presort_features(X)
    k = strategy_feature_count(hp.max_features_strategy, X.shape[1])
    seeds64 = np.array([np.uint64(s) for s in seeds], dtype=np.uint64)
    feat, thr, left, right, val, cnt, sizes = _cart.fit_forest_kernel(
        rank, vor, order, y8, seeds64, bootstrap, hp.max_depth,
        hp.min_samples_split, hp.min_samples_leaf, k, _scan_threshold(X.shape[0]))
    trees = []
    for t in range(len(seeds)):
        n = int(sizes[t])
        trees.append(FlatTree(feature=feat[t, :n].copy(), threshold=thr[t, :n].copy(),
                              left=left[t, :n].copy(), right=right[t, :n].copy(),
                              value=val[t, :n].copy(), count=cnt[t, :n].copy()))
    return trees


def fit_tree(X, y, hp: RFHyperParams, seed: int) -> TreeNode:
    """Greedy CART on the given rows (no bootstrap).

    At each node a feature subset of the strategy's size is sampled without
    replacement; candidate thresholds are midpoints of consecutive distinct
    sorted values; the split minimizing weighted child Gini wins, ties broken
    by lower feature index then lower threshold.
    """
    if len(y) < 1:
        raise ValueError("need at least one row")
    hp.check()
    return _fit_trees(X, y, hp, [seed], bootstrap=False)[0].to_node()


@dataclass
class RandomForestModel:
    trees: list
    hyperparams: RFHyperParams
    scaler: Optional[ScalerParams]
    feature_names: tuple
    master_seed: int
    _stacked: Optional[tuple] = field(default=None, repr=False)

    def _stack(self):
        if self._stacked is None:
            cap = max(t.feature.shape[0] for t in self.trees)
            T = len(self.trees)
            feat = np.full((T, cap), -1, np.int32)
            thr = np.zeros((T, cap))
            left = np.zeros((T, cap), np.int32)
            right = np.zeros((T, cap), np.int32)
            val = np.zeros((T, cap))
            for t, tree in enumerate(self.trees):
                n = tree.feature.shape[0]
                feat[t, :n] = tree.feature
                thr[t, :n] = tree.threshold
                left[t, :n] = tree.left
                right[t, :n] = tree.right
                val[t, :n] = tree.value
            self._stacked = (feat, thr, left, right, val)
        return self._stacked

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Mean over trees of the leaf class-1 proportion, in [0, 1]."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        feat, thr, left, right, val = self._stack()
        return _cart.predict_proba_kernel(X, feat, thr, left, right, val)

    def predict_proba_scaled(self, X: np.ndarray) -> np.ndarray:
        """Apply the stored scaler, then predict."""
        if self.scaler is None:
            raise ValueError("model has no scaler attached")
        return self.predict_proba(apply_scaler(self.scaler, np.atleast_2d(X)))


def fit_forest(X, y, hp: RFHyperParams, master_seed: int,
               feature_names=None, scaler=None) -> RandomForestModel:
    """Bagged CART ensemble; tree t's stream comes from tree_seed(master, t)."""
    hp.check()
    y = np.asarray(y)
    if np.unique(y).size < 2:
        raise ValueError("training data must contain both classes")
    seeds = [tree_seed(master_seed, t) for t in range(hp.n_estimators)]
    trees = _fit_trees(X, y, hp, seeds, bootstrap=True)
    names = tuple(feature_names) if feature_names is not None else \
        tuple(f"f{i}" for i in range(np.asarray(X).shape[1]))
    return RandomForestModel(trees=trees, hyperparams=hp, scaler=scaler,
                             feature_names=names, master_seed=int(master_seed))


def feature_importances(model: RandomForestModel) -> np.ndarray:
    """Mean decrease in impurity per feature, normalized to sum to one."""
    F = len(model.feature_names)
    total = np.zeros(F)
    for tree in model.trees:
        imp = np.zeros(F)
        root_n = float(tree.count[0])
        p = tree.value
        node_imp = 1.0 - p * p - (1.0 - p) * (1.0 - p)
        for nid in range(tree.feature.shape[0]):
            f = int(tree.feature[nid])
            if f < 0:
                continue
            l, r = int(tree.left[nid]), int(tree.right[nid])
            n, nl, nr = float(tree.count[nid]), float(tree.count[l]), float(tree.count[r])
            decrease = node_imp[nid] - (nl / n) * node_imp[l] - (nr / n) * node_imp[r]
            imp[f] += (n / root_n) * decrease
        total += imp
    total /= len(model.trees)
    s = total.sum()
    return total / s if s > 0 else total


def stratified_kfold(labels, k: int, seed: int):
    """k disjoint folds with per-class counts within 1 of perfect proportion."""
    y = np.asarray(labels)
    folds = [[] for _ in range(k)]
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    for ci, cls in enumerate(classes):
        idx = np.flatnonzero(y == cls)
        if idx.size < k:
            raise ValueError(f"class {cls!r} has {idx.size} rows, need >= {k}")
        idx = rng.permutation(idx)
        for j in range(k):
            folds[j].extend(idx[(j + ci) % k::k])
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def sample_hyperparams(rng: np.random.Generator) -> RFHyperParams:
    return RFHyperParams(
        n_estimators=int(rng.integers(N_ESTIMATORS_RANGE[0], N_ESTIMATORS_RANGE[1] + 1)),
        max_depth=int(rng.integers(MAX_DEPTH_RANGE[0], MAX_DEPTH_RANGE[1] + 1)),
        min_samples_split=int(rng.choice(MIN_SPLIT_CHOICES)),
        min_samples_leaf=int(rng.choice(MIN_LEAF_CHOICES)),
        max_features_strategy=str(rng.choice(STRATEGIES)),
    )


def randomized_search(X, y, n_iter: int, seed: int, inner_folds: int = INNER_FOLDS):
    """Uniformly sampled configurations scored by mean AUC over an inner
    stratified CV; returns (best config, its score). Ties keep the first
    sampled configuration."""
    rng = np.random.default_rng(seed)
    configs = [sample_hyperparams(rng) for _ in range(n_iter)]
    folds = stratified_kfold(y, inner_folds, derive_seed(seed, 0xF01D5))
    all_idx = np.arange(len(y))
    best_hp = None
    best_score = -np.inf
    for it, hp in enumerate(configs):
        scores = []
        for fi in range(inner_folds):
            val_idx = folds[fi]
            train_idx = np.setdiff1d(all_idx, val_idx, assume_unique=False)
            model = fit_forest(X[train_idx], y[train_idx], hp,
                               derive_seed(seed, it, fi))
            scores.append(auc(model.predict_proba(X[val_idx]), y[val_idx]))
        score = float(np.mean(scores))
        if score > best_score:
            best_score = score
            best_hp = hp
    return best_hp, best_score


def modal_hyperparams(configs) -> RFHyperParams:
    """Most frequent value per field; numeric ties take the smaller value,
    strategy ties the earliest in the declared order."""

    def mode_numeric(vals):
        counts = {}
        for v in vals:
            counts[v] = counts.get(v, 0) + 1
        top = max(counts.values())
        return min(v for v, c in counts.items() if c == top)

    def mode_strategy(vals):
        counts = {}
        for v in vals:
            counts[v] = counts.get(v, 0) + 1
        top = max(counts.values())
        return next(s for s in STRATEGIES if counts.get(s, 0) == top)

    return RFHyperParams(
        n_estimators=mode_numeric([c.n_estimators for c in configs]),
        max_depth=mode_numeric([c.max_depth for c in configs]),
        min_samples_split=mode_numeric([c.min_samples_split for c in configs]),
        min_samples_leaf=mode_numeric([c.min_samples_leaf for c in configs]),
        max_features_strategy=mode_strategy([c.max_features_strategy for c in configs]),
    )


@dataclass
class FoldResult:
    hyperparams: RFHyperParams
    val_auc: float


@dataclass
class CVReport:
    folds: list
    modal_hyperparams: RFHyperParams
    heldout_auc: float
    fold_auc_mean: float
    fold_auc_std: float
    n_train: int
    n_test: int

    def to_json_dict(self):
        return {
            "folds": [{"hyperparams": f.hyperparams.as_dict(), "val_auc": f.val_auc}
                      for f in self.folds],
            "modal_hyperparams": self.modal_hyperparams.as_dict(),
            "heldout_auc": self.heldout_auc,
            "fold_auc_mean": self.fold_auc_mean,
            "fold_auc_std": self.fold_auc_std,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }


def _member_rows(matrix: FeatureMatrix):
    keep = [i for i, lab in enumerate(matrix.labels) if lab in ("member", "nonmember")]
    if not keep:
        raise ValueError("no member/nonmember rows in feature matrix")
    y = np.array([1 if matrix.labels[i] == "member" else 0 for i in keep], dtype=np.int64)
    X = matrix.values[keep]
    if y.min() == y.max():
        raise ValueError("need both member and nonmember rows to train")
    return X, y


def train_pipeline(matrix: FeatureMatrix, seed: int, n_iter: int = SEARCH_ITERS,
                   leakage_probe=None):
    """Full training protocol; returns (final model, CV report).

    Neighbor rows are excluded. leakage_probe, when given, is called as
    probe(stage, fold_index, scaler_rows, eval_rows) with the exact row
    indices the scaler saw and the rows later scored, for leak auditing.
    """
    X, y = _member_rows(matrix)
    all_idx = np.arange(len(y))

    folds = stratified_kfold(y, OUTER_FOLDS, seed)
    fold_results = []
    for fi in range(OUTER_FOLDS):
        val_idx = folds[fi]
        train_idx = np.setdiff1d(all_idx, val_idx)
        scaler = fit_scaler(X, train_idx)
        if leakage_probe is not None:
            leakage_probe("fold", fi, train_idx, val_idx)
        Xtr = apply_scaler(scaler, X[train_idx])
        Xval = apply_scaler(scaler, X[val_idx])
        hp, _ = randomized_search(Xtr, y[train_idx], n_iter, derive_seed(seed, 101, fi))
        model = fit_forest(Xtr, y[train_idx], hp, derive_seed(seed, 102, fi))
        val_auc = auc(model.predict_proba(Xval), y[val_idx])
        fold_results.append(FoldResult(hyperparams=hp, val_auc=float(val_auc)))

    modal = modal_hyperparams([f.hyperparams for f in fold_results])

    # stratified 80/20: fold 0 of a fresh 5-fold split is the held-out 20%
    split = stratified_kfold(y, 5, derive_seed(seed, 103))
    test_idx = split[0]
    train_idx = np.setdiff1d(all_idx, test_idx)
    scaler = fit_scaler(X, train_idx)
    if leakage_probe is not None:
        leakage_probe("final", -1, train_idx, test_idx)
    model = fit_forest(apply_scaler(scaler, X[train_idx]), y[train_idx], modal,
                       derive_seed(seed, 104), feature_names=matrix.names,
                       scaler=scaler)
    heldout = auc(model.predict_proba(apply_scaler(scaler, X[test_idx])), y[test_idx])

    vals = np.array([f.val_auc for f in fold_results])
    report = CVReport(folds=fold_results, modal_hyperparams=modal,
                      heldout_auc=float(heldout),
                      fold_auc_mean=float(vals.mean()),
                      fold_auc_std=float(vals.std()),
                      n_train=int(train_idx.size), n_test=int(test_idx.size))
    return model, report


def fixed_heldout_auc(matrix: FeatureMatrix, seed: int) -> float:
    """Cheap mode: no search, fixed configuration, one 80/20 fit."""
    hp = RFHyperParams(n_estimators=200, max_depth=8, min_samples_split=2,
                       min_samples_leaf=1, max_features_strategy="sqrt")
    X, y = _member_rows(matrix)
    all_idx = np.arange(len(y))
    split = stratified_kfold(y, 5, derive_seed(seed, 103))
    test_idx = split[0]
    train_idx = np.setdiff1d(all_idx, test_idx)
    scaler = fit_scaler(X, train_idx)
    model = fit_forest(apply_scaler(scaler, X[train_idx]), y[train_idx], hp,
                       derive_seed(seed, 104))
    return float(auc(model.predict_proba(apply_scaler(scaler, X[test_idx])), y[test_idx]))


def model_to_json(model: RandomForestModel) -> str:
    doc = {
        "format": "memaudit-rf",
        "version": 1,
        "master_seed": model.master_seed,
        "hyperparams": model.hyperparams.as_dict(),
        "feature_names": list(model.feature_names),
        "scaler": None if model.scaler is None else {
            "mean": [float(v) for v in model.scaler.mean],
            "std": [float(v) for v in model.scaler.std],
            "fitted_on": model.scaler.fitted_on,
        },
        "trees": [{
            "feature": [int(v) for v in t.feature],
            "threshold": [float(v) for v in t.threshold],
            "left": [int(v) for v in t.left],
            "right": [int(v) for v in t.right],
            "value": [float(v) for v in t.value],
            "count": [int(v) for v in t.count],
        } for t in model.trees],
    }
    return json.dumps(doc, indent=1)


def model_from_json(text: str) -> RandomForestModel:
    doc = json.loads(text)
    if doc.get("format") != "memaudit-rf" or doc.get("version") != 1:
        raise ValueError("not a recognized model document")
    trees = [FlatTree(feature=np.array(t["feature"], np.int32),
                      threshold=np.array(t["threshold"], np.float64),
                      left=np.array(t["left"], np.int32),
                      right=np.array(t["right"], np.int32),
                      value=np.array(t["value"], np.float64),
                      count=np.array(t["count"], np.int64))
             for t in doc["trees"]]
    sc = doc.get("scaler")
    scaler = None if sc is None else ScalerParams(
        mean=np.array(sc["mean"], np.float64), std=np.array(sc["std"], np.float64),
        fitted_on=int(sc["fitted_on"]))
    hp = RFHyperParams(**doc["hyperparams"])
    return RandomForestModel(trees=trees, hyperparams=hp, scaler=scaler,
                             feature_names=tuple(doc["feature_names"]),
                             master_seed=int(doc["master_seed"]))
