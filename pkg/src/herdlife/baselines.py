"""Tabular baselines on each cow's latest record: OLS, ridge GLM, CART random forest."""
from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ingestion import CowHistory
from .schemas import FEATURES, N_FEATURES

JITTER = 1e-10
TASKS = ("regression", "classification")
N_CLASSES = 3


@dataclass(frozen=True)
class TabularRow:
    features: np.ndarray   # standardised 16-vector of the latest record
    hl_days: float
    hl_class: int
    farm_id: str
    cow_id: str


def tabularize(histories: Sequence[CowHistory]) -> list[TabularRow]:
    rows = []
    for h in histories:
        if not h.records or h.features is None:
            raise ValueError(f"cow {h.cow_id} has no standardised records")
        last = int(np.argmax(h.record_days))   # days are unique per cow after merging
        rows.append(TabularRow(h.features[last].copy(), float(h.hl_days), int(h.hl_class), h.farm_id, h.cow_id))
    return rows


def design(rows: Sequence[TabularRow]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X, hl_days, hl_class) arrays."""
    if not rows:
        raise ValueError("no rows")
    return (np.stack([r.features for r in rows]), np.array([r.hl_days for r in rows]),
            np.array([r.hl_class for r in rows], dtype=np.int64))


def _xy(rows, y=None) -> tuple[np.ndarray, np.ndarray]:
    if y is None:
        X, y, _ = design(rows)
    else:
        X, y = np.asarray(rows, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("design matrix is degenerate: non-finite values")
    return X, y


# ---------------------------------------------------------------------------
# linear models


@dataclass
class LinearModel:
    intercept: float
    coef: np.ndarray
    kind: str = "ols"
    l2_lambda: float = 0.0

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept


def _solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if not np.isfinite(a).all() or np.linalg.cond(a) > 1e15:
        raise ValueError("design matrix is degenerate even after jitter")
    return np.linalg.solve(a, b)


def ols_fit(rows, y=None) -> LinearModel:
    """Least squares through the normal equations, intercept first."""
    X, y = _xy(rows, y)
    n, p = X.shape
    if n < p + 1:
        raise ValueError(f"need at least {p + 1} rows for {p} features, got {n}")
    A = np.hstack([np.ones((n, 1)), X])
    beta = _solve(A.T @ A + JITTER * np.eye(p + 1), A.T @ y)
    return LinearModel(float(beta[0]), beta[1:], "ols", 0.0)


def glm_fit(rows, l2_lambda: float = 1.0, y=None) -> LinearModel:
    """Gaussian identity-link GLM with an L2 penalty on the slopes only."""
    if l2_lambda < 0:
        raise ValueError("l2_lambda must be non-negative")
    X, y = _xy(rows, y)
    n, p = X.shape
    if n < p + 1:
        raise ValueError(f"need at least {p + 1} rows for {p} features, got {n}")
    xm, ym = X.mean(axis=0), y.mean()
    Xc = X - xm
    beta = _solve(Xc.T @ Xc + (l2_lambda + JITTER) * np.eye(p), Xc.T @ (y - ym))
    return LinearModel(float(ym - xm @ beta), beta, "glm", float(l2_lambda))


def linear_predict(model: LinearModel, rows) -> np.ndarray:
    if isinstance(rows, TabularRow):
        rows = [rows]
    X = design(rows)[0] if rows and isinstance(rows[0], TabularRow) else np.atleast_2d(rows)
    return model.predict(X)


# ---------------------------------------------------------------------------
# CART and random forest


@dataclass
class ForestConfig:
    n_trees: int = 200
    max_depth: int | None = 12
    min_samples_leaf: int = 5
    max_features: int = 4
    bootstrap: bool = True
    seed: int = 0

    def validate(self, n_features: int = N_FEATURES) -> None:
        if self.n_trees < 1 or self.min_samples_leaf < 1 or self.max_features < 1:
            raise ValueError("forest sizes must be positive")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be positive or None")
        if self.max_features > n_features:
            raise ValueError(f"max_features {self.max_features} exceeds {n_features} features")


@dataclass
class Tree:
    feature: np.ndarray     # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray       # (nodes, 1) mean or (nodes, 3) class fractions
    importance: np.ndarray  # unnormalised impurity decrease per feature


@dataclass
class Forest:
    config: ForestConfig
    task: str
    trees: list[Tree] = field(default_factory=list)
    n_features: int = N_FEATURES


def _impurity(stats: np.ndarray, counts: np.ndarray, task: str) -> np.ndarray:
    """Per-candidate node impurity from running sums.

    regression: stats = (sum y, sum y²) columns -> variance;
    classification: stats = class counts -> Gini.
    """
    if task == "regression":
        mean = stats[:, 0] / counts
        return np.maximum(stats[:, 1] / counts - mean * mean, 0.0)
    p = stats / counts[:, None]
    return 1.0 - (p * p).sum(axis=1)


def _targets(y: np.ndarray, task: str) -> np.ndarray:
    if task == "regression":
        return np.stack([y, y * y], axis=1)
    return np.eye(N_CLASSES)[y.astype(np.int64)]


def _fit_tree(X: np.ndarray, y: np.ndarray, cfg: ForestConfig, task: str, rng: np.random.Generator) -> Tree:
    n, p = X.shape
    T = _targets(y, task)
    feature, threshold, left, right, value = [], [], [], [], []
    importance = np.zeros(p)
    max_depth = cfg.max_depth if cfg.max_depth is not None else np.inf
    leaf = cfg.min_samples_leaf

    def node_value(idx):
        if task == "regression":
            return np.array([y[idx].mean()])
        return T[idx].mean(axis=0)

    def add(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(node_value(idx))
        return len(feature) - 1

    root = add(np.arange(n))
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        m = idx.size
        if depth >= max_depth or m < 2 * leaf:
            continue
        tot = T[idx].sum(axis=0)
        parent_imp = _impurity(tot[None, :], np.array([float(m)]), task)[0]
        if parent_imp <= 1e-12:
            continue
        best = (0.0, -1, 0.0, None)
        for f in rng.choice(p, size=min(cfg.max_features, p), replace=False):
            xs = X[idx, f]
            order = np.argsort(xs, kind="stable")
            xs = xs[order]
            cum = np.cumsum(T[idx][order], axis=0)[:-1]
            nl = np.arange(1, m, dtype=np.float64)
            valid = (xs[1:] > xs[:-1]) & (nl >= leaf) & (m - nl >= leaf)
            if not valid.any():
                continue
            il = _impurity(cum, nl, task)
            ir = _impurity(tot[None, :] - cum, m - nl, task)
            gain = parent_imp - (nl * il + (m - nl) * ir) / m
            gain[~valid] = -np.inf
            j = int(np.argmax(gain))
            if gain[j] > best[0] + 1e-15:
                best = (float(gain[j]), int(f), 0.5 * (xs[j] + xs[j + 1]), idx[order])
        g, f, thr, _ = best
        if f < 0:
            continue
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        importance[f] += g * m / n
        feature[node], threshold[node] = f, thr
        left[node], right[node] = add(li), add(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                np.stack(value), importance)


def _tree_values(tree: Tree, X: np.ndarray) -> np.ndarray:
    node = np.zeros(X.shape[0], dtype=np.int64)
    active = tree.feature[node] >= 0
    while active.any():
        i = np.nonzero(active)[0]
        nd = node[i]
        go_left = X[i, tree.feature[nd]] <= tree.threshold[nd]
        node[i] = np.where(go_left, tree.left[nd], tree.right[nd])
        active = tree.feature[node] >= 0
    return tree.value[node]


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("HERDLIFE_THREADS", "0")))
    except ValueError:
        return 0


def rf_fit(rows, config: ForestConfig | None = None, task: str = "regression", y=None) -> Forest:
    """Bootstrap CART ensemble; tree i always uses seed stream i, whatever the scheduling."""
    config = config or ForestConfig()
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if y is None:
        X, hl, cls = design(rows)
        y = hl if task == "regression" else cls
    else:
        X, y = np.asarray(rows, dtype=np.float64), np.asarray(y)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    config.validate(X.shape[1])
    if task == "classification" and ((y < 0) | (y >= N_CLASSES)).any():
        raise ValueError("class labels must be 0, 1 or 2")
    streams = np.random.SeedSequence(config.seed).spawn(config.n_trees)

    def one(i):
        rng = np.random.default_rng(streams[i])
        idx = rng.integers(0, X.shape[0], X.shape[0]) if config.bootstrap else np.arange(X.shape[0])
        return _fit_tree(X[idx], y[idx], config, task, rng)

    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            trees = list(ex.map(one, range(config.n_trees)))
    else:
        trees = [one(i) for i in range(config.n_trees)]
    return Forest(config, task, trees, X.shape[1])


def _forest_x(rows) -> np.ndarray:
    if isinstance(rows, TabularRow):
        rows = [rows]
    if len(rows) and isinstance(rows[0], TabularRow):
        return design(rows)[0]
    return np.atleast_2d(np.asarray(rows, dtype=np.float64))


def rf_predict(forest: Forest, rows) -> np.ndarray:
    """Mean prediction (regression) or majority vote with ties to the lower class."""
    X = _forest_x(rows)
    if forest.task == "regression":
        return np.mean([_tree_values(t, X)[:, 0] for t in forest.trees], axis=0)
    return rf_vote_fractions(forest, X).argmax(axis=1)


def rf_vote_fractions(forest: Forest, rows) -> np.ndarray:
    if forest.task != "classification":
        raise ValueError("vote fractions need a classification forest")
    X = _forest_x(rows)
    votes = np.zeros((X.shape[0], N_CLASSES))
    for t in forest.trees:
        votes[np.arange(X.shape[0]), _tree_values(t, X).argmax(axis=1)] += 1
    return votes / len(forest.trees)


def majority_vote(labels: Sequence[int]) -> int:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=N_CLASSES)
    return int(counts.argmax())


def rf_feature_importance(forest: Forest) -> np.ndarray:
    """Impurity decrease summed over trees, normalised to sum 1 (uniform if nothing was split)."""
    total = np.sum([t.importance for t in forest.trees], axis=0)
    s = total.sum()
    if s <= 0:
        return np.full(forest.n_features, 1.0 / forest.n_features)
    return total / s


def importance_table(forest: Forest) -> list[tuple[str, float]]:
    imp = rf_feature_importance(forest)
    return sorted(zip(FEATURES, imp.tolist()), key=lambda kv: -kv[1])


# ---------------------------------------------------------------------------
# persistence (same container as the transformer)


def save_baseline(model: LinearModel | Forest, path: str | Path, extra: dict | None = None) -> None:
    extra = extra or {}
    if isinstance(model, LinearModel):
        header = {"kind": "linear", "linear_kind": model.kind, "l2_lambda": model.l2_lambda, **extra}
        save_checkpoint(path, header, {"intercept": np.array([model.intercept]), "coef": model.coef})
        return
    header = {"kind": "forest", "task": model.task, "config": dataclasses.asdict(model.config),
              "n_features": model.n_features, "n_trees": len(model.trees), **extra}
    tensors = {}
    for i, t in enumerate(model.trees):
        for name in ("feature", "threshold", "left", "right", "value", "importance"):
            tensors[f"t{i}.{name}"] = getattr(t, name).astype(np.float64)
    save_checkpoint(path, header, tensors)


def load_baseline(path: str | Path) -> tuple[LinearModel | Forest, dict]:
    header, tensors = load_checkpoint(path)
    kind = header.get("kind")
    if kind == "linear":
        return LinearModel(float(tensors["intercept"][0]), tensors["coef"], header["linear_kind"],
                           header["l2_lambda"]), header
    if kind == "forest":
        trees = []
        for i in range(header["n_trees"]):
            g = {n: tensors[f"t{i}.{n}"] for n in ("feature", "threshold", "left", "right", "value", "importance")}
            trees.append(Tree(g["feature"].astype(np.int64), g["threshold"], g["left"].astype(np.int64),
                              g["right"].astype(np.int64), g["value"], g["importance"]))
        return Forest(ForestConfig(**header["config"]), header["task"], trees, header["n_features"]), header
    raise CheckpointError(f"{path}: holds a {kind!r} model, not a baseline")
