"""Causal forests with node-level two-way fixed effects.

Each tree is grown on a subsample.  Inside every node the outcome and the
treatment are residualized on country and year effects fitted on that
node's rows only, and a split is scored by

    n_L * n_R / (n_L + n_R)**2 * (tau_L - tau_R)**2

where ``tau`` is the residual-on-residual slope ``sum(D~ Y~) / sum(D~**2)``.
Leaves are re-residualized on the held-out (estimation) half and store that
slope as the local effect.

Feature 0 is event time.  Rows with ``D = 0`` (never-treated countries and
not-yet-treated years) have no post-adoption horizon and are routed down
*both* children of an event-time split, so every leaf keeps its comparison
pool.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InsufficientData, InvalidSpec, NoSplits, TooFewTrees
from .panel import PanelDataset

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
EVENT_TIME = "event_time"
_MIN_GAIN = 1e-20
_MAX_SPLIT_TRIES = 20


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    min_leaf: int = 30
    max_depth: int | None = 5
    honesty: bool = True
    honesty_fraction: float = 0.5
    subsample_fraction: float = 0.5
    seed: int = 0
    min_treated_per_leaf: int = 5
    min_control_per_leaf: int = 5
    ci_group_size: int = 2

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidSpec("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise InvalidSpec("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise InvalidSpec("max_depth must be >= 0")
        if not 0 < self.honesty_fraction < 1:
            raise InvalidSpec("honesty_fraction must lie in (0, 1)")
        if not 0 < self.subsample_fraction <= 1:
            raise InvalidSpec("subsample_fraction must lie in (0, 1]")
        if self.ci_group_size < 1:
            raise InvalidSpec("ci_group_size must be >= 1")


# ---------------------------------------------------------------------------
# Node-level residualization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeResiduals:
    y: np.ndarray
    d: np.ndarray
    degenerate: bool = False
    mode: str = "two-way"   # "two-way", "year-only", "country-only"


def _group_sums(codes: np.ndarray, n_groups: int, Z: np.ndarray) -> np.ndarray:
    return np.stack([np.bincount(codes, weights=Z[:, j], minlength=n_groups)
                     for j in range(Z.shape[1])], axis=1)


def twoway_residuals(Z: np.ndarray, country: np.ndarray, year: np.ndarray) -> tuple[np.ndarray, str]:
    """Residuals of the columns of ``Z`` after least-squares country and year effects.

    The two-way normal equations are reduced to the smaller dimension by
    eliminating the larger one (a Schur complement), so no indicator matrix
    is ever built.  When only one country (or one year) is present the
    other dimension is demeaned alone and the mode says so.
    """
    Z = np.asarray(Z, float)
    squeeze = Z.ndim == 1
    if squeeze:
        Z = Z[:, None]
    cu, c = np.unique(country, return_inverse=True)
    tu, t = np.unique(year, return_inverse=True)
    C, T = len(cu), len(tu)
    if C < 2 or T < 2:
        mode = "year-only" if C < 2 else "country-only"
        codes, G = (t, T) if C < 2 else (c, C)
        counts = np.bincount(codes, minlength=G).astype(float)
        means = _group_sums(codes, G, Z) / counts[:, None]
        out = Z - means[codes]
        return (out[:, 0] if squeeze else out), mode
    if C > T:
        c, t, C, T = t, c, T, C
    nc = np.bincount(c, minlength=C).astype(float)
    nt = np.bincount(t, minlength=T).astype(float)
    N = np.bincount(c * T + t, minlength=C * T).reshape(C, T).astype(float)
    Sc = _group_sums(c, C, Z)
    St = _group_sums(t, T, Z)
    Nw = N / nc[:, None]
    M = np.diag(nt) - N.T @ Nw
    rhs = St - Nw.T @ Sc
    gamma = np.linalg.lstsq(M, rhs, rcond=None)[0]
    alpha = Sc / nc[:, None] - Nw @ gamma
    out = Z - alpha[c] - gamma[t]
    return (out[:, 0] if squeeze else out), "two-way"


def residualize_node(y, d, country, year) -> NodeResiduals:
    """Residualize outcome and treatment on two-way effects fitted on these rows only.

    Degenerate nodes (a single country or a single year) fall back to
    demeaning on the one dimension that exists; ``degenerate`` is set.
    """
    Z = np.column_stack([np.asarray(y, float), np.asarray(d, float)])
    res, mode = twoway_residuals(Z, np.asarray(country), np.asarray(year))
    return NodeResiduals(res[:, 0], res[:, 1], mode != "two-way", mode)


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------

@dataclass
class TreeNode:
    split_feature: int | None = None
    split_threshold: float | None = None
    children: tuple["TreeNode", "TreeNode"] | None = None
    leaf_effect: float | None = None
    leaf_count: tuple[int, int] = (0, 0)    # estimation rows (treated, control)

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    def make_leaf(self) -> None:
        self.split_feature = self.split_threshold = self.children = None

    def n_internal(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + self.children[0].n_internal() + self.children[1].n_internal()

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"leaf_effect": self.leaf_effect, "leaf_count": list(self.leaf_count)}
        return {
            "split_feature": self.split_feature,
            "split_threshold": self.split_threshold,
            "children": [self.children[0].to_dict(), self.children[1].to_dict()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "children" in d:
            left, right = (cls.from_dict(ch) for ch in d["children"])
            return cls(d["split_feature"], d["split_threshold"], (left, right))
        return cls(leaf_effect=d["leaf_effect"], leaf_count=tuple(d["leaf_count"]))


@dataclass
class _TrainData:
    y: np.ndarray
    d: np.ndarray
    country: np.ndarray
    year: np.ndarray
    features: np.ndarray     # column 0 = event time (NaN when undefined)
    both: np.ndarray         # rows routed to both children of event-time splits


def _train_data(dataset: PanelDataset) -> _TrainData:
    k = np.full(len(dataset), np.nan)
    k[dataset.event_time_mask] = dataset.event_time_values()
    feats = np.column_stack([k, dataset.x]) if dataset.x.size else k[:, None]
    d = dataset.d
    return _TrainData(dataset.y, d, dataset.country_codes, dataset.year_codes, feats, d == 0)


class _Grower:
    def __init__(self, data: _TrainData, config: ForestConfig):
        self.data = data
        self.cfg = config
        self.max_depth = config.max_depth if config.max_depth is not None else np.inf

    # -- helpers -------------------------------------------------------------
    def residualize(self, rows: np.ndarray) -> NodeResiduals:
        dt = self.data
        return residualize_node(dt.y[rows], dt.d[rows], dt.country[rows], dt.year[rows])

    def estimable(self, rows: np.ndarray, res: NodeResiduals) -> bool:
        d = self.data.d[rows]
        n_t = int(d.sum())
        return (
            not res.degenerate
            and n_t >= self.cfg.min_treated_per_leaf
            and len(rows) - n_t >= self.cfg.min_control_per_leaf
            and float(res.d @ res.d) > 1e-9 * len(rows)
        )

    def route(self, rows: np.ndarray, feature: int, threshold: float) -> tuple[np.ndarray, np.ndarray]:
        v = self.data.features[rows, feature]
        if feature == 0:
            both = self.data.both[rows]
            return rows[both | (v <= threshold)], rows[both | (v > threshold)]
        return rows[v <= threshold], rows[v > threshold]

    # -- split search ----------------------------------------------------------
    def candidates(self, rows: np.ndarray, res: NodeResiduals) -> list[tuple[float, int, float]]:
        cfg = self.cfg
        dt = self.data
        d = dt.d[rows]
        dy = res.d * res.y
        dd = res.d * res.d
        scores, feats, thresholds = [], [], []
        for j in range(dt.features.shape[1]):
            v = dt.features[rows, j]
            if j == 0:
                part = ~dt.both[rows]
                base = np.array([(~part).sum(), 0.0, (~part).sum(), dy[~part].sum(), dd[~part].sum()])
            else:
                part = np.ones(len(rows), bool)
                base = np.zeros(5)
            if part.sum() < 2:
                continue
            u, inv = np.unique(v[part], return_inverse=True)
            if len(u) < 2:
                continue
            dp = d[part]
            stats = np.stack([
                np.bincount(inv, minlength=len(u)).astype(float),
                np.bincount(inv, weights=dp, minlength=len(u)),
                np.bincount(inv, weights=1.0 - dp, minlength=len(u)),
                np.bincount(inv, weights=dy[part], minlength=len(u)),
                np.bincount(inv, weights=dd[part], minlength=len(u)),
            ], axis=1)
            cum = np.cumsum(stats, axis=0)[:-1]
            total = stats.sum(axis=0)
            left = base + cum
            right = base + (total - cum)
            ok = (
                (left[:, 0] >= cfg.min_leaf) & (right[:, 0] >= cfg.min_leaf)
                & (left[:, 1] >= cfg.min_treated_per_leaf) & (right[:, 1] >= cfg.min_treated_per_leaf)
                & (left[:, 2] >= cfg.min_control_per_leaf) & (right[:, 2] >= cfg.min_control_per_leaf)
                & (left[:, 4] > 1e-9 * left[:, 0]) & (right[:, 4] > 1e-9 * right[:, 0])
            )
            if not ok.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                tau_l = left[:, 3] / left[:, 4]
                tau_r = right[:, 3] / right[:, 4]
                nl, nr = left[:, 0], right[:, 0]
                score = nl * nr / (nl + nr) ** 2 * (tau_l - tau_r) ** 2
            score = np.where(ok, score, -np.inf)
            mids = (u[:-1] + u[1:]) / 2.0
            scores.append(score)
            feats.append(np.full(len(mids), j))
            thresholds.append(mids)
        if not scores:
            return []
        score = np.concatenate(scores)
        feat = np.concatenate(feats)
        thr = np.concatenate(thresholds)
        # stable sort keeps (feature, threshold) order among equal scores
        order = np.argsort(-score, kind="stable")
        order = order[score[order] > _MIN_GAIN][:_MAX_SPLIT_TRIES]
        return [(float(score[i]), int(feat[i]), float(thr[i])) for i in order]

    def grow(self, rows: np.ndarray, res: NodeResiduals, depth: int, counts: np.ndarray) -> TreeNode:
        node = TreeNode()
        if depth >= self.max_depth or len(rows) < 2 * self.cfg.min_leaf:
            return node
        for _, feature, threshold in self.candidates(rows, res):
            left, right = self.route(rows, feature, threshold)
            res_l = self.residualize(left)
            if not self.estimable(left, res_l):
                continue
            res_r = self.residualize(right)
            if not self.estimable(right, res_r):
                continue
            node.split_feature, node.split_threshold = feature, threshold
            node.children = (
                self.grow(left, res_l, depth + 1, counts),
                self.grow(right, res_r, depth + 1, counts),
            )
            return node
        return node

    def estimate(self, node: TreeNode, rows: np.ndarray) -> bool:
        """Fill leaf effects from ``rows``; prune children that cannot be estimated."""
        if not node.is_leaf:
            left, right = self.route(rows, node.split_feature, node.split_threshold)
            ok_l = self.estimate(node.children[0], left)
            ok_r = self.estimate(node.children[1], right)
            if ok_l and ok_r:
                return True
            node.make_leaf()
        if len(rows) == 0:
            return False
        res = self.residualize(rows)
        n_t = int(self.data.d[rows].sum())
        node.leaf_count = (n_t, len(rows) - n_t)
        if not self.estimable(rows, res):
            node.leaf_effect = None
            return False
        node.leaf_effect = float((res.d @ res.y) / (res.d @ res.d))
        return True


def grow_tree(data: _TrainData, split_rows: np.ndarray, est_rows: np.ndarray,
              config: ForestConfig) -> TreeNode:
    """Grow one tree on ``split_rows`` and estimate its leaves on ``est_rows``."""
    g = _Grower(data, config)
    split_rows = np.sort(split_rows)
    root_res = g.residualize(split_rows)
    root = g.grow(split_rows, root_res, 0, None)
    g.estimate(root, np.sort(est_rows))
    return root


def _tree_rows(n: int, config: ForestConfig, tree_index: int) -> tuple[np.ndarray, np.ndarray]:
    cfg = config
    pool = np.arange(n)
    if cfg.ci_group_size > 1:
        group = tree_index // cfg.ci_group_size
        rng_g = np.random.default_rng([cfg.seed, 0, group])
        pool = rng_g.choice(n, size=n // 2, replace=False)
    rng = np.random.default_rng([cfg.seed, 1, tree_index])
    size = min(len(pool), max(2, int(round(cfg.subsample_fraction * n))))
    sample = rng.choice(pool, size=size, replace=False)
    if not cfg.honesty:
        return sample, sample
    n_split = int(round(cfg.honesty_fraction * size))
    return sample[:n_split], sample[n_split:]


# ---------------------------------------------------------------------------
# Forest
# ---------------------------------------------------------------------------

@dataclass
class _Compiled:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray


def _compile(root: TreeNode) -> _Compiled:
    feature, threshold, left, right, value = [], [], [], [], []

    def visit(node: TreeNode) -> int:
        i = len(feature)
        feature.append(-1 if node.is_leaf else node.split_feature)
        threshold.append(np.nan if node.is_leaf else node.split_threshold)
        left.append(-1)
        right.append(-1)
        value.append(np.nan if node.leaf_effect is None else node.leaf_effect)
        if not node.is_leaf:
            left[i] = visit(node.children[0])
            right[i] = visit(node.children[1])
        return i

    visit(root)
    return _Compiled(np.array(feature), np.array(threshold, float), np.array(left),
                     np.array(right), np.array(value, float))


@dataclass
class ForestModel:
    trees: list[TreeNode]
    config: ForestConfig
    feature_names: tuple[str, ...]
    split_counts: np.ndarray
    k_support: tuple[int, int]
    _compiled: list[_Compiled] = field(default=None, repr=False)

    def __post_init__(self):
        if self._compiled is None:
            self._compiled = [_compile(t) for t in self.trees]

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def tree_predictions(self, queries: np.ndarray) -> np.ndarray:
        """Leaf effects reached by each query in each tree, shape ``(n_trees, m)``.

        ``queries`` has the model's feature layout: event time first.
        """
        q = np.atleast_2d(np.asarray(queries, float))
        if q.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {q.shape[1]}")
        out = np.empty((len(self._compiled), len(q)))
        rows = np.arange(len(q))
        for i, tr in enumerate(self._compiled):
            node = np.zeros(len(q), dtype=np.intp)
            while True:
                f = tr.feature[node]
                active = f >= 0
                if not active.any():
                    break
                a = rows[active]
                na = node[active]
                go_left = q[a, f[active]] <= tr.threshold[na]
                node[a] = np.where(go_left, tr.left[na], tr.right[na])
            out[i] = tr.value[node]
        return out

    def predict(self, queries: np.ndarray) -> np.ndarray:
        preds = self.tree_predictions(queries)
        return np.nanmean(preds, axis=0)

    def to_json(self) -> str:
        doc = {
            "format": "cffe-forest",
            "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "feature_names": list(self.feature_names),
            "split_counts": self.split_counts.tolist(),
            "k_support": list(self.k_support),
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        doc = json.loads(text)
        if doc.get("format") != "cffe-forest" or doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model document (format={doc.get('format')}, "
                             f"version={doc.get('version')})")
        return cls(
            trees=[TreeNode.from_dict(t) for t in doc["trees"]],
            config=ForestConfig(**doc["config"]),
            feature_names=tuple(doc["feature_names"]),
            split_counts=np.array(doc["split_counts"], dtype=np.int64),
            k_support=tuple(doc["k_support"]),
        )


def _count_splits(node: TreeNode, counts: np.ndarray) -> None:
    if not node.is_leaf:
        counts[node.split_feature] += 1
        _count_splits(node.children[0], counts)
        _count_splits(node.children[1], counts)


def fit_forest(dataset: PanelDataset, config: ForestConfig | None = None, n_jobs: int = 1) -> ForestModel:
    """Grow an honest causal forest on ``dataset``.

    The result depends only on the data and ``config`` (including its
    seed): every tree draws its rows from streams keyed by (seed, tree
    index), so ``n_jobs`` changes wall time, never output.

    Raises
    ------
    InsufficientData
        No valid root leaf: too few treated or control rows, or no treatment
        variation left after two-way residualization.
    """
    config = config or ForestConfig()
    data = _train_data(dataset)
    n = len(data.y)
    g = _Grower(data, config)
    all_rows = np.arange(n)
    n_t = int(data.d.sum())
    if n_t == 0 or n - n_t == 0 or not g.estimable(all_rows, g.residualize(all_rows)):
        raise InsufficientData(
            f"cannot form a valid root leaf ({n_t} treated rows, {n - n_t} control rows)")

    def build(i: int) -> TreeNode:
        split_rows, est_rows = _tree_rows(n, config, i)
        return grow_tree(data, split_rows, est_rows, config)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(build, range(config.n_trees)))
    else:
        trees = [build(i) for i in range(config.n_trees)]

    counts = np.zeros(data.features.shape[1], dtype=np.int64)
    for t in trees:
        _count_splits(t, counts)
    n_bad = sum(t.is_leaf and t.leaf_effect is None for t in trees)
    if n_bad:
        logger.warning("%d of %d trees have no estimable root and are ignored", n_bad, len(trees))
    k_post = data.features[data.d == 1, 0]
    return ForestModel(
        trees=trees,
        config=config,
        feature_names=(EVENT_TIME, *dataset.feature_names),
        split_counts=counts,
        k_support=(int(k_post.min()), int(k_post.max())),
    )


def _query(model: ForestModel, k, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, float))
    if x.ndim != 1 or len(x) != model.n_features - 1:
        raise DimensionMismatch(
            f"feature vector has length {x.size}, model expects {model.n_features - 1}")
    return np.concatenate([[float(k)], x])[None, :]


def predict_cate(model: ForestModel, k: int, x: Sequence[float]) -> float:
    """Mean over trees of the leaf effect reached by ``(k, x)``."""
    return float(model.predict(_query(model, k, x))[0])


def feature_importance(model: ForestModel) -> dict[str, tuple[float, int]]:
    """Proportion and raw count of splits per feature (event time first)."""
    total = int(model.split_counts.sum())
    if total == 0:
        raise NoSplits("every tree is a single leaf")
    return {name: (float(c) / total, int(c))
            for name, c in zip(model.feature_names, model.split_counts)}


def grouped_variance(tree_values: np.ndarray, group_size: int) -> np.ndarray:
    """Half-sample ("little bags") variance of the forest mean.

    ``tree_values`` has shape ``(n_trees, m)``; consecutive blocks of
    ``group_size`` trees share a half-sample.  The between-group variance
    of the group means is debiased by the within-group tree noise.
    """
    n_groups = tree_values.shape[0] // group_size
    v = tree_values[: n_groups * group_size].reshape(n_groups, group_size, -1)
    group_mean = np.nanmean(v, axis=1)
    grand = np.nanmean(group_mean, axis=0)
    between = np.nanmean((group_mean - grand) ** 2, axis=0)
    within = np.nanmean(np.nanvar(v, axis=1, ddof=1), axis=0) / group_size
    return np.maximum(between - within, 0.0)


def _check_variance_ok(model: ForestModel) -> None:
    cfg = model.config
    if cfg.n_trees < 50 or cfg.ci_group_size < 2 or not cfg.honesty:
        raise TooFewTrees(
            "forest variance needs an honest forest with >= 50 trees grown in groups of >= 2 "
            f"(n_trees={cfg.n_trees}, ci_group_size={cfg.ci_group_size}, honesty={cfg.honesty})")


def forest_variance(model: ForestModel, k: int, x: Sequence[float]) -> float:
    """Variance of ``predict_cate(model, k, x)`` from the tree-group structure."""
    _check_variance_ok(model)
    vals = model.tree_predictions(_query(model, k, x))
    return float(grouped_variance(vals, model.config.ci_group_size)[0])


def functional_variance(model: ForestModel, queries: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Variance of a weighted average of forest predictions over ``queries``."""
    _check_variance_ok(model)
    vals = model.tree_predictions(queries)
    w = np.full(vals.shape[1], 1.0 / vals.shape[1]) if weights is None else np.asarray(weights, float)
    combo = (np.where(np.isnan(vals), np.nanmean(vals, axis=0), vals) @ w)[:, None]
    return float(grouped_variance(combo, model.config.ci_group_size)[0])
