"""Gradient-boosted regression trees with exact Shapley attributions.

Second-order boosting on the squared-error objective (gradient = residual,
hessian = 1) with L2 leaf regularization and exact greedy split enumeration
over sorted unique feature values. Missing values (NaN) always route left.
Attribution uses the polynomial-time path-weighting algorithm over tree paths,
with node covers (training-row counts) as the background distribution; a
subset-enumeration oracle is provided for cross-checking.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


class GBTError(ValueError):
    pass


@dataclass(frozen=True)
class GBTParams:
    eta: float = 0.1
    max_depth: int = 4
    n_rounds: int = 200
    lam: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    early_stopping_rounds: int = 20

    def __post_init__(self) -> None:
        if not (0 < self.eta <= 1):
            raise ValueError("eta must be in (0, 1]")
        if self.max_depth < 1 or self.n_rounds < 1:
            raise ValueError("max_depth and n_rounds must be >= 1")
        if self.lam < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("lam, gamma, min_child_weight must be >= 0")


@dataclass
class TreeNode:
    """Internal node (feature >= 0) or leaf (feature == -1). NaN goes left."""

    cover: float
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0
    gain: float = 0.0  # split gain, internal nodes only

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass
class GBTModel:
    trees: list[TreeNode]
    base_score: float
    params: GBTParams
    feature_names: tuple[str, ...]
    best_round: int = 0  # rounds kept after early stopping

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


@dataclass(frozen=True)
class Attribution:
    """Per-feature Shapley values; base + sum(values) equals the prediction."""

    values: np.ndarray
    base: float

    @property
    def total(self) -> float:
        return self.base + float(self.values.sum())


def _best_split(Xn: np.ndarray, g: np.ndarray, params: GBTParams):
    """Exact greedy split over all features of one node.

    Returns (feature, threshold, gain) or None. Ties resolve to the lowest
    feature index, then the lowest threshold. NaN rows contribute to the left
    statistics of every candidate.
    """
    n, n_feat = Xn.shape
    if n < 2 or n_feat < 1:
        return None
    G = g.sum()
    H = float(n)
    lam, mcw = params.lam, params.min_child_weight

    nan_mask = np.isnan(Xn)
    g_nan = np.where(nan_mask, g[:, None], 0.0).sum(axis=0)
    h_nan = nan_mask.sum(axis=0).astype(np.float64)

    order = np.argsort(Xn, axis=0, kind="stable")  # NaN sorts last
    Xs = np.take_along_axis(Xn, order, axis=0)
    gs = g[order]

    finite = ~np.isnan(Xs)
    gl = np.cumsum(np.where(finite, gs, 0.0), axis=0) + g_nan
    hl = np.cumsum(finite, axis=0, dtype=np.float64) + h_nan

    def split_score(GL, HL):
        GR, HR = G - GL, H - HL
        with np.errstate(invalid="ignore", divide="ignore"):
            return 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam)
                          - G * G / (H + lam)) - params.gamma

    # candidate i splits between sorted positions i and i+1
    cand = finite[:-1] & finite[1:] & (Xs[:-1] != Xs[1:])
    cand &= (hl[:-1] >= mcw) & ((H - hl[:-1]) >= mcw)
    gain = np.where(cand, split_score(gl[:-1], hl[:-1]), -np.inf)

    col_best = gain.argmax(axis=0)  # first (lowest threshold) max per feature
    col_gain = gain[col_best, np.arange(n_feat)]

    # extra candidate per column: NaN rows alone on the left (x < first value)
    nan_cand = (h_nan >= max(mcw, 1.0)) & ((H - h_nan) >= mcw) & finite[0]
    nan_gain = np.where(nan_cand, split_score(g_nan, h_nan), -np.inf)
    use_nan = nan_gain >= col_gain  # its threshold is the lowest, so ties go to it
    col_gain = np.where(use_nan, nan_gain, col_gain)

    feat = int(col_gain.argmax())  # first (lowest index) max across features
    best_gain = float(col_gain[feat])
    if not np.isfinite(best_gain) or best_gain <= 0.0:
        return None
    if use_nan[feat]:
        threshold = Xs[0, feat]  # no finite value satisfies x < Xs[0]
    else:
        i = int(col_best[feat])
        threshold = 0.5 * (Xs[i, feat] + Xs[i + 1, feat])
    return feat, float(threshold), best_gain


def _build_tree(X: np.ndarray, g: np.ndarray, idx: np.ndarray,
                params: GBTParams, depth: int) -> TreeNode:
    G = g[idx].sum()
    H = float(len(idx))
    leaf_value = -params.eta * G / (H + params.lam)
    if depth >= params.max_depth or len(idx) < 2:
        return TreeNode(cover=H, value=leaf_value)
    found = _best_split(X[idx], g[idx], params)
    if found is None:
        return TreeNode(cover=H, value=leaf_value)
    feat, threshold, gain = found
    col = X[idx, feat]
    go_left = np.isnan(col) | (col < threshold)
    left = _build_tree(X, g, idx[go_left], params, depth + 1)
    right = _build_tree(X, g, idx[~go_left], params, depth + 1)
    return TreeNode(cover=H, feature=feat, threshold=threshold,
                    left=left, right=right, gain=gain)


def _eval_tree(node: TreeNode, x: np.ndarray) -> float:
    while not node.is_leaf:
        v = x[node.feature]
        node = node.left if (math.isnan(v) or v < node.threshold) else node.right
    return node.value


def _eval_tree_many(node: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = _eval_tree(node, X[i])
    return out


def fit(X: np.ndarray, y: np.ndarray, params: GBTParams | None = None,
        feature_names: tuple[str, ...] | None = None,
        eval_set: tuple[np.ndarray, np.ndarray] | None = None) -> GBTModel:
    """Boosted squared-error regression. Deterministic given data and params.

    With an eval_set, boosting stops after `early_stopping_rounds` rounds
    without validation RMSE improvement and the model is trimmed to its best
    round.
    """
    params = params or GBTParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise GBTError("X must be a nonempty 2-D matrix")
    if y.shape != (X.shape[0],):
        raise GBTError(f"y has shape {y.shape}, expected ({X.shape[0]},)")
    if np.isnan(y).any():
        raise GBTError("targets contain NaN")
    if feature_names is None:
        feature_names = tuple(f"f{i}" for i in range(X.shape[1]))
    if len(feature_names) != X.shape[1]:
        raise GBTError(f"{len(feature_names)} names for {X.shape[1]} columns")

    # mean of an all-equal target is that value exactly, fp wobble aside
    base = float(y[0]) if np.all(y == y[0]) else float(np.mean(y))
    pred = np.full(X.shape[0], base)
    trees: list[TreeNode] = []
    all_idx = np.arange(X.shape[0])

    if eval_set is not None:
        Xv = np.asarray(eval_set[0], dtype=np.float64)
        yv = np.asarray(eval_set[1], dtype=np.float64)
        pred_v = np.full(Xv.shape[0], base)
        best_rmse = float(np.sqrt(np.mean((pred_v - yv) ** 2)))
        best_round = 0
        stagnant = 0

    for _ in range(params.n_rounds):
        g = pred - y
        tree = _build_tree(X, g, all_idx, params, depth=0)
        if tree.is_leaf:
            break  # no split improves the objective; the residual mean is ~0
        trees.append(tree)
        pred += _eval_tree_many(tree, X)
        if eval_set is not None:
            pred_v += _eval_tree_many(tree, Xv)
            rmse = float(np.sqrt(np.mean((pred_v - yv) ** 2)))
            if rmse < best_rmse:
                best_rmse = rmse
                best_round = len(trees)
                stagnant = 0
            else:
                stagnant += 1
                if stagnant >= params.early_stopping_rounds:
                    break

    if eval_set is not None:
        trees = trees[:best_round]  # keep the validation-best prefix
    return GBTModel(trees=trees, base_score=base, params=params,
                    feature_names=feature_names, best_round=len(trees))


def predict(model: GBTModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise GBTError(f"feature vector has shape {x.shape}, "
                       f"model expects ({model.n_features},)")
    return model.base_score + sum(_eval_tree(t, x) for t in model.trees)


def predict_many(model: GBTModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise GBTError(f"feature matrix has shape {X.shape}, "
                       f"model expects (*, {model.n_features})")
    out = np.full(X.shape[0], model.base_score)
    for tree in model.trees:
        out += _eval_tree_many(tree, X)
    return out


def training_loss_curve(X: np.ndarray, y: np.ndarray, model: GBTModel) -> np.ndarray:
    """Mean squared training loss after each boosting round (round 0 = base)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pred = np.full(X.shape[0], model.base_score)
    losses = [float(np.mean((pred - y) ** 2))]
    for tree in model.trees:
        pred += _eval_tree_many(tree, X)
        losses.append(float(np.mean((pred - y) ** 2)))
    return np.asarray(losses)


# ---------------------------------------------------------------------------
# exact Shapley attribution


def _tree_expectation(node: TreeNode) -> float:
    if node.is_leaf:
        return node.value
    wl, wr = node.left.cover, node.right.cover
    return (wl * _tree_expectation(node.left) + wr * _tree_expectation(node.right)) / (wl + wr)


def _extend(path: list[list], pz: float, po: float, pi: int) -> None:
    l = len(path)
    path.append([pi, pz, po, 1.0 if l == 0 else 0.0])
    for i in range(l - 1, -1, -1):
        path[i + 1][3] += po * path[i][3] * (i + 1) / (l + 1)
        path[i][3] = pz * path[i][3] * (l - i) / (l + 1)


def _unwind(path: list[list], i: int) -> None:
    l = len(path) - 1
    _, z, o, _ = path[i]
    carry = path[l][3]
    for j in range(l - 1, -1, -1):
        if o != 0:
            tmp = path[j][3]
            path[j][3] = carry * (l + 1) / ((j + 1) * o)
            carry = tmp - path[j][3] * z * (l - j) / (l + 1)
        else:
            path[j][3] = path[j][3] * (l + 1) / (z * (l - j))
    for j in range(i, l):
        path[j][0], path[j][1], path[j][2] = path[j + 1][0], path[j + 1][1], path[j + 1][2]
    path.pop()


def _unwound_sum(path: list[list], i: int) -> float:
    """Sum of path weights after removing element i, without mutating."""
    l = len(path) - 1
    _, z, o, _ = path[i]
    carry = path[l][3]
    total = 0.0
    for j in range(l - 1, -1, -1):
        if o != 0:
            w = carry * (l + 1) / ((j + 1) * o)
            carry = path[j][3] - w * z * (l - j) / (l + 1)
        else:
            w = path[j][3] * (l + 1) / (z * (l - j))
        total += w
    return total


def _shap_recurse(node: TreeNode, path: list[list], pz: float, po: float,
                  pi: int, x: np.ndarray, phi: np.ndarray) -> None:
    path = [entry.copy() for entry in path]
    _extend(path, pz, po, pi)
    if node.is_leaf:
        for i in range(1, len(path)):
            w = _unwound_sum(path, i)
            d, z, o, _ = path[i]
            phi[d] += w * (o - z) * node.value
        return
    v = x[node.feature]
    hot, cold = ((node.left, node.right)
                 if (math.isnan(v) or v < node.threshold) else (node.right, node.left))
    iz = io = 1.0
    k = next((j for j in range(1, len(path)) if path[j][0] == node.feature), None)
    if k is not None:
        iz, io = path[k][1], path[k][2]
        _unwind(path, k)
    _shap_recurse(hot, path, iz * hot.cover / node.cover, io, node.feature, x, phi)
    _shap_recurse(cold, path, iz * cold.cover / node.cover, 0.0, node.feature, x, phi)


def tree_shap(model: GBTModel, x: np.ndarray) -> Attribution:
    """Exact Shapley values under the cover-weighted tree expectation.

    Satisfies local accuracy: base + sum(values) = predict(model, x).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise GBTError(f"feature vector has shape {x.shape}, "
                       f"model expects ({model.n_features},)")
    phi = np.zeros(model.n_features)
    base = model.base_score
    for tree in model.trees:
        if tree.cover <= 0:
            raise GBTError("tree lacks cover statistics")
        _shap_recurse(tree, [], 1.0, 1.0, -1, x, phi)
        base += _tree_expectation(tree)
    return Attribution(values=phi, base=base)


def _conditional_expectation(node: TreeNode, subset: frozenset[int], x: np.ndarray) -> float:
    if node.is_leaf:
        return node.value
    if node.feature in subset:
        v = x[node.feature]
        nxt = node.left if (math.isnan(v) or v < node.threshold) else node.right
        return _conditional_expectation(nxt, subset, x)
    wl, wr = node.left.cover, node.right.cover
    return (wl * _conditional_expectation(node.left, subset, x)
            + wr * _conditional_expectation(node.right, subset, x)) / (wl + wr)


def brute_force_shap(model: GBTModel, x: np.ndarray, max_features: int = 12) -> Attribution:
    """Subset-enumeration Shapley oracle; exponential, test use only."""
    x = np.asarray(x, dtype=np.float64)
    m = model.n_features
    if m > max_features:
        raise GBTError(f"{m} features exceeds the brute-force limit of {max_features}")

    def value(subset: frozenset[int]) -> float:
        return model.base_score + sum(
            _conditional_expectation(t, subset, x) for t in model.trees)

    fact = [math.factorial(i) for i in range(m + 1)]
    phi = np.zeros(m)
    features = list(range(m))
    for bits in range(1 << m):
        subset = frozenset(j for j in features if bits >> j & 1)
        v_s = value(subset)
        w = fact[len(subset)] * fact[m - len(subset) - 1] / fact[m] if len(subset) < m else 0.0
        for j in features:
            if j not in subset:
                phi[j] += w * (value(subset | {j}) - v_s)
    return Attribution(values=phi, base=value(frozenset()))


def mean_abs_shap_ranking(model: GBTModel, X: np.ndarray) -> list[tuple[str, float]]:
    """Features by mean |phi| over the rows of X, descending; ties keep the
    lower feature index first."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise GBTError("X must be a nonempty 2-D matrix")
    acc = np.zeros(model.n_features)
    for i in range(X.shape[0]):
        acc += np.abs(tree_shap(model, X[i]).values)
    acc /= X.shape[0]
    order = sorted(range(model.n_features), key=lambda j: (-acc[j], j))
    return [(model.feature_names[j], float(acc[j])) for j in order]


def gain_importance_ranking(model: GBTModel) -> list[tuple[str, float]]:
    """Features by total split gain accumulated over all trees, descending."""
    acc = np.zeros(model.n_features)

    def visit(node: TreeNode) -> None:
        if node.is_leaf:
            return
        acc[node.feature] += node.gain
        visit(node.left)
        visit(node.right)

    for tree in model.trees:
        visit(tree)
    order = sorted(range(model.n_features), key=lambda j: (-acc[j], j))
    return [(model.feature_names[j], float(acc[j])) for j in order]


def select_top_k(ranking: list[tuple[str, float]], k: int = 10) -> list[str]:
    if k > len(ranking):
        raise GBTError(f"k={k} exceeds the {len(ranking)} ranked features")
    return [name for name, _ in ranking[:k]]


# ---------------------------------------------------------------------------
# serialization


def _node_to_obj(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"value": node.value, "cover": node.cover}
    return {"feature": node.feature, "threshold": node.threshold, "cover": node.cover,
            "gain": node.gain,
            "left": _node_to_obj(node.left), "right": _node_to_obj(node.right)}


def _node_from_obj(obj: dict) -> TreeNode:
    if "value" in obj:
        return TreeNode(cover=obj["cover"], value=obj["value"])
    return TreeNode(cover=obj["cover"], feature=obj["feature"], threshold=obj["threshold"],
                    gain=obj.get("gain", 0.0),
                    left=_node_from_obj(obj["left"]), right=_node_from_obj(obj["right"]))


def save_model(model: GBTModel, path: str) -> None:
    payload = {
        "version": 1,
        "base_score": model.base_score,
        "best_round": model.best_round,
        "params": {
            "eta": model.params.eta, "max_depth": model.params.max_depth,
            "n_rounds": model.params.n_rounds, "lam": model.params.lam,
            "gamma": model.params.gamma, "min_child_weight": model.params.min_child_weight,
            "early_stopping_rounds": model.params.early_stopping_rounds,
        },
        "feature_names": list(model.feature_names),
        "trees": [_node_to_obj(t) for t in model.trees],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_model(path: str) -> GBTModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported model file version: {payload.get('version')}")
    return GBTModel(
        trees=[_node_from_obj(t) for t in payload["trees"]],
        base_score=payload["base_score"],
        params=GBTParams(**payload["params"]),
        feature_names=tuple(payload["feature_names"]),
        best_round=payload["best_round"],
    )
