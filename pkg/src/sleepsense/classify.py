"""Gradient-boosted trees, a majority-vote baseline and evaluation metrics."""

from __future__ import annotations

import json
import logging
from collections import Counter
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    DimensionMismatch,
    EmptyTrain,
    LengthMismatch,
    NonFiniteFeature,
    SingleClassTrain,
)

log = logging.getLogger(__name__)

MODEL_FORMAT = "sleepsense-gbt"
MODEL_VERSION = 1


@dataclass
class Node:
    """Regression-tree node; a leaf when ``feature`` is None.

    Samples with ``x[feature] <= threshold`` go left.
    """

    value: float = 0.0
    feature: int | None = None
    threshold: float = 0.0
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"leaf": self.value}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        if "leaf" in d:
            return cls(value=float(d["leaf"]))
        return cls(
            feature=int(d["feature"]),
            threshold=float(d["threshold"]),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
        )

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0])
        self._fill(X, np.arange(X.shape[0]), out)
        return out

    def _fill(self, X, idx, out):
        if self.is_leaf:
            out[idx] = self.value
            return
        go_left = X[idx, self.feature] <= self.threshold
        self.left._fill(X, idx[go_left], out)
        self.right._fill(X, idx[~go_left], out)

    def internal_nodes(self):
        if self.is_leaf:
            return
        yield self
        yield from self.left.internal_nodes()
        yield from self.right.internal_nodes()


@dataclass
class GBTParams:
    n_rounds: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    min_leaf: int = 5
    reg_lambda: float = 1.0
    early_stopping_rounds: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.n_rounds < 0 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("n_rounds >= 0, max_depth >= 1 and min_leaf >= 1 required")


@dataclass
class GBTModel:
    trees: list  # trees[class_index][round]
    classes: list
    feature_names: list
    learning_rate: float
    n_rounds: int
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.trees) != len(self.classes):
            raise DataError("one tree list per class is required")
        for per_class in self.trees:
            if len(per_class) != self.n_rounds:
                raise DataError("per-class tree count must equal n_rounds")
            for tree in per_class:
                for node in tree.internal_nodes():
                    if not 0 <= node.feature < len(self.feature_names):
                        raise DataError(f"split on invalid feature index {node.feature}")

    def margins(self, X: np.ndarray) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != len(self.feature_names):
            raise DimensionMismatch(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        F = np.zeros((X.shape[0], len(self.classes)))
        for k, per_class in enumerate(self.trees):
            for tree in per_class:
                F[:, k] += tree.predict(X)
        return F

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.margins(X))

    def predict_labels(self, X: np.ndarray) -> list:
        # argmax returns the first maximum, i.e. the lowest class index on ties
        return [self.classes[i] for i in np.argmax(self.predict_proba(X), axis=1)]

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": MODEL_FORMAT,
                "version": MODEL_VERSION,
                "classes": [_jsonable(c) for c in self.classes],
                "feature_names": list(self.feature_names),
                "learning_rate": self.learning_rate,
                "n_rounds": self.n_rounds,
                "trees": [[t.to_dict() for t in per_class] for per_class in self.trees],
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "GBTModel":
        d = json.loads(text)
        if d.get("format") != MODEL_FORMAT:
            raise DataError("not a sleepsense GBT model document")
        if d.get("version") != MODEL_VERSION:
            raise DataError(f"unsupported model version {d.get('version')}")
        return cls(
            trees=[[Node.from_dict(t) for t in per_class] for per_class in d["trees"]],
            classes=d["classes"],
            feature_names=d["feature_names"],
            learning_rate=d["learning_rate"],
            n_rounds=d["n_rounds"],
            train_loss=d.get("train_loss", []),
            val_loss=d.get("val_loss", []),
        )


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    return int(value) if isinstance(value, int) else value


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X


def softmax(F: np.ndarray) -> np.ndarray:
    z = F - F.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_loss(F: np.ndarray, y_idx: np.ndarray) -> float:
    z = F - F.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(y_idx.size), y_idx]))


class _TreeBuilder:
    """Exact greedy regression-tree growth on second-order gradient statistics."""

    def __init__(self, X: np.ndarray, params: GBTParams):
        self.X = X
        self.params = params
        # presorted orders, filtered per node to keep sorting out of the inner loop
        self.order = np.argsort(X, axis=0, kind="stable").T

    def build(self, g: np.ndarray, h: np.ndarray) -> Node:
        member = np.ones(self.X.shape[0], dtype=bool)
        return self._grow(member, g, h, depth=0)

    def _leaf_value(self, G, H):
        return float(-G / (H + self.params.reg_lambda))

    def _grow(self, member, g, h, depth) -> Node:
        G, H = g[member].sum(), h[member].sum()
        node = Node(value=self._leaf_value(G, H))
        n = int(member.sum())
        if depth >= self.params.max_depth or n < 2 * self.params.min_leaf:
            return node
        split = self._best_split(member, g, h, G, H, n)
        if split is None:
            return node
        feature, threshold = split
        go_left = member & (self.X[:, feature] <= threshold)
        go_right = member & ~go_left
        node.feature = feature
        node.threshold = threshold
        node.left = self._grow(go_left, g, h, depth + 1)
        node.right = self._grow(go_right, g, h, depth + 1)
        return node

    def _best_split(self, member, g, h, G, H, n):
        lam = self.params.reg_lambda
        min_leaf = self.params.min_leaf
        parent = G * G / (H + lam)
        best_gain = 1e-12
        best = None
        for f in range(self.X.shape[1]):
            idx = self.order[f][member[self.order[f]]]
            xs = self.X[idx, f]
            GL = np.cumsum(g[idx])[:-1]
            HL = np.cumsum(h[idx])[:-1]
            left_n = np.arange(1, n)
            valid = (xs[:-1] < xs[1:]) & (left_n >= min_leaf) & (n - left_n >= min_leaf)
            if not valid.any():
                continue
            GR, HR = G - GL, H - HL
            gain = GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent
            gain = np.where(valid, gain, -np.inf)
            i = int(np.argmax(gain))
            # strict > keeps the lowest feature index on ties; argmax keeps the lowest threshold
            if gain[i] > best_gain:
                best_gain = gain[i]
                best = (f, float(xs[i]))
        return best


def _check_features(X: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature(f"{what} contains NaN or infinite feature values")


def train_gbt(
    X_train,
    y_train: Sequence,
    X_val=None,
    y_val: Sequence | None = None,
    params: GBTParams | None = None,
    feature_names: Sequence[str] | None = None,
) -> GBTModel:
    """Multiclass softmax boosting with Newton leaf values.

    Each round fits one tree per class to that class's softmax gradient. A
    round whose step would raise the training log-loss is shrunk by halving
    until it does not. Training stops once validation log-loss has not
    improved for ``early_stopping_rounds`` rounds and is truncated to the
    best round.
    """
    params = params or GBTParams()
    X = _as_matrix(X_train)
    y = list(y_train)
    if X.shape[0] != len(y):
        raise LengthMismatch("feature rows and labels differ in length")
    _check_features(X, "training set")
    classes = sorted(set(y))
    if len(classes) < 2:
        raise SingleClassTrain("training labels contain a single class")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise DimensionMismatch("feature_names length does not match the feature matrix")
    lookup = {c: i for i, c in enumerate(classes)}
    y_idx = np.array([lookup[v] for v in y])
    K = len(classes)
    onehot = np.eye(K)[y_idx]

    has_val = X_val is not None and y_val is not None and len(y_val) > 0
    if has_val:
        Xv = _as_matrix(X_val)
        if Xv.shape[1] != X.shape[1]:
            raise DimensionMismatch("validation features differ in width from training features")
        _check_features(Xv, "validation set")
        unknown = set(y_val) - set(classes)
        if unknown:
            raise DataError(f"validation labels {sorted(unknown)} never appear in training")
        yv_idx = np.array([lookup[v] for v in y_val])
        Fv = np.zeros((Xv.shape[0], K))

    builder = _TreeBuilder(X, params)
    F = np.zeros((X.shape[0], K))
    trees = [[] for _ in range(K)]
    train_loss = [log_loss(F, y_idx)]
    val_loss = [log_loss(Fv, yv_idx)] if has_val else []
    best_round, best_val, stale = 0, val_loss[0] if has_val else None, 0

    for rnd in range(params.n_rounds):
        P = softmax(F)
        round_trees = []
        step = np.zeros_like(F)
        for k in range(K):
            g = P[:, k] - onehot[:, k]
            h = np.maximum(P[:, k] * (1.0 - P[:, k]), 1e-16)
            tree = builder.build(g, h)
            round_trees.append(tree)
            step[:, k] = tree.predict(X)
        scale = params.learning_rate
        for _ in range(30):
            if log_loss(F + scale * step, y_idx) <= train_loss[-1]:
                break
            scale *= 0.5
        else:
            scale = 0.0
        for k, tree in enumerate(round_trees):
            _scale_leaves(tree, scale)
            trees[k].append(tree)
        F = F + scale * step
        train_loss.append(log_loss(F, y_idx))

        if has_val:
            for k, tree in enumerate(round_trees):
                Fv[:, k] += tree.predict(Xv)
            val_loss.append(log_loss(Fv, yv_idx))
            if val_loss[-1] < best_val - 1e-12:
                best_val, best_round, stale = val_loss[-1], rnd + 1, 0
            else:
                stale += 1
                if stale >= params.early_stopping_rounds:
                    log.info("early stop at round %d, best round %d", rnd + 1, best_round)
                    break
        else:
            best_round = rnd + 1

    trees = [per_class[:best_round] for per_class in trees]
    return GBTModel(
        trees=trees,
        classes=classes,
        feature_names=names,
        learning_rate=params.learning_rate,
        n_rounds=best_round,
        train_loss=train_loss[: best_round + 1],
        val_loss=val_loss[: best_round + 1],
    )


def _scale_leaves(node: Node, factor: float) -> None:
    if node.is_leaf:
        node.value *= factor
        return
    node.value *= factor
    _scale_leaves(node.left, factor)
    _scale_leaves(node.right, factor)


def predict(model: GBTModel, row) -> tuple:
    """Label and class-probability vector for one feature row."""
    x = np.asarray(row, dtype=np.float64).reshape(-1)
    if x.size != len(model.feature_names):
        raise DimensionMismatch(f"expected {len(model.feature_names)} features, got {x.size}")
    proba = model.predict_proba(x[None, :])[0]
    return model.classes[int(np.argmax(proba))], proba


def feature_importance(model: GBTModel) -> dict:
    """Number of splits on each feature across the whole ensemble."""
    counts = {name: 0 for name in model.feature_names}
    for per_class in model.trees:
        for tree in per_class:
            for node in tree.internal_nodes():
                counts[model.feature_names[node.feature]] += 1
    return counts


def internal_node_count(model: GBTModel) -> int:
    return sum(1 for per_class in model.trees for t in per_class for _ in t.internal_nodes())


@dataclass(frozen=True)
class MajorityClassifier:
    label: object

    def predict_labels(self, X) -> list:
        return [self.label] * len(X)


def majority_baseline(train_labels: Sequence) -> MajorityClassifier:
    if len(train_labels) == 0:
        raise EmptyTrain("majority baseline needs at least one training label")
    counts = Counter(train_labels)
    top = max(counts.values())
    return MajorityClassifier(min(c for c, n in counts.items() if n == top))


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: truth, columns: prediction
    labels: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"labels": [_label_str(l) for l in self.labels], "counts": self.counts.tolist()}


def _label_str(label) -> str:
    return getattr(label, "text", str(label))


@dataclass(frozen=True)
class EvalReport:
    accuracy: float | None
    weighted_f1: float | None
    confusion: ConfusionMatrix
    refusal_rate: float
    n_samples: int
    n_classified: int
    support: dict
    per_class_f1: dict

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "refusal_rate": self.refusal_rate,
            "n_samples": self.n_samples,
            "n_classified": self.n_classified,
            "support": {_label_str(k): v for k, v in self.support.items()},
            "per_class_f1": {_label_str(k): v for k, v in self.per_class_f1.items()},
            "confusion": self.confusion.to_dict(),
        }


REFUSAL = None


def evaluate(predictions: Sequence, truth: Sequence, labels: Sequence | None = None) -> EvalReport:
    """Accuracy, support-weighted F1 and confusion matrix.

    A prediction of ``None`` is a refusal: it is left out of the confusion
    matrix, accuracy and F1, and counted in ``refusal_rate`` over all attempts.
    """
    if len(predictions) != len(truth):
        raise LengthMismatch(f"{len(predictions)} predictions for {len(truth)} truths")
    pairs = [(t, p) for t, p in zip(truth, predictions) if p is not REFUSAL]
    n_all = len(truth)
    refusal_rate = (n_all - len(pairs)) / n_all if n_all else 0.0
    if labels is None:
        labels = sorted({t for t, _ in pairs} | {p for _, p in pairs}, key=_sort_key)
    labels = tuple(labels)
    index = {l: i for i, l in enumerate(labels)}
    missing = {x for pair in pairs for x in pair} - set(index)
    if missing:
        raise DataError(f"labels {sorted(map(str, missing))} are not in the label list")
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in pairs:
        counts[index[t], index[p]] += 1
    n = len(pairs)
    support = {l: int(counts[i].sum()) for i, l in enumerate(labels)}
    # rational arithmetic, rounded once at the end, so the result does not depend on summation order
    f1 = {}
    for i, l in enumerate(labels):
        tp = int(counts[i, i])
        pred_pos = int(counts[:, i].sum())
        true_pos = int(counts[i].sum())
        if pred_pos == 0 or true_pos == 0 or tp == 0:
            f1[l] = Fraction(0)
            continue
        prec, rec = Fraction(tp, pred_pos), Fraction(tp, true_pos)
        f1[l] = 2 * prec * rec / (prec + rec)
    if n:
        accuracy = float(Fraction(int(np.trace(counts)), n))
        weighted = float(sum(Fraction(support[l], n) * f1[l] for l in labels))
    else:
        accuracy = weighted = None
    f1 = {l: float(v) for l, v in f1.items()}
    return EvalReport(
        accuracy=accuracy,
        weighted_f1=weighted,
        confusion=ConfusionMatrix(counts, labels),
        refusal_rate=refusal_rate,
        n_samples=n_all,
        n_classified=n,
        support=support,
        per_class_f1=f1,
    )


def _sort_key(label):
    return (0, int(label), "") if isinstance(label, (int, np.integer)) else (1, 0, str(label))


def format_results_table(rows: Sequence[tuple]) -> str:
    """Aligned ``Models | acc | F1 | note`` table from ``(name, EvalReport, note)`` rows.

    Accuracy is printed in percent, F1 as a fraction; a refusal rate is added
    to the note when non-zero.
    """
    body = []
    for name, report, note in rows:
        acc = "-" if report.accuracy is None else f"{100 * report.accuracy:.1f}"
        f1 = "-" if report.weighted_f1 is None else f"{report.weighted_f1:.2f}"
        notes = [note] if note else []
        if report.refusal_rate > 0:
            notes.append(f'{100 * report.refusal_rate:.3g}% "cannot assist"')
        body.append((name, acc, f1, "; ".join(notes)))
    head = ("Models", "acc", "F1", "note")
    widths = [max(len(r[i]) for r in [head] + body) for i in range(4)]
    lines = []
    for r in [head] + body:
        lines.append(" | ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
