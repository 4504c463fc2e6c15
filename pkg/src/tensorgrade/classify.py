"""Linear soft-margin SVM, stratified repeated CV, and percent metrics.

The SVM solves the standard hinge-loss primal through its dual with
maximal-violating-pair coordinate ascent (two dual variables per step, so
the equality constraint is preserved). The bias is recovered by exact
one-dimensional minimization of the primal, and the duality gap is checked
at termination.

Evaluation draws class-stratified random train/test splits from seeded
per-iteration generators, z-scores features with train statistics only,
and reports mean, standard deviation and standard error of ACC/SEN/SPE
over the iterations.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_X_y

from ._parallel import map_ordered


class ClassifyError(ValueError):
    """Invalid classification inputs."""


class SingleClassError(ClassifyError):
    """Training data holds only one class."""


class ConvergenceError(ClassifyError):
    """The solver stopped without certifying optimality."""


@dataclass
class SvmModel:
    """Fitted linear SVM: decision function is ``w . x + b``."""

    w: np.ndarray
    b: float
    alpha: np.ndarray
    C: float
    primal_objective: float
    dual_objective: float
    gap: float
    n_iter: int


def svm_train(X, y, C: float = 1.0, tol: float = 1e-12, max_iter: int = 1_000_000) -> SvmModel:
    """Train a linear soft-margin SVM by dual coordinate ascent.

    Picks the maximal violating pair each step and moves both variables
    along the equality-constraint direction with box clipping, stopping
    when the violation falls below ``tol``. Raises
    :class:`ConvergenceError` if the final duality gap exceeds
    ``1e-6 * (1 + |primal|)``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ClassifyError(f"bad shapes: X {X.shape}, y {y.shape}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ClassifyError("non-finite training data")
    if not np.isin(y, (-1.0, 1.0)).all():
        raise ClassifyError("labels must be -1 or +1")
    if not ((y > 0).any() and (y < 0).any()):
        raise SingleClassError("training data holds a single class")
    if C <= 0:
        raise ClassifyError(f"C must be positive, got {C}")
    n = X.shape[0]
    K = X @ X.T
    Q = (y[:, None] * y[None, :]) * K
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - sum(a)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        opt = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
        cand_up = np.where(up, opt, -np.inf)
        cand_low = np.where(low, opt, np.inf)
        i = int(np.argmax(cand_up))
        j = int(np.argmin(cand_low))
        violation = cand_up[i] - cand_low[j]
        if violation <= tol:
            break
        quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
        step = violation / max(quad, 1e-300)
        hi_i = C - alpha[i] if y[i] > 0 else alpha[i]
        hi_j = alpha[j] if y[j] > 0 else C - alpha[j]
        step = min(step, hi_i, hi_j)
        new_i = min(max(alpha[i] + y[i] * step, 0.0), C)
        new_j = min(max(alpha[j] - y[j] * step, 0.0), C)
        delta_i = new_i - alpha[i]
        delta_j = new_j - alpha[j]
        alpha[i] = new_i
        alpha[j] = new_j
        grad += Q[:, i] * delta_i + Q[:, j] * delta_j

    w = X.T @ (alpha * y)
    scores = X @ w
    b = _optimal_bias(scores, y, C)
    margins = 1.0 - y * (scores + b)
    primal = float(0.5 * (w @ w) + C * np.maximum(margins, 0.0).sum())
    dual = float(alpha.sum() - 0.5 * (alpha @ (Q @ alpha)))
    gap = primal - dual
    if gap > 1e-6 * (1.0 + abs(primal)):
        raise ConvergenceError(
            f"duality gap {gap:.3e} exceeds tolerance after {n_iter} iterations"
        )
    return SvmModel(w=w, b=float(b), alpha=alpha, C=float(C),
                    primal_objective=primal, dual_objective=dual,
                    gap=float(gap), n_iter=n_iter)


def _optimal_bias(scores: np.ndarray, y: np.ndarray, C: float) -> float:
    """Exact minimizer of the hinge term over the bias, given ``w``.

    The hinge sum is convex piecewise linear in ``b`` with breakpoints at
    ``y_i - w . x_i``; the midpoint of the minimizing breakpoints is
    returned for determinism.
    """
    breaks = y - scores
    # hinge_i(b) = max(0, y_i * (breaks_i - b))
    totals = np.maximum(y[None, :] * (breaks[None, :] - breaks[:, None]), 0.0).sum(axis=1)
    best = totals == totals.min()
    lo = breaks[best].min()
    hi = breaks[best].max()
    return float((lo + hi) / 2.0)


def svm_predict(model: SvmModel, x):
    """Classify one feature vector or a batch.

    Returns ``(label, score)`` for a single vector, or arrays for a 2-D
    batch. A score of exactly zero maps to +1. Batch rows are evaluated
    one at a time so batch and single predictions agree bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    d = model.w.shape[0]
    if x.ndim == 1:
        if x.shape[0] != d:
            raise ClassifyError(f"feature dimension {x.shape[0]} != model dimension {d}")
        score = float(model.w @ x + model.b)
        return (1 if score >= 0.0 else -1), score
    if x.ndim == 2:
        if x.shape[1] != d:
            raise ClassifyError(f"feature dimension {x.shape[1]} != model dimension {d}")
        pairs = [svm_predict(model, row) for row in x]
        labels = np.array([p[0] for p in pairs], dtype=np.int64)
        scores = np.array([p[1] for p in pairs], dtype=np.float64)
        return labels, scores
    raise ClassifyError(f"expected a vector or matrix, got ndim={x.ndim}")


@dataclass(frozen=True)
class MetricValues:
    """ACC/SEN/SPE in percent; a metric is None when its denominator is 0."""

    acc: float
    sen: Optional[float]
    spe: Optional[float]


def metrics(tp: int, tn: int, fp: int, fn: int) -> MetricValues:
    """Accuracy, sensitivity and specificity in percent from counts."""
    counts = (tp, tn, fp, fn)
    if any(c < 0 for c in counts):
        raise ClassifyError(f"negative confusion count in {counts}")
    total = tp + tn + fp + fn
    if total == 0:
        raise ClassifyError("empty confusion matrix")
    acc = 100.0 * (tp + tn) / total
    sen = 100.0 * tp / (tp + fn) if (tp + fn) > 0 else None
    spe = 100.0 * tn / (tn + fp) if (tn + fp) > 0 else None
    return MetricValues(acc=acc, sen=sen, spe=spe)


@dataclass(frozen=True)
class FeatureRow:
    subject_id: str
    klass: int  # +1 positive (pre-manifest), -1 negative (control)
    features: dict


class FeatureTable:
    """Per-subject features and true class for the final classification."""

    def __init__(self, rows: Sequence[FeatureRow], feature_names: Sequence[str]):
        rows = list(rows)
        names = list(feature_names)
        if not rows:
            raise ClassifyError("feature table is empty")
        seen = set()
        for r in rows:
            if r.subject_id in seen:
                raise ClassifyError(f"duplicate subject_id {r.subject_id!r}")
            seen.add(r.subject_id)
            if r.klass not in (-1, 1):
                raise ClassifyError(f"class for {r.subject_id} must be -1 or +1, got {r.klass}")
            for name in names:
                if name not in r.features:
                    raise ClassifyError(f"subject {r.subject_id} missing feature {name!r}")
                if not np.isfinite(r.features[name]):
                    raise ClassifyError(f"subject {r.subject_id} has non-finite {name!r}")
        self.rows = rows
        self.feature_names = names

    def matrix(self, feature_names: Optional[Sequence[str]] = None):
        names = list(feature_names) if feature_names is not None else self.feature_names
        for name in names:
            if name not in self.feature_names:
                raise ClassifyError(f"unknown feature {name!r}; table has {self.feature_names}")
        X = np.array([[r.features[n] for n in names] for r in self.rows], dtype=np.float64)
        y = np.array([r.klass for r in self.rows], dtype=np.float64)
        return X, y

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "class"] + self.feature_names)
            for r in self.rows:
                writer.writerow(
                    [r.subject_id, r.klass]
                    + [repr(float(r.features[n])) for n in self.feature_names]
                )

    @classmethod
    def from_csv(cls, path) -> "FeatureTable":
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[:2] != ["subject_id", "class"]:
                raise ClassifyError(
                    f"{path}: header must start with subject_id,class, got {header}"
                )
            names = header[2:]
            rows = []
            for line in reader:
                if not line:
                    continue
                feats = {n: float(v) for n, v in zip(names, line[2:])}
                rows.append(FeatureRow(line[0], int(line[1]), feats))
        return cls(rows, names)


@dataclass
class IterationResult:
    iteration: int
    tp: int
    tn: int
    fp: int
    fn: int
    values: MetricValues


@dataclass
class EvaluationReport:
    """Per-iteration confusion counts plus aggregate statistics."""

    config: dict
    iterations: list
    summary: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        doc = {
            "config": self.config,
            "summary": self.summary,
            "iterations": [
                {
                    "iteration": r.iteration,
                    "tp": r.tp, "tn": r.tn, "fp": r.fp, "fn": r.fn,
                    "acc": r.values.acc, "sen": r.values.sen, "spe": r.values.spe,
                }
                for r in self.iterations
            ],
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "TP", "TN", "FP", "FN", "ACC", "SEN", "SPE"])
            for r in self.iterations:
                writer.writerow([
                    r.iteration, r.tp, r.tn, r.fp, r.fn,
                    repr(r.values.acc),
                    "" if r.values.sen is None else repr(r.values.sen),
                    "" if r.values.spe is None else repr(r.values.spe),
                ])


def _summarize(values: list) -> dict:
    present = np.array([v for v in values if v is not None], dtype=np.float64)
    if len(present) == 0:
        return {"mean": None, "sd": None, "sem": None, "n": 0}
    mean = float(present.mean())
    sd = float(present.std(ddof=1)) if len(present) > 1 else 0.0
    sem = sd / float(np.sqrt(len(present)))
    return {"mean": mean, "sd": sd, "sem": sem, "n": int(len(present))}


def stratified_cv(
    table: FeatureTable,
    feature_names: Optional[Sequence[str]] = None,
    n_iter: int = 100,
    test_fraction: float = 0.2,
    seed: int = 0,
    C: float = 1.0,
    threads: int = 1,
) -> EvaluationReport:
    """Repeated stratified random-split evaluation of a linear SVM.

    Each iteration draws its own generator from ``(seed, iteration)``, so
    the report is a pure function of the inputs at any thread count.
    Features are z-scored with statistics of the train split only.
    """
    names = list(feature_names) if feature_names is not None else table.feature_names
    if not 0.0 < test_fraction < 1.0:
        raise ClassifyError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if n_iter < 1:
        raise ClassifyError(f"n_iter must be >= 1, got {n_iter}")
    if seed < 0:
        raise ClassifyError(f"seed must be >= 0, got {seed}")
    X, y = table.matrix(names)
    pos = np.nonzero(y > 0)[0]
    neg = np.nonzero(y < 0)[0]
    if len(pos) < 2 or len(neg) < 2:
        raise ClassifyError(
            f"need >= 2 subjects per class to stratify, got {len(pos)} positive "
            f"and {len(neg)} negative"
        )
    n_test_pos = min(max(int(round(test_fraction * len(pos))), 1), len(pos) - 1)
    n_test_neg = min(max(int(round(test_fraction * len(neg))), 1), len(neg) - 1)

    def one(it: int) -> IterationResult:
        rng = np.random.default_rng(np.random.SeedSequence([seed, it]))
        test_idx = np.concatenate([
            pos[rng.permutation(len(pos))[:n_test_pos]],
            neg[rng.permutation(len(neg))[:n_test_neg]],
        ])
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[test_idx] = False
        X_train, y_train = X[train_mask], y[train_mask]
        X_test, y_test = X[test_idx], y[test_idx]
        mu = X_train.mean(axis=0)
        sd = X_train.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        model = svm_train((X_train - mu) / sd, y_train, C=C)
        labels, _ = svm_predict(model, (X_test - mu) / sd)
        tp = int(np.sum((labels == 1) & (y_test > 0)))
        tn = int(np.sum((labels == -1) & (y_test < 0)))
        fp = int(np.sum((labels == 1) & (y_test < 0)))
        fn = int(np.sum((labels == -1) & (y_test > 0)))
        return IterationResult(it, tp, tn, fp, fn, metrics(tp, tn, fp, fn))

    rows = map_ordered(one, range(n_iter), threads)
    summary = {
        "acc": _summarize([r.values.acc for r in rows]),
        "sen": _summarize([r.values.sen for r in rows]),
        "spe": _summarize([r.values.spe for r in rows]),
    }
    config = {
        "features": names,
        "n_iter": n_iter,
        "test_fraction": test_fraction,
        "seed": seed,
        "C": C,
        "n_subjects": len(y),
        "n_positive": int(len(pos)),
        "n_negative": int(len(neg)),
    }
    return EvaluationReport(config=config, iterations=rows, summary=summary)


class LinearSVM(BaseEstimator, ClassifierMixin):
    """Scikit-learn style wrapper around :func:`svm_train`.

    After ``fit``: ``coef_`` holds the weight vector, ``intercept_`` the
    bias, ``dual_coef_`` the dual variables, and ``gap_`` the certified
    duality gap.
    """

    def __init__(self, C: float = 1.0, tol: float = 1e-12, max_iter: int = 1_000_000):
        self.C = C
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        model = svm_train(X, y, C=self.C, tol=self.tol, max_iter=self.max_iter)
        self.model_ = model
        self.coef_ = model.w
        self.intercept_ = model.b
        self.dual_coef_ = model.alpha
        self.gap_ = model.gap
        self.classes_ = np.array([-1.0, 1.0])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        X = check_array(X, dtype=np.float64)
        _, scores = svm_predict(self.model_, X)
        return scores

    def predict(self, X):
        X = check_array(X, dtype=np.float64)
        labels, _ = svm_predict(self.model_, X)
        return labels.astype(np.float64)
