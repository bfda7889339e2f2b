"""Metrics, inter-annotator agreement and non-neural baselines.

Scoring with multi-label gold: a prediction inside the gold set is a true
positive for that class, otherwise a false positive; every gold label left
unmatched is a false negative.  Precision, recall and F use ``0/0 -> 0``.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

import numpy as np

from . import numcore as nc
from .errors import AlignmentError, FeatureError, UndefinedKappaError


@dataclass
class ConfusionCounts:
    classes: tuple
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)

    def __post_init__(self):
        for table in (self.tp, self.fp, self.fn):
            for c in self.classes:
                table.setdefault(c, 0)


def _as_set(g) -> frozenset:
    if isinstance(g, (set, frozenset, list, tuple)):
        return frozenset(g)
    return frozenset((g,))


def score(predictions: Sequence, gold: Sequence, classes: Sequence | None = None) -> ConfusionCounts:
    if len(predictions) != len(gold):
        raise AlignmentError(f"{len(predictions)} predictions for {len(gold)} gold entries")
    gold_sets = [_as_set(g) for g in gold]
    if classes is None:
        seen = set(predictions).union(*gold_sets) if gold_sets else set(predictions)
        classes = sorted(seen, key=lambda c: (str(type(c)), c))
    counts = ConfusionCounts(tuple(classes))
    for c in list(predictions) + [c for g in gold_sets for c in g]:
        if c not in counts.tp:
            # labels outside ``classes`` still get counted, but not averaged over
            counts.tp[c] = counts.fp[c] = counts.fn[c] = 0
    for pred, g in zip(predictions, gold_sets):
        if pred in g:
            counts.tp[pred] += 1
        else:
            counts.fp[pred] += 1
        for c in g:
            if c != pred:
                counts.fn[c] += 1
    return counts


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = _safe_div(tp, tp + fp)
    r = _safe_div(tp, tp + fn)
    # same value as 2PR/(P+R), with a single rounding
    return p, r, _safe_div(2 * tp, 2 * tp + fp + fn)


@dataclass
class EvalReport:
    per_class: dict
    macro_p: float
    macro_r: float
    macro_f: float
    micro_p: float
    micro_r: float
    micro_f: float
    n_instances: int = 0
    n_gold_labels: int = 0
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    def table(self) -> str:
        lines = [f"{'class':>10} {'P':>6} {'R':>6} {'F':>6}"]
        for c, m in self.per_class.items():
            lines.append(f"{str(c):>10} {m['p']:6.3f} {m['r']:6.3f} {m['f']:6.3f}")
        lines.append(f"{'macro':>10} {self.macro_p:6.3f} {self.macro_r:6.3f} {self.macro_f:6.3f}")
        lines.append(f"{'micro':>10} {self.micro_p:6.3f} {self.micro_r:6.3f} {self.micro_f:6.3f}")
        return "\n".join(lines)


def prf(counts: ConfusionCounts, n_instances: int = 0, config: dict | None = None) -> EvalReport:
    """Per-class, macro (unweighted over ``counts.classes``) and micro P/R/F."""
    if not counts.classes:
        raise ValueError("prf needs at least one class")
    per_class = {}
    for c in counts.classes:
        p, r, f = _prf(counts.tp[c], counts.fp[c], counts.fn[c])
        per_class[c] = {"p": p, "r": r, "f": f, "tp": counts.tp[c], "fp": counts.fp[c], "fn": counts.fn[c]}
    k = len(counts.classes)
    tp, fp, fn = (sum(t.values()) for t in (counts.tp, counts.fp, counts.fn))
    mp, mr, mf = _prf(tp, fp, fn)
    return EvalReport(per_class,
                      math.fsum(m["p"] for m in per_class.values()) / k,
                      math.fsum(m["r"] for m in per_class.values()) / k,
                      math.fsum(m["f"] for m in per_class.values()) / k,
                      mp, mr, mf, n_instances, tp + fn, config or {})


def evaluate(predictions: Sequence, gold: Sequence, classes: Sequence | None = None,
             config: dict | None = None) -> EvalReport:
    return prf(score(predictions, gold, classes), len(predictions), config)


def cohen_kappa(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    if len(a) != len(b):
        raise AlignmentError(f"annotation lengths differ: {len(a)} vs {len(b)}")
    n = len(a)
    if n == 0:
        raise AlignmentError("no annotations to compare")
    p_o = sum(x == y for x, y in zip(a, b)) / n
    ca, cb = Counter(a), Counter(b)
    p_e = math.fsum(ca[c] * cb[c] for c in ca) / (n * n)
    if p_e == 1.0:
        raise UndefinedKappaError("chance agreement is 1; kappa is undefined")
    return (p_o - p_e) / (1.0 - p_e)


def agreement_macro_f(a: Sequence, b: Sequence) -> tuple[float, float]:
    """Macro-F of ``b`` against ``a`` as gold, then of ``a`` against ``b``."""
    labels = set()
    for x in list(a) + list(b):
        labels |= _as_set(x)
    classes = sorted(labels, key=lambda c: (str(type(c)), c))

    def single(x):
        s = _as_set(x)
        if len(s) != 1:
            raise AlignmentError("agreement predictions must be single labels")
        return next(iter(s))

    f_a = evaluate([single(x) for x in b], list(a), classes).macro_f
    f_b = evaluate([single(x) for x in a], list(b), classes).macro_f
    return f_a, f_b


def baseline_random(labels: Sequence, n: int, rng: np.random.Generator) -> list:
    idx = rng.integers(0, len(labels), size=n)
    return [labels[k] for k in idx]


def majority_label(train_gold: Sequence, labels: Sequence | None = None):
    """Most frequent training label; ties go to the earliest label in ``labels``."""
    counts = Counter(c for g in train_gold for c in _as_set(g))
    order = list(labels) if labels is not None else sorted(counts, key=lambda c: (str(type(c)), c))
    return max(order, key=lambda c: (counts.get(c, 0), -order.index(c)))


def baseline_majority(train_gold: Sequence, n_test: int, labels: Sequence | None = None) -> list:
    return [majority_label(train_gold, labels)] * n_test


class TfidfFeaturizer:
    """tf = raw count, idf = ln((1 + N) / (1 + df)) + 1, rows L2-normalized."""

    def fit(self, docs: Sequence[Sequence[str]]) -> TfidfFeaturizer:
        vocab = sorted({t for d in docs for t in d})
        if not vocab:
            raise FeatureError("empty vocabulary")
        self.vocab = {w: k for k, w in enumerate(vocab)}
        df = np.zeros(len(vocab))
        for d in docs:
            for t in set(d):
                df[self.vocab[t]] += 1
        self.idf = np.log((1.0 + len(docs)) / (1.0 + df)) + 1.0
        return self

    def transform(self, docs: Sequence[Sequence[str]]) -> np.ndarray:
        X = np.zeros((len(docs), len(self.vocab)))
        for r, d in enumerate(docs):
            for t in d:
                k = self.vocab.get(t)
                if k is not None:
                    X[r, k] += 1.0
        X *= self.idf
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)

    def fit_transform(self, docs: Sequence[Sequence[str]]) -> np.ndarray:
        return self.fit(docs).transform(docs)


def tfidf_features(docs: Sequence[Sequence[str]]) -> np.ndarray:
    return TfidfFeaturizer().fit_transform(docs)


@dataclass
class SoftmaxRegressionConfig:
    epochs: int = 200
    lr: float = 0.5
    weight_decay: float = 1e-7
    batch_size: int = 32
    seed: int = 1


def softmax_regression(train_X: np.ndarray, train_y: Sequence[int], test_X: np.ndarray,
                       n_classes: int | None = None,
                       config: SoftmaxRegressionConfig | None = None) -> np.ndarray:
    """Fit ``softmax(W x + b)`` by minibatch SGD; returns predicted class indices for ``test_X``."""
    config = config or SoftmaxRegressionConfig()
    y = np.asarray(train_y, dtype=np.int64)
    n_classes = n_classes or int(y.max()) + 1
    W = nc.Param("W", np.zeros((n_classes, train_X.shape[1])))
    b = nc.Param("b", np.zeros(n_classes))
    rng = nc.make_rng(config.seed)
    for _ in range(config.epochs):
        order = rng.permutation(len(y))
        for k in range(0, len(y), config.batch_size):
            idx = order[k:k + config.batch_size]
            tape = nc.Tape()
            loss, _ = nc.softmax_cross_entropy(nc.affine(tape.constant(train_X[idx]), tape.param(W), tape.param(b)), y[idx])
            nc.sgd_step([W, b], tape.backward(loss), config.lr, config.weight_decay)
    logits = test_X @ W.value.T + b.value
    return np.argmax(logits, axis=1)


def write_report_json(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_delta_csv(report: EvalReport, random_report: EvalReport, path) -> None:
    """Per-class F-score improvement over the random baseline."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "delta_f_over_random", "f", "random_f"])
        for c, m in report.per_class.items():
            rf = random_report.per_class[c]["f"]
            w.writerow([c, repr(m["f"] - rf), repr(m["f"]), repr(rf)])
