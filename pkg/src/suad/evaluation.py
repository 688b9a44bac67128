"""Scoring, PR-curve calibration, classification and the metric set.

A trained model turns each volume into two anomaly scores: the L1 and L2
reconstruction errors (plain sums over voxels, N = 1). Thresholds are
calibrated on validation records by scanning the precision-recall curve
and keeping the cut with the highest F1; classification then flags a
volume whose score strictly exceeds the threshold (both thresholds in
conjunction mode). The positive class is always "anomaly".

The PR curve holds one candidate threshold per distinct score value.
Each candidate is placed strictly below its distinct value (midway into
the gap under it), so "score > threshold" flags exactly the records with
score >= that value; the lowest candidate therefore flags everything,
which gives the curve its recall-1 endpoint. AUPRC uses the step-wise
average-precision convention (no interpolation between points).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .autodiff import Tensor, no_grad
from .errors import ConfigError, DataError, DimensionError, EvaluationError
from .preprocess import Volume

LABELS = ("normal", "anomaly")
ANOMALY_CATEGORIES = ("none", "thickening", "polyp", "cyst")
MODES = ("l1-only", "l2-only", "conjunction")
SCORE_FIELDS = ("l1", "l2")


@dataclass
class ScoreRecord:
    """Per-volume scores plus ground truth, the unit of calibration."""

    volume_id: str
    score_l1: float
    score_l2: float
    label: str
    anomaly_type: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r} for {self.volume_id!r}")
        if self.anomaly_type not in ANOMALY_CATEGORIES:
            raise DataError(f"unknown anomaly type {self.anomaly_type!r} for {self.volume_id!r}")
        if self.label == "normal" and self.anomaly_type != "none":
            raise DataError(
                f"{self.volume_id!r}: normal records must carry anomaly_type 'none', "
                f"got {self.anomaly_type!r}"
            )
        if self.score_l1 < 0 or self.score_l2 < 0:
            raise DataError(f"{self.volume_id!r}: scores must be non-negative")

    def score(self, field: str) -> float:
        if field == "l1":
            return self.score_l1
        if field == "l2":
            return self.score_l2
        raise DataError(f"unknown score field {field!r}")


@dataclass(frozen=True)
class Thresholds:
    """The calibrated decision rule: two cut values plus the mode."""

    t_l1: float
    t_l2: float
    mode: str = "conjunction"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown threshold mode {self.mode!r}; expected one of {MODES}")
        if not (np.isfinite(self.t_l1) and np.isfinite(self.t_l2)):
            raise ConfigError("thresholds must be finite")
        if self.t_l1 < 0 or self.t_l2 < 0:
            raise ConfigError("thresholds must be >= 0")


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(frozen=True)
class PRCurve:
    """PR points ordered by strictly increasing threshold.

    A point's precision/recall describe flagging records with
    ``score > threshold``; thresholds sit in the gaps below the distinct
    score values, so recall is non-increasing along the curve.
    """

    score_field: str
    points: tuple[PRPoint, ...]


def score_volume(params, x: Volume | np.ndarray) -> tuple[float, float]:
    """L1 and L2 reconstruction errors of one preprocessed volume.

    Sums over voxels (batch of one). The VAE is scored on its
    deterministic mean path (eps = 0) so repeated scoring is identical.
    """
    data = x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float32)
    if data.ndim != 3:
        raise ConfigError(f"score_volume expects a single 3-D volume, got shape {data.shape}")
    xt = Tensor(data[None, None])
    with no_grad():
        if params.kind == "vae":
            eps = Tensor(np.zeros((1, params.arch.latent_dim), dtype=np.float32))
            x_hat, _, _ = models.vae_forward(params, xt, eps)
        else:
            x_hat, _ = models.cae_forward(params, xt)
    resid = np.abs(data.astype(np.float64) - x_hat.data[0, 0].astype(np.float64))
    return float(resid.sum()), float((resid**2).sum())


def _split_scores(records, score_field: str) -> tuple[np.ndarray, np.ndarray]:
    if score_field not in SCORE_FIELDS:
        raise DataError(f"unknown score field {score_field!r}")
    scores = np.array([r.score(score_field) for r in records], dtype=np.float64)
    positives = np.array([r.label == "anomaly" for r in records], dtype=bool)
    if not positives.any() or positives.all():
        raise EvaluationError(
            "PR analysis needs at least one normal and one anomalous record"
        )
    return scores, positives


def _candidate_threshold(below: float | None, value: float) -> float:
    """A usable strict-> threshold in the gap below a distinct score."""
    if below is not None:
        return (below + value) / 2.0
    return value / 2.0 if value > 0 else value - 1.0


def pr_curve(records, score_field: str) -> PRCurve:
    """Precision/recall at one candidate threshold per distinct score.

    Point i flags the records whose score is at least the i-th distinct
    value; its stored threshold lies strictly below that value so the
    strict comparison of :func:`classify` reproduces the same set.
    """
    scores, positives = _split_scores(records, score_field)
    total_pos = int(positives.sum())
    distinct = np.unique(scores)
    points = []
    prev = None
    for value in distinct:
        flagged = scores >= value
        tp = int((flagged & positives).sum())
        fp = int((flagged & ~positives).sum())
        precision = tp / (tp + fp)
        recall = tp / total_pos
        points.append(PRPoint(_candidate_threshold(prev, float(value)), precision, recall))
        prev = float(value)
    return PRCurve(score_field=score_field, points=tuple(points))


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def select_threshold_max_f1(curve: PRCurve) -> float:
    """The curve threshold with the highest F1; ties go to the higher
    threshold (fewer false positives). Clamped to >= 0 since
    reconstruction scores cannot be negative."""
    if not curve.points:
        raise EvaluationError("cannot select a threshold from an empty PR curve")
    best = None
    best_f1 = -1.0
    for p in curve.points:
        f1 = f1_score(p.precision, p.recall)
        if f1 >= best_f1:
            best_f1 = f1
            best = p.threshold
    return max(best, 0.0)


def classify(record: ScoreRecord, thresholds: Thresholds) -> str:
    """Apply the decision rule; comparisons are strict, so a score equal
    to its threshold stays normal."""
    over_l1 = record.score_l1 > thresholds.t_l1
    over_l2 = record.score_l2 > thresholds.t_l2
    if thresholds.mode == "l1-only":
        anomalous = over_l1
    elif thresholds.mode == "l2-only":
        anomalous = over_l2
    else:
        anomalous = over_l1 and over_l2
    return "anomaly" if anomalous else "normal"


def auprc(records, score_field: str) -> float:
    """Average precision over descending-score cut points.

    ``AP = sum_n (R_n - R_{n-1}) * P_n`` with cut points at the distinct
    score values from highest to lowest; always in [0, 1] and invariant
    under strictly increasing transforms of the scores.
    """
    scores, positives = _split_scores(records, score_field)
    total_pos = int(positives.sum())
    distinct = np.unique(scores)[::-1]
    ap = 0.0
    prev_recall = 0.0
    for value in distinct:
        flagged = scores >= value
        tp = int((flagged & positives).sum())
        fp = int((flagged & ~positives).sum())
        precision = tp / (tp + fp)
        recall = tp / total_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


@dataclass(frozen=True)
class ModeMetrics:
    mode: str
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class CategoryAccuracy:
    category: str
    correct: int
    total: int

    @property
    def fraction(self) -> float | None:
        return self.correct / self.total if self.total else None


@dataclass(frozen=True)
class MetricsReport:
    """Everything the evaluation stage reports for one model."""

    thresholds: Thresholds
    by_mode: tuple[ModeMetrics, ...]
    auprc_l1: float
    auprc_l2: float
    per_anomaly: tuple[CategoryAccuracy, ...]
    n_normal: int
    n_anomaly: int


def _confusion(records, thresholds: Thresholds, mode: str):
    tp = fp = fn = 0
    for r in records:
        predicted = classify(r, Thresholds(thresholds.t_l1, thresholds.t_l2, mode))
        if predicted == "anomaly" and r.label == "anomaly":
            tp += 1
        elif predicted == "anomaly":
            fp += 1
        elif r.label == "anomaly":
            fn += 1
    return tp, fp, fn


def per_anomaly_accuracy(records, predictions) -> tuple[CategoryAccuracy, ...]:
    """Fraction of correct decisions per category.

    Normal records count as correct when predicted normal; records of
    each anomaly type count as correct when predicted anomalous.
    """
    if len(records) != len(predictions):
        raise DimensionError(
            f"per_anomaly_accuracy: {len(records)} records vs {len(predictions)} predictions"
        )
    counts = {c: [0, 0] for c in ANOMALY_CATEGORIES}
    for r, predicted in zip(records, predictions):
        if predicted not in LABELS:
            raise DataError(f"unknown prediction {predicted!r}")
        category = "none" if r.label == "normal" else r.anomaly_type
        if category not in counts:
            raise DataError(f"unknown category {category!r}")
        want = r.label
        counts[category][1] += 1
        if predicted == want:
            counts[category][0] += 1
    order = ("none", "thickening", "polyp", "cyst")
    return tuple(CategoryAccuracy(c, counts[c][0], counts[c][1]) for c in order)


def metrics_report(records, thresholds: Thresholds) -> MetricsReport:
    """Precision/recall/F1 for every decision rule plus AUPRC per score
    field and the per-category accuracy of the configured rule."""
    by_mode = []
    for mode in MODES:
        tp, fp, fn = _confusion(records, thresholds, mode)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        by_mode.append(ModeMetrics(mode, precision, recall, f1_score(precision, recall)))
    predictions = [classify(r, thresholds) for r in records]
    return MetricsReport(
        thresholds=thresholds,
        by_mode=tuple(by_mode),
        auprc_l1=auprc(records, "l1"),
        auprc_l2=auprc(records, "l2"),
        per_anomaly=per_anomaly_accuracy(records, predictions),
        n_normal=sum(1 for r in records if r.label == "normal"),
        n_anomaly=sum(1 for r in records if r.label == "anomaly"),
    )
