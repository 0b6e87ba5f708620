"""ROC analysis and threshold selection for the binary classifier.

Scores are probabilities of the pathological class; the decision rule is
``score >= threshold => pathological``. Candidate thresholds for the argmax
searches are the distinct observed scores plus the endpoints 0 and 1, and
argmax ties always resolve to the smallest threshold, which is the
sensitivity-favoring choice consistent with the clinical reading that a
missed lesion costs more than a false alarm.

Two operating-point objectives are provided: Youden's J = sensitivity +
specificity - 1, and a weighted variant (default weights 0.66 / 0.33) that
values sensitivity twice as much as specificity. The weighted objective is
implemented as w_tpr * sensitivity + w_spec * specificity; see
``clinical_threshold`` for the degenerate literal form that is also exposed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError

YOUDEN = "youden"
CLINICAL_WEIGHTED = "clinical_weighted"


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts of the four decision outcomes at one threshold."""

    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise InputError("confusion counts must be non-negative")

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    @property
    def sensitivity(self) -> float:
        return self.tp / self.positives if self.positives else float("nan")

    @property
    def specificity(self) -> float:
        return self.tn / self.negatives if self.negatives else float("nan")

    @property
    def accuracy(self) -> float:
        total = self.positives + self.negatives
        return (self.tp + self.tn) / total if total else float("nan")


@dataclass(frozen=True)
class ClinicalWeights:
    """Relative importance of sensitivity vs specificity in threshold choice."""

    w_tpr: float = 0.66
    w_spec: float = 0.33

    def __post_init__(self):
        if self.w_tpr < 0 or self.w_spec < 0 or (self.w_tpr == 0 and self.w_spec == 0):
            raise InputError(f"weights must be non-negative and not both zero: {self}")


@dataclass(frozen=True)
class ThresholdDecision:
    """A chosen operating point and the objective that selected it."""

    threshold: float
    sensitivity: float
    specificity: float
    objective_value: float
    objective: str

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "objective_value": self.objective_value,
            "objective": self.objective,
        }


@dataclass(frozen=True)
class RocCurve:
    """ROC points ordered from (0,0) to (1,1) with their thresholds.

    The leading point is the all-negative operating point, anchored at
    threshold +inf; subsequent points correspond to the distinct scores in
    descending order (rule: score >= threshold).
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def sensitivity_at_specificity(self, specificity: float) -> float:
        """Curve TPR at the given specificity, linearly interpolated in FPR."""
        return float(np.interp(1.0 - specificity, self.fpr, self.tpr))


@dataclass(frozen=True)
class OperatingPointComparison:
    """One benchmark operating point versus the model's ROC curve."""

    label: str
    benchmark_sensitivity: float
    benchmark_specificity: float
    curve_sensitivity: float
    dominates: bool


def _validate_labels_scores(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.ndim != 1 or scores.ndim != 1:
        raise InputError("labels and scores must be 1-D")
    if labels.shape[0] != scores.shape[0]:
        raise InputError(f"length mismatch: {labels.shape[0]} labels vs {scores.shape[0]} scores")
    if labels.shape[0] == 0:
        raise InputError("need at least one record")
    labels = labels.astype(np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise InputError("labels must be binary 0/1")
    if not np.isfinite(scores).all():
        raise InputError("scores must be finite")
    return labels, scores


def _require_both_classes(labels: np.ndarray) -> None:
    if labels.min() == labels.max():
        raise InputError("both classes must be present")


def confusion(labels, scores, threshold: float) -> ConfusionMatrix:
    """Counts at one threshold under the rule score >= threshold."""
    labels, scores = _validate_labels_scores(labels, scores)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def roc_curve(labels, scores) -> RocCurve:
    """One ROC point per distinct score, plus the (0,0) anchor; trapezoid AUC."""
    labels, scores = _validate_labels_scores(labels, scores)
    _require_both_classes(labels)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = labels[order] == 1
    # cumulative tp/fp just after each record, collapsed to the last index of
    # every run of tied scores
    distinct_last = np.nonzero(np.diff(sorted_scores, append=np.nan))[0]
    cum_tp = np.cumsum(sorted_pos)[distinct_last]
    cum_fp = np.cumsum(~sorted_pos)[distinct_last]
    n_pos = int(cum_tp[-1])
    n_neg = int(cum_fp[-1])
    thresholds = np.concatenate(([np.inf], sorted_scores[distinct_last]))
    tpr = np.concatenate(([0.0], cum_tp / n_pos))
    fpr = np.concatenate(([0.0], cum_fp / n_neg))
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def _candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    return np.unique(np.concatenate((scores, [0.0, 1.0])))


def _scan_thresholds(labels, scores, objective_fn, objective_name) -> ThresholdDecision:
    """Argmax of the objective over ascending candidates; first (smallest) wins ties."""
    labels, scores = _validate_labels_scores(labels, scores)
    _require_both_classes(labels)
    pos = labels == 1
    n_pos = int(np.sum(pos))
    n_neg = labels.shape[0] - n_pos
    best = None
    for c in _candidate_thresholds(scores):
        pred = scores >= c
        sens = float(np.sum(pred & pos)) / n_pos
        spec = float(np.sum(~pred & ~pos)) / n_neg
        value = objective_fn(sens, spec)
        if best is None or value > best[0]:
            best = (value, float(c), sens, spec)
    value, c, sens, spec = best
    return ThresholdDecision(
        threshold=c,
        sensitivity=sens,
        specificity=spec,
        objective_value=value,
        objective=objective_name,
    )


def youden_threshold(labels, scores) -> ThresholdDecision:
    """Threshold maximizing J = sensitivity + specificity - 1."""
    return _scan_thresholds(labels, scores, lambda sens, spec: sens + spec - 1.0, YOUDEN)


def clinical_threshold(
    labels,
    scores,
    weights: ClinicalWeights = ClinicalWeights(),
    literal_paper_objective: bool = False,
) -> ThresholdDecision:
    """Threshold maximizing the sensitivity-weighted objective.

    The default objective is w_tpr * sensitivity + w_spec * specificity.
    ``literal_paper_objective`` instead maximizes w_tpr * TPR + w_spec *
    (1 - FNR); since TPR = 1 - FNR that collapses to (w_tpr + w_spec) * TPR,
    which is monotone in sensitivity alone and therefore always selects
    threshold 0. It is exposed only so the degenerate form can be audited.
    """
    if literal_paper_objective:
        objective = lambda sens, spec: (weights.w_tpr + weights.w_spec) * sens
    else:
        objective = lambda sens, spec: weights.w_tpr * sens + weights.w_spec * spec
    return _scan_thresholds(labels, scores, objective, CLINICAL_WEIGHTED)


def compare_operating_points(
    curve: RocCurve, benchmarks: list[tuple[float, float, str]]
) -> list[OperatingPointComparison]:
    """Dominance of the curve over (sensitivity, specificity, label) benchmarks.

    The curve's sensitivity is interpolated at each benchmark's specificity;
    dominance means the curve point is >= the benchmark in both coordinates,
    which at matched specificity reduces to the sensitivity comparison.
    """
    out = []
    for sens_b, spec_b, label in benchmarks:
        curve_sens = curve.sensitivity_at_specificity(spec_b)
        out.append(
            OperatingPointComparison(
                label=label,
                benchmark_sensitivity=float(sens_b),
                benchmark_specificity=float(spec_b),
                curve_sensitivity=curve_sens,
                dominates=bool(curve_sens >= sens_b),
            )
        )
    return out


# -- artifact I/O ---------------------------------------------------------------


def write_scores(path: str | Path, ids, labels, scores) -> None:
    """Score table as CSV ``id,label,score`` (label 1 = pathological)."""
    labels, scores = _validate_labels_scores(labels, scores)
    ids = list(ids)
    if len(ids) != labels.shape[0]:
        raise InputError(f"length mismatch: {len(ids)} ids vs {labels.shape[0]} labels")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "score"])
        for rid, lab, s in zip(ids, labels, scores):
            writer.writerow([rid, int(lab), repr(float(s))])


def read_scores(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    ids: list[str] = []
    labels: list[int] = []
    scores: list[float] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"id", "label", "score"}:
            raise InputError(f"score file {path}: expected columns id,label,score")
        for row in reader:
            ids.append(row["id"])
            labels.append(int(row["label"]))
            scores.append(float(row["score"]))
    return ids, np.asarray(labels, dtype=np.int64), np.asarray(scores, dtype=np.float64)


def write_roc_csv(curve: RocCurve, path: str | Path) -> None:
    """Curve points as CSV ``threshold,fpr,tpr`` (the ROC-plot source data)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for c, x, y in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow([repr(float(c)), repr(float(x)), repr(float(y))])


def read_roc_csv(path: str | Path) -> RocCurve:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"threshold", "fpr", "tpr"}:
            raise InputError(f"curve file {path}: expected columns threshold,fpr,tpr")
        for row in reader:
            rows.append((float(row["threshold"]), float(row["fpr"]), float(row["tpr"])))
    thresholds, fpr, tpr = (np.asarray(col, dtype=np.float64) for col in zip(*rows))
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2.0)
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def write_threshold_summary(
    path: str | Path,
    curve: RocCurve,
    youden: ThresholdDecision,
    clinical: ThresholdDecision,
) -> None:
    summary = {"auc": curve.auc, "youden": youden.to_dict(), "clinical": clinical.to_dict()}
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, allow_nan=False)
        fh.write("\n")


def read_threshold_summary(path: str | Path) -> dict:
    with open(path) as fh:
        summary = json.load(fh)
    for key in ("auc", "youden", "clinical"):
        if key not in summary:
            raise InputError(f"threshold summary {path}: missing key {key!r}")
    if not math.isfinite(summary["auc"]):
        raise InputError(f"threshold summary {path}: non-finite auc")
    return summary
