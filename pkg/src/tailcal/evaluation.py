"""Metrics and reports: accuracies, confusion matrix, group accuracy over
many/medium/few count buckets, prior-mismatch diagnostics, and CSV exports
of decision-boundary and prior-bar figure data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjust import achieved_prior
from .dataset import GaussianMixtureSpec
from .errors import ConfigError, DimensionError, KLDomainError, UnsupportedModelError
from .model import LinearSoftmaxModel
from .numerics import prob_vector

REPORT_SCHEMA_VERSION = 1
GROUP_NAMES = ("many", "medium", "few")


@dataclass(frozen=True)
class GroupThresholds:
    """Count cutoffs for the many/medium/few buckets.

    Defaults follow the common convention: many-shot classes have more than
    100 training samples, few-shot fewer than 20.
    """

    many_min: int = 100
    few_max: int = 20

    def __post_init__(self):
        if not self.many_min > self.few_max >= 1:
            raise ConfigError(
                f"need many_min > few_max >= 1, got ({self.many_min}, {self.few_max})"
            )

    def bucket(self, count: int) -> str:
        if count > self.many_min:
            return "many"
        if count < self.few_max:
            return "few"
        return "medium"


def confusion_matrix(predictions, truth, num_classes: int) -> np.ndarray:
    """C x C counts; rows index the true class, columns the prediction."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1 or pred.size == 0:
        raise DimensionError("predictions and truth must be equal-length, non-empty")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (true, pred), 1)
    return matrix


def top1_accuracy(predictions, truth) -> float:
    """Fraction of exact matches."""
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    if pred.shape != true.shape or pred.size == 0:
        raise DimensionError("predictions and truth must be equal-length, non-empty")
    return float(np.mean(pred == true))


def per_class_accuracy(confusion: np.ndarray) -> np.ndarray:
    """Diagonal over row sums; classes absent from the test set become NaN."""
    totals = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, np.diag(confusion) / totals, np.nan)


def balanced_accuracy(confusion: np.ndarray) -> float:
    """Unweighted mean of per-class accuracies over classes present."""
    acc = per_class_accuracy(confusion)
    return float(np.nanmean(acc))


def group_accuracy(per_class, train_counts, thresholds: GroupThresholds) -> dict:
    """Mean accuracy within each count bucket; empty buckets are absent."""
    acc = np.asarray(per_class, dtype=np.float64)
    counts = np.asarray(train_counts, dtype=np.int64)
    if acc.shape != counts.shape:
        raise DimensionError("one training count per class accuracy required")
    groups: dict[str, list[float]] = {}
    for a, n in zip(acc, counts):
        if np.isnan(a):
            continue
        groups.setdefault(thresholds.bucket(int(n)), []).append(float(a))
    return {name: float(np.mean(groups[name])) for name in GROUP_NAMES if name in groups}


def prior_mismatch(achieved, target) -> tuple[float, float]:
    """L1 and KL distance between the achieved and target class marginals.

    KL uses the 0*log(0) = 0 convention. When the achieved marginal puts mass
    on a zero-target class, KL is undefined; the raised error carries the L1
    value, which is always well defined.
    """
    a = prob_vector(achieved)
    t = prob_vector(target)
    if a.shape != t.shape:
        raise DimensionError("achieved and target priors must have equal length")
    l1 = float(np.abs(a - t).sum())
    bad = (t == 0) & (a > 0)
    if np.any(bad):
        raise KLDomainError(
            f"KL undefined: achieved mass {a[bad]} on zero-target classes", l1=l1
        )
    positive = a > 0
    kl = float(np.sum(a[positive] * np.log(a[positive] / t[positive])))
    return l1, kl


@dataclass
class EvalReport:
    """Everything one evaluation produces, ready for JSON/CSV/table output."""

    top1: float
    balanced: float
    per_class: np.ndarray
    groups: dict
    confusion: np.ndarray
    achieved_prior: np.ndarray
    prior_l1: float
    prior_kl: float
    provenance: dict = field(default_factory=dict)


def build_report(
    predictions,
    truth,
    posteriors,
    target_prior,
    train_counts=None,
    thresholds: GroupThresholds | None = None,
    provenance: dict | None = None,
) -> EvalReport:
    """Assemble the full report for one prediction set."""
    target = prob_vector(target_prior)
    num_classes = target.shape[0]
    confusion = confusion_matrix(predictions, truth, num_classes)
    per_class = per_class_accuracy(confusion)
    thresholds = thresholds or GroupThresholds()
    counts = (
        np.asarray(train_counts, dtype=np.int64)
        if train_counts is not None
        else confusion.sum(axis=1)
    )
    achieved = achieved_prior(posteriors)
    l1, kl = prior_mismatch(achieved, target)
    return EvalReport(
        top1=top1_accuracy(predictions, truth),
        balanced=balanced_accuracy(confusion),
        per_class=per_class,
        groups=group_accuracy(per_class, counts, thresholds),
        confusion=confusion,
        achieved_prior=achieved,
        prior_l1=l1,
        prior_kl=kl,
        provenance=provenance or {},
    )


def report_to_json(report: EvalReport) -> dict:
    return {
        "schema": REPORT_SCHEMA_VERSION,
        "top1": report.top1,
        "balanced_accuracy": report.balanced,
        "per_class_accuracy": [
            None if np.isnan(v) else float(v) for v in report.per_class
        ],
        "group_accuracy": report.groups,
        "confusion": report.confusion.tolist(),
        "achieved_prior": [float(v) for v in report.achieved_prior],
        "prior_l1": report.prior_l1,
        "prior_kl": report.prior_kl,
        "provenance": report.provenance,
    }


def report_from_json(payload: dict) -> EvalReport:
    per_class = np.array(
        [np.nan if v is None else v for v in payload["per_class_accuracy"]],
        dtype=np.float64,
    )
    return EvalReport(
        top1=float(payload["top1"]),
        balanced=float(payload["balanced_accuracy"]),
        per_class=per_class,
        groups=dict(payload["group_accuracy"]),
        confusion=np.asarray(payload["confusion"], dtype=np.int64),
        achieved_prior=np.asarray(payload["achieved_prior"], dtype=np.float64),
        prior_l1=float(payload["prior_l1"]),
        prior_kl=float(payload["prior_kl"]),
        provenance=dict(payload["provenance"]),
    )


def _report_csv_lines(report: EvalReport) -> list[str]:
    lines = ["row,class,value"]
    for i, v in enumerate(report.per_class):
        lines.append(f"class_accuracy,{i},{'' if np.isnan(v) else repr(float(v))}")
    lines.append(f"summary,top1,{report.top1!r}")
    lines.append(f"summary,balanced,{report.balanced!r}")
    for name in GROUP_NAMES:
        if name in report.groups:
            lines.append(f"summary,{name},{report.groups[name]!r}")
    lines.append(f"summary,prior_l1,{report.prior_l1!r}")
    lines.append(f"summary,prior_kl,{report.prior_kl!r}")
    return lines


def _report_table(report: EvalReport) -> str:
    cells = [
        f"{100 * report.groups[name]:.2f}" if name in report.groups else "-"
        for name in GROUP_NAMES
    ]
    header = f"{'Many':>8} {'Medium':>8} {'Few':>8} {'All':>8}"
    row = " ".join(f"{c:>8}" for c in cells) + f" {100 * report.top1:>8.2f}"
    extra = (
        f"balanced accuracy: {100 * report.balanced:.2f}\n"
        f"achieved prior L1: {report.prior_l1:.4f}  KL: {report.prior_kl:.6f}"
    )
    return f"{header}\n{row}\n{extra}\n"


def emit_report(report: EvalReport, fmt: str, path) -> None:
    """Write the report as json (canonical), csv, or table-text."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report_to_json(report), indent=1) + "\n")
    elif fmt == "csv":
        path.write_text("\n".join(_report_csv_lines(report)) + "\n")
    elif fmt == "table-text":
        path.write_text(_report_table(report))
    else:
        raise ConfigError(f"unknown report format {fmt!r}")


def load_report(path) -> EvalReport:
    return report_from_json(json.loads(Path(path).read_text()))


def _boundary_points(
    delta_w: np.ndarray, delta_b: float, spans: np.ndarray
) -> np.ndarray:
    """Sample (x0, x1) points of the line delta_w . x + delta_b = 0."""
    if abs(delta_w[0]) >= abs(delta_w[1]):
        x1 = spans
        x0 = -(delta_b + delta_w[1] * x1) / delta_w[0]
    else:
        x0 = spans
        x1 = -(delta_b + delta_w[0] * x0) / delta_w[1]
    return np.column_stack([x0, x1])


def export_boundary_data(
    named_models,
    gmm: GaussianMixtureSpec,
    bayes_prior,
    path,
    span: float = 4.0,
    points: int = 41,
) -> None:
    """CSV of sampled decision lines: header ``series,x0,x1``.

    Each (name, linear model) pair contributes one series; the Bayes line
    under ``bayes_prior`` is appended as series ``bayes``. 2-D two-class
    settings only.
    """
    if gmm.dims != 2 or gmm.num_classes != 2:
        raise UnsupportedModelError("boundary export needs a 2-D, 2-class setting")
    if abs(gmm.sigmas[0] - gmm.sigmas[1]) > 1e-12:
        raise UnsupportedModelError("boundary export needs equal class sigmas")
    spans = np.linspace(-span, span, points)
    lines = ["series,x0,x1"]
    for name, model in named_models:
        if not isinstance(model, LinearSoftmaxModel) or model.num_classes != 2:
            raise UnsupportedModelError(f"series {name!r} is not a 2-class linear model")
        dw = model.weights[0] - model.weights[1]
        db = float(model.biases[0] - model.biases[1])
        for x0, x1 in _boundary_points(dw, db, spans):
            lines.append(f"{name},{float(x0)!r},{float(x1)!r}")
    prior = prob_vector(bayes_prior)
    var = float(gmm.sigmas[0]) ** 2
    dw = (gmm.means[0] - gmm.means[1]) / var
    db = float(
        ((gmm.means[1] @ gmm.means[1]) - (gmm.means[0] @ gmm.means[0])) / (2 * var)
        + np.log(prior[0] / prior[1])
    )
    for x0, x1 in _boundary_points(dw, db, spans):
        lines.append(f"bayes,{float(x0)!r},{float(x1)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_prior_bars(
    freq_prior,
    effective_prior,
    train_counts,
    path,
    thresholds: GroupThresholds | None = None,
) -> None:
    """CSV comparing frequency and effective priors per class.

    Header ``class,freq_prior,effective_prior,group``; one row per class.
    """
    freq = prob_vector(freq_prior)
    eff = prob_vector(effective_prior)
    counts = np.asarray(train_counts, dtype=np.int64)
    if freq.shape != eff.shape or counts.shape != freq.shape:
        raise DimensionError("priors and counts must have one entry per class")
    thresholds = thresholds or GroupThresholds()
    lines = ["class,freq_prior,effective_prior,group"]
    for i, (f, e, n) in enumerate(zip(freq, eff, counts)):
        lines.append(f"{i},{float(f)!r},{float(e)!r},{thresholds.bucket(int(n))}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_figure_data(kind: str, path, **inputs) -> None:
    """Dispatch to the figure-data exporters by kind."""
    if kind == "boundary-2d":
        export_boundary_data(path=path, **inputs)
    elif kind == "prior-bars":
        export_prior_bars(path=path, **inputs)
    else:
        raise ConfigError(f"unknown figure kind {kind!r}")
