"""Effective-prior estimation from model posteriors.

A trained classifier absorbs a class marginal from its data that generally
differs from the raw count frequencies. Three estimators recover it:

* train-side: mean posterior over the training samples;
* val-side: mean posterior over held-out samples drawn from the test-time
  feature distribution (logit-adjusted models are evaluated with their
  train-time shift removed, i.e. raw inference logits);
* train-reweighted: the val-side quantity recovered from training samples
  by reweighting the train-side column means with target/train prior ratios.

The val-side and train-reweighted estimates measure the same marginal, so
they may be averaged; mixing them with a train-side estimate is an error.
A scalar exponent alpha scales the estimate at adjustment time and is tuned
by grid search on held-out accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import adjust
from .dataset import LabeledDataset
from .errors import (
    DimensionError,
    EstimatorKindError,
    NumericError,
    ParseError,
    UsageError,
)
from .model import Model, predict_logits
from .numerics import prob_matrix, prob_vector, softmax_rows

PROB_FLOOR = 1e-8

ESTIMATOR_TRAIN_SIDE = "train-side"
ESTIMATOR_VAL_SIDE = "val-side"
ESTIMATOR_TRAIN_REWEIGHTED = "train-reweighted"
ESTIMATOR_AVERAGED = "averaged"
ESTIMATORS = (
    ESTIMATOR_TRAIN_SIDE,
    ESTIMATOR_VAL_SIDE,
    ESTIMATOR_TRAIN_REWEIGHTED,
    ESTIMATOR_AVERAGED,
)

DEFAULT_ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)


@dataclass(frozen=True)
class EffectivePrior:
    """A prior estimate: probabilities, provenance tag, sample count, alpha."""

    probs: np.ndarray
    estimator: str
    samples: int
    alpha: float = 1.0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise EstimatorKindError(f"unknown estimator tag {self.estimator!r}")
        if self.samples < 1:
            raise DimensionError("sample count must be >= 1")
        probs = prob_vector(self.probs)
        if np.any(probs <= 0):
            raise NumericError("effective prior entries must be strictly positive")
        object.__setattr__(self, "probs", probs)

    def with_alpha(self, alpha: float) -> "EffectivePrior":
        return replace(self, alpha=float(alpha))


def _floor_and_normalize(raw: np.ndarray) -> np.ndarray:
    """Clamp entries to the probability floor, then renormalize.

    A confident model can drive a tail-class mean posterior to numerical
    zero; the floor keeps downstream logarithms finite.
    """
    floored = np.maximum(raw, PROB_FLOOR)
    return prob_vector(floored / floored.sum())


def effective_prior_train(posteriors) -> EffectivePrior:
    """Mean training-side posterior per class: the prior the model absorbed."""
    p = prob_matrix(posteriors)
    return EffectivePrior(
        _floor_and_normalize(p.mean(axis=0)), ESTIMATOR_TRAIN_SIDE, p.shape[0]
    )


def pmbar_from_val(posteriors) -> EffectivePrior:
    """Mean posterior over held-out samples from the test-time distribution.

    For a logit-adjusted model the posteriors must come from raw inference
    logits (train-time shift removed).
    """
    p = prob_matrix(posteriors)
    return EffectivePrior(
        _floor_and_normalize(p.mean(axis=0)), ESTIMATOR_VAL_SIDE, p.shape[0]
    )


def pmbar_from_train(train_posteriors, target_prior, train_prior) -> EffectivePrior:
    """Recover the val-side marginal from training-side posteriors.

    Column means are reweighted by target/train prior ratios and
    renormalized; the finite-sample result need not sum to one before the
    renormalization, which is the consistent projection back to the simplex.
    """
    p = prob_matrix(train_posteriors)
    target = prob_vector(target_prior)
    train = prob_vector(train_prior)
    if np.any(train <= 0):
        raise NumericError("train prior must be strictly positive")
    if target.shape != train.shape or p.shape[1] != train.shape[0]:
        raise DimensionError("posteriors, target and train priors disagree on classes")
    raw = p.mean(axis=0) * target / train
    return EffectivePrior(
        _floor_and_normalize(raw / raw.sum()), ESTIMATOR_TRAIN_REWEIGHTED, p.shape[0]
    )


def reweight_estimate(
    estimate: EffectivePrior, target_prior, train_prior
) -> EffectivePrior:
    """Turn a train-side estimate into the inference-side marginal.

    Identical to :func:`pmbar_from_train` when the column means are already
    summarized in ``estimate``; useful when the same training-side estimate
    is reweighted toward several target priors.
    """
    if estimate.estimator != ESTIMATOR_TRAIN_SIDE:
        raise EstimatorKindError(
            f"reweighting starts from a train-side estimate, got {estimate.estimator!r}"
        )
    target = prob_vector(target_prior)
    train = prob_vector(train_prior)
    if np.any(train <= 0):
        raise NumericError("train prior must be strictly positive")
    raw = estimate.probs * target / train
    return EffectivePrior(
        _floor_and_normalize(raw / raw.sum()),
        ESTIMATOR_TRAIN_REWEIGHTED,
        estimate.samples,
    )


def average_estimates(a: EffectivePrior, b: EffectivePrior) -> EffectivePrior:
    """Probability-space mean of two estimates of the val-side marginal."""
    pmbar_kinds = (ESTIMATOR_VAL_SIDE, ESTIMATOR_TRAIN_REWEIGHTED, ESTIMATOR_AVERAGED)
    for est in (a, b):
        if est.estimator not in pmbar_kinds:
            raise EstimatorKindError(
                f"cannot average a {est.estimator!r} estimate; "
                "only val-side/train-reweighted/averaged estimates measure "
                "the same marginal"
            )
    if a.probs.shape != b.probs.shape:
        raise DimensionError("estimates must have equal length")
    mean = (a.probs + b.probs) / 2.0
    return EffectivePrior(
        _floor_and_normalize(mean / mean.sum()),
        ESTIMATOR_AVERAGED,
        a.samples + b.samples,
    )


def model_posteriors(model: Model, features) -> np.ndarray:
    """softmax of the model's raw inference logits, row per sample."""
    return softmax_rows(predict_logits(model, features))


def tune_alpha_on_logits(
    logits,
    labels,
    method: str,
    estimate: EffectivePrior,
    grid,
    target_prior,
) -> tuple[float, list[tuple[float, float]]]:
    """Grid-search the estimate exponent on held-out top-1 accuracy.

    Returns the winning alpha plus the full (alpha, accuracy) curve. Ties
    break toward the smallest alpha; the search is deterministic.
    """
    grid = [float(a) for a in grid]
    if not grid:
        raise UsageError("alpha grid is empty")
    if any(a < 0 for a in grid):
        raise UsageError("alpha grid values must be >= 0")
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise DimensionError("holdout logits must be a non-empty matrix")
    if y.shape != (z.shape[0],):
        raise DimensionError("one label per holdout row required")
    curve = []
    for alpha in sorted(grid):
        spec = adjust.spec_from_estimate(method, estimate, target_prior, alpha)
        pred = np.argmax(adjust.adjust_logits(z, spec), axis=1)
        curve.append((alpha, float(np.mean(pred == y))))
    best_alpha, _ = max(curve, key=lambda pair: (pair[1], -pair[0]))
    return best_alpha, curve


def tune_alpha(
    model: Model,
    method: str,
    estimate: EffectivePrior,
    grid,
    holdout: LabeledDataset,
    target_prior,
) -> float:
    """Pick the exponent maximizing adjusted accuracy on a holdout set."""
    if holdout.n == 0:
        raise DimensionError("holdout dataset is empty")
    logits = predict_logits(model, holdout.features)
    best, _ = tune_alpha_on_logits(
        logits, holdout.labels, method, estimate, grid, target_prior
    )
    return best


def save_prior(estimate: EffectivePrior, path) -> None:
    """Write the estimate JSON: {probs, estimator, samples, alpha}."""
    payload = {
        "probs": [float(v) for v in estimate.probs],
        "estimator": estimate.estimator,
        "samples": int(estimate.samples),
        "alpha": float(estimate.alpha),
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_prior(path) -> EffectivePrior:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
        return EffectivePrior(
            np.asarray(payload["probs"], dtype=np.float64),
            str(payload["estimator"]),
            int(payload["samples"]),
            float(payload.get("alpha", 1.0)),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: not an effective-prior file: {exc}") from exc
