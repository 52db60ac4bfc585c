"""Post-hoc prior correction of logits and posteriors.

Every supported method is one multiplicative correction applied per class:

    adjusted_logit_i = logit_i - alpha * log(estimate_i) + log(target_i)

equivalently, posteriors are scaled by target_i / estimate_i**alpha and
renormalized. The methods differ only in which prior estimate they demand:
``class-frequency`` uses the empirical count prior, ``p2p-ce`` the effective
prior measured on training-side posteriors, and ``p2p-la`` the effective
prior of a logit-adjusted model measured with the train-time shift removed.
Any per-sample scale factor is absorbed by the row renormalization, so it
never changes an argmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, EstimatorKindError, NumericError, SpecError
from .model import LinearSoftmaxModel
from .numerics import as_matrix, prob_matrix, prob_vector

METHODS = ("class-frequency", "p2p-ce", "p2p-la", "none")
PRIOR_KIND_FREQUENCY = "frequency"
TRAIN_SIDE_KINDS = ("train-side",)
PMBAR_KINDS = ("val-side", "train-reweighted", "averaged")

_METHOD_COMPAT = {
    "class-frequency": (PRIOR_KIND_FREQUENCY,),
    "p2p-ce": TRAIN_SIDE_KINDS,
    "p2p-la": PMBAR_KINDS,
}


@dataclass(frozen=True)
class AdjustmentSpec:
    """A fully resolved correction: method, prior estimate, target, exponent.

    Method/estimator compatibility is enforced here, at construction, because
    supplying the wrong prior kind is the easiest way to silently get an
    invalid correction.
    """

    method: str
    estimated_prior: np.ndarray | None = None
    prior_kind: str | None = None
    target_prior: np.ndarray | None = None
    alpha: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise SpecError(f"unknown adjustment method {self.method!r}")
        if self.alpha < 0:
            raise SpecError(f"alpha must be >= 0, got {self.alpha}")
        if self.method == "none":
            return
        if self.estimated_prior is None or self.target_prior is None:
            raise SpecError(f"method {self.method!r} needs estimated and target priors")
        estimated = prob_vector(self.estimated_prior)
        target = prob_vector(self.target_prior)
        if estimated.shape != target.shape:
            raise DimensionError("estimated and target priors must have equal length")
        if np.any(estimated <= 0):
            raise NumericError("estimated prior must be strictly positive")
        allowed = _METHOD_COMPAT[self.method]
        if self.prior_kind not in allowed:
            raise EstimatorKindError(
                f"method {self.method!r} requires a prior of kind "
                f"{' or '.join(allowed)}, got {self.prior_kind!r}"
            )
        object.__setattr__(self, "estimated_prior", estimated)
        object.__setattr__(self, "target_prior", target)

    def to_json(self) -> dict:
        if self.method == "none":
            return {"method": "none"}
        return {
            "method": self.method,
            "estimated_prior": [float(v) for v in self.estimated_prior],
            "prior_kind": self.prior_kind,
            "target_prior": [float(v) for v in self.target_prior],
            "alpha": float(self.alpha),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "AdjustmentSpec":
        if payload.get("method") == "none":
            return cls("none")
        try:
            return cls(
                method=payload["method"],
                estimated_prior=np.asarray(payload["estimated_prior"]),
                prior_kind=payload["prior_kind"],
                target_prior=np.asarray(payload["target_prior"]),
                alpha=float(payload.get("alpha", 1.0)),
            )
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed adjustment spec: {exc}") from exc


def no_adjustment() -> AdjustmentSpec:
    return AdjustmentSpec("none")


def class_frequency_spec(counts_prior, target_prior, alpha: float = 1.0) -> AdjustmentSpec:
    """Correction from the empirical count prior (pass counts or their prior)."""
    p = np.asarray(counts_prior, dtype=np.float64)
    if p.sum() > 1.5:  # raw counts rather than a prior
        p = p / p.sum()
    return AdjustmentSpec("class-frequency", p, PRIOR_KIND_FREQUENCY, target_prior, alpha)


def spec_from_estimate(method: str, estimate, target_prior, alpha: float | None = None) -> AdjustmentSpec:
    """Build a p2p spec from an EffectivePrior-like estimate.

    ``estimate`` must expose ``probs`` and ``estimator``; when ``alpha`` is
    omitted the estimate's own stored exponent is used.
    """
    if not hasattr(estimate, "probs") or not hasattr(estimate, "estimator"):
        raise SpecError("estimate must carry .probs and .estimator")
    return AdjustmentSpec(
        method,
        np.asarray(estimate.probs),
        str(estimate.estimator),
        target_prior,
        float(estimate.alpha) if alpha is None else float(alpha),
    )


@dataclass
class AdjustedPosteriors:
    """Corrected posteriors plus the spec that produced them."""

    matrix: np.ndarray
    spec: AdjustmentSpec

    def __post_init__(self):
        self.matrix = prob_matrix(self.matrix)


def _log_shift(spec: AdjustmentSpec) -> np.ndarray:
    return -spec.alpha * np.log(spec.estimated_prior) + np.log(spec.target_prior)


def adjust_logits(logits, spec: AdjustmentSpec) -> np.ndarray:
    """Shift every row by -alpha * log(estimate) + log(target)."""
    z = as_matrix(logits)
    if spec.method == "none":
        return z.copy()
    if z.shape[1] != spec.estimated_prior.shape[0]:
        raise DimensionError(
            f"{z.shape[1]} logit columns vs {spec.estimated_prior.shape[0]} classes"
        )
    return z + _log_shift(spec)


def adjust_logit_row(logits, spec: AdjustmentSpec) -> np.ndarray:
    """Single-row convenience wrapper around :func:`adjust_logits`."""
    return adjust_logits(np.asarray(logits, dtype=np.float64)[None, :], spec)[0]


def adjust_posteriors(posteriors, spec: AdjustmentSpec) -> AdjustedPosteriors:
    """Scale each row by target / estimate**alpha and renormalize.

    Matches softmax(adjust_logits(log posteriors)) to 1e-12 on positive rows,
    and keeps exact zeros (one-hot rows stay one-hot).
    """
    p = prob_matrix(posteriors)
    if spec.method == "none":
        return AdjustedPosteriors(p.copy(), spec)
    if p.shape[1] != spec.estimated_prior.shape[0]:
        raise DimensionError(
            f"{p.shape[1]} posterior columns vs {spec.estimated_prior.shape[0]} classes"
        )
    scaled = p * (spec.target_prior / spec.estimated_prior**spec.alpha)
    return AdjustedPosteriors(scaled / scaled.sum(axis=1, keepdims=True), spec)


def achieved_prior(posteriors) -> np.ndarray:
    """Column means: the Monte-Carlo class marginal the posteriors imply."""
    if isinstance(posteriors, AdjustedPosteriors):
        posteriors = posteriors.matrix
    p = prob_matrix(posteriors)
    return prob_vector(p.mean(axis=0))


def apply_to_linear_model(model: LinearSoftmaxModel, spec: AdjustmentSpec) -> LinearSoftmaxModel:
    """Fold a per-class logit shift into a linear model's biases.

    The correction is constant per class, so for a linear model it is exactly
    a bias shift; the returned model scores samples identically to adjusting
    its logits after the fact.
    """
    if not isinstance(model, LinearSoftmaxModel):
        raise SpecError("only linear models can absorb an adjustment")
    out = model.copy()
    if spec.method != "none":
        if out.num_classes != spec.estimated_prior.shape[0]:
            raise DimensionError("model classes vs adjustment classes mismatch")
        out.biases = out.biases + _log_shift(spec)
    return out


def save_spec(spec: AdjustmentSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=1) + "\n")


def load_spec(path) -> AdjustmentSpec:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: not an adjustment spec: {exc}") from exc
    return AdjustmentSpec.from_json(payload)
