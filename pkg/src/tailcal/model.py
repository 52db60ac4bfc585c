"""Small softmax classifiers and their two-stage training loop.

Stage 1 is plain cross-entropy with instance-balanced sampling (a uniform
reshuffle of the full dataset each epoch). Stage 2 retrains either the
classifier head only (CL, backbone frozen) or the whole model (FT) under the
prior-shifted cross-entropy loss, where each logit is offset by
alpha * log(prior) of its class before the softmax.

Training is plain SGD, single-threaded, and bit-deterministic given the
config's random stream.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    ModelFormatError,
    NumericError,
)
from .numerics import (
    RngStream,
    as_matrix,
    as_vector,
    log_sum_exp,
    log_sum_exp_rows,
    prob_vector,
    softmax,
)

MODEL_SCHEMA_VERSION = 1
LOSS_KINDS = ("plain-ce", "logit-adjusted")
SCHEDULES = ("constant", "cosine")
ACTIVATIONS = ("relu", "tanh")
STAGE_TWO_MODES = ("CL", "FT")

DIVERGENCE_LIMIT = 1e6


@dataclass
class LinearSoftmaxModel:
    """Single linear layer producing one logit per class: z = Wx + b."""

    weights: np.ndarray  # (C, D)
    biases: np.ndarray  # (C,)

    def __post_init__(self):
        self.weights = as_matrix(self.weights)
        self.biases = as_vector(self.biases)
        if self.biases.shape[0] != self.weights.shape[0]:
            raise DimensionError("one bias per class required")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dims(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearSoftmaxModel":
        return LinearSoftmaxModel(self.weights.copy(), self.biases.copy())


@dataclass
class MlpModel:
    """One hidden layer (relu or tanh) under a linear softmax head."""

    hidden_weights: np.ndarray  # (H, D)
    hidden_biases: np.ndarray  # (H,)
    activation: str
    head: LinearSoftmaxModel  # over H features

    def __post_init__(self):
        self.hidden_weights = as_matrix(self.hidden_weights)
        self.hidden_biases = as_vector(self.hidden_biases)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.hidden_biases.shape[0] != self.hidden_weights.shape[0]:
            raise DimensionError("one hidden bias per hidden unit required")
        if self.head.dims != self.hidden_weights.shape[0]:
            raise DimensionError("head input width must equal hidden width")

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def dims(self) -> int:
        return self.hidden_weights.shape[1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.hidden_weights.copy(),
            self.hidden_biases.copy(),
            self.activation,
            self.head.copy(),
        )


Model = LinearSoftmaxModel | MlpModel


@dataclass(frozen=True)
class LossSpec:
    """Training loss: plain CE, or CE over prior-shifted logits."""

    kind: str = "plain-ce"
    prior: np.ndarray | None = None
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.kind == "logit-adjusted":
            if self.prior is None:
                raise ConfigError("logit-adjusted loss needs a prior")
            prior = prob_vector(self.prior)
            if np.any(prior <= 0):
                raise NumericError("logit-adjusted loss needs strictly positive prior")
            object.__setattr__(self, "prior", prior)
        elif self.prior is not None:
            raise ConfigError("plain cross-entropy takes no prior")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    iterations: int
    batch_size: int
    seed: RngStream
    schedule: str = "constant"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")


def init_linear(num_classes: int, dims: int) -> LinearSoftmaxModel:
    """Zero-initialized linear model: initial logits are all zero."""
    return LinearSoftmaxModel(
        np.zeros((num_classes, dims)), np.zeros(num_classes)
    )


def init_mlp(
    num_classes: int, dims: int, hidden: int, activation: str, rng: RngStream
) -> MlpModel:
    """Hidden weights uniform in [-1/sqrt(D), 1/sqrt(D)]; zero head."""
    if hidden < 1:
        raise ConfigError("hidden width must be >= 1")
    gen = rng.generator()
    bound = 1.0 / np.sqrt(dims)
    w1 = gen.uniform(-bound, bound, size=(hidden, dims))
    return MlpModel(
        w1, np.zeros(hidden), activation, init_linear(num_classes, hidden)
    )


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def predict_logits(model: Model, features) -> np.ndarray:
    """Per-sample logits, one row per feature row."""
    x = as_matrix(features)
    if x.shape[1] != model.dims:
        raise DimensionError(
            f"model expects {model.dims}-dim features, got {x.shape[1]}"
        )
    if isinstance(model, LinearSoftmaxModel):
        return x @ model.weights.T + model.biases
    hidden = _activate(x @ model.hidden_weights.T + model.hidden_biases, model.activation)
    return hidden @ model.head.weights.T + model.head.biases


def ce_loss_and_grad(logits, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of one sample and its gradient w.r.t. the logits.

    loss = -log softmax(logits)[label]; grad = softmax(logits) - onehot.
    """
    z = as_vector(logits)
    if not 0 <= label < z.size:
        raise DimensionError(f"label {label} out of range for {z.size} classes")
    loss = log_sum_exp(z) - float(z[label])
    grad = softmax(z)
    grad[label] -= 1.0
    return loss, grad


def la_loss_and_grad(
    logits, label: int, prior, alpha: float
) -> tuple[float, np.ndarray]:
    """Cross-entropy over prior-shifted logits z_k + alpha * log(prior_k).

    The shift is constant w.r.t. the logits, so the gradient is the plain CE
    gradient evaluated at the shifted logits.
    """
    z = as_vector(logits)
    p = prob_vector(prior)
    if np.any(p <= 0):
        raise NumericError("prior must be strictly positive (log of zero)")
    if p.size != z.size:
        raise DimensionError("prior and logits must have equal length")
    return ce_loss_and_grad(z + alpha * np.log(p), label)


def _loss_shift(loss: LossSpec, num_classes: int) -> np.ndarray:
    if loss.kind == "logit-adjusted":
        if loss.prior.shape[0] != num_classes:
            raise DimensionError("loss prior length must match class count")
        return loss.alpha * np.log(loss.prior)
    return np.zeros(num_classes)


def model_parameters(model: Model) -> list[np.ndarray]:
    """Live parameter arrays in a fixed order (mutating them edits the model)."""
    if isinstance(model, LinearSoftmaxModel):
        return [model.weights, model.biases]
    return [
        model.hidden_weights,
        model.hidden_biases,
        model.head.weights,
        model.head.biases,
    ]


def batch_loss_and_grads(
    model: Model, features: np.ndarray, labels: np.ndarray, loss: LossSpec
) -> tuple[float, list[np.ndarray]]:
    """Mean loss over a batch plus gradients aligned with model_parameters."""
    x = as_matrix(features)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    shift = _loss_shift(loss, model.num_classes)
    if isinstance(model, LinearSoftmaxModel):
        pre = None
        hidden = x
        z = x @ model.weights.T + model.biases + shift
    else:
        pre = x @ model.hidden_weights.T + model.hidden_biases
        hidden = _activate(pre, model.activation)
        z = hidden @ model.head.weights.T + model.head.biases + shift
    lse = log_sum_exp_rows(z)
    rows = np.arange(n)
    mean_loss = float(np.mean(lse - z[rows, y]))
    g = np.exp(z - lse[:, None])
    g[rows, y] -= 1.0
    g /= n
    if isinstance(model, LinearSoftmaxModel):
        return mean_loss, [g.T @ x, g.sum(axis=0)]
    d_hidden = (g @ model.head.weights) * _activate_grad(pre, model.activation)
    return mean_loss, [
        d_hidden.T @ x,
        d_hidden.sum(axis=0),
        g.T @ hidden,
        g.sum(axis=0),
    ]


@dataclass
class TrainResult:
    model: Model
    loss_trace: list[float] = field(default_factory=list)


def _learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / cfg.iterations))
    return cfg.learning_rate


def train(
    model: Model,
    ds: LabeledDataset,
    loss: LossSpec,
    cfg: TrainConfig,
    trainable: list[bool] | None = None,
) -> TrainResult:
    """Mini-batch SGD with seeded shuffling; deterministic given cfg.seed.

    ``trainable`` masks entries of model_parameters (all True by default).
    Returns the trained model and the per-epoch mean loss trace. Aborts with
    DivergenceError when the loss goes non-finite or beyond 1e6.
    """
    if cfg.batch_size > ds.n:
        raise ConfigError(f"batch size {cfg.batch_size} exceeds dataset size {ds.n}")
    model = model.copy()
    params = model_parameters(model)
    if trainable is None:
        trainable = [True] * len(params)
    result = TrainResult(model)
    if cfg.iterations == 0:
        return result
    gen = cfg.seed.generator()
    step = 0
    while step < cfg.iterations:
        perm = gen.permutation(ds.n)
        epoch_loss = 0.0
        epoch_samples = 0
        for start in range(0, ds.n, cfg.batch_size):
            if step >= cfg.iterations:
                break
            batch = perm[start : start + cfg.batch_size]
            batch_loss, grads = batch_loss_and_grads(
                model, ds.features[batch], ds.labels[batch], loss
            )
            if not np.isfinite(batch_loss):
                raise DivergenceError(
                    f"non-finite loss at step {step}; lower the learning rate"
                )
            lr = _learning_rate(cfg, step)
            for param, grad, live in zip(params, grads, trainable):
                if live:
                    param -= lr * grad
            epoch_loss += batch_loss * batch.size
            epoch_samples += batch.size
            step += 1
        mean_epoch = epoch_loss / epoch_samples
        result.loss_trace.append(mean_epoch)
        if not np.isfinite(mean_epoch) or mean_epoch > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"epoch mean loss {mean_epoch} beyond limit {DIVERGENCE_LIMIT}"
            )
    return result


def stage2_retrain(
    stage1_model: Model,
    ds: LabeledDataset,
    mode: str,
    cfg: TrainConfig,
    prior,
    alpha: float = 1.0,
) -> TrainResult:
    """Second training stage under the prior-shifted loss.

    CL re-initializes the head (zero scheme) and freezes everything else;
    FT updates all parameters starting from the stage-1 values.
    """
    if mode not in STAGE_TWO_MODES:
        raise ConfigError(f"unknown stage-2 mode {mode!r}")
    loss = LossSpec("logit-adjusted", prob_vector(prior), alpha)
    model = stage1_model.copy()
    trainable = None
    if mode == "CL":
        if isinstance(model, LinearSoftmaxModel):
            warnings.warn(
                "CL on a pure linear model degenerates to a full retrain",
                stacklevel=2,
            )
            model = init_linear(model.num_classes, model.dims)
        else:
            model.head = init_linear(model.num_classes, model.head.dims)
            trainable = [False, False, True, True]
    return train(model, ds, loss, cfg, trainable=trainable)


@dataclass(frozen=True)
class ModelProvenance:
    """How a saved model was produced; consumed by the adjustment pipeline."""

    stage: int = 1
    loss_kind: str = "plain-ce"
    prior: np.ndarray | None = None
    alpha: float = 1.0
    seed: tuple[int, int] = (0, 0)


def _arch_payload(model: Model) -> dict:
    if isinstance(model, LinearSoftmaxModel):
        return {"family": "linear", "classes": model.num_classes, "dims": model.dims}
    return {
        "family": "mlp",
        "classes": model.num_classes,
        "dims": model.dims,
        "hidden": model.hidden_weights.shape[0],
        "activation": model.activation,
    }


def save_model(model: Model, path, provenance: ModelProvenance | None = None) -> None:
    """Write the versioned model JSON; parameters round-trip bit-exactly."""
    provenance = provenance or ModelProvenance()
    if isinstance(model, LinearSoftmaxModel):
        params = {
            "weights": model.weights.tolist(),
            "biases": model.biases.tolist(),
        }
    else:
        params = {
            "hidden_weights": model.hidden_weights.tolist(),
            "hidden_biases": model.hidden_biases.tolist(),
            "head_weights": model.head.weights.tolist(),
            "head_biases": model.head.biases.tolist(),
        }
    payload = {
        "schema": MODEL_SCHEMA_VERSION,
        "arch": _arch_payload(model),
        "params": params,
        "provenance": {
            "stage": provenance.stage,
            "loss_kind": provenance.loss_kind,
            "prior": None
            if provenance.prior is None
            else [float(v) for v in provenance.prior],
            "alpha": provenance.alpha,
            "seed": list(provenance.seed),
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_model(path) -> tuple[Model, ModelProvenance]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a model file: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("schema") != MODEL_SCHEMA_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported schema {payload.get('schema')!r}, "
            f"expected {MODEL_SCHEMA_VERSION}"
        )
    try:
        arch = payload["arch"]
        params = payload["params"]
        if arch["family"] == "linear":
            model: Model = LinearSoftmaxModel(
                np.asarray(params["weights"]), np.asarray(params["biases"])
            )
        elif arch["family"] == "mlp":
            model = MlpModel(
                np.asarray(params["hidden_weights"]),
                np.asarray(params["hidden_biases"]),
                arch["activation"],
                LinearSoftmaxModel(
                    np.asarray(params["head_weights"]),
                    np.asarray(params["head_biases"]),
                ),
            )
        else:
            raise ModelFormatError(f"{path}: unknown family {arch['family']!r}")
        prov = payload["provenance"]
        provenance = ModelProvenance(
            stage=int(prov["stage"]),
            loss_kind=str(prov["loss_kind"]),
            prior=None if prov["prior"] is None else np.asarray(prov["prior"]),
            alpha=float(prov["alpha"]),
            seed=tuple(int(v) for v in prov["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed model file: {exc}") from exc
    return model, provenance
