"""Command-line surface: data generation, two-stage training, prior
estimation, post-hoc adjustment, evaluation, alpha sweeps, the seeded
multi-trial toy experiment, shifted-prior evaluation, and external logit
ingestion. Every run directory gets a manifest recording the resolved
configuration, seeds, and input digests so numeric outputs replay exactly.

Exit codes: 0 success, 2 usage/config error, 3 data/parse error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, adjust, evaluation, prior
from .dataset import (
    GaussianMixtureSpec,
    LongTailProfile,
    ShiftSpec,
    empirical_prior,
    load_counts,
    load_dataset,
    make_longtail_counts,
    make_shifted_counts,
    sample_dataset,
    save_counts,
    save_dataset,
)
from .errors import DataError, ParseError, TailcalError, UsageError
from .model import (
    LossSpec,
    ModelProvenance,
    TrainConfig,
    init_linear,
    init_mlp,
    load_model,
    predict_logits,
    save_model,
    stage2_retrain,
    train,
)
from .numerics import RngStream, prob_vector, softmax_rows
from .oracle import bayes_classify, boundary_offset, toy_mixture

DEFAULT_SEED = 20260808
SEED_ENV_VAR = "TAILCAL_SEED"

# Toy training defaults: full-batch gradient descent stopped well before
# convergence. The early stop is what leaves a measurable gap between the
# prior the model absorbed and the raw count frequencies.
TOY_LEARNING_RATE = 5.0
TOY_ITERATIONS = 100
TOY_SCHEDULE = "constant"


def _notice(msg: str) -> None:
    print(f"notice: {msg}", file=sys.stderr)


def _master_seed(value) -> int:
    if value is not None:
        return int(value)
    return int(os.environ.get(SEED_ENV_VAR, DEFAULT_SEED))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:8]


def _run_dir(explicit, config: dict) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        path = Path("runs") / f"{stamp}-{_config_digest(config)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(
    out_dir: Path,
    command: str,
    argv: list[str],
    config: dict,
    inputs: list[str],
    outputs: list[str],
    started: float,
) -> None:
    manifest = {
        "schema": 1,
        "tool": f"tailcal {__version__}",
        "command": command,
        "argv": list(argv),
        "config": config,
        "inputs": {p: _sha256(Path(p)) for p in inputs},
        "outputs": sorted(outputs),
        "wall_clock_s": time.time() - started,
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return payload


def _resolve(config: dict, flags: dict, defaults: dict) -> dict:
    """Flags beat the config file, which beats defaults."""
    out = dict(defaults)
    out.update({k: v for k, v in config.items() if k in defaults})
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _parse_prior_arg(text, num_classes: int) -> np.ndarray:
    """--target-prior accepts 'uniform', a JSON list, or a counts file path."""
    if text is None or text == "uniform":
        return np.full(num_classes, 1.0 / num_classes)
    if isinstance(text, str) and text.strip().startswith("["):
        values = np.asarray(json.loads(text), dtype=np.float64)
        return prob_vector(values / values.sum())
    counts = load_counts(text)
    return empirical_prior(counts)


def _parse_grid(text) -> list[float]:
    if text is None:
        return list(prior.DEFAULT_ALPHA_GRID)
    values = [float(v) for v in str(text).split(",") if v.strip()]
    if not values:
        raise UsageError("empty alpha grid")
    return values


# ---------------------------------------------------------------------------
# logit dumps: header id,logit_0,...,logit_{C-1},label


def save_logit_dump(ids, logits, labels, path) -> None:
    logits = np.asarray(logits, dtype=np.float64)
    c = logits.shape[1]
    header = "id," + ",".join(f"logit_{j}" for j in range(c)) + ",label"
    lines = [header]
    for i, row, label in zip(ids, logits, labels):
        lines.append(f"{i}," + ",".join(repr(float(v)) for v in row) + f",{int(label)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_logit_dump(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}: no header")
    header = lines[0].split(",")
    if header[0] != "id" or header[-1] != "label" or len(header) < 4:
        raise ParseError(
            f"{path}: line 1: expected header 'id,logit_0,...,label', got {lines[0]!r}"
        )
    c = len(header) - 2
    ids: list[str] = []
    logits = []
    labels = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != c + 2:
            raise ParseError(
                f"{path}: line {lineno}: expected {c + 2} columns, got {len(parts)}"
            )
        try:
            logits.append([float(v) for v in parts[1:-1]])
            labels.append(int(parts[-1]))
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
        ids.append(parts[0])
    if not ids:
        raise ParseError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= c:
        bad = int(np.argmax((labels < 0) | (labels >= c)))
        raise ParseError(f"{path}: line {bad + 2}: label {labels[bad]} out of range")
    return ids, np.asarray(logits, dtype=np.float64), labels


# ---------------------------------------------------------------------------
# shared model helpers


def _train_side_posteriors(model, provenance: ModelProvenance, features) -> np.ndarray:
    """Posteriors as seen by the training loss.

    For a logit-adjusted model the train-time shift is re-applied from the
    provenance; for plain CE models these are just the raw posteriors.
    """
    logits = predict_logits(model, features)
    if provenance.loss_kind == "logit-adjusted":
        if provenance.prior is None:
            raise UsageError("logit-adjusted provenance lacks its training prior")
        logits = logits + provenance.alpha * np.log(np.asarray(provenance.prior))
    return softmax_rows(logits)


def _raw_posteriors(model, features) -> np.ndarray:
    return softmax_rows(predict_logits(model, features))


# ---------------------------------------------------------------------------
# gen-data


def _default_means(classes: int, dims: int) -> np.ndarray:
    if classes == 2:
        means = np.zeros((2, dims))
        means[0, 0], means[1, 0] = -1.0, 1.0
        return means
    if dims < 2:
        raise UsageError("default means for >2 classes need at least 2 dims")
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.zeros((classes, dims))
    means[:, 0] = 2.0 * np.cos(angles)
    means[:, 1] = 2.0 * np.sin(angles)
    return means


GEN_DEFAULTS = {
    "classes": 2,
    "dims": 2,
    "means": None,
    "sigmas": None,
    "profile": "exponential",
    "max_count": 9901,
    "imbalance": 100.0,
    "counts": None,
    "val_per_class": 1000,
    "test_per_class": 5000,
    "shift_direction": "uniform",
    "shift_ratio": 1.0,
    "seed": None,
}


def cmd_gen_data(args, argv) -> int:
    started = time.time()
    cfg = _resolve(
        _load_json_config(args.config),
        {
            "classes": args.classes,
            "dims": args.dims,
            "profile": args.profile,
            "max_count": args.max_count,
            "imbalance": args.imbalance,
            "counts": None if args.counts is None else [int(v) for v in args.counts.split(",")],
            "val_per_class": args.val_per_class,
            "test_per_class": args.test_per_class,
            "shift_direction": args.shift_direction,
            "shift_ratio": args.shift_ratio,
            "seed": args.seed,
        },
        GEN_DEFAULTS,
    )
    cfg["seed"] = _master_seed(cfg["seed"])
    classes, dims = int(cfg["classes"]), int(cfg["dims"])
    means = (
        _default_means(classes, dims)
        if cfg["means"] is None
        else np.asarray(cfg["means"], dtype=np.float64)
    )
    sigmas = (
        np.ones(classes) if cfg["sigmas"] is None else np.asarray(cfg["sigmas"], dtype=np.float64)
    )
    gmm = GaussianMixtureSpec(means, sigmas)
    if cfg["counts"] is not None:
        profile = LongTailProfile(classes, kind="explicit", counts=tuple(cfg["counts"]))
    else:
        profile = LongTailProfile(
            classes,
            max_count=int(cfg["max_count"]),
            imbalance_factor=float(cfg["imbalance"]),
            kind=cfg["profile"],
        )
    train_counts = make_longtail_counts(profile)
    shift = ShiftSpec(cfg["shift_direction"], float(cfg["shift_ratio"]))
    base_test = np.full(classes, int(cfg["test_per_class"]))
    test_counts = make_shifted_counts(base_test, shift)
    val_counts = np.full(classes, int(cfg["val_per_class"]))

    master = RngStream(cfg["seed"])
    ds_train = sample_dataset(gmm, train_counts, master.child(0))
    ds_val = sample_dataset(gmm, val_counts, master.child(1))
    ds_test = sample_dataset(gmm, test_counts, master.child(2))

    out = _run_dir(args.out, cfg)
    outputs = []
    for name, ds in (("train", ds_train), ("val", ds_val), ("test", ds_test)):
        path = out / f"{name}.csv"
        save_dataset(ds, path)
        outputs.append(str(path))
    counts_path = out / "counts.json"
    save_counts(train_counts, counts_path)
    outputs.append(str(counts_path))

    print(f"{'class':>6} {'train':>8} {'val':>8} {'test':>8}")
    for i in range(classes):
        print(f"{i:>6} {train_counts[i]:>8} {val_counts[i]:>8} {test_counts[i]:>8}")
    write_manifest(out, "gen-data", argv, cfg, [], outputs, started)
    return 0


# ---------------------------------------------------------------------------
# train


TRAIN_DEFAULTS = {
    "stage": 1,
    "mode": "FT",
    "loss": "ce",
    "alpha": 1.0,
    "lr": TOY_LEARNING_RATE,
    "iterations": TOY_ITERATIONS,
    "batch_size": None,  # full batch
    "schedule": TOY_SCHEDULE,
    "arch": "linear",
    "hidden": 16,
    "activation": "relu",
    "seed": None,
}


def cmd_train(args, argv) -> int:
    started = time.time()
    cfg = _resolve(
        _load_json_config(args.config),
        {
            "stage": args.stage,
            "mode": args.mode,
            "loss": args.loss,
            "alpha": args.alpha,
            "lr": args.lr,
            "iterations": args.iterations,
            "batch_size": args.batch_size,
            "schedule": args.schedule,
            "arch": args.arch,
            "hidden": args.hidden,
            "activation": args.activation,
            "seed": args.seed,
        },
        TRAIN_DEFAULTS,
    )
    cfg["seed"] = _master_seed(cfg["seed"])
    cfg["data"] = args.data
    inputs = [args.data]
    ds = load_dataset(args.data)
    seed = RngStream(cfg["seed"])
    batch = int(cfg["batch_size"]) if cfg["batch_size"] else ds.n
    train_cfg = TrainConfig(
        learning_rate=float(cfg["lr"]),
        iterations=int(cfg["iterations"]),
        batch_size=batch,
        seed=seed.child(1),
        schedule=cfg["schedule"],
    )
    freq = empirical_prior(ds.counts)

    stage = int(cfg["stage"])
    if stage == 2:
        if args.init is None:
            raise UsageError("stage-2 training needs --init with the stage-1 model")
        inputs.append(args.init)
        init_model, _ = load_model(args.init)
        result = stage2_retrain(
            init_model, ds, cfg["mode"], train_cfg, freq, float(cfg["alpha"])
        )
        provenance = ModelProvenance(
            stage=2,
            loss_kind="logit-adjusted",
            prior=freq,
            alpha=float(cfg["alpha"]),
            seed=(train_cfg.seed.seed, train_cfg.seed.stream_id),
        )
    else:
        if cfg["arch"] == "mlp":
            model0 = init_mlp(
                ds.num_classes, ds.dims, int(cfg["hidden"]), cfg["activation"], seed.child(0)
            )
        else:
            model0 = init_linear(ds.num_classes, ds.dims)
        if cfg["loss"] == "la":
            loss = LossSpec("logit-adjusted", freq, float(cfg["alpha"]))
            loss_kind = "logit-adjusted"
        else:
            loss = LossSpec()
            loss_kind = "plain-ce"
        result = train(model0, ds, loss, train_cfg)
        provenance = ModelProvenance(
            stage=1,
            loss_kind=loss_kind,
            prior=freq if loss_kind == "logit-adjusted" else None,
            alpha=float(cfg["alpha"]) if loss_kind == "logit-adjusted" else 1.0,
            seed=(train_cfg.seed.seed, train_cfg.seed.stream_id),
        )

    out = _run_dir(args.out, cfg)
    model_path = out / "model.json"
    save_model(result.model, model_path, provenance)
    trace_path = out / "loss_trace.json"
    trace_path.write_text(json.dumps({"epoch_mean_loss": result.loss_trace}) + "\n")
    print(f"trained stage-{stage} model -> {model_path}")
    if result.loss_trace:
        print(f"final epoch mean loss: {result.loss_trace[-1]:.6f}")
    write_manifest(
        out, "train", argv, cfg, inputs, [str(model_path), str(trace_path)], started
    )
    return 0


# ---------------------------------------------------------------------------
# estimate-prior


def cmd_estimate_prior(args, argv) -> int:
    started = time.time()
    model, provenance = load_model(args.model)
    inputs = [args.model, args.data]
    ds = load_dataset(args.data, num_classes=model.num_classes)
    target = _parse_prior_arg(args.target_prior, model.num_classes)
    if args.target_prior is None and args.estimator in ("train-reweighted", "averaged"):
        _notice("no --target-prior given; defaulting to uniform")

    estimator = args.estimator
    if estimator == "train":
        estimate = prior.effective_prior_train(
            _train_side_posteriors(model, provenance, ds.features)
        )
        freq = empirical_prior(ds.counts)
    elif estimator == "val":
        estimate = prior.pmbar_from_val(_raw_posteriors(model, ds.features))
        freq = empirical_prior(ds.counts)
    elif estimator == "train-reweighted":
        freq = empirical_prior(ds.counts)
        estimate = prior.pmbar_from_train(
            _train_side_posteriors(model, provenance, ds.features), target, freq
        )
    elif estimator == "averaged":
        if args.train_data is None:
            raise UsageError("--estimator averaged needs --train-data plus --data (val)")
        inputs.append(args.train_data)
        ds_train = load_dataset(args.train_data, num_classes=model.num_classes)
        freq = empirical_prior(ds_train.counts)
        est_val = prior.pmbar_from_val(_raw_posteriors(model, ds.features))
        est_train = prior.pmbar_from_train(
            _train_side_posteriors(model, provenance, ds_train.features), target, freq
        )
        estimate = prior.average_estimates(est_val, est_train)
    else:
        raise UsageError(f"unknown estimator {estimator!r}")

    out = _run_dir(args.out, {"estimator": estimator, "model": args.model})
    prior_path = out / "prior.json"
    prior.save_prior(estimate, prior_path)
    print(f"{'class':>6} {'frequency':>12} {'effective':>12}")
    for i, (f, e) in enumerate(zip(freq, estimate.probs)):
        print(f"{i:>6} {f:>12.6f} {e:>12.6f}")
    print(f"estimator: {estimate.estimator}  samples: {estimate.samples}")
    write_manifest(
        out,
        "estimate-prior",
        argv,
        {"estimator": estimator, "target_prior": [float(v) for v in target]},
        inputs,
        [str(prior_path)],
        started,
    )
    return 0


# ---------------------------------------------------------------------------
# adjust


def _resolve_alpha(args) -> float | None:
    """--alpha wins over --alpha-from-sweep; None means the prior's own."""
    if args.alpha is not None and args.alpha_from_sweep is not None:
        raise UsageError("give either --alpha or --alpha-from-sweep, not both")
    if args.alpha_from_sweep is not None:
        try:
            payload = json.loads(Path(args.alpha_from_sweep).read_text())
            return float(payload["alpha"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(
                f"{args.alpha_from_sweep}: not a sweep result: {exc}"
            ) from exc
    return None if args.alpha is None else float(args.alpha)


def _adjustment_from_args(args, num_classes: int) -> adjust.AdjustmentSpec:
    target = _parse_prior_arg(args.target_prior, num_classes)
    if args.target_prior is None and args.method != "none":
        _notice("no --target-prior given; defaulting to uniform")
    if args.method == "none":
        return adjust.no_adjustment()
    alpha = _resolve_alpha(args)
    if args.method == "class-frequency":
        if args.counts is None:
            raise UsageError("--method class-frequency needs --counts")
        counts = load_counts(args.counts)
        return adjust.class_frequency_spec(counts, target, 1.0 if alpha is None else alpha)
    if args.prior is None:
        raise UsageError(f"--method {args.method} needs --prior")
    estimate = prior.load_prior(args.prior)
    return adjust.spec_from_estimate(args.method, estimate, target, alpha)


def cmd_adjust(args, argv) -> int:
    started = time.time()
    inputs = []
    if args.logits:
        inputs.append(args.logits)
        ids, logits, labels = load_logit_dump(args.logits)
    elif args.model and args.data:
        inputs += [args.model, args.data]
        model, _ = load_model(args.model)
        ds = load_dataset(args.data, num_classes=model.num_classes)
        logits = predict_logits(model, ds.features)
        ids = [str(i) for i in range(ds.n)]
        labels = ds.labels
    else:
        raise UsageError("adjust needs --logits, or --model with --data")
    if args.prior:
        inputs.append(args.prior)
    if args.counts:
        inputs.append(args.counts)
    spec = _adjustment_from_args(args, logits.shape[1])
    adjusted = adjust.adjust_logits(logits, spec)

    out = _run_dir(args.out, {"method": args.method})
    dump_path = out / "adjusted_logits.csv"
    save_logit_dump(ids, adjusted, labels, dump_path)
    spec_path = out / "adjustment.json"
    adjust.save_spec(spec, spec_path)
    acc_before = evaluation.top1_accuracy(np.argmax(logits, axis=1), labels)
    acc_after = evaluation.top1_accuracy(np.argmax(adjusted, axis=1), labels)
    print(f"top-1 before adjustment: {acc_before:.4f}")
    print(f"top-1 after adjustment:  {acc_after:.4f}")
    write_manifest(
        out,
        "adjust",
        argv,
        {"method": args.method, "spec": spec.to_json()},
        inputs,
        [str(dump_path), str(spec_path)],
        started,
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args, argv) -> int:
    started = time.time()
    inputs = []
    if args.logits:
        inputs.append(args.logits)
        _, logits, labels = load_logit_dump(args.logits)
        provenance = {"logits": args.logits}
    elif args.model and args.data:
        inputs += [args.model, args.data]
        model, _ = load_model(args.model)
        ds = load_dataset(args.data, num_classes=model.num_classes)
        logits = predict_logits(model, ds.features)
        labels = ds.labels
        provenance = {"model": args.model, "data": args.data}
    else:
        raise UsageError("eval needs --logits, or --model with --data")
    num_classes = logits.shape[1]
    target = _parse_prior_arg(args.target_prior, num_classes)
    thresholds = evaluation.GroupThresholds()
    if args.groups:
        many, few = (int(v) for v in args.groups.split(","))
        thresholds = evaluation.GroupThresholds(many, few)
    train_counts = load_counts(args.train_counts) if args.train_counts else None
    if args.train_counts:
        inputs.append(args.train_counts)
    report = evaluation.build_report(
        np.argmax(logits, axis=1),
        labels,
        softmax_rows(logits),
        target,
        train_counts=train_counts,
        thresholds=thresholds,
        provenance=provenance,
    )
    out = _run_dir(args.out, {"eval": provenance})
    outputs = []
    for fmt, name in (("json", "report.json"), ("csv", "report.csv"), ("table-text", "report.txt")):
        path = out / name
        evaluation.emit_report(report, fmt, path)
        outputs.append(str(path))
    print((out / "report.txt").read_text(), end="")
    write_manifest(out, "eval", argv, {"target_prior": [float(v) for v in target]}, inputs, outputs, started)
    return 0


# ---------------------------------------------------------------------------
# toy-experiment


@dataclass(frozen=True)
class ToyConfig:
    trials: int = 100
    samples: int = 10000
    imbalance: float = 100.0
    test_samples: int = 10000
    alpha: float = 1.0
    learning_rate: float = TOY_LEARNING_RATE
    iterations: int = TOY_ITERATIONS
    batch_size: int | None = None  # full batch
    schedule: str = TOY_SCHEDULE
    seed: int = DEFAULT_SEED

    def train_counts(self) -> np.ndarray:
        tail = int(round(self.samples / (self.imbalance + 1.0)))
        if tail < 1:
            raise UsageError("imbalance too large for the sample budget")
        return np.array([self.samples - tail, tail], dtype=np.int64)

    def test_counts(self) -> np.ndarray:
        half = self.test_samples // 2
        return np.array([half, self.test_samples - half], dtype=np.int64)


TOY_VARIANTS = ("ce", "class-freq", "p2p")


def run_toy_trial(cfg: ToyConfig, trial: int) -> dict:
    """One seeded trial: sample, train CE, correct three ways, score all."""
    gmm = toy_mixture()
    base = RngStream(cfg.seed).child(trial)
    ds_train = sample_dataset(gmm, cfg.train_counts(), base.child(0))
    ds_test = sample_dataset(gmm, cfg.test_counts(), base.child(1))
    train_cfg = TrainConfig(
        learning_rate=cfg.learning_rate,
        iterations=cfg.iterations,
        batch_size=cfg.batch_size or ds_train.n,
        seed=base.child(2),
        schedule=cfg.schedule,
    )
    model = train(init_linear(2, 2), ds_train, LossSpec(), train_cfg).model
    uniform = np.full(2, 0.5)
    freq = empirical_prior(ds_train.counts)
    effective = prior.effective_prior_train(_raw_posteriors(model, ds_train.features))
    specs = {
        "ce": adjust.no_adjustment(),
        "class-freq": adjust.class_frequency_spec(freq, uniform, cfg.alpha),
        "p2p": adjust.spec_from_estimate("p2p-ce", effective, uniform, cfg.alpha),
    }
    logits_test = predict_logits(model, ds_test.features)
    result = {
        "trial": trial,
        "freq_prior": freq,
        "effective_prior": effective.probs,
        "variants": {},
    }
    for name, spec in specs.items():
        z = adjust.adjust_logits(logits_test, spec)
        confusion = evaluation.confusion_matrix(np.argmax(z, axis=1), ds_test.labels, 2)
        achieved = adjust.achieved_prior(softmax_rows(z))
        l1, _ = evaluation.prior_mismatch(achieved, uniform)
        offset = boundary_offset(adjust.apply_to_linear_model(model, spec), gmm, uniform)
        result["variants"][name] = {
            "balanced": evaluation.balanced_accuracy(confusion),
            "offset": offset,
            "prior_l1": l1,
        }
    bayes_pred = bayes_classify(gmm, uniform, ds_test.features)
    confusion = evaluation.confusion_matrix(bayes_pred, ds_test.labels, 2)
    result["bayes_balanced"] = evaluation.balanced_accuracy(confusion)
    result["models"] = {
        name: adjust.apply_to_linear_model(model, spec) for name, spec in specs.items()
    }
    return result


def toy_experiment(cfg: ToyConfig, workers: int = 1) -> dict:
    """Run all trials (optionally across workers) and aggregate in trial order.

    Per-trial streams are independent, so the aggregate is invariant to the
    worker count.
    """
    if cfg.trials < 1:
        raise UsageError("need at least one trial")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(lambda t: run_toy_trial(cfg, t), range(cfg.trials)))
    else:
        trials = [run_toy_trial(cfg, t) for t in range(cfg.trials)]
    trials.sort(key=lambda r: r["trial"])

    summary: dict = {"trials": cfg.trials, "variants": {}, "config": {
        "samples": cfg.samples, "imbalance": cfg.imbalance,
        "test_samples": cfg.test_samples, "alpha": cfg.alpha,
        "learning_rate": cfg.learning_rate, "iterations": cfg.iterations,
        "batch_size": cfg.batch_size, "schedule": cfg.schedule, "seed": cfg.seed,
    }}
    for name in TOY_VARIANTS:
        bal = np.array([t["variants"][name]["balanced"] for t in trials])
        off = np.array([abs(t["variants"][name]["offset"]) for t in trials])
        l1 = np.array([t["variants"][name]["prior_l1"] for t in trials])
        summary["variants"][name] = {
            "balanced_mean": float(bal.mean()),
            "balanced_std": float(bal.std()),
            "offset_abs_mean": float(off.mean()),
            "offset_abs_std": float(off.std()),
            "prior_l1_mean": float(l1.mean()),
        }
    bayes = np.array([t["bayes_balanced"] for t in trials])
    summary["bayes"] = {"balanced_mean": float(bayes.mean()), "balanced_std": float(bayes.std())}
    head_exceeds = sum(
        1
        for t in trials
        if t["effective_prior"][0] > t["freq_prior"][0]
        and t["effective_prior"][1] < t["freq_prior"][1]
    )
    summary["effective_prior"] = {
        "head_exceeds_frequency_trials": head_exceeds,
        "trials": cfg.trials,
    }
    v = summary["variants"]
    summary["orderings"] = {
        "balanced_ce_lt_classfreq_le_p2p": bool(
            v["ce"]["balanced_mean"] < v["class-freq"]["balanced_mean"]
            and v["class-freq"]["balanced_mean"] <= v["p2p"]["balanced_mean"]
        ),
        "offset_p2p_lt_classfreq_lt_ce": bool(
            v["p2p"]["offset_abs_mean"] < v["class-freq"]["offset_abs_mean"]
            and v["class-freq"]["offset_abs_mean"] < v["ce"]["offset_abs_mean"]
        ),
        "p2p_within_1pt_of_bayes": bool(
            summary["bayes"]["balanced_mean"] - v["p2p"]["balanced_mean"] <= 0.01
        ),
    }
    summary["_trial0"] = trials[0]
    return summary


def cmd_toy_experiment(args, argv) -> int:
    started = time.time()
    cfg = ToyConfig(
        trials=args.trials,
        samples=args.samples,
        imbalance=args.imbalance,
        test_samples=args.test_samples,
        alpha=args.alpha,
        learning_rate=args.lr if args.lr is not None else TOY_LEARNING_RATE,
        iterations=args.iterations if args.iterations is not None else TOY_ITERATIONS,
        batch_size=args.batch_size,
        schedule=args.schedule or TOY_SCHEDULE,
        seed=_master_seed(args.seed),
    )
    summary = toy_experiment(cfg, workers=args.workers)
    trial0 = summary.pop("_trial0")

    out = _run_dir(args.out, summary["config"])
    outputs = []
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=1) + "\n")
    outputs.append(str(summary_path))

    csv_lines = ["variant,balanced_mean,balanced_std,offset_abs_mean,offset_abs_std,prior_l1_mean"]
    for name in TOY_VARIANTS:
        s = summary["variants"][name]
        csv_lines.append(
            f"{name},{s['balanced_mean']!r},{s['balanced_std']!r},"
            f"{s['offset_abs_mean']!r},{s['offset_abs_std']!r},{s['prior_l1_mean']!r}"
        )
    b = summary["bayes"]
    csv_lines.append(f"bayes,{b['balanced_mean']!r},{b['balanced_std']!r},,,")
    csv_path = out / "summary.csv"
    csv_path.write_text("\n".join(csv_lines) + "\n")
    outputs.append(str(csv_path))

    boundary_path = out / "boundary_trial0.csv"
    evaluation.export_boundary_data(
        [(name, trial0["models"][name]) for name in TOY_VARIANTS],
        toy_mixture(),
        np.full(2, 0.5),
        boundary_path,
    )
    outputs.append(str(boundary_path))
    bars_path = out / "prior_bars_trial0.csv"
    evaluation.export_prior_bars(
        trial0["freq_prior"], trial0["effective_prior"], cfg.train_counts(), bars_path
    )
    outputs.append(str(bars_path))

    # a singleton run has no spread to report
    std_of = (
        (lambda s: f"{s:8.4f}") if cfg.trials > 1 else (lambda s: f"{'-':>8}")
    )
    print(f"{'variant':>12} {'balanced':>10} {'+-std':>8} {'|offset|':>10} {'prior L1':>10}")
    for name in TOY_VARIANTS:
        s = summary["variants"][name]
        print(
            f"{name:>12} {s['balanced_mean']:>10.4f} {std_of(s['balanced_std'])} "
            f"{s['offset_abs_mean']:>10.4f} {s['prior_l1_mean']:>10.4f}"
        )
    print(f"{'bayes':>12} {summary['bayes']['balanced_mean']:>10.4f} {std_of(summary['bayes']['balanced_std'])}")
    o = summary["orderings"]
    print(f"balanced ordering ce < class-freq <= p2p: {'PASS' if o['balanced_ce_lt_classfreq_le_p2p'] else 'FAIL'}")
    print(f"offset ordering p2p < class-freq < ce: {'PASS' if o['offset_p2p_lt_classfreq_lt_ce'] else 'FAIL'}")
    print(f"p2p within 1 point of bayes: {'PASS' if o['p2p_within_1pt_of_bayes'] else 'FAIL'}")
    e = summary["effective_prior"]
    print(f"effective head prior exceeds frequency in {e['head_exceeds_frequency_trials']}/{e['trials']} trials")
    write_manifest(out, "toy-experiment", argv, summary["config"], [], outputs, started)
    return 0


# ---------------------------------------------------------------------------
# shift-eval


def shift_eval_rows(
    model,
    provenance: ModelProvenance,
    train_counts,
    train_side_estimate,
    directions,
    ratios,
    test_samples: int,
    trials: int,
    master: RngStream,
    alpha: float = 1.0,
) -> list[dict]:
    """Accuracy of raw vs matched-target correction under label shifts.

    ``train_side_estimate`` is the effective prior measured on the training
    data (train-side kind); logit-adjusted models get it reweighted toward
    each shift's target. Every (direction, ratio) cell resamples the test set
    ``trials`` times; the uniform cell uses the same machinery with ratio 1,
    so it reproduces a plain balanced evaluation exactly.
    """
    gmm = toy_mixture()
    freq = empirical_prior(train_counts)
    base_counts = np.full(2, test_samples // 2)
    shifts = [("uniform", 1.0)] + [(d, r) for d in directions for r in ratios]
    rows = []
    for shift_index, (direction, ratio) in enumerate(shifts):
        accs_raw, accs_adj = [], []
        for t in range(trials):
            stream = master.child(shift_index * 1009 + t)
            counts = make_shifted_counts(base_counts, ShiftSpec(direction, ratio))
            ds = sample_dataset(gmm, counts, stream)
            target = empirical_prior(counts)
            if provenance.loss_kind == "logit-adjusted":
                estimate = prior.reweight_estimate(train_side_estimate, target, freq)
                spec = adjust.spec_from_estimate("p2p-la", estimate, target, alpha)
            else:
                spec = adjust.spec_from_estimate(
                    "p2p-ce", train_side_estimate, target, alpha
                )
            z = predict_logits(model, ds.features)
            accs_raw.append(evaluation.top1_accuracy(np.argmax(z, axis=1), ds.labels))
            z_adj = adjust.adjust_logits(z, spec)
            accs_adj.append(evaluation.top1_accuracy(np.argmax(z_adj, axis=1), ds.labels))
        rows.append(
            {
                "direction": direction,
                "ratio": ratio,
                "unadjusted_mean": float(np.mean(accs_raw)),
                "adjusted_mean": float(np.mean(accs_adj)),
            }
        )
    return rows


def cmd_shift_eval(args, argv) -> int:
    started = time.time()
    model, provenance = load_model(args.model)
    ds_train = load_dataset(args.train_data, num_classes=model.num_classes)
    estimate = prior.effective_prior_train(
        _train_side_posteriors(model, provenance, ds_train.features)
    )
    ratios = [float(v) for v in args.ratios.split(",") if v.strip()]
    if any(r < 1 for r in ratios):
        raise UsageError("shift ratios must be >= 1")
    directions = [d.strip() for d in args.directions.split(",") if d.strip()]
    rows = shift_eval_rows(
        model,
        provenance,
        ds_train.counts,
        estimate,
        directions,
        ratios,
        args.test_samples,
        args.trials,
        RngStream(_master_seed(args.seed)),
        alpha=args.alpha,
    )
    out = _run_dir(args.out, {"ratios": ratios, "directions": directions})
    lines = ["direction,ratio,unadjusted_mean,adjusted_mean"]
    print(f"{'shift':>14} {'unadjusted':>12} {'adjusted':>12}")
    for row in rows:
        lines.append(
            f"{row['direction']},{row['ratio']!r},"
            f"{row['unadjusted_mean']!r},{row['adjusted_mean']!r}"
        )
        label = f"{row['direction']}@{row['ratio']:g}"
        print(f"{label:>14} {row['unadjusted_mean']:>12.4f} {row['adjusted_mean']:>12.4f}")
    table_path = out / "shift_eval.csv"
    table_path.write_text("\n".join(lines) + "\n")
    write_manifest(
        out,
        "shift-eval",
        argv,
        {"ratios": ratios, "directions": directions, "trials": args.trials},
        [args.model, args.train_data],
        [str(table_path)],
        started,
    )
    return 0


# ---------------------------------------------------------------------------
# ingest-logits


def ingest_logits(
    ids,
    logits: np.ndarray,
    labels: np.ndarray,
    val_frac: float,
    master: RngStream,
    target_prior: np.ndarray,
    grid,
    train_dump: tuple[np.ndarray, np.ndarray] | None = None,
    train_counts=None,
) -> dict:
    """Estimate the residual prior of an external dump, tune alpha on a
    held-out split, and adjust the remaining rows."""
    n, c = logits.shape
    if not 0.0 < val_frac < 1.0:
        raise UsageError(f"val fraction must be in (0, 1), got {val_frac}")
    n_val = max(1, int(round(n * val_frac)))
    if n_val >= n:
        raise UsageError("holdout split leaves no rows to adjust")
    perm = master.generator().permutation(n)
    val_idx, rest_idx = perm[:n_val], perm[n_val:]

    estimate = prior.pmbar_from_val(softmax_rows(logits[val_idx]))
    if train_dump is not None:
        if train_counts is None:
            raise UsageError("train-side dump needs --counts metadata")
        counts = np.asarray(train_counts, dtype=np.int64)
        if counts.shape[0] != c:
            raise ParseError(
                f"counts metadata lists {counts.shape[0]} classes, dump has {c}"
            )
        train_logits, _ = train_dump
        if train_logits.shape[1] != c:
            raise ParseError(
                f"train dump has {train_logits.shape[1]} classes, eval dump has {c}"
            )
        est_train = prior.pmbar_from_train(
            softmax_rows(train_logits), target_prior, empirical_prior(counts)
        )
        estimate = prior.average_estimates(estimate, est_train)

    alpha, curve = prior.tune_alpha_on_logits(
        logits[val_idx], labels[val_idx], "p2p-la", estimate, grid, target_prior
    )
    spec = adjust.spec_from_estimate("p2p-la", estimate, target_prior, alpha)
    adjusted = adjust.adjust_logits(logits[rest_idx], spec)
    before = evaluation.top1_accuracy(np.argmax(logits[rest_idx], axis=1), labels[rest_idx])
    after = evaluation.top1_accuracy(np.argmax(adjusted, axis=1), labels[rest_idx])
    return {
        "estimate": estimate.with_alpha(alpha),
        "spec": spec,
        "alpha": alpha,
        "curve": curve,
        "val_size": int(n_val),
        "rest_ids": [ids[i] for i in rest_idx],
        "rest_labels": labels[rest_idx],
        "adjusted_logits": adjusted,
        "top1_before": before,
        "top1_after": after,
    }


def cmd_ingest_logits(args, argv) -> int:
    started = time.time()
    ids, logits, labels = load_logit_dump(args.logits)
    inputs = [args.logits]
    target = _parse_prior_arg(args.target_prior, logits.shape[1])
    if args.target_prior is None:
        _notice("no --target-prior given; defaulting to uniform")
    train_dump = None
    train_counts = None
    if args.train_logits:
        inputs.append(args.train_logits)
        _, train_logits, train_labels = load_logit_dump(args.train_logits)
        train_dump = (train_logits, train_labels)
        if args.counts is None:
            raise UsageError("--train-logits needs --counts metadata")
        train_counts = load_counts(args.counts)
        inputs.append(args.counts)
    result = ingest_logits(
        ids,
        logits,
        labels,
        args.split,
        RngStream(_master_seed(args.seed)).child(17),
        target,
        _parse_grid(args.grid),
        train_dump=train_dump,
        train_counts=train_counts,
    )
    out = _run_dir(args.out, {"split": args.split})
    prior_path = out / "prior.json"
    prior.save_prior(result["estimate"], prior_path)
    dump_path = out / "adjusted_logits.csv"
    save_logit_dump(result["rest_ids"], result["adjusted_logits"], result["rest_labels"], dump_path)
    report = {
        "val_size": result["val_size"],
        "alpha": result["alpha"],
        "top1_before": result["top1_before"],
        "top1_after": result["top1_after"],
        "delta": result["top1_after"] - result["top1_before"],
        "alpha_curve": result["curve"],
    }
    report_path = out / "ingest_report.json"
    report_path.write_text(json.dumps(report, indent=1) + "\n")
    print(f"holdout split: {result['val_size']} rows; tuned alpha = {result['alpha']:g}")
    print(f"top-1 before: {result['top1_before']:.4f}  after: {result['top1_after']:.4f}  "
          f"delta: {report['delta']:+.4f}")
    write_manifest(
        out,
        "ingest-logits",
        argv,
        {"split": args.split, "alpha": result["alpha"]},
        inputs,
        [str(prior_path), str(dump_path), str(report_path)],
        started,
    )
    return 0


# ---------------------------------------------------------------------------
# sweep-alpha


def cmd_sweep_alpha(args, argv) -> int:
    started = time.time()
    inputs = [args.prior]
    estimate = prior.load_prior(args.prior)
    if args.logits:
        inputs.append(args.logits)
        _, logits, labels = load_logit_dump(args.logits)
    elif args.model and args.data:
        inputs += [args.model, args.data]
        model, _ = load_model(args.model)
        ds = load_dataset(args.data, num_classes=model.num_classes)
        logits = predict_logits(model, ds.features)
        labels = ds.labels
    else:
        raise UsageError("sweep-alpha needs --logits, or --model with --data")
    target = _parse_prior_arg(args.target_prior, logits.shape[1])
    alpha, curve = prior.tune_alpha_on_logits(
        logits, labels, args.method, estimate, _parse_grid(args.grid), target
    )
    out = _run_dir(args.out, {"method": args.method})
    curve_path = out / "alpha_curve.csv"
    curve_path.write_text(
        "\n".join(["alpha,holdout_accuracy"] + [f"{a!r},{acc!r}" for a, acc in curve]) + "\n"
    )
    chosen_path = out / "chosen_alpha.json"
    chosen_path.write_text(json.dumps({"alpha": alpha}) + "\n")
    for a, acc in curve:
        print(f"alpha={a:g}: accuracy={acc:.4f}")
    print(f"chosen alpha: {alpha:g}")
    write_manifest(
        out,
        "sweep-alpha",
        argv,
        {"method": args.method},
        inputs,
        [str(curve_path), str(chosen_path)],
        started,
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailcal",
        description="Measure and remove the class prior a classifier absorbed "
        "from long-tailed training data.",
    )
    parser.add_argument("--version", action="version", version=f"tailcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize long-tailed Gaussian-mixture datasets")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--dims", type=int)
    p.add_argument("--profile", choices=("exponential", "step", "explicit"))
    p.add_argument("--max-count", type=int, dest="max_count")
    p.add_argument("--imbalance", type=float)
    p.add_argument("--counts", help="comma-separated explicit per-class counts")
    p.add_argument("--val-per-class", type=int, dest="val_per_class")
    p.add_argument("--test-per-class", type=int, dest="test_per_class")
    p.add_argument("--shift-direction", choices=("forward", "backward", "uniform"), dest="shift_direction")
    p.add_argument("--shift-ratio", type=float, dest="shift_ratio")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="stage-1 or stage-2 training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--mode", choices=("CL", "FT"))
    p.add_argument("--init", help="stage-1 model file for stage-2 runs")
    p.add_argument("--loss", choices=("ce", "la"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--schedule", choices=("constant", "cosine"))
    p.add_argument("--arch", choices=("linear", "mlp"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--activation", choices=("relu", "tanh"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate-prior", help="estimate the effective prior of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--estimator", required=True,
                   choices=("train", "val", "train-reweighted", "averaged"))
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--target-prior", dest="target_prior")
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate_prior)

    p = sub.add_parser("adjust", help="apply a post-hoc prior correction")
    p.add_argument("--logits")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--method", required=True,
                   choices=("class-frequency", "p2p-ce", "p2p-la", "none"))
    p.add_argument("--prior", help="effective-prior JSON for p2p methods")
    p.add_argument("--counts", help="counts JSON for class-frequency")
    p.add_argument("--target-prior", dest="target_prior")
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha-from-sweep", dest="alpha_from_sweep",
                   help="chosen_alpha.json from a sweep-alpha run")
    p.add_argument("--out")
    p.set_defaults(func=cmd_adjust)

    p = sub.add_parser("eval", help="evaluate a logit dump or model on data")
    p.add_argument("--logits")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--target-prior", dest="target_prior")
    p.add_argument("--train-counts", dest="train_counts")
    p.add_argument("--groups", help="many_min,few_max thresholds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toy-experiment", help="seeded multi-trial toy comparison")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--imbalance", type=float, default=100.0)
    p.add_argument("--test-samples", type=int, default=10000, dest="test_samples")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--schedule", choices=("constant", "cosine"))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_toy_experiment)

    p = sub.add_parser("shift-eval", help="evaluate under shifted test priors")
    p.add_argument("--model", required=True)
    p.add_argument("--train-data", required=True, dest="train_data",
                   help="training CSV for the effective-prior estimate")
    p.add_argument("--directions", default="forward,backward")
    p.add_argument("--ratios", default="5,10,50")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--test-samples", type=int, default=10000, dest="test_samples")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_shift_eval)

    p = sub.add_parser("ingest-logits", help="correct an externally produced logit dump")
    p.add_argument("--logits", required=True)
    p.add_argument("--split", type=float, default=0.2, help="holdout fraction for estimation")
    p.add_argument("--train-logits", dest="train_logits")
    p.add_argument("--counts", help="training counts JSON for the train-side estimate")
    p.add_argument("--target-prior", dest="target_prior")
    p.add_argument("--grid", help="comma-separated alpha grid")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest_logits)

    p = sub.add_parser("sweep-alpha", help="grid-search the estimate exponent")
    p.add_argument("--prior", required=True)
    p.add_argument("--method", default="p2p-ce",
                   choices=("class-frequency", "p2p-ce", "p2p-la"))
    p.add_argument("--logits")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--target-prior", dest="target_prior")
    p.add_argument("--grid")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_alpha)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except TailcalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


def entry() -> None:
    sys.exit(main())
