import math

import numpy as np
import pytest

from tailcal.dataset import GaussianMixtureSpec, sample_dataset
from tailcal.errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    ModelFormatError,
)
from tailcal.model import (
    LinearSoftmaxModel,
    LossSpec,
    MlpModel,
    ModelProvenance,
    TrainConfig,
    batch_loss_and_grads,
    ce_loss_and_grad,
    init_linear,
    init_mlp,
    la_loss_and_grad,
    load_model,
    model_parameters,
    predict_logits,
    save_model,
    stage2_retrain,
    train,
)
from tailcal.numerics import RngStream, prob_vector, softmax_rows


def separable_gmm():
    return GaussianMixtureSpec(np.array([[-3.0, 0.0], [3.0, 0.0]]), np.array([0.5, 0.5]))


def small_cfg(seed=7, **overrides):
    base = dict(learning_rate=0.5, iterations=300, batch_size=64, seed=RngStream(seed))
    base.update(overrides)
    return TrainConfig(**base)


def test_predict_logits_zero_model():
    model = init_linear(2, 2)
    out = predict_logits(model, np.array([[1.0, -1.0], [0.3, 0.4]]))
    np.testing.assert_array_equal(out, np.zeros((2, 2)))


def test_predict_logits_identity_weights():
    model = LinearSoftmaxModel(np.eye(2), np.zeros(2))
    np.testing.assert_allclose(predict_logits(model, [[1.0, 0.0]]), [[1.0, 0.0]])


def test_predict_logits_rows_land_on_simplex(rng):
    model = LinearSoftmaxModel(rng.normal(size=(3, 4)), rng.normal(size=3))
    posts = softmax_rows(predict_logits(model, rng.normal(size=(10, 4))))
    for row in posts:
        prob_vector(row)


def test_predict_logits_dimension_mismatch():
    with pytest.raises(DimensionError):
        predict_logits(init_linear(2, 3), np.zeros((4, 2)))


def test_ce_loss_closed_form():
    loss, grad = ce_loss_and_grad([0.0, 0.0], 0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(grad, [-0.5, 0.5], atol=1e-12)


def test_ce_loss_large_margin_goes_to_zero():
    loss, _ = ce_loss_and_grad([60.0, 0.0], 0)
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_ce_grad_sums_to_zero(rng):
    for _ in range(5):
        z = rng.normal(size=4)
        _, grad = ce_loss_and_grad(z, int(rng.integers(4)))
        assert grad.sum() == pytest.approx(0.0, abs=1e-12)


def test_ce_rejects_bad_label():
    with pytest.raises(DimensionError):
        ce_loss_and_grad([0.0, 0.0], 2)


def test_la_loss_uniform_prior_equals_ce(rng):
    uniform = np.full(3, 1 / 3)
    for _ in range(10):
        z = rng.normal(size=3)
        label = int(rng.integers(3))
        ce = ce_loss_and_grad(z, label)
        for alpha in (0.0, 0.7, 2.0):
            la = la_loss_and_grad(z, label, uniform, alpha)
            assert la[0] == pytest.approx(ce[0], abs=1e-12)
            np.testing.assert_allclose(la[1], ce[1], atol=1e-12)


def test_la_loss_alpha_zero_equals_ce(rng):
    prior = np.array([0.8, 0.15, 0.05])
    z = rng.normal(size=3)
    ce = ce_loss_and_grad(z, 1)
    la = la_loss_and_grad(z, 1, prior, 0.0)
    assert la[0] == pytest.approx(ce[0], abs=1e-12)


def test_la_loss_tail_example():
    loss, _ = la_loss_and_grad([0.0, 0.0], 1, [0.9, 0.1], 1.0)
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_loss_spec_prior_iff_logit_adjusted():
    with pytest.raises(ConfigError):
        LossSpec("logit-adjusted")
    with pytest.raises(ConfigError):
        LossSpec("plain-ce", prior=np.array([0.5, 0.5]))


def _flat_params(model):
    return np.concatenate([p.ravel() for p in model_parameters(model)])


def _assign_params(model, flat):
    offset = 0
    for p in model_parameters(model):
        p.flat[:] = flat[offset : offset + p.size]
        offset += p.size


@pytest.mark.parametrize("loss_kind", ["plain-ce", "logit-adjusted"])
@pytest.mark.parametrize("family", ["linear", "mlp"])
def test_gradients_match_central_differences(family, loss_kind, rng):
    prior = np.array([0.7, 0.2, 0.1])
    loss = (
        LossSpec()
        if loss_kind == "plain-ce"
        else LossSpec("logit-adjusted", prior, alpha=1.3)
    )
    step = 1e-5
    for case in range(25):
        if family == "linear":
            model = LinearSoftmaxModel(rng.normal(size=(3, 4)), rng.normal(size=3))
        else:
            model = MlpModel(
                rng.normal(size=(5, 4)),
                rng.normal(size=5),
                "tanh",
                LinearSoftmaxModel(rng.normal(size=(3, 5)), rng.normal(size=3)),
            )
        x = rng.normal(size=(1, 4))
        y = np.array([case % 3])
        _, grads = batch_loss_and_grads(model, x, y, loss)
        analytic = np.concatenate([g.ravel() for g in grads])
        flat = _flat_params(model)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            for sign in (+1, -1):
                bumped = flat.copy()
                bumped[i] += sign * step
                _assign_params(model, bumped)
                value, _ = batch_loss_and_grads(model, x, y, loss)
                numeric[i] += sign * value
            numeric[i] /= 2 * step
        _assign_params(model, flat)
        rel = np.linalg.norm(analytic - numeric) / max(
            np.linalg.norm(analytic), np.linalg.norm(numeric)
        )
        assert rel < 1e-5


def test_train_zero_iterations_returns_init(toy_train):
    model = LinearSoftmaxModel(np.ones((2, 2)), np.array([0.5, -0.5]))
    result = train(model, toy_train, LossSpec(), small_cfg(iterations=0))
    np.testing.assert_array_equal(result.model.weights, model.weights)
    np.testing.assert_array_equal(result.model.biases, model.biases)
    assert result.loss_trace == []


def test_train_deterministic(toy_train):
    a = train(init_linear(2, 2), toy_train, LossSpec(), small_cfg(seed=3))
    b = train(init_linear(2, 2), toy_train, LossSpec(), small_cfg(seed=3))
    np.testing.assert_array_equal(a.model.weights, b.model.weights)
    np.testing.assert_array_equal(a.model.biases, b.model.biases)
    assert a.loss_trace == b.loss_trace


def test_train_separable_problem_reaches_high_accuracy():
    gmm = separable_gmm()
    ds = sample_dataset(gmm, [500, 500], RngStream(13))
    cfg = TrainConfig(learning_rate=0.5, iterations=2000, batch_size=100, seed=RngStream(14))
    result = train(init_linear(2, 2), ds, LossSpec(), cfg)
    pred = np.argmax(predict_logits(result.model, ds.features), axis=1)
    assert np.mean(pred == ds.labels) >= 0.99


def test_full_batch_loss_trace_non_increasing(toy_train):
    cfg = TrainConfig(
        learning_rate=1.0, iterations=60, batch_size=toy_train.n, seed=RngStream(5)
    )
    trace = train(init_linear(2, 2), toy_train, LossSpec(), cfg).loss_trace
    after_warmup = np.array(trace[10:])
    assert np.all(np.diff(after_warmup) <= 1e-12)


def test_minibatch_loss_trace_mostly_non_increasing(toy_train):
    cfg = TrainConfig(
        learning_rate=0.2, iterations=780, batch_size=128, seed=RngStream(6)
    )
    trace = np.array(train(init_linear(2, 2), toy_train, LossSpec(), cfg).loss_trace)
    diffs = np.diff(trace[1:])
    prev = trace[1:-1]
    # stochastic batching may tick the epoch mean up, but by at most 1%
    assert np.all(diffs <= prev * 0.01)


def test_divergence_detection_non_finite(toy_train):
    cfg = TrainConfig(
        learning_rate=1e300, iterations=200, batch_size=128, seed=RngStream(7)
    )
    with pytest.raises(DivergenceError):
        train(init_linear(2, 2), toy_train, LossSpec(), cfg)


def test_divergence_detection_epoch_limit(toy_train):
    # misoriented huge init: finite loss far beyond the 1e6 abort threshold
    hostile = LinearSoftmaxModel(
        np.array([[1e7, 0.0], [-1e7, 0.0]]), np.zeros(2)
    )
    cfg = TrainConfig(
        learning_rate=1e-12, iterations=toy_train.n // 128 + 1,
        batch_size=128, seed=RngStream(8),
    )
    with pytest.raises(DivergenceError):
        train(hostile, toy_train, LossSpec(), cfg)


def test_train_rejects_oversized_batch(toy_train):
    with pytest.raises(ConfigError):
        train(
            init_linear(2, 2),
            toy_train,
            LossSpec(),
            small_cfg(batch_size=toy_train.n + 1),
        )


def test_stage2_cl_freezes_hidden_layer(toy_train):
    mlp = init_mlp(2, 2, hidden=6, activation="relu", rng=RngStream(20))
    stage1 = train(mlp, toy_train, LossSpec(), small_cfg(seed=21)).model
    prior = np.array([0.9901, 0.0099])
    result = stage2_retrain(stage1, toy_train, "CL", small_cfg(seed=22), prior)
    np.testing.assert_array_equal(result.model.hidden_weights, stage1.hidden_weights)
    np.testing.assert_array_equal(result.model.hidden_biases, stage1.hidden_biases)
    assert not np.array_equal(result.model.head.weights, stage1.head.weights)


def test_stage2_ft_zero_iterations_keeps_model(toy_train):
    stage1 = train(init_linear(2, 2), toy_train, LossSpec(), small_cfg(seed=23)).model
    result = stage2_retrain(
        stage1, toy_train, "FT", small_cfg(seed=24, iterations=0), [0.99, 0.01]
    )
    np.testing.assert_array_equal(result.model.weights, stage1.weights)
    np.testing.assert_array_equal(result.model.biases, stage1.biases)


def test_stage2_cl_on_linear_model_warns(toy_train):
    stage1 = train(init_linear(2, 2), toy_train, LossSpec(), small_cfg(seed=25)).model
    with pytest.warns(UserWarning, match="full retrain"):
        stage2_retrain(stage1, toy_train, "CL", small_cfg(seed=26), [0.9901, 0.0099])


def test_stage2_cl_improves_balanced_accuracy_over_ce(gmm):
    from tailcal.evaluation import balanced_accuracy, confusion_matrix

    deltas = []
    for seed in range(20):
        base = RngStream(8800).child(seed)
        ds = sample_dataset(gmm, [9901, 99], base.child(0))
        test = sample_dataset(gmm, [2000, 2000], base.child(1))
        mlp = init_mlp(2, 2, hidden=8, activation="relu", rng=base.child(2))
        cfg1 = TrainConfig(
            learning_rate=5.0, iterations=100, batch_size=ds.n, seed=base.child(3)
        )
        stage1 = train(mlp, ds, LossSpec(), cfg1).model
        cfg2 = TrainConfig(
            learning_rate=5.0, iterations=100, batch_size=ds.n, seed=base.child(4)
        )
        prior = np.array([0.9901, 0.0099])
        stage2 = stage2_retrain(stage1, ds, "CL", cfg2, prior).model
        accs = []
        for model in (stage1, stage2):
            pred = np.argmax(predict_logits(model, test.features), axis=1)
            accs.append(balanced_accuracy(confusion_matrix(pred, test.labels, 2)))
        deltas.append(accs[1] - accs[0])
    assert np.mean(deltas) > 0


def test_save_load_roundtrip_linear(tmp_path, toy_ce_model):
    path = tmp_path / "model.json"
    provenance = ModelProvenance(stage=1, loss_kind="plain-ce", seed=(1234, 5))
    save_model(toy_ce_model, path, provenance)
    loaded, prov = load_model(path)
    np.testing.assert_array_equal(loaded.weights, toy_ce_model.weights)
    np.testing.assert_array_equal(loaded.biases, toy_ce_model.biases)
    assert prov.loss_kind == "plain-ce" and prov.seed == (1234, 5)
    x = np.array([[0.3, -0.2], [1.5, 0.7]])
    np.testing.assert_array_equal(
        predict_logits(loaded, x), predict_logits(toy_ce_model, x)
    )


def test_save_load_roundtrip_mlp(tmp_path):
    mlp = init_mlp(3, 4, hidden=5, activation="tanh", rng=RngStream(77))
    path = tmp_path / "mlp.json"
    save_model(mlp, path)
    loaded, _ = load_model(path)
    x = np.linspace(-1, 1, 8).reshape(2, 4)
    np.testing.assert_array_equal(predict_logits(loaded, x), predict_logits(mlp, x))


def test_stage2_provenance_roundtrip(tmp_path, toy_ce_model):
    prior = np.array([0.9901, 0.0099])
    provenance = ModelProvenance(
        stage=2, loss_kind="logit-adjusted", prior=prior, alpha=0.75, seed=(9, 9)
    )
    path = tmp_path / "stage2.json"
    save_model(toy_ce_model, path, provenance)
    _, prov = load_model(path)
    assert prov.stage == 2
    assert prov.loss_kind == "logit-adjusted"
    assert prov.alpha == 0.75
    np.testing.assert_array_equal(prov.prior, prior)


def test_load_rejects_truncated_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"schema": 1, "arch": {"family": "line')
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_load_rejects_schema_mismatch(tmp_path, toy_ce_model):
    path = tmp_path / "old.json"
    save_model(toy_ce_model, path)
    payload = path.read_text().replace('"schema": 1', '"schema": 99')
    path.write_text(payload)
    with pytest.raises(ModelFormatError, match="schema"):
        load_model(path)
