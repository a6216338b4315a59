"""
Tests for losses, Adam, average precision and truncated-BPTT training.
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from grfu.errors import ContractError, TrainingError
from grfu.model import CELL_KINDS, FusionModel, ModelSpec, forward_sequence
from grfu.synthdata import CorruptionWindow, ScenarioSpec, generate, make_batches
from grfu.tensorgrad import GradGraph, Tensor, backward, concat
from grfu.train import (
    AdamState, TrainConfig, adam_step, average_precision, batch_gradients, clip_by_global_norm,
    cross_entropy_per_frame, cross_validate, evaluate, mean_ap, mse_loss, train_tbptt,
    truncation_windows,
)


def small_classification(num_sequences=8, T=10, seed=0, sigma=1.0, windows=()):
    return generate(ScenarioSpec(task="classify", sensor_dims=(6, 8), T=T, num_sequences=num_sequences,
                                 num_classes=4, windows=windows, sigma=sigma, amp=2.0, seed=seed))


# ====== LOSSES ======

def test_cross_entropy_uniform_logits():
    loss = cross_entropy_per_frame(Tensor(np.zeros((1, 4))), [2])
    assert abs(loss.item() - np.log(4.0)) < 1e-12


def test_cross_entropy_saturated_logits():
    loss = cross_entropy_per_frame(Tensor([[100.0, 0.0]]), [0])
    assert loss.item() < 1e-8


def test_cross_entropy_two_frames():
    loss = cross_entropy_per_frame(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 1])
    assert abs(loss.item() - 0.31326169) < 1e-8


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ContractError):
        cross_entropy_per_frame(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_equal_logits_any_class_count():
    rng = np.random.default_rng(0)
    for K in range(2, 12):
        logits = np.full((5, K), rng.standard_normal())
        loss = cross_entropy_per_frame(Tensor(logits), rng.integers(K, size=5))
        assert abs(loss.item() - np.log(K)) < 1e-12


def test_mse_examples():
    assert mse_loss(Tensor([0.5]), Tensor([0.5])).item() == 0.0
    assert mse_loss(Tensor([0.0, 0.0]), Tensor([1.0, 0.0])).item() == 0.5
    assert mse_loss(Tensor([0.5]), Tensor([0.0])).item() == 0.25


# ====== OPTIMISER ======

def test_adam_first_step():
    state = AdamState(lr=0.01)
    updated = adam_step(state, {"w": Tensor([0.0])}, {"w": Tensor([1.0])})
    assert abs(updated["w"].item() - (-0.01 / (1.0 + 1e-8))) < 1e-12
    assert state.t == 1


def test_adam_zero_gradient_keeps_parameter():
    updated = adam_step(AdamState(lr=0.01), {"w": Tensor([3.0])}, {"w": Tensor([0.0])})
    assert updated["w"].item() == 3.0


def test_adam_scalar_recurrence():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    rng = np.random.default_rng(4)
    grads = rng.standard_normal(10)
    state = AdamState(lr=lr)
    params = {"w": Tensor([0.5])}
    theta, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        params = adam_step(state, params, {"w": Tensor([g])})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(params["w"].item() - theta) < 1e-12


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(TrainingError) as exc:
        adam_step(AdamState(), {"w": Tensor([0.0])}, {"w": Tensor([np.nan])})
    assert exc.value.parameter == "w"


def test_adam_state_survives_extras():
    state = AdamState(lr=0.01)
    adam_step(state, {"w": Tensor([1.0, 2.0])}, {"w": Tensor([0.3, -0.1])})
    restored = AdamState.from_extras(state.to_extras(), lr=0.01)
    assert restored.t == 1
    assert np.array_equal(restored.m["w"], state.m["w"])
    assert np.array_equal(restored.v["w"], state.v["w"])


def test_clip_by_global_norm():
    grads = {"a": Tensor([3.0]), "b": Tensor([4.0])}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose([clipped["a"].item(), clipped["b"].item()], [0.6, 0.8], atol=1e-15)
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same["a"].item() == 3.0


# ====== AVERAGE PRECISION ======

def brute_force_ap(scores, positives):
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    hits, total = 0, 0.0
    for rank, i in enumerate(order, start=1):
        if positives[i]:
            hits += 1
            total += hits / rank
    return total / sum(positives)


def test_average_precision_examples():
    assert average_precision([0.1, 0.9], [True, False]) == 0.5
    assert abs(average_precision([0.9, 0.8, 0.7], [True, False, True]) - 0.8333333333) < 1e-9
    assert average_precision([0.9, 0.1], [True, False]) == 1.0


def test_average_precision_needs_positives():
    with pytest.raises(ContractError):
        average_precision([0.3, 0.2], [False, False])


def test_average_precision_matches_brute_force():
    rng = np.random.default_rng(10)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        scores = rng.random(n)
        positives = rng.random(n) < 0.3
        positives[rng.integers(n)] = True
        assert abs(average_precision(scores, positives) - brute_force_ap(scores, positives)) < 1e-12


def test_average_precision_ignores_monotone_transforms():
    rng = np.random.default_rng(11)
    scores = rng.random(30)
    positives = rng.random(30) < 0.4
    positives[0] = True
    assert average_precision(scores, positives) == average_precision(3.0 * scores + 1.0, positives)


def test_constant_scores_average_ties_give_prevalence():
    positives = np.array([True, False, True, False, False, True, False, False])
    ap = average_precision(np.full(8, 0.5), positives, ties="average")
    assert abs(ap - 3 / 8) < 1e-12


def test_mean_ap_perfect_scores():
    labels = np.array([0, 1, 2, 1, 2, 0, 1])
    report = mean_ap(np.eye(3)[labels], labels)
    assert report.mean_ap == 1.0
    assert sorted(report.per_class) == [1, 2]


def test_mean_ap_constant_scores_balanced_binary():
    labels = np.array([0, 1] * 5)
    report = mean_ap(np.full((10, 2), 0.5), labels, background=None, ties="average")
    assert abs(report.mean_ap - 0.5) < 1e-12


def test_mean_ap_skips_classes_without_positives():
    labels = np.array([0, 1, 1, 0])
    report = mean_ap(np.random.default_rng(0).random((4, 4)), labels)
    assert report.skipped == [2, 3]
    assert list(report.per_class) == [1]


def test_mean_ap_matches_per_class_brute_force():
    rng = np.random.default_rng(10)
    labels = rng.integers(5, size=200)
    scores = rng.random((200, 5))
    report = mean_ap(scores, labels)
    expected = np.mean([brute_force_ap(scores[:, k], labels == k) for k in range(1, 5)])
    assert abs(report.mean_ap - expected) < 1e-12


# ====== TRUNCATED BPTT ======

def test_truncation_windows():
    assert truncation_windows(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert truncation_windows(6, 6) == [(0, 6)]


def test_full_window_equals_plain_bptt():
    dataset = small_classification(num_sequences=4, T=6)
    spec = ModelSpec("lgrf", dataset.spec.sensor_dims, d_e=4, d_h=5, out_dim=4)
    model = FusionModel.initialise(spec, seed=0)
    (batch,) = make_batches(dataset, batch_size=4)

    loss, grads = batch_gradients(model, batch, TrainConfig(seq_len=6, batch_size=4))

    with GradGraph() as graph:
        linked = {name: graph.parameter(p, name) for name, p in model.params.items()}
        out = forward_sequence(spec, linked, batch.sensors)
        full = cross_entropy_per_frame(concat(out.outputs, axis=0), batch.labels.reshape(-1))
    reference = backward(graph, full)

    assert abs(loss - full.item()) < 1e-12
    for name in model.params:
        np.testing.assert_allclose(grads[name].values, reference[name].values, atol=1e-10, rtol=0)


def test_windowed_loss_is_the_mean_frame_loss():
    dataset = small_classification(num_sequences=3, T=9)
    spec = ModelSpec("early_concat", dataset.spec.sensor_dims, d_e=4, d_h=5, out_dim=4)
    model = FusionModel.initialise(spec, seed=1)
    (batch,) = make_batches(dataset, batch_size=3)
    whole, _ = batch_gradients(model, batch, TrainConfig(seq_len=9, batch_size=3))
    windowed, _ = batch_gradients(model, batch, TrainConfig(seq_len=4, batch_size=3))
    # carried state means the forward pass is identical, only gradients are truncated
    assert abs(whole - windowed) < 1e-12


def test_zero_learning_rate_keeps_parameters():
    dataset = small_classification()
    spec = ModelSpec("egrf", dataset.spec.sensor_dims, d_e=4, d_h=5, out_dim=4)
    model = FusionModel.initialise(spec, seed=2)
    result = train_tbptt(model, dataset, TrainConfig(seq_len=5, batch_size=4, epochs=2, lr=0.0))
    for name, p in model.params.items():
        assert np.array_equal(result.model.params[name].values, p.values)


def test_training_is_deterministic():
    dataset = small_classification()
    spec = ModelSpec("lrs", dataset.spec.sensor_dims, d_e=4, d_h=5, out_dim=4)
    config = TrainConfig(seq_len=5, batch_size=3, epochs=2, lr=1e-2, seed=7)
    a = train_tbptt(FusionModel.initialise(spec, seed=3), dataset, config)
    b = train_tbptt(FusionModel.initialise(spec, seed=3), dataset, config)
    for name in a.model.params:
        assert np.array_equal(a.model.params[name].values, b.model.params[name].values)
    assert a.report.loss_curve == b.report.loss_curve


def test_skipping_train_evaluation_leaves_updates_unchanged():
    dataset = small_classification()
    spec = ModelSpec("lgrf", dataset.spec.sensor_dims, d_e=4, d_h=5, out_dim=4)
    config = TrainConfig(seq_len=5, batch_size=3, epochs=2, lr=1e-2, seed=7)
    full = train_tbptt(FusionModel.initialise(spec, seed=3), dataset, config)
    quiet = train_tbptt(FusionModel.initialise(spec, seed=3), dataset, config, eval_train=False)
    for name in full.model.params:
        assert np.array_equal(full.model.params[name].values, quiet.model.params[name].values)
    assert quiet.history == [{}, {}]
    assert quiet.report is None


def test_resumed_training_matches_uninterrupted_run():
    dataset = small_classification()
    spec = ModelSpec("lgrf", dataset.spec.sensor_dims, d_e=4, d_h=5, out_dim=4)
    model = FusionModel.initialise(spec, seed=4)
    straight = train_tbptt(model, dataset, TrainConfig(seq_len=5, batch_size=3, epochs=2, lr=1e-2, seed=1))
    first = train_tbptt(model, dataset, TrainConfig(seq_len=5, batch_size=3, epochs=1, lr=1e-2, seed=1))
    adam = AdamState.from_extras(first.adam.to_extras(), lr=1e-2)
    second = train_tbptt(first.model, dataset, TrainConfig(seq_len=5, batch_size=3, epochs=2, lr=1e-2, seed=1),
                         start_epoch=1, adam=adam)
    for name in straight.model.params:
        assert np.array_equal(second.model.params[name].values, straight.model.params[name].values)
    assert abs(second.history[-1]["train"].loss - straight.history[-1]["train"].loss) < 1e-10


def test_non_finite_loss_names_epoch_and_batch():
    dataset = small_classification()
    spec = ModelSpec("early_add", dataset.spec.sensor_dims, d_e=4, d_h=5, out_dim=4)
    model = FusionModel.initialise(spec, seed=5)
    params = dict(model.params)
    params["head.b"] = Tensor(np.full(4, np.nan))
    with pytest.raises(TrainingError) as exc:
        train_tbptt(FusionModel(spec, params), dataset, TrainConfig(seq_len=5, batch_size=4, epochs=1))
    assert exc.value.epoch == 1 and exc.value.batch == 1


@pytest.mark.parametrize("cell", CELL_KINDS)
def test_training_loss_decreases_on_separable_task(cell):
    dataset = small_classification(num_sequences=40, T=20, sigma=0.3, seed=3)
    spec = ModelSpec(cell, dataset.spec.sensor_dims, d_e=6, d_h=8, out_dim=4)
    config = TrainConfig(seq_len=10, batch_size=8, epochs=5, lr=2e-3, seed=0)
    curve = train_tbptt(FusionModel.initialise(spec, seed=0), dataset, config).report.loss_curve
    assert len(curve) == 5
    assert all(later < earlier for earlier, later in zip(curve, curve[1:])), curve


def test_regression_training_reports_mse():
    spec = ScenarioSpec(task="regress", sensor_dims=(19, 3, 6), T=12, num_sequences=4, num_classes=1,
                        views=[None, None, None], sigma=0.1, seed=0,
                        windows=[CorruptionWindow(0, 3, 6, "noise_replace")])
    dataset = generate(spec)
    model = FusionModel.initialise(ModelSpec("lgrf", (19, 3, 6), d_e=4, d_h=4, head="regressor", out_dim=1), 0)
    result = train_tbptt(model, dataset, TrainConfig(seq_len=4, batch_size=2, epochs=1, reset_state=True))
    report = result.report
    assert report.task == "regress" and report.metric_name == "MSE"
    assert abs(report.mse - report.loss) < 1e-12


# ====== EVALUATION ======

def test_threaded_evaluation_matches_serial():
    dataset = small_classification(num_sequences=10)
    model = FusionModel.initialise(ModelSpec("lgrf", dataset.spec.sensor_dims, 4, 5, out_dim=4), seed=6)
    serial = evaluate(model, dataset, TrainConfig(seq_len=5, batch_size=3, threads=1))
    threaded = evaluate(model, dataset, TrainConfig(seq_len=5, batch_size=3, threads=3))
    assert serial.loss == threaded.loss
    assert serial.per_class == threaded.per_class


def test_evaluate_rejects_empty_dataset():
    dataset = small_classification(num_sequences=0)
    model = FusionModel.initialise(ModelSpec("lrs", dataset.spec.sensor_dims, 4, 5, out_dim=4), seed=0)
    with pytest.raises(ContractError):
        evaluate(model, dataset, TrainConfig())


def test_cross_validation_folds():
    dataset = small_classification(num_sequences=10, T=8)
    model = FusionModel.initialise(ModelSpec("early_add", dataset.spec.sensor_dims, 4, 5, out_dim=4), seed=0)
    result = cross_validate(model, dataset, TrainConfig(seq_len=4, batch_size=4, epochs=1), folds=5)
    assert len(result.fold_reports) == 5
    assert 0 <= result.best_fold < 5
    with pytest.raises(ContractError):
        cross_validate(model, dataset, TrainConfig(epochs=1), folds=11)
