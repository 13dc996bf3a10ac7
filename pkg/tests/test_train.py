import numpy as np
import pytest

from edgevit.errors import TrainingDiverged
from edgevit.train import AdamW, TrainRun, evaluate, train
from oracles import scalar_adamw


def test_adamw_matches_scalar_reference():
    w0 = [0.5, -1.25, 2.0]
    grads = [[0.1, -0.2, 0.3], [-0.05, 0.4, 0.0], [1.0, 1.0, -1.0], [0.2, -0.3, 0.25]]
    params = {"w": np.array(w0)}
    opt = AdamW(params, lr=0.01, weight_decay=0.05)
    for g in grads:
        opt.step(params, {"w": np.array(g)})
    np.testing.assert_allclose(params["w"], scalar_adamw(w0, grads, 0.01, 0.05), atol=1e-6)


def test_decay_only_closed_form():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    opt = AdamW(params, lr=0.1, weight_decay=0.05)
    for _ in range(3):
        opt.step(params, {"w": np.zeros(3)})
    np.testing.assert_allclose(params["w"], np.array([1.0, -2.0, 3.0]) * (1 - 0.1 * 0.05) ** 3)


def test_null_update_is_bitwise(small_model, small_images):
    out, _ = train(small_model, small_images, np.array([0, 1, 2, 3, 0, 1]),
                   TrainRun(epochs=1, batch_size=4, lr=0.0, weight_decay=0.0))
    for k, v in small_model.params.items():
        np.testing.assert_array_equal(out.params[k], v)


def test_training_is_deterministic(small_model, small_images):
    y = np.array([0, 1, 2, 3, 0, 1])
    run = lambda: train(small_model, small_images, y, TrainRun(epochs=2, batch_size=4, lr=1e-2, seed=3))  # noqa: E731
    a, ra = run()
    b, rb = run()
    assert ra.loss_curve == rb.loss_curve
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
        assert a.params[k].dtype == np.float32


def test_training_lowers_loss_and_memorises(small_model, small_images):
    y = np.array([0, 1, 2, 3, 0, 1])
    out, run = train(small_model, small_images, y, TrainRun(epochs=60, batch_size=6, lr=1e-2,
                                                            weight_decay=0.0))
    assert run.loss_curve[-1] < run.loss_curve[0]
    assert evaluate(out, small_images, y) == 1.0


def test_divergence_returns_last_good(small_model, small_images):
    x = small_images.copy()
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(small_model, x, np.zeros(6, int), TrainRun(epochs=1, batch_size=6))
    for k, v in small_model.params.items():
        np.testing.assert_array_equal(info.value.model.params[k], v)


def test_constant_logits_accuracy_is_first_class_frequency(small_model, small_images):
    m = small_model.copy()
    m.params["head.weight"][...] = 0.0
    m.params["head.bias"][...] = 0.0
    y = np.array([0, 1, 0, 2, 3, 0])
    assert evaluate(m, small_images, y) == pytest.approx(3 / 6)


def test_empty_splits_rejected(small_model):
    x = np.zeros((0, 3, 8, 8), np.float32)
    with pytest.raises(ValueError):
        evaluate(small_model, x, np.zeros(0, int))
    with pytest.raises(ValueError):
        train(small_model, x, np.zeros(0, int))


def test_eval_curve_recorded(small_model, small_images):
    y = np.array([0, 1, 2, 3, 0, 1])
    _, run = train(small_model, small_images, y, TrainRun(epochs=2, batch_size=3),
                   eval_images=small_images, eval_labels=y)
    assert len(run.eval_curve) == 2 and len(run.loss_curve) == 2
    assert run.to_json()["epochs"] == 2
