import math

import numpy as np
import pytest

from edgevit.grad import backward, cross_entropy, finite_diff, loss, per_sample_backward, probe_backward
from edgevit.model import ModelConfig, Probe, cls_features, init_model, lkey
from gradcheck import gradient_errors, relative_error


def test_gradients_match_differences_small(small_model, small_images):
    labels = np.array([0, 1, 2, 3, 1, 0])
    errs = gradient_errors(small_model, small_images, labels, per_kind=8)
    assert len(errs) == 24  # every tensor kind covered
    worst = {k: max(v) for k, v in errs.items()}
    assert max(worst.values()) < 1e-3, worst


def test_dead_path_gets_zero_gradient(toy_model, toy_images, toy_labels):
    _, grads = backward(toy_model, toy_images, toy_labels, depth_limit=1, probe=toy_model.head)
    for name in ("wq", "wv", "w1", "b2"):
        assert not np.any(grads[lkey(1, name)])
    assert finite_diff(toy_model, toy_images, toy_labels, lkey(1, "w1"), (0, 0),
                       depth_limit=1) == pytest.approx(0.0, abs=1e-8)


def test_truncated_gradient_matches_difference(toy_model, toy_images, toy_labels):
    m = toy_model.astype(np.float64)
    _, grads = backward(m, toy_images, toy_labels, depth_limit=1, probe=m.head)
    for name, idx in [(lkey(0, "w1"), (2, 3)), ("patch_embed.weight", (1, 7)), (lkey(0, "bv"), (4,))]:
        fd = finite_diff(m, toy_images, toy_labels, name, idx, h=1e-5, depth_limit=1)
        assert relative_error(grads[name][idx], fd) < 1e-4


def test_uniform_logits_loss_is_log_c(toy_cfg, toy_images, toy_labels):
    m = init_model(toy_cfg, seed=0)
    m.params["head.weight"][...] = 0.0
    m.params["head.bias"][...] = 0.0
    assert loss(m, toy_images, toy_labels) == pytest.approx(math.log(10), abs=1e-5)


def test_backward_deterministic(toy_model, toy_images, toy_labels):
    a = backward(toy_model, toy_images, toy_labels)[1]
    b = backward(toy_model, toy_images, toy_labels)[1]
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


@pytest.mark.parametrize("bad", [[10, 0, 0, 0], [-1, 0, 0, 0]])
def test_invalid_label(toy_model, toy_images, bad):
    with pytest.raises(ValueError):
        backward(toy_model, toy_images, bad)


def test_unknown_tensor(toy_model, toy_images, toy_labels):
    with pytest.raises(KeyError):
        finite_diff(toy_model, toy_images, toy_labels, "layers.0.attn.wz", (0, 0))


def test_per_sample_gradients_average_to_batch(toy_model, toy_images, toy_labels):
    losses, per = per_sample_backward(toy_model, toy_images, toy_labels)
    mean_loss, grads = backward(toy_model, toy_images, toy_labels)
    assert losses.mean() == pytest.approx(mean_loss, rel=1e-12)
    for k, g in grads.items():
        assert per[k].shape == (4,) + g.shape
        np.testing.assert_allclose(per[k].mean(axis=0), g, atol=1e-12)


def test_per_sample_gradient_is_single_sample_gradient(toy_model, toy_images, toy_labels):
    _, per = per_sample_backward(toy_model, toy_images, toy_labels)
    _, one = backward(toy_model, toy_images[2:3], toy_labels[2:3])
    for k in one:
        np.testing.assert_allclose(per[k][2], one[k], atol=1e-12)


def test_cross_entropy_stable():
    losses, probs = cross_entropy(np.array([[1000.0, 0.0], [0.0, 1000.0]]), np.array([0, 0]))
    assert losses[0] == pytest.approx(0.0, abs=1e-12)
    assert losses[1] == pytest.approx(1000.0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_probe_backward_matches_difference(toy_model, toy_images, toy_labels):
    feats = cls_features(toy_model, toy_images, depth=1)
    rng = np.random.default_rng(0)
    d = feats.shape[1]
    p = {"ln.gamma": 1 + 0.1 * rng.standard_normal(d), "ln.beta": 0.1 * rng.standard_normal(d),
         "weight": rng.standard_normal((10, d)), "bias": rng.standard_normal(10)}
    eps = toy_model.config.layernorm_eps

    def f():
        return probe_backward(feats, Probe(p["ln.gamma"], p["ln.beta"], p["weight"], p["bias"]),
                              toy_labels, eps)

    _, g = f()
    h = 1e-6
    for name, idx in [("ln.gamma", (3,)), ("ln.beta", (0,)), ("weight", (7, 2)), ("bias", (9,))]:
        p[name][idx] += h
        up = f()[0]
        p[name][idx] -= 2 * h
        down = f()[0]
        p[name][idx] += h
        assert relative_error(g[name][idx], (up - down) / (2 * h)) < 1e-5


def test_irregular_model_gradients():
    cfg = ModelConfig(8, 4, 6, 3, [2, 1], [4, 3], [2, 5], [5, 0])
    m = init_model(cfg, seed=3, bias_std=0.1, embed_std=0.5)
    x = np.random.default_rng(3).standard_normal((3, 3, 8, 8))
    errs = gradient_errors(m, x, np.array([0, 2, 1]), per_kind=5)
    assert max(max(v) for v in errs.values()) < 1e-3
