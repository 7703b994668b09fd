import math

import numpy as np
import pytest

from bayesfed.errors import ShapeError, UsageError
from bayesfed.gaussian import GaussianParams
from bayesfed.vbnn import (
    DETERMINISTIC,
    ALPHA_INIT,
    Gradients,
    LayerSpec,
    OptimizerState,
    VbnnModel,
    backward,
    elbo_loss,
    forward,
    init_model,
    kl_to_prior,
    load_checkpoint,
    mlp_spec,
    point_snapshot,
    predict_proba,
    sample_weights,
    save_checkpoint,
    sgd_step,
    softmax,
)


def random_model(dims, seed=0, alpha_range=(-3.0, 0.5), mode="variational"):
    rng = np.random.default_rng(seed)
    model = init_model(mlp_spec(dims[0], dims[1:-1], dims[-1]), mode, seed)
    for p in model.params:
        p.mu[:] = rng.normal(0, 0.7, p.size)
        p.alpha[:] = rng.uniform(*alpha_range, p.size)
    return model


def zero_eps(model):
    return [np.zeros(p.size) for p in model.params]


# -- init / sampling -----------------------------------------------------------


def test_init_deterministic_and_alpha():
    spec = mlp_spec(2, [3], 2)
    a, b = init_model(spec, rng_seed=7), init_model(spec, rng_seed=7)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa.mu, pb.mu)
        assert np.all(pa.alpha == ALPHA_INIT)


def test_init_mean_moments():
    # U(-b, b): mean 0, variance b^2/3
    model = init_model([LayerSpec(4, 25_000, "none")], rng_seed=1)
    mu = model.weight(0).mu
    b = 1 / math.sqrt(4)
    assert abs(mu.mean()) < 3 * math.sqrt(b * b / 3 / mu.size)
    assert np.all(np.abs(mu) <= b)


def test_init_rejects_bad_chain():
    with pytest.raises(UsageError):
        init_model([LayerSpec(2, 3), LayerSpec(4, 2, "none")])
    with pytest.raises(UsageError):
        init_model([LayerSpec(2, 3, "relu")])


def test_zero_eps_snapshot_is_mean():
    model = random_model([2, 3, 2])
    snap = sample_weights(model, eps=zero_eps(model))
    for (w, b), (mw, mb) in zip(snap.weights, model.point_weights()):
        assert np.array_equal(w, mw) and np.array_equal(b, mb)


def test_sample_variance_alpha_zero():
    model = init_model([LayerSpec(1, 1, "none")], rng_seed=0)
    model.weight(0).alpha[:] = 0.0
    rng = np.random.default_rng(5)
    draws = np.array([sample_weights(model, rng).weights[0][0][0, 0] for _ in range(100_000)])
    # sample variance of N(mu, 1): sd of the estimator is sqrt(2/n)
    assert abs(draws.var() - 1.0) < 3 * math.sqrt(2 / draws.size)


def test_tiny_sigma_snapshot():
    model = random_model([2, 3, 2])
    for p in model.params:
        p.alpha[:] = -40.0
    snap = sample_weights(model, 3)
    for (w, _), (mw, _) in zip(snap.weights, model.point_weights()):
        np.testing.assert_allclose(w, mw, atol=1e-8)


def test_sample_weights_mode_check():
    model = init_model(mlp_spec(2, [3], 2), DETERMINISTIC)
    with pytest.raises(UsageError):
        sample_weights(model, 0)


def test_sample_seed_determinism():
    model = random_model([2, 3, 2])
    a, b = sample_weights(model, 11), sample_weights(model, 11)
    assert all(np.array_equal(x, y) for x, y in zip(a.eps, b.eps))


# -- forward -------------------------------------------------------------------


def loop_forward(weights, activations, x):
    """Scalar-loop reference for an MLP forward pass."""
    out = []
    for row in x:
        h = list(row)
        for (w, b), act in zip(weights, activations):
            z = [sum(w[j][i] * h[i] for i in range(len(h))) + b[j] for j in range(len(b))]
            h = [max(v, 0.0) for v in z] if act == "relu" else z
        out.append(h)
    return np.array(out)


def test_forward_matches_loop_oracle():
    model = random_model([2, 3, 2], seed=3)
    x = np.random.default_rng(0).normal(size=(6, 2))
    snap = sample_weights(model, 4)
    expected = loop_forward([(w.tolist(), b.tolist()) for w, b in snap.weights], ["relu", "none"], x.tolist())
    np.testing.assert_allclose(forward(model, snap, x), expected, atol=1e-6)


def test_forward_zero_weights_uniform():
    model = init_model(mlp_spec(4, [5], 3), rng_seed=0)
    for p in model.params:
        p.mu[:] = 0
    logits = forward(model, sample_weights(model, eps=zero_eps(model)), np.ones((2, 4)))
    assert np.all(logits == 0)
    np.testing.assert_allclose(softmax(logits), 1 / 3)


def test_forward_identity_layer():
    model = VbnnModel(
        [LayerSpec(3, 3, "none")],
        [GaussianParams((3, 3), np.eye(3), np.full(9, -5.0)), GaussianParams((3,), np.zeros(3), np.full(3, -5.0))],
    )
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(forward(model, sample_weights(model, eps=zero_eps(model)), x), x)


def test_forward_dim_mismatch():
    model = random_model([2, 3, 2])
    with pytest.raises(ShapeError):
        forward(model, None, np.zeros((1, 3)))


# -- KL / loss -----------------------------------------------------------------


def single_param_model(mu, alpha):
    return VbnnModel(
        [LayerSpec(1, 1, "none")],
        [GaussianParams((1, 1), [mu], [alpha]), GaussianParams((1,), [0.0], [0.0])],
    )


def test_kl_closed_form():
    assert kl_to_prior(single_param_model(0.0, 0.0)) == 0.0
    assert kl_to_prior(single_param_model(1.0, 0.0)) == pytest.approx(0.5, abs=1e-12)
    assert kl_to_prior(single_param_model(0.0, 1.0)) == pytest.approx(0.5 * (math.e - 2), abs=1e-12)
    assert 0.5 * (math.e - 2) == pytest.approx(0.3591409, abs=1e-7)


def test_kl_nonnegative():
    for seed in range(20):
        assert kl_to_prior(random_model([3, 4, 2], seed, (-6, 3))) >= 0


def test_elbo_prior_posterior_two_class():
    model = VbnnModel(
        [LayerSpec(2, 2, "none")],
        [GaussianParams((2, 2), np.zeros(4), np.zeros(4)), GaussianParams((2,), np.zeros(2), np.zeros(2))],
    )
    snap = sample_weights(model, eps=zero_eps(model))
    loss, _ = elbo_loss(model, snap, np.ones((3, 2)), [0, 1, 1], kl_scale=1.0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_elbo_ten_class_uniform():
    model = init_model([LayerSpec(4, 10, "none")], rng_seed=0)
    for p in model.params:
        p.mu[:] = 0
    snap = sample_weights(model, eps=zero_eps(model))
    loss, _ = elbo_loss(model, snap, np.ones((5, 4)), np.arange(5), kl_scale=0.0)
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_elbo_kl_zero_matches_cross_entropy():
    model = random_model([3, 4, 3], seed=2)
    x = np.random.default_rng(1).normal(size=(8, 3))
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    snap = sample_weights(model, 9)
    loss, _ = elbo_loss(model, snap, x, y, kl_scale=0.0)
    det = VbnnModel(model.specs, [p.copy() for p in model.params], DETERMINISTIC)
    det_loss, _ = elbo_loss(det, snap, x, y)
    p = softmax(forward(model, snap, x))
    ce = -np.mean(np.log(p[np.arange(8), y]))
    assert loss == pytest.approx(ce, abs=1e-9)
    assert det_loss == loss


def test_elbo_rejects_bad_labels():
    model = random_model([2, 3, 2])
    snap = sample_weights(model, 0)
    with pytest.raises(UsageError):
        elbo_loss(model, snap, np.zeros((2, 2)), [0, 2])


# -- gradients -----------------------------------------------------------------


def fd_check(model, x, y, kl_scale, h=1e-4):
    snap = sample_weights(model, 17)
    eps = snap.eps
    _, cache = elbo_loss(model, snap, x, y, kl_scale)
    grads = backward(model, cache)
    worst = 0.0

    def loss_at():
        return elbo_loss(model, sample_weights(model, eps=eps), x, y, kl_scale)[0]

    for t, p in enumerate(model.params):
        for arr, g in ((p.mu, grads.mu[t]), (p.alpha, grads.alpha[t])):
            for i in range(arr.size):
                orig = arr[i]
                arr[i] = orig + h
                up = loss_at()
                arr[i] = orig - h
                down = loss_at()
                arr[i] = orig
                num = (up - down) / (2 * h)
                rel = abs(g[i] - num) / max(abs(g[i]), abs(num), 1e-6)
                worst = max(worst, rel)
    return worst


@pytest.mark.parametrize("kl_scale", [0.0, 0.1, 1.0])
def test_backward_matches_finite_differences(kl_scale):
    model = random_model([2, 3, 2], seed=5)
    x = np.random.default_rng(3).normal(size=(7, 2))
    y = np.array([0, 1, 1, 0, 1, 0, 0])
    assert fd_check(model, x, y, kl_scale) < 1e-3


def test_alpha_grad_zero_when_eps_zero():
    model = random_model([2, 3, 2])
    x = np.random.default_rng(0).normal(size=(4, 2))
    _, cache = elbo_loss(model, sample_weights(model, eps=zero_eps(model)), x, [0, 1, 0, 1], kl_scale=0.0)
    g = backward(model, cache)
    assert all(np.all(a == 0) for a in g.alpha)


def test_kl_gradients_zero_at_prior():
    model = random_model([2, 3, 2])
    for p in model.params:
        p.mu[:] = 0
        p.alpha[:] = 0
    # kl term only: zero the data gradient by making every weight the mean and the batch empty-ish
    snap = sample_weights(model, 0)
    _, cache = elbo_loss(model, snap, np.zeros((1, 2)), [0], kl_scale=1.0)
    cache.probs[:] = 0
    cache.probs[0, 0] = 1.0  # a perfect prediction has no likelihood gradient
    g = backward(model, cache)
    assert all(np.all(m == 0) for m in g.mu) and all(np.all(a == 0) for a in g.alpha)


def test_stale_cache_rejected():
    model = random_model([2, 3, 2])
    _, cache = elbo_loss(model, sample_weights(model, 0), np.zeros((1, 2)), [0])
    g = backward(model, cache)
    sgd_step(model, OptimizerState.for_model(model), g)
    with pytest.raises(UsageError):
        backward(model, cache)


def test_deterministic_gradients():
    model = random_model([2, 3, 2], seed=4, mode=DETERMINISTIC)
    x = np.random.default_rng(0).normal(size=(5, 2))
    y = np.array([0, 1, 0, 1, 1])
    _, cache = elbo_loss(model, point_snapshot(model), x, y)
    g = backward(model, cache)
    assert g.alpha is None
    h = 1e-5
    p = model.params[0]
    orig = p.mu[1]
    p.mu[1] = orig + h
    up = elbo_loss(model, point_snapshot(model), x, y)[0]
    p.mu[1] = orig - h
    down = elbo_loss(model, point_snapshot(model), x, y)[0]
    p.mu[1] = orig
    assert g.mu[0][1] == pytest.approx((up - down) / (2 * h), rel=1e-5)


def test_seed_determinism_of_loss_and_grads():
    model = random_model([3, 4, 2], seed=1)
    x = np.random.default_rng(2).normal(size=(6, 3))
    y = np.array([0, 1, 0, 1, 0, 1])
    runs = []
    for _ in range(2):
        loss, cache = elbo_loss(model, sample_weights(model, 99), x, y, 0.3)
        runs.append((loss, backward(model, cache)))
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1].mu + runs[0][1].alpha, runs[1][1].mu + runs[1][1].alpha):
        assert np.array_equal(a, b)


# -- optimizer -----------------------------------------------------------------


def tiny_model():
    return single_param_model(1.0, -1.0)


def const_grads(model, gm, ga):
    return Gradients([np.full(p.size, gm) for p in model.params], [np.full(p.size, ga) for p in model.params])


def test_sgd_plain_step():
    m = tiny_model()
    state = OptimizerState.for_model(m, lr=0.1, momentum=0.0, weight_decay=0.0)
    sgd_step(m, state, const_grads(m, 2.0, -1.0))
    assert m.weight(0).mu[0] == pytest.approx(1.0 - 0.2)
    assert m.weight(0).alpha[0] == pytest.approx(-1.0 + 0.1)


def test_sgd_zero_grad_noop():
    m = tiny_model()
    state = OptimizerState.for_model(m, lr=0.1, momentum=0.9, weight_decay=0.0)
    sgd_step(m, state, const_grads(m, 0.0, 0.0))
    assert m.weight(0).mu[0] == 1.0 and m.weight(0).alpha[0] == -1.0


def test_sgd_momentum_two_steps():
    m = tiny_model()
    state = OptimizerState.for_model(m, lr=0.1, momentum=0.9, weight_decay=0.0)
    g = 0.5
    sgd_step(m, state, const_grads(m, g, 0.0))
    sgd_step(m, state, const_grads(m, g, 0.0))
    assert m.weight(0).mu[0] == pytest.approx(1.0 - 0.1 * g - 0.1 * 1.9 * g, abs=1e-15)


def test_weight_decay_skips_alpha():
    m = tiny_model()
    state = OptimizerState.for_model(m, lr=0.1, momentum=0.0, weight_decay=0.5)
    sgd_step(m, state, const_grads(m, 0.0, 0.0))
    assert m.weight(0).mu[0] == pytest.approx(1.0 - 0.1 * 0.5 * 1.0)
    assert m.weight(0).alpha[0] == -1.0


# -- prediction ----------------------------------------------------------------


def test_predict_deterministic_uniform():
    model = init_model(mlp_spec(3, [4], 5), DETERMINISTIC, 0)
    for p in model.params:
        p.mu[:] = 0
    np.testing.assert_allclose(predict_proba(model, np.ones((2, 3)), s=7), 0.2)


def test_predict_tiny_sigma_sample_count():
    model = random_model([3, 4, 3], seed=8, alpha_range=(-40, -40))
    x = np.random.default_rng(1).normal(size=(5, 3))
    np.testing.assert_allclose(predict_proba(model, x, 1, 0), predict_proba(model, x, 100, 0), atol=1e-6)


def test_predict_rows_normalised():
    model = random_model([3, 6, 4], seed=2, alpha_range=(-2, 1))
    p = predict_proba(model, np.random.default_rng(0).normal(size=(20, 3)), 10, 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all((p >= 0) & (p <= 1))


def test_predict_needs_samples():
    with pytest.raises(UsageError):
        predict_proba(random_model([2, 3, 2]), np.zeros((1, 2)), s=0)


# -- checkpoint ----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = random_model([3, 5, 2], seed=6)
    path = save_checkpoint(model, tmp_path / "m.bfck")
    raw = path.read_bytes()
    assert raw[:4] == b"BFCK"
    back = load_checkpoint(path)
    assert back.specs == model.specs and back.mode == model.mode
    for a, b in zip(model.params, back.params):
        assert np.array_equal(a.mu, b.mu) and np.array_equal(a.alpha, b.alpha)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(UsageError):
        load_checkpoint(tmp_path / "x")
