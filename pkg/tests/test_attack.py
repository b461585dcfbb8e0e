import numpy as np
import pytest

from marginforge.attack import (AttackConfig, AttackError, evaluate_attack, fgsm,
                                gaussian_perturb, ifgsm, input_gradient)
from marginforge.data import Dataset
from marginforge.net import Dense, Model, forward, model_from_dims, predict
from marginforge.margin import cross_entropy_loss, hinge_loss

from conftest import central_diff_array, max_rel_error


def _model(seed=1, dims=(4, 8, 3)):
    return model_from_dims(list(dims), seed=seed)


def _dataset(rng, model, n=64):
    x = rng.uniform(0.0, 1.0, size=(n, model.input_dim))
    y = rng.integers(0, model.n_classes, size=n)
    return Dataset(x, y, model.n_classes, "attack-test")


def test_input_gradient_matches_finite_differences(rng):
    model = _model()
    x = rng.uniform(size=(3, 4))
    y = rng.integers(0, 3, size=3)
    g = input_gradient(model, x, y)

    from conftest import straight_forward, model_param_list, as_longdouble
    plist = as_longdouble(model_param_list(model))

    def f(xv):
        logits = straight_forward(plist, xv)[-1]
        m = logits.max(axis=1, keepdims=True)
        lse = np.squeeze(m, 1) + np.log(np.exp(logits - m).sum(axis=1))
        return np.mean(lse - logits[np.arange(len(y)), y])

    fd = central_diff_array(f, x)
    assert max_rel_error(g, fd) <= 1e-5


def test_fgsm_zero_eps_is_identity(rng):
    model = _model()
    x = rng.uniform(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    np.testing.assert_array_equal(fgsm(model, None, x, y, 0.0), x)


def test_fgsm_hand_sign_application():
    # one linear unit: loss gradient has a fixed, known sign pattern
    model = Model([Dense(2, 2)],
                  {"W0": np.array([[3.0, 0.0], [0.0, -2.0]]), "b0": np.zeros(2)},
                  2, seed=0)
    x = np.array([[0.5, 0.5]])
    y = np.array([1])

    def loss_fn(trace, labels):
        g = trace.graph
        return g.reduce_sum(g.select(trace.logits_node, [0], [0]))  # L = f_0 = 3 x0

    out = fgsm(model, loss_fn, x, y, eps=0.1)
    np.testing.assert_allclose(out, [[0.6, 0.5]], atol=1e-15)


def test_fgsm_sign_zero_convention(rng):
    model = Model([Dense(2, 2)], {"W0": np.zeros((2, 2)), "b0": np.zeros(2)}, 2, seed=0)
    x = rng.uniform(size=(3, 2))
    out = fgsm(model, None, x, np.array([0, 1, 0]), eps=0.3)
    np.testing.assert_array_equal(out, x)  # zero gradient everywhere


def test_fgsm_linf_ball_exact(rng):
    model = _model(seed=5)
    x = rng.uniform(size=(20, 4))
    y = rng.integers(0, 3, size=20)
    for eps in (0.01, 0.1, 0.5):
        out = fgsm(model, None, x, y, eps)
        assert np.max(np.abs(out - x)) <= eps + 0.0  # exact, not approximate


def test_ifgsm_ball_and_telescoping(rng):
    model = _model(seed=9)
    x = rng.uniform(size=(16, 4))
    y = rng.integers(0, 3, size=16)
    out = ifgsm(model, None, x, y, eps=0.1, alpha=0.025, iters=10)
    assert np.max(np.abs(out - x)) <= 0.1

    # gradient sign constant (linear logit loss): steps telescope, no clipping
    lin = Model([Dense(2, 2)],
                {"W0": np.array([[1.0, 0.0], [0.0, 0.0]]), "b0": np.zeros(2)}, 2, seed=0)

    def loss_fn(trace, labels):
        g = trace.graph
        col = g.select(trace.logits_node, np.arange(trace.batch_size),
                       np.zeros(trace.batch_size, dtype=int))
        return g.reduce_sum(col)

    x2 = np.array([[0.2, 0.7]])
    out2 = ifgsm(lin, loss_fn, x2, np.array([0]), eps=1.0, alpha=0.05, iters=4)
    np.testing.assert_allclose(out2, [[0.4, 0.7]], atol=1e-12)


def test_ifgsm_zero_eps_identity(rng):
    model = _model()
    x = rng.uniform(size=(4, 4))
    y = rng.integers(0, 3, size=4)
    np.testing.assert_array_equal(ifgsm(model, None, x, y, 0.0, 0.1, 10), x)


def test_gaussian_perturb_stats_and_determinism():
    x = np.zeros((1000, 1000))
    sigma = 0.25
    out = gaussian_perturb(x, sigma, seed=3)
    noise = out - x
    n = noise.size
    assert abs(noise.mean()) <= 5.0 * sigma / np.sqrt(n)
    assert noise.std() == pytest.approx(sigma, rel=0.01)
    np.testing.assert_array_equal(out, gaussian_perturb(x, sigma, seed=3))
    np.testing.assert_array_equal(gaussian_perturb(x, 0.0, seed=3), x)


def test_pixel_bounds_clamp(rng):
    model = _model(seed=2)
    x = rng.uniform(size=(10, 4))
    y = rng.integers(0, 3, size=10)
    out = fgsm(model, None, x, y, eps=0.5, pixel_bounds=(0.0, 1.0))
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.max(np.abs(out - x)) <= 0.5


def test_evaluate_attack_table_and_clean_row(rng):
    model = _model(seed=7)
    ds = _dataset(rng, model)
    cfg = AttackConfig(kind="fgsm", eps=0.2)
    eps_list = [0.0, 0.05, 0.2]
    res = evaluate_attack(model, model, ds, cfg, eps_list, keep_examples=True)
    assert [e for e, _ in res.rows] == eps_list
    assert res.accuracy_at(0.0) == res.clean_accuracy  # bit-for-bit same inputs
    for eps, x_hat in res.perturbed.items():
        assert np.max(np.abs(x_hat - ds.features)) <= eps


def test_evaluate_attack_white_box_degrades_accuracy(rng):
    # trained-ish separable model: attack should not raise accuracy
    hits = 0
    for seed in range(5):
        r = np.random.default_rng(seed)
        model = _model(seed=seed, dims=(4, 16, 2))
        w = r.normal(size=4)
        x = r.uniform(0, 1, size=(128, 4))
        y = (x @ w > np.median(x @ w)).astype(int)
        ds = Dataset(x, y, 2, "sep")
        # quick training to make the model meaningful
        from marginforge.optim import OptimizerConfig, OptimizerState, step
        from marginforge.autodiff import backward
        state = OptimizerState()
        ocfg = OptimizerConfig(kind="sgd_momentum", learning_rate=0.3, momentum=0.9)
        for _ in range(150):
            tr = forward(model, x)
            node = cross_entropy_loss(tr, y)
            gm = backward(tr.graph, node)
            grads = {nm: gm.get(nid) for nm, nid in tr.param_nodes.items()}
            model.params, state = step(model.params, grads, state, ocfg)
        res = evaluate_attack(model, model, ds, AttackConfig(kind="ifgsm", eps=0.1),
                              [0.1], seed=seed)
        if res.rows[0][1] <= res.clean_accuracy:
            hits += 1
    assert hits == 5


def test_evaluate_attack_black_box_uses_source_gradients(rng):
    a = _model(seed=1)
    b = _model(seed=2)
    ds = _dataset(rng, a, n=32)
    res = evaluate_attack(a, b, ds, AttackConfig(kind="fgsm", eps=0.1), [0.1],
                          source_name="a", target_name="b")
    assert res.source == "a" and res.target == "b"


def test_evaluate_attack_dim_mismatch():
    a = _model(dims=(4, 6, 3))
    b = _model(dims=(5, 6, 3))
    ds = Dataset(np.zeros((2, 4)), np.zeros(2, dtype=int), 3, "x")
    with pytest.raises(AttackError):
        evaluate_attack(a, b, ds, AttackConfig(kind="fgsm", eps=0.1), [0.1])


def test_attack_config_validation():
    with pytest.raises(AttackError):
        AttackConfig(kind="pgd").validate()
    with pytest.raises(AttackError):
        AttackConfig(kind="fgsm", eps=-0.1).validate()
    with pytest.raises(AttackError):
        AttackConfig(kind="ifgsm", eps=1.0, alpha=0.01, iters=5).validate()
    AttackConfig(kind="ifgsm", eps=1.0, alpha=0.25, iters=4).validate()


def test_attack_loss_independent_of_training_loss(rng):
    # gradients taken on the attack loss graph; a hinge-based attack loss
    # changes the perturbation even for the same model
    model = _model(seed=11)
    x = rng.uniform(size=(6, 4))
    y = rng.integers(0, 3, size=6)
    out_xent = fgsm(model, None, x, y, 0.1)
    out_hinge = fgsm(model, lambda tr, yy: hinge_loss(tr, yy, 1.0), x, y, 0.1)
    assert out_xent.shape == out_hinge.shape
    assert np.max(np.abs(out_xent - x)) <= 0.1
    assert np.max(np.abs(out_hinge - x)) <= 0.1
