import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcew import stgcnn
from lcew.errors import DataError
from lcew.trajdata import Scene

from conftest import overfit_scene


def _random_model(rng, N, T, F, d_hidden=4, **kw):
    cfg = stgcnn.ModelConfig(T=T, F=F, d_hidden=d_hidden, **kw)
    params = stgcnn.ModelParams.init(cfg, seed=int(rng.integers(2 ** 31)))
    for name in params:
        # nonzero biases and slopes so every parameter class is exercised
        if name.endswith((".b", ".alpha")):
            params.tensors[name] = rng.normal(0.0, 0.3, params[name].shape)
    hist = np.cumsum(rng.normal(0, 1, (T, 2, N)), axis=0)
    return params, hist


# ---------------------------------------------------------------------------
# layers


def test_gcn_single_node_prelu_example():
    V = np.array([[[2.0, -4.0]]])
    out = stgcnn.gcn_forward(V, np.ones((1, 1, 1)), np.eye(2), 0.25)
    np.testing.assert_array_equal(out, [[[2.0, -1.0]]])


def test_gcn_zero_weights_zero_output():
    rng = np.random.default_rng(0)
    out = stgcnn.gcn_forward(rng.normal(size=(3, 4, 2)), rng.random((3, 4, 4)), np.zeros((2, 5)), 0.25)
    assert out.shape == (3, 4, 5) and not out.any()


def test_gcn_matches_triple_loop():
    rng = np.random.default_rng(1)
    T, N, D, H = 2, 3, 2, 4
    V, A, W = rng.normal(size=(T, N, D)), rng.random((T, N, N)), rng.normal(size=(D, H))
    out = stgcnn.gcn_forward(V, A, W, 0.25)
    for t in range(T):
        for i in range(N):
            for h in range(H):
                z = sum(A[t, i, j] * V[t, j, d] * W[d, h] for j in range(N) for d in range(D))
                assert out[t, i, h] == pytest.approx(z if z > 0 else 0.25 * z, abs=1e-12)


def test_gcn_shape_mismatch():
    with pytest.raises(DataError):
        stgcnn.gcn_forward(np.zeros((2, 3, 2)), np.zeros((2, 4, 4)), np.zeros((2, 4)), 0.25)


def test_zero_params_give_persistence():
    sc = overfit_scene()
    cfg = stgcnn.ModelConfig(T=sc.T, F=sc.F)
    pred = stgcnn.predict(sc, stgcnn.ModelParams.zeros(cfg), "mi")
    np.testing.assert_array_equal(pred, stgcnn.persistence(sc, sc.F))
    assert pred.shape == (sc.F, 2, sc.n_vehicles)


def test_single_vehicle_rejected():
    cfg = stgcnn.ModelConfig(T=5, F=3)
    with pytest.raises(DataError):
        stgcnn.predict(np.zeros((5, 2, 1)), stgcnn.ModelParams.zeros(cfg), "l2")


def test_variable_n_with_one_parameter_set():
    rng = np.random.default_rng(2)
    params, _ = _random_model(rng, 2, 6, 4)
    for N in (2, 3, 7):
        hist = np.cumsum(rng.normal(size=(6, 2, N)), axis=0)
        assert stgcnn.predict(hist, params, "l2").shape == (4, 2, N)


# ---------------------------------------------------------------------------
# loss and gradients


def test_loss_zero_when_exact():
    rng = np.random.default_rng(3)
    params, hist = _random_model(rng, 3, 5, 4)
    A = stgcnn.scene_adjacency(hist, "l2")
    tape = stgcnn.Tape()
    pred = stgcnn.forward(params, hist, A, tape)
    loss, grads = stgcnn.mse_loss_and_grad(pred, pred.copy(), params, tape)
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_loss_single_entry_example():
    cfg = stgcnn.ModelConfig(T=2, F=1)
    params = stgcnn.ModelParams.zeros(cfg)
    tape = stgcnn.Tape()
    pred = stgcnn.forward(params, np.zeros((2, 2, 1)), np.ones((2, 1, 1)), tape)
    loss, _ = stgcnn.mse_loss_and_grad(pred, np.array([[[3.0], [4.0]]]), params, tape)
    assert loss == 12.5


@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params, hist = _random_model(rng, 3, 5, 4, gcn_layers=1 + seed % 2)
    A = stgcnn.scene_adjacency(hist, "mi" if seed % 2 else "l2")
    truth = rng.normal(0, 3, (4, 2, 3))
    assert stgcnn.gradient_check(params, hist, A, truth) < 1e-4


# ---------------------------------------------------------------------------
# invariances


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2 ** 31), st.sampled_from(["mi", "l2", "long"]))
def test_permutation_equivariance(N, seed, kind):
    rng = np.random.default_rng(seed)
    params, hist = _random_model(rng, N, 8, 6)
    perm = rng.permutation(N)
    a = stgcnn.predict(hist, params, kind)
    b = stgcnn.predict(hist[:, :, perm], params, kind)
    assert np.max(np.abs(b - a[:, :, perm])) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(-64, 64), st.integers(-64, 64), st.sampled_from(["mi", "l2", "long"]))
def test_translation_shifts_predictions(seed, dx, dy, kind):
    rng = np.random.default_rng(seed)
    params, _ = _random_model(rng, 3, 6, 5)
    # positions on a dyadic grid keep the shifted displacements exact
    hist = np.round(np.cumsum(rng.normal(size=(6, 2, 3)), axis=0) * 8) / 8
    shift = np.array([dx, dy], dtype=float)[None, :, None]
    a = stgcnn.predict(hist, params, kind)
    b = stgcnn.predict(hist + shift, params, kind)
    np.testing.assert_allclose(b, a + shift, rtol=0, atol=1e-9)


# ---------------------------------------------------------------------------
# training


def test_lr_schedule_on_default_config():
    cfg = stgcnn.ModelConfig()
    assert [cfg.lr_at(e) for e in (1, 50, 51, 100)] == [0.01, 0.01, 0.002, 0.002]
    sc = overfit_scene(T=cfg.T, F=cfg.F)
    _, rep = stgcnn.train([sc], "l2", cfg)
    lrs = [e["lr"] for e in rep.epochs]
    assert len(lrs) == 100
    assert set(lrs[:50]) == {0.01} and set(lrs[50:]) == {0.002}


def test_training_is_deterministic():
    sc = overfit_scene()
    cfg = stgcnn.ModelConfig(T=sc.T, F=sc.F, epochs=30, seed=5)
    p1, r1 = stgcnn.train([sc, sc.permuted([1, 0, 3, 2])], "mi", cfg)
    p2, r2 = stgcnn.train([sc, sc.permuted([1, 0, 3, 2])], "mi", cfg)
    assert p1.equals(p2) and r1.epochs == r2.epochs


def test_training_reduces_loss():
    sc = overfit_scene(seed=1)
    cfg = stgcnn.ModelConfig(T=sc.T, F=sc.F, epochs=200, lr_drop_epoch=10 ** 9)
    _, rep = stgcnn.train([sc], "mi", cfg)
    assert rep.epochs[-1]["train_loss"] < 0.05 * rep.epochs[0]["train_loss"]


def test_train_rejects_mismatched_scene():
    sc = overfit_scene()
    with pytest.raises(DataError):
        stgcnn.train([sc], "l2", stgcnn.ModelConfig(T=sc.T + 1, F=sc.F))


def test_config_validation():
    with pytest.raises(ValueError):
        stgcnn.ModelConfig(txp_kernel=2)
    with pytest.raises(ValueError):
        stgcnn.ModelConfig(epochs=0)
