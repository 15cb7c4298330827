import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffproj.constraints import build_random_feasible
from diffproj.exceptions import DimensionMismatchError, TrainingDivergedError
from diffproj.neural import (
    LossSpec,
    LossVariant,
    MlpModel,
    RmsPropState,
    backward,
    forward,
    load_model,
    loss_and_grad,
    predict,
    rmsprop_step,
    save_model,
    train,
)
from diffproj.projection import ProjectionConfig, project


def _fd_param_grads(model, loss_fn, h=1e-6):
    params = model.params()
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (loss_fn(model.with_params(plus)) - loss_fn(model.with_params(minus))) / (2 * h)
        out.append(g)
    return out


def _rel_err(a, b):
    a = np.concatenate([x.ravel() for x in a])
    b = np.concatenate([x.ravel() for x in b])
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestForward:
    def test_zero_weights_give_final_bias(self):
        model = MlpModel.init([3, 4, 2], seed=0)
        params = [np.zeros_like(p) for p in model.params()]
        params[-1] = np.array([1.5, -2.0])
        out, _ = forward(model.with_params(params), np.ones((5, 3)))
        np.testing.assert_array_equal(out, np.tile([1.5, -2.0], (5, 1)))

    def test_identity_model(self, rng):
        model = MlpModel([np.eye(4)], [np.zeros(4)])
        x = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(forward(model, x)[0], x)

    def test_grouped_softmax_sums_to_one(self, rng):
        model = MlpModel.init([5, 6, 12], hidden_activation="tanh", output_activation="softmax", softmax_group=3, seed=1)
        out, _ = forward(model, rng.standard_normal((4, 5)))
        np.testing.assert_allclose(out.reshape(4, 4, 3).sum(axis=-1), 1.0, atol=1e-12)

    def test_layer_sizes(self):
        assert MlpModel.init([64, 128, 128, 8], seed=0).layer_sizes == [64, 128, 128, 8]

    def test_bad_chain(self):
        with pytest.raises(DimensionMismatchError):
            MlpModel([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])


class TestBackward:
    @pytest.mark.parametrize("act", ["tanh", "sigmoid", "relu"])
    def test_output_gradient_matches_fd(self, act, rng):
        model = MlpModel.init([4, 5, 3], hidden_activation=act, seed=2)
        x = rng.standard_normal((6, 4))
        w = rng.standard_normal((6, 3))
        out, cache = forward(model, x)
        grads = backward(model, cache, w)
        fd = _fd_param_grads(model, lambda m: float(np.sum(forward(m, x)[0] * w)))
        assert _rel_err(grads, fd) < 1e-5

    def test_softmax_gradient(self, rng):
        model = MlpModel.init([3, 4, 6], hidden_activation="tanh", output_activation="softmax", softmax_group=3, seed=3)
        x = rng.standard_normal((2, 3))
        w = rng.standard_normal((2, 6))
        out, cache = forward(model, x)
        fd = _fd_param_grads(model, lambda m: float(np.sum(forward(m, x)[0] * w)))
        assert _rel_err(backward(model, cache, w), fd) < 1e-5


@pytest.fixture
def small_problem():
    cs, anchor = build_random_feasible(3, 4, seed=5, margin=0.1)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((8, 4))
    Y = anchor + 0.05 * rng.standard_normal((8, 3))
    model = MlpModel.init([4, 6, 3], hidden_activation="tanh", seed=9)
    # push raw outputs away from the anchor so projection is active
    params = model.params()
    params[-1] = params[-1] + 2.0
    return cs, model.with_params(params), (X, Y)


class TestLossAndGrad:
    def test_zero_layers_equals_plain_mse(self, small_problem):
        cs, model, (X, Y) = small_problem
        cfg = ProjectionConfig(layers=0)
        a = loss_and_grad(model, (X, Y), cs, cfg, LossSpec.mse_projected())
        b = loss_and_grad(model, (X, Y), None, None, LossSpec.mse_projected())
        assert a[0] == b[0]
        for ga, gb in zip(a[1], b[1]):
            assert np.array_equal(ga, gb)

    def test_feasible_outputs_equal_dnn_gradient(self, rng):
        cs, anchor = build_random_feasible(3, 4, seed=5, margin=0.5)
        # zero output weights: every output is the bias = anchor, strictly feasible
        model = MlpModel.init([4, 6, 3], hidden_activation="tanh", seed=1)
        params = model.params()
        params[-2] = np.zeros_like(params[-2])
        params[-1] = np.array(anchor)
        model = model.with_params(params)
        batch = (rng.standard_normal((5, 4)), rng.standard_normal((5, 3)))
        a = loss_and_grad(model, batch, cs, ProjectionConfig(layers=3), LossSpec.mse_projected())
        b = loss_and_grad(model, batch, None, None, LossSpec.mse_projected())
        assert a[0] == b[0]
        for ga, gb in zip(a[1], b[1]):
            assert np.array_equal(ga, gb)

    @pytest.mark.parametrize(
        "spec",
        [LossSpec.mse_projected(), LossSpec.blended(0.3), LossSpec.residual_penalty()],
        ids=["mse_projected", "blended", "residual_penalty"],
    )
    def test_matches_finite_differences(self, small_problem, spec):
        cs, model, batch = small_problem
        cfg = ProjectionConfig(layers=3, lam=0.9)
        loss, grads = loss_and_grad(model, batch, cs, cfg, spec)
        fd = _fd_param_grads(model, lambda m: loss_and_grad(m, batch, cs, cfg, spec)[0])
        assert _rel_err(grads, fd) < 1e-4

    def test_blended_endpoints(self, small_problem):
        cs, model, batch = small_problem
        cfg = ProjectionConfig(layers=3)
        l0 = loss_and_grad(model, batch, cs, cfg, LossSpec.blended(0.0))[0]
        l1 = loss_and_grad(model, batch, cs, cfg, LossSpec.blended(1.0))[0]
        assert l0 == pytest.approx(loss_and_grad(model, batch, cs, cfg, LossSpec.mse_projected())[0], abs=1e-15)
        assert l1 == pytest.approx(loss_and_grad(model, batch, None, None, LossSpec.mse_projected())[0], abs=1e-15)

    def test_fixed_penalty_adds_constant_and_no_gradient(self, small_problem):
        cs, model, batch = small_problem
        cfg = ProjectionConfig(layers=0)
        base, g_base = loss_and_grad(model, batch, cs, cfg, LossSpec.mse_projected())
        pen, g_pen = loss_and_grad(model, batch, cs, cfg, LossSpec.fixed_penalty(2.0))
        f = forward(model, batch[0])[0]
        frac = np.mean(np.any(f @ cs.normals.T - cs.offsets > 0, axis=1))
        assert pen == pytest.approx(base + 2.0 * frac)
        for a, b in zip(g_base, g_pen):
            assert np.array_equal(a, b)

    def test_residual_penalty_value(self, small_problem):
        cs, model, batch = small_problem
        cfg = ProjectionConfig(layers=0)
        loss = loss_and_grad(model, batch, cs, cfg, LossSpec.residual_penalty())[0]
        f = forward(model, batch[0])[0]
        expected = np.mean((f - batch[1]) ** 2) + np.mean(np.maximum(f @ cs.normals.T - cs.offsets, 0).sum(axis=1))
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_loss_spec_validation(self):
        with pytest.raises(ValueError):
            LossSpec.blended(1.5)
        assert LossSpec.from_dict(LossSpec.blended(0.25).to_dict()) == LossSpec.blended(0.25)
        assert LossSpec().variant is LossVariant.MSE_PROJECTED


class TestRmsProp:
    def test_hand_step(self):
        state = RmsPropState([np.zeros(1)], alpha=0.01, beta=0.1, delta=0.0, epsilon=1e-8)
        params, new = rmsprop_step([np.ones(1)], [np.ones(1)], state)
        assert new.s[0][0] == pytest.approx(0.1, abs=1e-17)
        assert params[0][0] == 1.0 - 0.01 / (np.sqrt(0.1) + 1e-8)

    def test_zero_gradient_decays_accumulator(self):
        state = RmsPropState([np.full(3, 4.0)], beta=0.1, delta=0.0)
        theta = np.array([1.0, 2.0, 3.0])
        params, new = rmsprop_step([theta], [np.zeros(3)], state)
        np.testing.assert_array_equal(params[0], theta)
        np.testing.assert_allclose(new.s[0], 0.9 * 4.0)

    def test_inputs_untouched(self):
        theta, s = np.ones(2), np.zeros(2)
        state = RmsPropState([s])
        rmsprop_step([theta], [np.ones(2)], state)
        assert np.array_equal(theta, np.ones(2)) and np.array_equal(s, np.zeros(2))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=6), st.floats(0.01, 0.99))
    def test_accumulator_nonnegative(self, grads, beta):
        g = np.array(grads)
        state = RmsPropState.zeros_like([np.zeros_like(g)], beta=beta)
        p = [np.zeros_like(g)]
        for _ in range(3):
            p, state = rmsprop_step(p, [g], state)
            assert np.all(state.s[0] >= 0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            rmsprop_step([np.ones(2)], [np.ones(3)], RmsPropState([np.zeros(2)]))

    @pytest.mark.parametrize("kw", [{"alpha": 0}, {"beta": 1.0}, {"epsilon": 0.0}])
    def test_bad_hyperparameters(self, kw):
        with pytest.raises(ValueError):
            RmsPropState([], **kw)


def _toy_regression(n=200, seed=0):
    cs, anchor = build_random_feasible(3, 4, seed=seed, margin=0.1)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 5))
    Y = anchor + 0.1 * np.tanh(X[:, :3])
    return cs, X, Y


class TestTrain:
    def test_deterministic(self):
        cs, X, Y = _toy_regression()
        runs = []
        for _ in range(2):
            model = MlpModel.init([5, 8, 3], seed=4)
            runs.append(train(model, (X, Y), cs, ProjectionConfig(layers=2), None, 3, seed=7)[0])
        for a, b in zip(runs[0].params(), runs[1].params()):
            assert np.array_equal(a, b)

    def test_one_epoch_matches_manual_loop(self):
        cs, X, Y = _toy_regression(n=70)
        model = MlpModel.init([5, 8, 3], seed=4)
        trained, _ = train(model, (X, Y), cs, ProjectionConfig(layers=0), None, 1, seed=11, batch_size=16)

        order = np.random.default_rng(11).permutation(len(X))
        state = RmsPropState.zeros_like(model)
        m = model
        for start in range(0, len(X), 16):
            idx = order[start : start + 16]
            f, cache = forward(m, X[idx])
            grads = backward(m, cache, (2.0 / f.size) * (f - Y[idx]))
            m, state = rmsprop_step(m, grads, state)
        for a, b in zip(trained.params(), m.params()):
            assert np.array_equal(a, b)

    def test_loss_decreases(self):
        cs, X, Y = _toy_regression(n=400)
        model = MlpModel.init([5, 16, 3], seed=0)
        _, hist = train(model, (X, Y), cs, ProjectionConfig(layers=3), None, 10, seed=0, validation=(X[:50], Y[:50]))
        assert all(np.isfinite(hist.loss))
        assert hist.loss[-1] < hist.loss[0]
        assert len(hist.val_mse) == 10

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self):
        cs, X, Y = _toy_regression(n=40)
        model = MlpModel.init([5, 4, 3], seed=0)
        params = [p * 1e200 for p in model.params()]
        with pytest.raises(TrainingDivergedError):
            train(model.with_params(params), (X, Y * 1e200), cs, ProjectionConfig(layers=1), None, 1, seed=0)

    def test_predict_projects(self):
        cs, X, Y = _toy_regression(n=50)
        model = MlpModel.init([5, 4, 3], seed=0)
        params = model.params()
        params[-1] = params[-1] + 3.0
        model = model.with_params(params)
        cfg = ProjectionConfig(layers=20)
        out = predict(model, X, cs, cfg)
        raw = forward(model, X)[0]
        np.testing.assert_array_equal(out, project(cs, raw, cfg).output)
        np.testing.assert_array_equal(predict(model, X), raw)


def test_checkpoint_round_trip(tmp_path):
    model = MlpModel.init([4, 7, 12], hidden_activation="tanh", output_activation="softmax", softmax_group=3, seed=5)
    path = tmp_path / "m.bin"
    save_model(model, path)
    back = load_model(path)
    assert back.hidden_activation == "tanh" and back.softmax_group == 3
    for a, b in zip(model.params(), back.params()):
        assert a.tobytes() == b.tobytes()
    save_model(back, tmp_path / "m2.bin")
    assert path.read_bytes() == (tmp_path / "m2.bin").read_bytes()


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_model(path)


def test_cosine_schedule_first_epoch_matches_constant():
    cs, X, Y = _toy_regression(n=64)
    model = MlpModel.init([5, 4, 3], seed=0)
    a, _ = train(model, (X, Y), cs, None, None, 1, seed=0, lr_schedule="cosine")
    b, _ = train(model, (X, Y), cs, None, None, 1, seed=0)
    for p, q in zip(a.params(), b.params()):
        assert np.array_equal(p, q)
    c, _ = train(model, (X, Y), cs, None, None, 2, seed=0, lr_schedule="cosine")
    d, _ = train(model, (X, Y), cs, None, None, 2, seed=0)
    assert not np.array_equal(c.params()[0], d.params()[0])
    with pytest.raises(ValueError):
        train(model, (X, Y), cs, None, None, 1, seed=0, lr_schedule="step")
