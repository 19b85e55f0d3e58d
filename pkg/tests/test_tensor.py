import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from timbre_gmvae import tensor as T
from timbre_gmvae.gradcheck import check_gradients
from timbre_gmvae.optim import Adam, AdamState, adam_step, xavier_init
from timbre_gmvae.tensor import BatchNormState, Tensor


def naive_conv1d(x, w, b):
    c_out, c_in, k = w.shape
    t = x.shape[1]
    pad = k // 2
    out = np.zeros((c_out, t))
    for o in range(c_out):
        for i in range(t):
            acc = b[o]
            for c in range(c_in):
                for j in range(k):
                    src = i + j - pad
                    if 0 <= src < t:
                        acc += w[o, c, j] * x[c, src]
            out[o, i] = acc
    return out


def naive_dense(x, w, b):
    return np.array([sum(w[i, j] * x[j] for j in range(len(x))) + b[i] for i in range(len(b))])


class TestConv1d:
    def test_zero_input_gives_bias(self):
        w = Tensor(np.random.default_rng(0).normal(size=(4, 3, 3)))
        b = Tensor([1.0, -2.0, 0.5, 3.0])
        out = T.conv1d(Tensor(np.zeros((3, 7))), w, b)
        assert np.allclose(out.data, np.array(b.data)[:, None])

    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 9)).astype(np.float32)
        out = T.conv1d(Tensor(x), Tensor([[[0.0, 1.0, 0.0]]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(2, 3, 3)), rng.normal(size=2)
        with T.float64_mode():
            out = T.conv1d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, naive_conv1d(x, w, b), atol=1e-6)

    def test_batched_matches_per_example(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(4, 3, 6)), rng.normal(size=(5, 3, 3)), rng.normal(size=5)
        with T.float64_mode():
            out = T.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
        for i in range(4):
            np.testing.assert_allclose(out[i], naive_conv1d(x[i], w, b), atol=1e-9)

    @pytest.mark.parametrize("wshape,bshape", [((2, 4, 3), (2,)), ((2, 3, 2), (2,)), ((2, 3, 3), (3,))])
    def test_shape_mismatch(self, wshape, bshape):
        with pytest.raises(T.ContractError):
            T.conv1d(Tensor(np.zeros((3, 5))), Tensor(np.zeros(wshape)), Tensor(np.zeros(bshape)))


class TestDense:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0], dtype=np.float32)
        out = T.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input(self):
        b = np.array([0.5, -1.0], dtype=np.float32)
        out = T.dense(Tensor(np.zeros(3)), Tensor(np.ones((2, 3))), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_matches_dot_oracle(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.normal(size=3), rng.normal(size=(4, 3)), rng.normal(size=4)
        with T.float64_mode():
            out = T.dense(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, naive_dense(x, w, b), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(T.ContractError):
            T.dense(Tensor(np.zeros(4)), Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


class TestBatchnorm:
    def test_train_mode_standardises(self):
        x = np.random.default_rng(5).normal(3.0, 2.0, size=(16, 5))
        with T.float64_mode():
            out = T.batchnorm(Tensor(x), BatchNormState.create(5), "train").data
        np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-5)

    def test_train_mode_updates_running_stats(self):
        state = BatchNormState.create(2)
        x = np.array([[1.0, 10.0], [3.0, 20.0]], dtype=np.float32)
        T.batchnorm(Tensor(x), state, "train")
        np.testing.assert_allclose(state.running_mean, 0.1 * np.array([2.0, 15.0]), rtol=1e-6)
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * np.array([2.0, 50.0]), rtol=1e-6)

    def test_infer_mode_identity(self):
        x = np.random.default_rng(6).normal(size=(3, 4)).astype(np.float32)
        out = T.batchnorm(Tensor(x), BatchNormState.create(4), "infer").data
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-6)
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_infer_leaves_state(self):
        state = BatchNormState.create(4)
        T.batchnorm(Tensor(np.ones((3, 4))), state, "infer")
        assert state.n_updates == 0 and np.all(state.running_mean == 0)

    def test_batch_of_one_rejected(self):
        with pytest.raises(T.ContractError):
            T.batchnorm(Tensor(np.ones((1, 4))), BatchNormState.create(4), "train")

    @pytest.mark.parametrize("shape", [(4, 3), (4, 2, 5)])
    def test_gradient_matches_fd(self, shape):
        rng = np.random.default_rng(7)
        with T.float64_mode():
            x = Tensor(rng.normal(size=shape), requires_grad=True)
            state = BatchNormState.create(shape[1])
            state.scale.data[:] = rng.normal(size=shape[1])
            coef = rng.normal(size=shape)

            def f():
                return (T.batchnorm(x, state, "train") * coef).sum()

            assert check_gradients(f, [x, state.scale, state.shift]) < 1e-4


class TestPointwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_softmax_equal_logits(self):
        out = T.softmax(Tensor(np.full(12, 3.7)))
        np.testing.assert_allclose(out.data, 1 / 12, rtol=1e-6)

    def test_log_sum_exp_no_overflow(self):
        out = T.log_sum_exp(Tensor([1000.0, 1000.0], dtype=np.float64))
        assert out.item() == pytest.approx(1000 + math.log(2), abs=1e-12)

    def test_log_domain(self):
        with pytest.raises(T.DomainError):
            T.log(Tensor([1.0, 0.0]))

    def test_dispatch(self):
        x = Tensor([[0.5, -0.5]])
        np.testing.assert_array_equal(T.pointwise(x, "tanh").data, np.tanh(x.data))
        with pytest.raises(T.ContractError):
            T.pointwise(x, "gelu")

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 13)),
                  elements=st.floats(-50, 50)))
    def test_softmax_is_simplex(self, logits):
        p = T.softmax(Tensor(logits, dtype=np.float64), axis=1).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_non_finite_is_an_error(self):
        with pytest.raises(T.NonFiniteError):
            T.exp(Tensor([1000.0], dtype=np.float32))


class TestBackward:
    def test_linear(self):
        x = np.array([1.0, -2.0, 3.0])
        w = Tensor(np.zeros(3), requires_grad=True)
        g = T.backward((w * x).sum())
        np.testing.assert_allclose(g[w], x)

    def test_even_function_at_origin(self):
        w = Tensor([0.0], requires_grad=True)
        g = T.backward(T.square(T.tanh(w)).sum())
        assert g[w][0] == 0.0

    def test_fan_out_doubles(self):
        x = Tensor([1.5, -0.5], requires_grad=True)
        g = T.backward((x + x).sum())
        np.testing.assert_array_equal(g[x], [2.0, 2.0])

    def test_non_scalar_loss(self):
        with pytest.raises(T.ContractError):
            T.backward(Tensor([1.0, 2.0], requires_grad=True))

    def test_disconnected_params_get_zero(self):
        a, b = Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)
        g = T.backward((a * 3.0).sum(), params=[a, b])
        assert g[b][0] == 0 and g[a][0] == 3

    def test_tape_is_topological(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.tanh(x)
        z = (y * y + y).sum()
        order = T.tape(z)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]


class TestAdam:
    def test_zero_grad_no_move(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        opt = Adam([p], lr=1e-2)
        for _ in range(5):
            opt.step({p: np.zeros(2, dtype=np.float32)})
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_first_step_moves_by_lr(self):
        # m̂ = g, v̂ = g², so the update is lr * g / (|g| + eps)
        with T.float64_mode():
            p = Tensor([1.0], requires_grad=True)
        state = AdamState(lr=1e-4)
        adam_step([p], [np.array([1.0])], state)
        assert p.data[0] == pytest.approx(1 - 1e-4 / (1 + 1e-8), abs=1e-15)
        assert state.step == 1

    def test_identical_params_stay_identical(self):
        rng = np.random.default_rng(8)
        a, b = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
        opt = Adam([a, b], lr=1e-2)
        for _ in range(20):
            g = rng.normal(size=3).astype(np.float32)
            opt.step({a: g, b: g.copy()})
        np.testing.assert_array_equal(a.data, b.data)

    def test_shape_mismatch(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(T.ContractError):
            adam_step([p], [np.zeros(2)], AdamState())

    def test_lr_scale_per_param(self):
        with T.float64_mode():
            a, b = Tensor([0.0], requires_grad=True), Tensor([0.0], requires_grad=True)
        adam_step([a, b], [np.array([2.0]), np.array([2.0])], AdamState(lr=1e-3), lr_scale=[1.0, 10.0])
        assert b.data[0] == pytest.approx(10 * a.data[0], rel=1e-12)
        with pytest.raises(T.ContractError):
            adam_step([a, b], [np.zeros(1), np.zeros(1)], AdamState(), lr_scale=[1.0])


class TestXavier:
    def test_bound(self):
        w = xavier_init((3, 3), np.random.default_rng(0))
        assert np.all(np.abs(w) <= 1.0)

    def test_seeded(self):
        a = xavier_init((5, 7, 3), np.random.default_rng(11))
        b = xavier_init((5, 7, 3), np.random.default_rng(11))
        assert a.tobytes() == b.tobytes()

    def test_variance(self):
        # fan_in + fan_out = 6 for every (3, 3) draw
        rng = np.random.default_rng(2)
        samples = np.concatenate([xavier_init((3, 3), rng, dtype=np.float64).ravel() for _ in range(11_112)])
        assert samples.size >= 100_000
        assert samples.var() == pytest.approx(1 / 3, rel=0.05)


class TestInvariants:
    def test_primitives_fd_100_cases(self):
        rng = np.random.default_rng(12)
        worst = 0.0
        kinds = ["conv1d", "dense", "batchnorm", "relu", "tanh", "exp", "log", "softmax",
                 "log_softmax", "log_sum_exp", "clamp", "concat", "gather"]
        with T.float64_mode():
            for case in range(104):
                kind = kinds[case % len(kinds)]
                worst = max(worst, _fd_case(kind, rng))
        assert worst < 1e-4

    @pytest.mark.parametrize("op", ["conv1d", "dense"])
    def test_linear_in_input(self, op):
        rng = np.random.default_rng(13)
        with T.float64_mode():
            if op == "conv1d":
                w, b = Tensor(rng.normal(size=(3, 2, 3))), Tensor(rng.normal(size=3))
                x, y = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
                f = lambda v: T.conv1d(Tensor(v), w, b).data
                bias = b.data[:, None]
            else:
                w, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=3))
                x, y = rng.normal(size=4), rng.normal(size=4)
                f = lambda v: T.dense(Tensor(v), w, b).data
                bias = b.data
        a, c = 1.7, -0.6
        np.testing.assert_allclose(f(a * x + c * y), a * f(x) + c * f(y) - (a + c - 1) * bias, atol=1e-5)


def _fd_case(kind, rng):
    shape = (3, 4)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    coef = rng.normal(size=shape)
    params = [x]
    if kind == "conv1d":
        x = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        coef = rng.normal(size=(2, 2, 5))
        params = [x, w, b]
        f = lambda: (T.conv1d(x, w, b) * coef).sum()
    elif kind == "dense":
        w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        coef = rng.normal(size=(3, 5))
        params = [x, w, b]
        f = lambda: (T.dense(x, w, b) * coef).sum()
    elif kind == "batchnorm":
        st_ = BatchNormState.create(4)
        st_.scale.data[:] = rng.normal(size=4)
        params = [x, st_.scale, st_.shift]
        f = lambda: (T.batchnorm(x, st_, "train") * coef).sum()
    elif kind == "relu":
        # keep clear of the kink
        x.data[np.abs(x.data) < 1e-2] += 0.1
        f = lambda: (T.relu(x) * coef).sum()
    elif kind == "log":
        x.data[:] = np.abs(x.data) + 0.1
        f = lambda: (T.log(x) * coef).sum()
    elif kind == "clamp":
        x.data[np.abs(np.abs(x.data) - 1) < 1e-2] += 0.05
        f = lambda: (T.clamp(x, -1, 1) * coef).sum()
    elif kind == "concat":
        y = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        coef = rng.normal(size=(3, 6))
        params = [x, y]
        f = lambda: (T.concat([x, y], axis=1) * coef).sum()
    elif kind == "gather":
        idx = rng.integers(0, 3, size=5)
        coef = rng.normal(size=(5, 4))
        f = lambda: (T.gather_rows(x, idx) * coef).sum()
    elif kind == "log_sum_exp":
        coef = rng.normal(size=3)
        f = lambda: (T.log_sum_exp(x, axis=1) * coef).sum()
    else:
        fn = {"tanh": T.tanh, "exp": T.exp, "softmax": T.softmax, "log_softmax": T.log_softmax}[kind]
        f = lambda: (fn(x) * coef).sum()
    return check_gradients(f, params)
