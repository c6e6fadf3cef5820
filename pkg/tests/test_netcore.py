import json

import numpy as np
import pytest
from mpmath import mp, mpf, tanh as mp_tanh

from qwrlab.exceptions import DecodeError, RejectedInputError, TrainingDivergenceError
from qwrlab.netcore import (
    Adam,
    AdamState,
    LayerSpec,
    Net,
    adam_step,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
)


def fd_gradient(f, params, h=1e-5):
    g = np.zeros_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        g[i] = (f(params + e) - f(params - e)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4):
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric) / np.maximum(scale, 1e-6)
    assert err.max() <= rtol, f"max relative error {err.max():.2e}"


def mp_forward(net, x):
    """Affine+activation chain evaluated in 40-digit arithmetic."""
    mp.dps = 40
    h = [mpf(float(v)) for v in x]
    for spec, (W, b) in zip(net.layers, net.weights()):
        out = []
        for j in range(spec.output_width):
            z = mpf(float(b[j])) + sum(h[i] * mpf(float(W[i, j])) for i in range(spec.input_width))
            if spec.activation == "relu":
                z = max(z, mpf(0))
            elif spec.activation == "tanh":
                z = mp_tanh(z)
            out.append(z)
        h = out
    return np.array([float(v) for v in h])


class TestForward:
    def test_identity_layer(self):
        net = Net([LayerSpec(2, 2, "identity")], params=[1, 0, 0, 1, 0, 0])
        np.testing.assert_array_equal(forward(net, np.array([1.0, 2.0])), [1.0, 2.0])

    def test_relu_clamps_negative_bias(self):
        net = Net([LayerSpec(3, 2, "relu")], params=np.r_[np.zeros(6), -1.0, 3.0])
        np.testing.assert_array_equal(forward(net, np.array([5.0, -2.0, 7.0])), [0.0, 3.0])

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_high_precision_chain(self, seed):
        net = Net.mlp([4, 7, 3], activation="tanh", rng_seed=seed)
        net.params[net.params == 0] = 0.1  # make biases non-trivial
        x = np.random.default_rng(seed).normal(size=4)
        np.testing.assert_allclose(forward(net, x), mp_forward(net, x), rtol=1e-13, atol=1e-14)

    def test_batched_matches_rowwise(self):
        net = Net.mlp([3, 5, 2], rng_seed=1)
        X = np.random.default_rng(0).normal(size=(4, 6, 3))
        out = net.forward(X)
        assert out.shape == (4, 6, 2)
        np.testing.assert_allclose(out[2, 3], net.forward(X[2, 3]), rtol=0, atol=1e-15)

    def test_pure_function(self):
        net = Net.mlp([3, 4, 1], rng_seed=2)
        x = np.ones(3)
        before = net.params.copy()
        np.testing.assert_array_equal(net.forward(x), net.forward(x))
        np.testing.assert_array_equal(net.params, before)

    def test_wrong_width_rejected(self):
        net = Net.mlp([3, 4, 1])
        with pytest.raises(RejectedInputError):
            net.forward(np.ones(5))

    def test_bad_chain_rejected(self):
        with pytest.raises(RejectedInputError):
            Net([LayerSpec(2, 3), LayerSpec(4, 1)])

    def test_wrong_param_count_rejected(self):
        with pytest.raises(RejectedInputError):
            Net([LayerSpec(2, 3)], params=np.zeros(5))


class TestBackward:
    def test_linear_scalar(self):
        net = Net([LayerSpec(1, 1, "identity")], params=[0.7, -0.2])
        np.testing.assert_array_equal(backward(net, np.array([2.0]), np.array([1.0])), [2.0, 1.0])

    def test_zero_cotangent(self):
        net = Net.mlp([3, 8, 2], rng_seed=0)
        np.testing.assert_array_equal(net.backward(np.ones(3), np.zeros(2)), np.zeros(net.n_params))

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_finite_differences(self, seed, activation):
        rng = np.random.default_rng(seed)
        net = Net.mlp([3, 6, 5, 2], activation=activation, rng_seed=seed)
        net.params = net.params + 0.1 * rng.normal(size=net.n_params)
        X = rng.normal(size=(4, 3))
        cot = rng.normal(size=(4, 2))

        def f(p):
            return float(np.sum(Net(net.layers, params=p).forward(X) * cot))

        assert_grad_close(net.backward(X, cot), fd_gradient(f, net.params))

    def test_input_gradient(self):
        rng = np.random.default_rng(3)
        net = Net.mlp([3, 5, 2], activation="tanh", rng_seed=3)
        x = rng.normal(size=(2, 3))
        cot = rng.normal(size=(2, 2))
        _, gx = net.vjp(x, cot, input_grad=True)
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[idx] = 1e-5
            num[idx] = (np.sum(net.forward(x + e) * cot) - np.sum(net.forward(x - e) * cot)) / 2e-5
        assert_grad_close(gx, num)


def reference_adam(params, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-python Adam on a scalar, one line per formula."""
    m = v = 0.0
    p = params
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (vh ** 0.5 + eps)
    return p


class TestAdam:
    def test_zero_grad_fixed_point(self):
        state = AdamState.zeros(3, 0.1)
        p = np.array([1.0, -2.0, 3.0])
        new_p, new_state = adam_step(state, p, np.zeros(3))
        np.testing.assert_array_equal(new_p, p)
        assert new_state.step_count == 1

    @pytest.mark.parametrize("g", [3.0, -0.01])
    def test_first_step_descends(self, g):
        new_p, _ = adam_step(AdamState.zeros(1, 1e-3), np.zeros(1), np.array([g]))
        assert np.sign(new_p[0]) == -np.sign(g)

    def test_three_steps_on_quadratic(self):
        # f(p) = 0.5 * a * (p - c)^2, gradient a * (p - c)
        a, c, lr = 2.5, 1.3, 0.05
        opt = Adam(1, lr)
        p = np.array([-0.4])
        grads = []
        for _ in range(3):
            g = a * (p[0] - c)
            grads.append(g)
            p = opt.update(p, np.array([g]))
        assert opt.step_count == 3
        # the reference recomputes the same gradient sequence
        q, ref_grads = -0.4, []
        for _ in range(3):
            ref_grads.append(a * (q - c))
            q = reference_adam(-0.4, ref_grads, lr)
        np.testing.assert_allclose(p[0], q, rtol=0, atol=1e-12)

    def test_inputs_not_modified(self):
        state = AdamState.zeros(2, 0.1)
        p, g = np.ones(2), np.ones(2)
        adam_step(state, p, g)
        np.testing.assert_array_equal(state.first_moment, 0.0)
        np.testing.assert_array_equal(p, 1.0)

    def test_nonfinite_gradient_raises(self):
        with pytest.raises(TrainingDivergenceError) as info:
            adam_step(AdamState.zeros(2, 0.1), np.zeros(2), np.array([1.0, np.nan]))
        assert info.value.step == 1

    def test_shape_mismatch(self):
        with pytest.raises(RejectedInputError):
            adam_step(AdamState.zeros(2, 0.1), np.zeros(3), np.zeros(3))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        nets = {"a": Net.mlp([3, 4, 2], rng_seed=1), "b": Net.mlp([2, 1], out_activation="tanh", rng_seed=2)}
        save_checkpoint(tmp_path / "x.ckpt", nets, {"note": 1})
        loaded, meta = load_checkpoint(tmp_path / "x.ckpt")
        assert meta == {"note": 1}
        for name, net in nets.items():
            assert loaded[name].layers == net.layers
            assert loaded[name].params.tobytes() == net.params.tobytes()

    def test_header_is_json_line(self, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", {"a": Net.mlp([1, 1])})
        header = (tmp_path / "x.ckpt").read_bytes().split(b"\n", 1)[0]
        assert json.loads(header)["format"] == "qwrlab-params/1"

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {"a": Net.mlp([3, 4])})
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DecodeError):
            load_checkpoint(path)

    def test_garbage(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"not json\n1234")
        with pytest.raises(DecodeError):
            load_checkpoint(path)
