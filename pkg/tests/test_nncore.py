import numpy as np
import pytest

from cpspan import nncore
from cpspan.exceptions import InvalidArgumentError, TrainingDivergenceError
from cpspan.gradcheck import max_gradient_error, numerical_gradient
from cpspan.nncore import (
    AdamState,
    DenseLayer,
    Tape,
    ViewAutoencoder,
    adam_step,
    backward,
    decode,
    encode,
    reconstruction_loss,
)


def tiny_ae(n_in=3, d=2, hidden=(4,), seed=0):
    return ViewAutoencoder.build(n_in, d, hidden, rng=seed)


def zero_ae(n_in=3, d=2):
    ae = tiny_ae(n_in, d)
    for p in ae.parameters().values():
        p[...] = 0.0
    return ae


class TestForward:
    def test_zero_params_give_zero(self):
        ae = zero_ae()
        x = np.random.default_rng(0).standard_normal((5, 3))
        assert np.array_equal(encode(ae, x), np.zeros((5, 2)))
        assert np.array_equal(decode(ae, np.ones((7, 2))), np.zeros((7, 3)))

    def test_identity_layer(self):
        layer = DenseLayer(np.eye(3), np.zeros(3), "identity")
        ae = ViewAutoencoder([layer], [DenseLayer(np.eye(3), np.zeros(3), "identity")])
        x = np.random.default_rng(1).standard_normal((4, 3))
        assert np.array_equal(encode(ae, x), x)

    def test_shapes(self):
        ae = ViewAutoencoder.build(6, 10, (8, 8), rng=0)
        x = np.random.default_rng(2).standard_normal((4, 6))
        h = encode(ae, x)
        assert h.shape == (4, 10)
        assert decode(ae, np.zeros((7, 10))).shape == (7, 6)
        assert decode(ae, h).shape == x.shape

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            encode(tiny_ae(), np.zeros((2, 5)))

    def test_default_architecture(self):
        ae = ViewAutoencoder.build(20, 10, rng=0)
        assert [l.n_out for l in ae.encoder] == [500, 500, 2000, 10]
        assert [l.n_out for l in ae.decoder] == [2000, 500, 500, 20]
        assert [l.activation for l in ae.encoder] == ["relu"] * 3 + ["identity"]
        assert ae.decoder[-1].activation == "identity"

    def test_glorot_init_bounds(self):
        ae = ViewAutoencoder.build(20, 10, (30,), rng=0)
        layer = ae.encoder[0]
        limit = np.sqrt(6 / (20 + 30))
        assert np.abs(layer.weight).max() <= limit
        assert (layer.bias == 0).all()


class TestReconstructionLoss:
    def test_identical(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        assert reconstruction_loss(x, x.copy()) == 0.0

    def test_single_difference(self):
        assert reconstruction_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])) == 1.0

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(3)
        x, y = rng.standard_normal((8, 5)), rng.standard_normal((8, 5))
        expected = 0.0
        for i in range(8):
            for j in range(5):
                expected += (x[i, j] - y[i, j]) ** 2
        assert reconstruction_loss(x, y) == pytest.approx(expected / 8, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            reconstruction_loss(np.zeros((2, 2)), np.zeros((2, 3)))


class TestBackward:
    def test_single_linear_layer_sum(self):
        rng = np.random.default_rng(0)
        layer = DenseLayer(rng.standard_normal((2, 3)), rng.standard_normal(2), "identity")
        x = rng.standard_normal((4, 3))
        tape = Tape()
        out = nncore.forward([layer], x, tape, "enc.")
        grads, gx = backward(tape, np.ones_like(out))
        # d sum(xW^T + b) / dW[o, i] = sum_b x[b, i]
        assert np.allclose(grads["enc.0.weight"], np.tile(x.sum(axis=0), (2, 1)))
        num = numerical_gradient(lambda: float(nncore.forward([layer], x).sum()), layer.weight)
        assert max_gradient_error(grads["enc.0.weight"], num) <= 1e-4

    def test_constant_loss_zero_gradients(self):
        ae = tiny_ae()
        x = np.random.default_rng(0).standard_normal((3, 3))
        tape = Tape()
        h = encode(ae, x, tape)
        grads, gx = backward(tape, np.zeros_like(h))
        assert all((g == 0).all() for g in grads.values())
        assert (gx == 0).all()

    def test_relu_subgradient_zero_at_kink(self):
        layer = DenseLayer(np.array([[1.0]]), np.array([0.0]), "relu")
        tape = Tape()
        nncore.forward([layer], np.array([[0.0]]), tape)
        grads, gx = backward(tape, np.array([[1.0]]))
        assert gx[0, 0] == 0.0 and grads["0.weight"][0, 0] == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_reconstruction_gradient_matches_fd(self, seed):
        ae = tiny_ae(4, 2, (5,), seed=seed)
        x = np.random.default_rng(100 + seed).standard_normal((6, 4))

        def loss():
            return reconstruction_loss(x, decode(ae, encode(ae, x)))

        te, td = Tape(), Tape()
        xr = decode(ae, encode(ae, x, te), td)
        _, g = reconstruction_loss(x, xr, return_grad=True)
        gd, gh = backward(td, g)
        ge, _ = backward(te, gh)
        analytic = {**ge, **gd}
        for name, p in ae.parameters().items():
            assert max_gradient_error(analytic[name], numerical_gradient(loss, p)) <= 1e-4, name

    def test_empty_tape(self):
        with pytest.raises(InvalidArgumentError):
            backward(Tape(), np.zeros((1, 1)))


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        state = AdamState.for_params(p, lr=0.1)
        adam_step(p, {"w": np.zeros(2)}, state)
        assert p["w"].tolist() == [1.0, -2.0]
        assert state.step == 1

    def test_hand_recurrence_three_steps(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p = {"x": np.array([0.0])}
        state = AdamState.for_params(p, lr=lr)
        m = v = 0.0
        x = 0.0
        previous = 0.0
        for t in range(1, 4):
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            adam_step(p, {"x": np.array([1.0])}, state)
            assert p["x"][0] == pytest.approx(x, abs=1e-15)
            assert p["x"][0] < previous
            previous = p["x"][0]

    def test_zero_lr(self):
        p = {"w": np.array([[1.0, 2.0]])}
        state = AdamState.for_params(p, lr=0.0)
        for _ in range(3):
            adam_step(p, {"w": np.array([[5.0, -3.0]])}, state)
        assert p["w"].tolist() == [[1.0, 2.0]]

    def test_nonfinite_gradient_names_tensor(self):
        p = {"enc.w": np.zeros(2)}
        with pytest.raises(TrainingDivergenceError) as err:
            adam_step(p, {"enc.w": np.array([np.nan, 0.0])}, AdamState.for_params(p, 0.1))
        assert err.value.tensor == "enc.w"

    def test_accumulators_mirror_params(self):
        ae = tiny_ae()
        state = AdamState.for_params(ae.parameters(), lr=1e-3)
        for k, p in ae.parameters().items():
            assert state.m[k].shape == p.shape and state.v[k].shape == p.shape


class TestTraining:
    def test_determinism_and_descent(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((32, 5))

        def train():
            ae = ViewAutoencoder.build(5, 2, (8,), rng=1)
            state = AdamState.for_params(ae.parameters(), lr=1e-2)
            losses = []
            for _ in range(60):
                te, td = Tape(), Tape()
                xr = decode(ae, encode(ae, x, te), td)
                loss, g = reconstruction_loss(x, xr, return_grad=True)
                gd, gh = backward(td, g)
                ge, _ = backward(te, gh)
                adam_step(ae.parameters(), {**ge, **gd}, state)
                losses.append(loss)
            return ae, losses

        a, la = train()
        b, lb = train()
        assert a.equals(b)
        assert la == lb
        assert la[-1] < la[0]


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, tmp_path, dtype):
        ae = ViewAutoencoder.build(7, 3, (5, 4), rng=2, view_id=1, dtype=dtype)
        path = tmp_path / "m.ckpt"
        nncore.save_checkpoint(ae, path)
        back = nncore.load_checkpoint(path)
        assert back.equals(ae)
        assert back.dtype == dtype

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"hello")
        with pytest.raises(InvalidArgumentError):
            nncore.load_checkpoint(path)
