import numpy as np
import pytest

from sfao.errors import BadMagic, DimensionMismatch, EmptyDataset, TruncatedFile
from sfao.mlp import (MlpParams, evaluate, forward, init_params,
                      load_checkpoint, loss_and_grads, save_checkpoint)


def tiny_net():
    return MlpParams(W1=np.array([[1.0]]), b1=np.array([0.0]),
                     W2=np.array([[1.0]]), b2=np.array([0.0]))


class TestForward:
    def test_zero_params_zero_logits(self):
        p = MlpParams(np.zeros((3, 4)), np.zeros(4), np.zeros((4, 2)), np.zeros(2))
        logits = forward(p, np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_array_equal(logits, np.zeros((5, 2)))

    def test_scalar_chain(self):
        assert forward(tiny_net(), [[2.0]])[0, 0] == 2.0

    def test_relu_clips_negative(self):
        p = tiny_net()
        p.b2 = np.array([0.25])
        assert forward(p, [[-1.0]])[0, 0] == 0.25

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            forward(tiny_net(), np.ones((2, 3)))


class TestLossAndGrads:
    def test_uniform_prediction_is_ln2(self):
        p = MlpParams(np.zeros((4, 3)), np.zeros(3), np.zeros((3, 2)), np.zeros(2))
        loss, _ = loss_and_grads(p, np.random.default_rng(1).normal(size=(6, 4)),
                                 [0, 1, 0, 1, 1, 0])
        assert loss == pytest.approx(np.log(2.0), abs=1e-9)

    def test_confident_correct_is_near_zero(self):
        p = tiny_net()
        p.W2 = np.array([[50.0, -50.0]])
        p.b2 = np.zeros(2)
        loss, grads = loss_and_grads(p, [[1.0]], [0])
        assert loss == pytest.approx(0.0, abs=1e-12)
        for g in grads:
            np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(2)
        p = init_params(4, 3, 2, seed=0)
        loss, _ = loss_and_grads(p, rng.normal(size=(8, 4)),
                                 rng.integers(0, 2, size=8))
        assert loss >= 0.0

    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(3)
        p = init_params(5, 4, 3, seed=1)
        logits = forward(p, rng.normal(size=(7, 5)))
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_masked_head_zeroes_inactive_columns(self):
        rng = np.random.default_rng(4)
        p = init_params(4, 3, 6, seed=2)
        _, grads = loss_and_grads(p, rng.normal(size=(5, 4)),
                                  [2, 3, 2, 3, 2], active=[2, 3])
        gW2 = grads[2].reshape(3, 6)
        gb2 = grads[3]
        np.testing.assert_array_equal(gW2[:, [0, 1, 4, 5]], 0.0)
        np.testing.assert_array_equal(gb2[[0, 1, 4, 5]], 0.0)
        assert np.abs(gW2[:, [2, 3]]).max() > 0.0


def finite_difference_grads(params, X, y, h=1e-5, active=None):
    flats = params.flatten()
    out = []
    for ti, flat in enumerate(flats):
        g = np.zeros_like(flat)
        for j in range(flat.shape[0]):
            for sign in (+1.0, -1.0):
                bumped = [f.copy() for f in flats]
                bumped[ti][j] += sign * h
                loss, _ = loss_and_grads(params.with_flat(bumped), X, y,
                                         active=active)
                g[j] += sign * loss
        out.append(g / (2.0 * h))
    return out


class TestGradientCheck:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = init_params(4, 3, 2, seed=seed + 7)
        X = rng.normal(size=(6, 4))
        y = rng.integers(0, 2, size=6)
        _, analytic = loss_and_grads(p, X, y)
        numeric = finite_difference_grads(p, X, y)
        for a, n in zip(analytic, numeric):
            scale = np.maximum(np.abs(n), 1e-3)
            assert np.max(np.abs(a - n) / scale) <= 1e-4

    def test_masked_head_gradients_match_too(self):
        rng = np.random.default_rng(11)
        p = init_params(4, 3, 4, seed=3)
        X = rng.normal(size=(6, 4))
        y = rng.integers(2, 4, size=6)
        _, analytic = loss_and_grads(p, X, y, active=[2, 3])
        numeric = finite_difference_grads(p, X, y, active=[2, 3])
        for a, n in zip(analytic, numeric):
            scale = np.maximum(np.abs(n), 1e-3)
            assert np.max(np.abs(a - n) / scale) <= 1e-4


class TestEvaluate:
    def test_perfect_model(self):
        p = tiny_net()
        p.W2 = np.array([[1.0, -1.0]])
        X = np.array([[1.0], [2.0]])
        assert evaluate(p, X, [0, 0]) == 1.0

    def test_zero_params_ties_to_class_zero(self):
        p = MlpParams(np.zeros((2, 3)), np.zeros(3), np.zeros((3, 2)), np.zeros(2))
        X = np.random.default_rng(5).normal(size=(10, 2))
        y = np.array([0] * 6 + [1] * 4)
        assert evaluate(p, X, y) == 0.6  # class-0 fraction exactly

    def test_single_wrong_example(self):
        p = tiny_net()
        p.W2 = np.array([[1.0, -1.0]])
        assert evaluate(p, [[1.0]], [1]) == 0.0

    def test_empty_dataset_raises(self):
        with pytest.raises(EmptyDataset):
            evaluate(tiny_net(), np.zeros((0, 1)), [])


class TestFlattening:
    def test_round_trip_bitwise(self):
        p = init_params(5, 4, 3, seed=9)
        q = p.with_flat(p.flatten())
        for a, b in zip(p.tensors(), q.tensors()):
            np.testing.assert_array_equal(a, b)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_params(5, 4, 3, seed=10)
        path = tmp_path / "m.ckpt"
        save_checkpoint(p, path)
        q = load_checkpoint(path)
        for a, b in zip(p.tensors(), q.tensors()):
            assert a.shape == b.shape
            np.testing.assert_allclose(a, b, atol=1e-6)  # float32 payload

    def test_magic_header(self, tmp_path):
        p = init_params(2, 2, 2, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(p, path)
        assert path.read_bytes()[:4] == b"SFAO"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(BadMagic):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        p = init_params(2, 2, 2, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(p, path)
        (tmp_path / "cut.ckpt").write_bytes(path.read_bytes()[:-10])
        with pytest.raises(TruncatedFile):
            load_checkpoint(tmp_path / "cut.ckpt")
