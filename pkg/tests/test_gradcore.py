import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsodet.gradcore import (
    HeadGrads,
    LinearHead,
    finite_diff_check,
    linear_forward,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    sigmoid,
    softmax_over_classes,
    softmax_over_proposals,
)


class TestLinearForward:
    def test_zero_head(self):
        head = LinearHead(np.zeros((4, 3)), np.zeros(3))
        out = linear_forward(head, np.random.default_rng(0).normal(size=(5, 4)))
        assert np.array_equal(out, np.zeros((5, 3)))

    def test_identity_weights(self):
        head = LinearHead(np.eye(4), np.zeros(4))
        feats = np.random.default_rng(1).normal(size=(6, 4))
        assert np.allclose(linear_forward(head, feats), feats)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(3, 4))
        head = LinearHead(rng.normal(size=(4, 2)), rng.normal(size=2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                acc = head.b[j]
                for k in range(4):
                    acc += feats[i, k] * head.w[k, j]
                want[i, j] = acc
        assert np.allclose(linear_forward(head, feats), want, atol=1e-12)

    def test_shape_mismatch(self):
        head = LinearHead(np.zeros((4, 3)), np.zeros(3))
        with pytest.raises(ValueError):
            linear_forward(head, np.zeros((5, 7)))


class TestSoftmax:
    def test_single_class_column(self):
        out = softmax_over_classes(np.array([[3.0, -1.0, 0.5]]))
        assert np.array_equal(out, np.ones((1, 3)))

    def test_symmetric_column(self):
        out = softmax_over_classes(np.array([[0.0], [0.0]]))
        assert np.allclose(out, 0.5)

    def test_known_column(self):
        out = softmax_over_classes(np.array([[1.0], [2.0], [3.0]]))
        assert np.allclose(
            out[:, 0], [0.09003057, 0.24472847, 0.66524096], atol=1e-8
        )

    def test_single_proposal_row(self):
        out = softmax_over_proposals(np.array([[4.0], [2.0]]))
        assert np.array_equal(out, np.ones((2, 1)))

    def test_uniform_row(self):
        out = softmax_over_proposals(np.zeros((1, 4)))
        assert np.allclose(out, 0.25)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_columns_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(0, 5, size=(int(rng.integers(1, 6)), int(rng.integers(1, 8))))
        out = softmax_over_classes(x)
        assert np.all(out > 0) and np.all(out < 1 + 1e-15)
        assert np.allclose(out.sum(axis=0), 1.0, atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_transpose_equivalence_exact(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(0, 3, size=(4, 6))
        assert np.array_equal(
            softmax_over_proposals(x), softmax_over_classes(x.T).T
        )

    def test_large_inputs_stable(self):
        out = softmax_over_classes(np.array([[1000.0], [999.0]]))
        assert np.all(np.isfinite(out))


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(np.array([[0.0]]))[0, 0] == 0.5

    def test_saturation(self):
        assert sigmoid(np.array([[40.0]]))[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert sigmoid(np.array([[-40.0]]))[0, 0] < 1e-12

    def test_known_value(self):
        assert sigmoid(np.array([[1.0]]))[0, 0] == pytest.approx(0.7310585786, abs=1e-9)

    def test_extreme_no_overflow(self):
        out = sigmoid(np.array([[-800.0, 800.0]]))
        assert np.all(np.isfinite(out))


class TestSgdStep:
    def _head(self):
        rng = np.random.default_rng(5)
        return LinearHead(rng.normal(size=(3, 2)), rng.normal(size=2))

    def test_zero_grads_decay_free_is_identity_on_params(self):
        head = self._head()
        w0, b0 = head.w.copy(), head.b.copy()
        head.vw[:] = 1.0
        sgd_step(head, HeadGrads(np.zeros((3, 2)), np.zeros(2)), lr=0.0, momentum=0.5)
        assert np.array_equal(head.w, w0) and np.array_equal(head.b, b0)
        assert np.all(head.vw == 0.5)  # buffers decayed

    def test_plain_gradient_step(self):
        head = self._head()
        w0 = head.w.copy()
        g = np.full((3, 2), 0.25)
        sgd_step(head, HeadGrads(g, np.zeros(2)), lr=0.1, momentum=0.0, weight_decay=0.0)
        assert np.allclose(head.w, w0 - 0.1 * g, atol=1e-15)

    def test_two_momentum_steps(self):
        head = LinearHead(np.zeros((1, 1)), np.zeros(1))
        g = HeadGrads(np.array([[1.0]]), np.zeros(1))
        sgd_step(head, g, lr=0.1, momentum=0.9)
        sgd_step(head, g, lr=0.1, momentum=0.9)
        # step one moves lr*g, step two lr*(0.9*g + g)
        assert head.w[0, 0] == pytest.approx(-0.1 * (1.0 + 1.9), abs=1e-15)

    def test_decay_enters_buffer_before_momentum(self):
        head = LinearHead(np.array([[2.0]]), np.zeros(1))
        sgd_step(head, HeadGrads(np.zeros((1, 1)), np.zeros(1)), lr=1.0, momentum=0.0, weight_decay=0.1)
        assert head.w[0, 0] == pytest.approx(2.0 - 0.2, abs=1e-15)

    def test_shape_mismatch(self):
        head = self._head()
        with pytest.raises(ValueError):
            sgd_step(head, HeadGrads(np.zeros((9, 9)), np.zeros(2)), lr=0.1)


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        def fn(x):
            return 0.5 * float(np.sum(x * x)), x

        point = np.random.default_rng(0).normal(size=10)
        assert finite_diff_check(fn, point, epsilon=1e-5) < 1e-9

    def test_detects_wrong_gradient(self):
        def fn(x):
            return 0.5 * float(np.sum(x * x)), 2.0 * x

        point = np.random.default_rng(0).normal(size=4) + 1.0
        assert finite_diff_check(fn, point, epsilon=1e-5) > 0.1


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        heads = {
            "alpha": LinearHead(rng.normal(size=(4, 3)), rng.normal(size=3)),
            "beta": LinearHead(rng.normal(size=(2, 5)), rng.normal(size=5)),
        }
        path = tmp_path / "ck.bin"
        save_checkpoint(heads, path)
        loaded = load_checkpoint(path)
        assert list(loaded) == ["alpha", "beta"]
        for name in heads:
            assert np.array_equal(loaded[name].w, heads[name].w)
            assert np.array_equal(loaded[name].b, heads[name].b)
            assert np.all(loaded[name].vw == 0.0)

    def test_same_heads_same_bytes(self, tmp_path):
        rng = np.random.default_rng(10)
        heads = {"h": LinearHead(rng.normal(size=(3, 3)), rng.normal(size=3))}
        save_checkpoint(heads, tmp_path / "a.bin")
        save_checkpoint(heads, tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(p)
