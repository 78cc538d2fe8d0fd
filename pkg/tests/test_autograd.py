import math

import numpy as np
import pytest

import cdnet.autograd as ag
from cdnet.autograd import Tensor
from gradcheck import fd_gradient, gradcheck, rel_err


@pytest.fixture(autouse=True)
def float64_mode():
    with ag.precision("float64"):
        yield


def t(data, rg=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        out = ag.matmul(t(np.eye(2)), t([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = ag.matmul(t([[1.0, 0.0], [0.0, 0.0]]), t([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ag.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))

    def test_gradient_vs_fd(self):
        rng = np.random.default_rng(0)
        a = t(rng.normal(size=(3, 4)))
        b = t(rng.normal(size=(4, 2)))
        gradcheck(lambda: ag.sum_all(ag.matmul(a, b)), [a, b], h=1e-6, tol=1e-6)

    def test_transpose_b_gradient(self):
        rng = np.random.default_rng(1)
        a = t(rng.normal(size=(2, 3, 4)))
        b = t(rng.normal(size=(5, 4)))
        gradcheck(lambda: ag.sum_all(ag.matmul(a, b, transpose_b=True)), [a, b])


class TestMaskedSoftmax:
    def test_symmetric_row(self):
        out = ag.masked_softmax(t([[1.0, 1.0, 1.0, 1.0]]),
                                np.array([[True, False, True, False]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.0, 0.5, 0.0]], atol=1e-12)

    def test_closed_form(self):
        out = ag.masked_softmax(t([[0.0, math.log(2.0)]]), np.array([[True, True]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 2 / 3]], atol=1e-12)

    def test_empty_row_gives_zeros(self):
        out = ag.masked_softmax(t([[7.0, -3.0, 2.0]]),
                                np.array([[False, False, False]]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_rows_sum_to_one_and_exact_zeros(self):
        rng = np.random.default_rng(2)
        logits = t(rng.normal(size=(40, 9)))
        allowed = rng.random((40, 9)) > 0.4
        out = ag.masked_softmax(logits, allowed).data
        assert np.all(out[~allowed] == 0.0)
        sums = out.sum(axis=-1)
        has_any = allowed.any(axis=-1)
        np.testing.assert_allclose(sums[has_any], 1.0, atol=1e-6)
        np.testing.assert_array_equal(sums[~has_any], 0.0)

    def test_gradient_vs_fd(self):
        rng = np.random.default_rng(3)
        logits = t(rng.normal(size=(5, 7)))
        allowed = rng.random((5, 7)) > 0.3
        w = rng.normal(size=(5, 7))
        gradcheck(lambda: ag.sum_all(ag.mul(ag.masked_softmax(logits, allowed), Tensor(w))),
                  [logits])


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert ag.sigmoid(t([0.0])).data[0] == 0.5

    def test_relu(self):
        np.testing.assert_array_equal(ag.relu(t([-3.0, 3.0])).data, [0.0, 3.0])

    def test_tanh_gradient_at_zero(self):
        x = t([0.0])
        fd = fd_gradient(lambda: float(ag.tanh(x).data[0]), x)
        np.testing.assert_allclose(fd, [1.0], atol=1e-8)
        loss = ag.sum_all(ag.tanh(x))
        loss.backward()
        np.testing.assert_allclose(x.grad, [1.0], atol=1e-12)

    def test_broadcast_mismatch(self):
        with pytest.raises(ValueError):
            ag.add(t(np.zeros((3, 2))), t(np.zeros((4, 2))))


class TestConcat:
    def test_basic(self):
        out = ag.concat_last([t([1.0, 2.0]), t([3.0])])
        np.testing.assert_array_equal(out.data, [1, 2, 3])

    def test_single_part_identity(self):
        a = t([[1.0, 2.0]])
        np.testing.assert_array_equal(ag.concat_last([a]).data, a.data)

    def test_backward_splits(self):
        a, b = t([[1.0, 2.0]]), t([[3.0, 4.0, 5.0]])
        ag.sum_all(ag.concat_last([a, b])).backward()
        np.testing.assert_array_equal(a.grad, [[1, 1]])
        np.testing.assert_array_equal(b.grad, [[1, 1, 1]])

    def test_leading_dim_mismatch(self):
        with pytest.raises(ValueError):
            ag.concat_last([t(np.zeros((2, 2))), t(np.zeros((3, 2)))])


def spaced_values(rng, shape, gap=0.05):
    """Random-looking values whose pairwise gaps exceed ``gap`` (safe argmax)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) * gap * 2.0) + rng.uniform(-gap / 4, gap / 4, size=n)
    return vals.reshape(shape)


class TestSegmentPool:
    def test_one_segment_max(self):
        x = t([[1.0, -2.0], [3.0, 0.0]])
        out = ag.segment_pool(x, [0, 0], [True, True], 1, mode="max")
        np.testing.assert_array_equal(out.data, [[3.0, 0.0]])

    def test_single_row_identity(self):
        x = t([[1.5, -0.5, 2.0]])
        for mode in ("max", "mean"):
            out = ag.segment_pool(x, [0], [True], 1, mode=mode)
            np.testing.assert_array_equal(out.data, x.data)

    def test_mean(self):
        x = t([[1.0, -2.0], [3.0, 0.0]])
        out = ag.segment_pool(x, [0, 0], [True, True], 1, mode="mean")
        np.testing.assert_array_equal(out.data, [[2.0, -1.0]])

    def test_empty_segment_zeros(self):
        x = t([[1.0, 2.0]])
        out = ag.segment_pool(x, [0], [True], 3, mode="max")
        np.testing.assert_array_equal(out.data[1:], np.zeros((2, 2)))

    def test_out_of_range_segment(self):
        with pytest.raises(ValueError):
            ag.segment_pool(t([[1.0]]), [5], [True], 2)

    def test_tie_breaks_to_lowest_index(self):
        x = t([[2.0], [2.0], [1.0]])
        out = ag.segment_pool(x, [0, 0, 0], [True] * 3, 1, mode="max")
        ag.sum_all(out).backward()
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0]])

    def test_gradient_vs_fd(self):
        rng = np.random.default_rng(4)
        x = t(spaced_values(rng, (6, 3)))
        seg = np.array([0, 0, 1, 1, 1, 0])
        valid = np.array([True] * 6)
        w = rng.normal(size=(2, 3))
        for mode in ("max", "mean"):
            gradcheck(lambda m=mode: ag.sum_all(
                ag.mul(ag.segment_pool(x, seg, valid, 2, mode=m), Tensor(w))), [x])


class TestCrossEntropy:
    def test_binary_half(self):
        loss = ag.binary_cross_entropy(t([0.5]), [1.0])
        np.testing.assert_allclose(loss.data, [math.log(2.0)], rtol=1e-12)

    def test_categorical_uniform(self):
        loss = ag.softmax_cross_entropy(t([[0.0, 0.0, 0.0, 0.0]]), [2])
        np.testing.assert_allclose(loss.data, [math.log(4.0)], rtol=1e-9)

    def test_categorical_against_direct_softmax(self):
        logits = np.array([2.0, 0.0, 0.0, 0.0])
        expected = -math.log(math.exp(2.0) / (math.exp(2.0) + 3.0))
        loss = ag.softmax_cross_entropy(t([logits]), [0])
        np.testing.assert_allclose(loss.data, [expected], rtol=1e-12)

    def test_gold_out_of_range(self):
        with pytest.raises(ValueError):
            ag.softmax_cross_entropy(t([[0.0, 1.0]]), [2])

    def test_gradients(self):
        rng = np.random.default_rng(5)
        p = t(rng.uniform(0.05, 0.95, size=4))
        y = np.array([1.0, 0.0, 1.0, 0.0])
        gradcheck(lambda: ag.mean_all(ag.binary_cross_entropy(p, y)), [p])
        logits = t(rng.normal(size=(3, 5)))
        gold = np.array([0, 4, 2])
        gradcheck(lambda: ag.mean_all(ag.softmax_cross_entropy(logits, gold)), [logits])


class TestEveryOpGradient:
    """Spec invariant: all differentiable ops pass FD checks in 64-bit."""

    def test_suite(self):
        rng = np.random.default_rng(6)

        x = t(rng.normal(size=(4, 5)))
        y = t(rng.normal(size=(5,)))  # broadcast
        gradcheck(lambda: ag.sum_all(ag.add(x, y)), [x, y])
        gradcheck(lambda: ag.sum_all(ag.sub(x, y)), [x, y])
        gradcheck(lambda: ag.sum_all(ag.mul(x, y)), [x, y])
        gradcheck(lambda: ag.sum_all(ag.scale(x, 3.7)), [x])

        s = t(rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.2)
        gradcheck(lambda: ag.sum_all(ag.relu(s)), [s])
        gradcheck(lambda: ag.sum_all(ag.sigmoid(s)), [s])
        gradcheck(lambda: ag.sum_all(ag.tanh(s)), [s])

        a = t(rng.normal(size=(2, 3, 4)))
        b = t(rng.normal(size=(4, 5)))
        gradcheck(lambda: ag.sum_all(ag.matmul(a, b)), [a, b])

        c1, c2 = t(rng.normal(size=(3, 2))), t(rng.normal(size=(3, 3)))
        w = rng.normal(size=(3, 5))
        gradcheck(lambda: ag.sum_all(ag.mul(ag.concat_last([c1, c2]), Tensor(w))),
                  [c1, c2])

        r = t(rng.normal(size=(2, 6)))
        w2 = rng.normal(size=(3, 4))
        gradcheck(lambda: ag.sum_all(ag.mul(ag.reshape(r, (3, 4)), Tensor(w2))), [r])

        pm = t(rng.normal(size=(2, 3, 4)))
        wp = rng.normal(size=(4, 2, 3))
        gradcheck(lambda: ag.sum_all(ag.mul(ag.permute(pm, (2, 0, 1)), Tensor(wp))), [pm])

        emb = t(rng.normal(size=(7, 3)))
        ids = rng.integers(0, 7, size=(2, 4))
        gradcheck(lambda: ag.sum_all(ag.embedding(emb, ids)), [emb])

        ln_x = t(rng.normal(size=(3, 6)))
        ln_g = t(rng.normal(size=6) + 1.0)
        ln_b = t(rng.normal(size=6))
        wl = rng.normal(size=(3, 6))
        gradcheck(lambda: ag.sum_all(ag.mul(ag.layer_norm(ln_x, ln_g, ln_b), Tensor(wl))),
                  [ln_x, ln_g, ln_b])

        sp = t(rng.normal(size=(2, 4, 3)))
        wv = rng.normal(size=(2, 3))
        gradcheck(lambda: ag.sum_all(ag.mul(ag.select_position(sp, 2), Tensor(wv))), [sp])

        ir = t(rng.normal(size=(6, 3)))
        idx = np.array([4, 0, 4, 2])
        wi = rng.normal(size=(4, 3))
        gradcheck(lambda: ag.sum_all(ag.mul(ag.index_rows(ir, idx), Tensor(wi))), [ir])

        m = t(rng.normal(size=(4, 3)))
        gradcheck(lambda: ag.mean_all(m), [m])

    def test_gru(self):
        rng = np.random.default_rng(7)
        N, T, DX, DH = 2, 4, 3, 3
        x = t(rng.normal(size=(N, T, DX)))
        lengths = np.array([4, 2])
        ws = [t(rng.normal(size=(DX, DH)) * 0.5) for _ in range(3)]
        us = [t(rng.normal(size=(DH, DH)) * 0.5) for _ in range(3)]
        bs = [t(rng.normal(size=DH) * 0.1) for _ in range(3)]
        wmix = rng.normal(size=(N, T, DH))
        for reverse in (False, True):
            def loss(rev=reverse):
                h = ag.gru_sequence(x, lengths, ws[0], ws[1], ws[2],
                                    us[0], us[1], us[2], bs[0], bs[1], bs[2],
                                    reverse=rev)
                return ag.sum_all(ag.mul(h, Tensor(wmix)))
            gradcheck(loss, [x] + ws + us + bs)


class TestGraphHygiene:
    def test_off_path_tensor_keeps_no_grad(self):
        x = t([1.0, 2.0])
        unused = t([5.0])
        ag.sum_all(ag.mul(x, x)).backward()
        assert unused.grad is None

    def test_no_grad_context(self):
        x = t([1.0])
        with ag.no_grad():
            out = ag.sigmoid(x)
        assert out._backward is None and not out.requires_grad
