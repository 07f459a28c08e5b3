import numpy as np
import pytest

from fimode.errors import InvalidStateError
from fimode.nn import (
    Dropout,
    FeedForward,
    Gelu,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    global_grad_norm,
    softmax_last,
)


def fd_check(forward, backward, params, rng, eps=1e-6, tol=1e-6):
    """Central finite differences against the analytic gradient of a scalar
    projection of the output."""
    out0 = forward()
    proj = rng.normal(size=out0.shape)
    backward(proj)
    for p, g in params:
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + eps
            lp = float(np.sum(forward() * proj))
            p[idx] = old - eps
            lm = float(np.sum(forward() * proj))
            p[idx] = old
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - g[idx]) <= tol * max(1.0, abs(fd)), (idx, fd, g[idx])


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        s = softmax_last(rng.normal(size=(3, 4, 5)))
        assert np.allclose(s.sum(axis=-1), 1.0)

    def test_stable_for_large_inputs(self):
        s = softmax_last(np.array([1e4, 1e4 + 1.0]))
        assert np.all(np.isfinite(s))

    def test_masked_scores_get_zero_weight(self):
        scores = np.array([[1.0, 2.0, -np.inf]])
        s = softmax_last(scores)
        assert s[0, 2] == 0.0
        assert np.isclose(s[0, :2].sum(), 1.0)


class TestLinear:
    def test_forward_shape_and_value(self):
        rng = np.random.default_rng(1)
        lin = Linear(rng, 4, 3)
        x = rng.normal(size=(2, 5, 4))
        y = lin.forward(x)
        assert y.shape == (2, 5, 3)
        assert np.allclose(y[1, 2], x[1, 2] @ lin.w + lin.b)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        lin = Linear(rng, 4, 3)
        x = rng.normal(size=(5, 4))
        fd_check(
            lambda: lin.forward(x, train=True),
            lambda proj: lin.backward(proj),
            [(lin.w, lin.gw), (lin.b, lin.gb)],
            rng,
        )

    def test_input_gradient(self):
        rng = np.random.default_rng(3)
        lin = Linear(rng, 4, 4)
        x = rng.normal(size=(3, 4))
        proj = rng.normal(size=(3, 4))
        lin.forward(x, train=True)
        gx = lin.backward(proj)
        eps = 1e-6
        for i in (0, 1):
            for j in (0, 3):
                xp = x.copy(); xp[i, j] += eps
                xm = x.copy(); xm[i, j] -= eps
                fd = (np.sum(lin.forward(xp) * proj) - np.sum(lin.forward(xm) * proj)) / (2 * eps)
                assert abs(fd - gx[i, j]) < 1e-6

    def test_backward_before_forward_raises(self):
        lin = Linear(np.random.default_rng(0), 2, 2)
        with pytest.raises(InvalidStateError):
            lin.backward(np.zeros((1, 2)))

    def test_zero_init(self):
        lin = Linear(np.random.default_rng(0), 3, 2, zero_init=True)
        assert np.array_equal(lin.w, np.zeros((3, 2)))


class TestLayerNorm:
    def test_output_normalized(self):
        rng = np.random.default_rng(4)
        ln = LayerNorm(8)
        y = ln.forward(rng.normal(2.0, 5.0, size=(10, 8)))
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-10)
        assert np.allclose(y.std(axis=-1), 1.0, atol=1e-2)

    def test_gradients(self):
        rng = np.random.default_rng(5)
        ln = LayerNorm(6)
        ln.gain[:] = rng.normal(1.0, 0.2, 6)
        ln.bias[:] = rng.normal(0.0, 0.2, 6)
        x = rng.normal(size=(4, 6))
        state = {}

        def fwd():
            return ln.forward(x, train=True)

        def bwd(proj):
            state["gx"] = ln.backward(proj)

        fd_check(fwd, bwd, [(ln.gain, ln.g_gain), (ln.bias, ln.g_bias)], rng)

    def test_input_gradient(self):
        rng = np.random.default_rng(6)
        ln = LayerNorm(5)
        x = rng.normal(size=(3, 5))
        proj = rng.normal(size=(3, 5))
        ln.forward(x, train=True)
        gx = ln.backward(proj)
        eps = 1e-6
        for idx in [(0, 0), (1, 3), (2, 4)]:
            xp = x.copy(); xp[idx] += eps
            xm = x.copy(); xm[idx] -= eps
            fd = (np.sum(ln.forward(xp) * proj) - np.sum(ln.forward(xm) * proj)) / (2 * eps)
            assert abs(fd - gx[idx]) < 1e-6


class TestGelu:
    def test_values(self):
        g = Gelu()
        y = g.forward(np.array([0.0, 100.0, -100.0]))
        assert y[0] == 0.0
        assert y[1] == pytest.approx(100.0)
        assert y[2] == pytest.approx(0.0, abs=1e-10)

    def test_gradient(self):
        rng = np.random.default_rng(7)
        g = Gelu()
        x = rng.normal(size=(10,))
        proj = rng.normal(size=(10,))
        g.forward(x, train=True)
        gx = g.backward(proj)
        eps = 1e-6
        fd = (g.forward(x + eps) - g.forward(x - eps)) / (2 * eps) * proj
        assert np.allclose(gx, fd, atol=1e-7)


class TestDropout:
    def test_inference_identity(self):
        d = Dropout(0.5)
        x = np.ones((4, 4))
        assert np.array_equal(d.forward(x, train=False), x)

    def test_rate_zero_identity_in_train(self):
        d = Dropout(0.0)
        x = np.ones((4, 4))
        assert np.array_equal(d.forward(x, train=True), x)

    def test_scaling_preserves_mean(self):
        rng = np.random.default_rng(8)
        d = Dropout(0.3)
        x = np.ones((200, 200))
        y = d.forward(x, train=True, rng=rng)
        assert abs(y.mean() - 1.0) < 0.02

    def test_backward_uses_same_mask(self):
        rng = np.random.default_rng(9)
        d = Dropout(0.4)
        x = np.ones((10, 10))
        y = d.forward(x, train=True, rng=rng)
        g = d.backward(np.ones_like(x))
        assert np.array_equal(g, y)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            Dropout(1.0)


class TestMultiHeadAttention:
    def test_shapes(self):
        rng = np.random.default_rng(10)
        attn = MultiHeadAttention(rng, 8, 2)
        q = rng.normal(size=(2, 3, 8))
        kv = rng.normal(size=(2, 7, 8))
        out = attn.forward(q, kv)
        assert out.shape == (2, 3, 8)

    def test_mask_equivalent_to_removing_columns(self):
        rng = np.random.default_rng(11)
        attn = MultiHeadAttention(rng, 8, 2)
        q = rng.normal(size=(1, 3, 8))
        kv = rng.normal(size=(1, 6, 8))
        mask = np.array([[True, True, False, True, False, True]])
        masked = attn.forward(q, kv, key_mask=mask)
        removed = attn.forward(q, kv[:, mask[0]])
        assert np.allclose(masked, removed, atol=1e-12)

    def test_duplicated_keys_renormalize_exactly(self):
        # closed form: duplicating every key/value column leaves the
        # attention-weighted values unchanged
        rng = np.random.default_rng(12)
        attn = MultiHeadAttention(rng, 8, 2)
        q = rng.normal(size=(1, 4, 8))
        kv = rng.normal(size=(1, 5, 8))
        once = attn.forward(q, kv)
        twice = attn.forward(q, np.concatenate([kv, kv], axis=1))
        assert np.allclose(once, twice, rtol=1e-12, atol=1e-13)

    def test_parameter_gradients(self):
        rng = np.random.default_rng(13)
        attn = MultiHeadAttention(rng, 4, 2)
        q = rng.normal(size=(1, 3, 4))
        kv = rng.normal(size=(1, 5, 4))
        params = [(p, g) for _, p, g in attn.params("attn")]
        fd_check(
            lambda: attn.forward(q, kv, train=True),
            lambda proj: attn.backward(proj),
            params,
            rng,
            tol=5e-6,
        )

    def test_input_gradients(self):
        rng = np.random.default_rng(14)
        attn = MultiHeadAttention(rng, 4, 1)
        q = rng.normal(size=(1, 2, 4))
        kv = rng.normal(size=(1, 3, 4))
        proj = rng.normal(size=(1, 2, 4))
        attn.forward(q, kv, train=True)
        dq, dkv = attn.backward(proj)
        eps = 1e-6
        qp = q.copy(); qp[0, 1, 2] += eps
        qm = q.copy(); qm[0, 1, 2] -= eps
        fd = (np.sum(attn.forward(qp, kv) * proj) - np.sum(attn.forward(qm, kv) * proj)) / (2 * eps)
        assert abs(fd - dq[0, 1, 2]) < 1e-6
        kp = kv.copy(); kp[0, 2, 1] += eps
        km = kv.copy(); km[0, 2, 1] -= eps
        fd = (np.sum(attn.forward(q, kp) * proj) - np.sum(attn.forward(q, km) * proj)) / (2 * eps)
        assert abs(fd - dkv[0, 2, 1]) < 1e-6

    def test_width_must_divide(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(np.random.default_rng(0), 6, 4)

    def test_precomputed_kv_matches(self):
        rng = np.random.default_rng(15)
        attn = MultiHeadAttention(rng, 8, 2)
        q = rng.normal(size=(1, 3, 8))
        kv = rng.normal(size=(1, 6, 8))
        direct = attn.forward(q, kv)
        cached = attn.forward(q, None, kv=attn.project_kv(kv))
        assert np.array_equal(direct, cached)

    def test_precomputed_kv_rejected_in_train(self):
        rng = np.random.default_rng(16)
        attn = MultiHeadAttention(rng, 8, 2)
        q = rng.normal(size=(1, 3, 8))
        kv = rng.normal(size=(1, 6, 8))
        with pytest.raises(ValueError):
            attn.forward(q, None, train=True, kv=attn.project_kv(kv))


class TestFeedForward:
    def test_gradients(self):
        rng = np.random.default_rng(17)
        ff = FeedForward(rng, 4, 6)
        x = rng.normal(size=(3, 4))
        params = [(p, g) for _, p, g in ff.params("ff")]
        fd_check(
            lambda: ff.forward(x, train=True),
            lambda proj: ff.backward(proj),
            params,
            rng,
            tol=5e-6,
        )


def test_global_grad_norm():
    g1 = np.array([3.0])
    g2 = np.array([4.0])
    named = [("a", g1, g1), ("b", g2, g2)]
    assert global_grad_norm(named) == pytest.approx(5.0)
