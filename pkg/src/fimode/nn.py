"""Float64 neural-net layers with hand-written exact backward passes.

Everything operates on arrays whose last axis is the feature axis; leading
axes (batch, sequence) are arbitrary.  Layers cache forward intermediates
only when asked to (train=True) and release them on backward, so inference
never pays the memory.  Gradients accumulate into per-parameter buffers
until `zero_grad`, which is what batched training over several systems
needs.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidStateError

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Linear:
    """y = x @ w + b with w of shape (n_in, n_out).

    `stable_rows` computes the product with einsum instead of BLAS: slower
    for wide matrices but each output row is then a bit-identical function
    of its input row, independent of how many rows share the batch.  Narrow
    projections (the query trunk and the output head) use it so estimates
    cannot depend on query batching.
    """

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int,
                 zero_init: bool = False, stable_rows: bool = False):
        if zero_init:
            self.w = np.zeros((n_in, n_out))
        else:
            self.w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
        self.b = np.zeros(n_out)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.stable_rows = stable_rows
        self._x = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if train:
            self._x = x
        if self.stable_rows:
            return np.einsum("...e,ef->...f", x, self.w) + self.b
        return x @ self.w + self.b

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise InvalidStateError("backward before forward")
        x, self._x = self._x, None
        xm = x.reshape(-1, self.w.shape[0])
        gm = g.reshape(-1, self.w.shape[1])
        self.gw += xm.T @ gm
        self.gb += gm.sum(axis=0)
        return (gm @ self.w.T).reshape(x.shape)

    def params(self, prefix: str):
        yield prefix + ".w", self.w, self.gw
        yield prefix + ".b", self.b, self.gb


class LayerNorm:
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = np.ones(width)
        self.bias = np.zeros(width)
        self.eps = eps
        self.g_gain = np.zeros_like(self.gain)
        self.g_bias = np.zeros_like(self.bias)
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        if train:
            self._cache = (xhat, inv)
        return self.gain * xhat + self.bias

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise InvalidStateError("backward before forward")
        xhat, inv = self._cache
        self._cache = None
        axes = tuple(range(g.ndim - 1))
        self.g_gain += (g * xhat).sum(axis=axes)
        self.g_bias += g.sum(axis=axes)
        gx = g * self.gain
        mean_gx = gx.mean(axis=-1, keepdims=True)
        mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
        return inv * (gx - mean_gx - xhat * mean_gx_xhat)

    def params(self, prefix: str):
        yield prefix + ".gain", self.gain, self.g_gain
        yield prefix + ".bias", self.bias, self.g_bias


class Gelu:
    """Smooth tanh-form gelu; derivative is exact for this form."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        u = _GELU_C * (x + _GELU_A * x**3)
        th = np.tanh(u)
        if train:
            self._cache = (x, th)
        return 0.5 * x * (1.0 + th)

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise InvalidStateError("backward before forward")
        x, th = self._cache
        self._cache = None
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


class Dropout:
    """Inverted dropout; identity when rate is 0 or at inference."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self._mask = None

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        if not train or self.rate == 0.0:
            self._mask = 1.0 if train else None
            return x
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise InvalidStateError("backward before forward")
        mask, self._mask = self._mask, None
        return g * mask


class MultiHeadAttention:
    """Scaled dot-product attention; self- or cross- depending on inputs.

    forward takes the query stream (B, M, E) and the key/value stream
    (B, N, E) plus an optional boolean key mask (B, N); masked key slots are
    excluded from the softmax.  backward returns gradients for both streams.
    """

    def __init__(self, rng: np.random.Generator, width: int, n_heads: int):
        if width % n_heads != 0:
            raise ValueError("width must be divisible by n_heads")
        self.width = width
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.wq = Linear(rng, width, width)
        self.wk = Linear(rng, width, width)
        self.wv = Linear(rng, width, width)
        self.wo = Linear(rng, width, width)
        self._cache = None

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, _, n, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, self.width)

    def project_kv(self, kv_in: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Precompute (keys, values) for repeated queries against a fixed
        context; inference only."""
        return self._split(self.wk.forward(kv_in)), self._split(self.wv.forward(kv_in))

    def forward(
        self,
        q_in: np.ndarray,
        kv_in: np.ndarray | None,
        key_mask: np.ndarray | None = None,
        train: bool = False,
        kv: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> np.ndarray:
        if kv is not None:
            if train:
                raise ValueError("precomputed kv is an inference-only path")
            k, v = kv
        else:
            k = self._split(self.wk.forward(kv_in, train))
            v = self._split(self.wv.forward(kv_in, train))
        q = self._split(self.wq.forward(q_in, train))
        scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(self.head_dim)
        if key_mask is not None:
            scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
        attn = softmax_last(scores)
        out = self._merge(attn @ v)
        if train:
            self._cache = (q, k, v, attn)
        return self.wo.forward(out, train)

    def backward(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._cache is None:
            raise InvalidStateError("backward before forward")
        q, k, v, attn = self._cache
        self._cache = None
        d_out = self._split(self.wo.backward(g))
        d_attn = d_out @ v.transpose(0, 1, 3, 2)
        d_v = attn.transpose(0, 1, 3, 2) @ d_out
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        d_scores /= np.sqrt(self.head_dim)
        d_q = d_scores @ k
        d_k = d_scores.transpose(0, 1, 3, 2) @ q
        d_q_in = self.wq.backward(self._merge(d_q))
        d_kv_in = self.wk.backward(self._merge(d_k)) + self.wv.backward(self._merge(d_v))
        return d_q_in, d_kv_in

    def params(self, prefix: str):
        yield from self.wq.params(prefix + ".wq")
        yield from self.wk.params(prefix + ".wk")
        yield from self.wv.params(prefix + ".wv")
        yield from self.wo.params(prefix + ".wo")


class FeedForward:
    def __init__(self, rng: np.random.Generator, width: int, hidden: int):
        self.lin1 = Linear(rng, width, hidden)
        self.act = Gelu()
        self.lin2 = Linear(rng, hidden, width)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.lin2.forward(self.act.forward(self.lin1.forward(x, train), train), train)

    def backward(self, g: np.ndarray) -> np.ndarray:
        return self.lin1.backward(self.act.backward(self.lin2.backward(g)))

    def params(self, prefix: str):
        yield from self.lin1.params(prefix + ".lin1")
        yield from self.lin2.params(prefix + ".lin2")


def global_grad_norm(named_params) -> float:
    total = 0.0
    for _, _, g in named_params:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))
