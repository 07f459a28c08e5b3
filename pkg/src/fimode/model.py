"""The in-context vector-field estimator.

Observations are cut into consecutive-pair tokens, a transformer encoder
(the branch net) turns them into one representation per token, a linear
trunk embeds query locations, and a stack of residual cross-attention
blocks reads the context representations (keys/values) for each query
before a final linear head emits the field estimate.  Tokens carry no
series index and no positional index, so the context is a set: reordering
series or tokens cannot change the estimate.

All states the model sees are normalized per observation set; raw-scale
estimates are recovered through the normalization chain rule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .datagen import ObservationSet, fit_normalization
from .errors import InvalidStateError, NumericFailure
from .fields import StatePoint
from .nn import Dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention

MAX_DIM = 3
#: per-token features: t, dt, y (3 padded), dy (3 padded), dim mask (3)
TOKEN_FEATURES = 11


@dataclass
class ModelConfig:
    embed_width: int = 64  # E
    n_encoder_layers: int = 3
    n_combiner_layers: int = 3
    n_heads: int = 4
    ff_width: int = 128
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.embed_width % self.n_heads != 0:
            raise ValueError("embed_width must be divisible by n_heads")
        for name in ("embed_width", "n_encoder_layers", "n_combiner_layers", "n_heads", "ff_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class ContextEncoding:
    """One column (here: row of `vectors`) per observation token."""

    vectors: np.ndarray  # (N, E)
    mask: np.ndarray  # (N,) bool, False marks padded slots

    @property
    def matrix(self) -> np.ndarray:
        """Width-by-token view matching the math convention."""
        return self.vectors.T


def tokenize(obs: ObservationSet) -> tuple[np.ndarray, np.ndarray]:
    """Turn a normalized observation set into consecutive-pair tokens.

    Each series of length L yields exactly L-1 tokens
    (t_l, t_{l+1}-t_l, y_l, y_{l+1}-y_l, mask); states are zero-padded to
    three dimensions and the mask marks which of the three are real.
    Returns (tokens (N, 11), dim_mask (3,)).
    """
    dim = obs.dim
    dim_mask = np.zeros(MAX_DIM)
    dim_mask[:dim] = 1.0
    blocks = []
    for s in obs.series:
        if len(s) < 2:
            raise ValueError("every series needs at least two observations")
        n = len(s) - 1
        tok = np.zeros((n, TOKEN_FEATURES))
        tok[:, 0] = s.times[:-1]
        tok[:, 1] = np.diff(s.times)
        tok[:, 2 : 2 + dim] = s.values[:-1]
        tok[:, 5 : 5 + dim] = np.diff(s.values, axis=0)
        tok[:, 8:11] = dim_mask
        blocks.append(tok)
    return np.concatenate(blocks, axis=0), dim_mask


def pad_queries(points: np.ndarray, dim: int) -> np.ndarray:
    """Zero-pad (M, dim) query locations to (M, 3)."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    if points.shape[1] != dim:
        raise ValueError(f"queries have dim {points.shape[1]}, expected {dim}")
    out = np.zeros((points.shape[0], MAX_DIM))
    out[:, :dim] = points
    return out


class _EncoderBlock:
    def __init__(self, rng, cfg: ModelConfig):
        e = cfg.embed_width
        self.norm1 = LayerNorm(e)
        self.attn = MultiHeadAttention(rng, e, cfg.n_heads)
        self.drop1 = Dropout(cfg.dropout_rate)
        self.norm2 = LayerNorm(e)
        self.ff = FeedForward(rng, e, cfg.ff_width)
        self.drop2 = Dropout(cfg.dropout_rate)

    def forward(self, x, key_mask, train=False, rng=None):
        h = self.norm1.forward(x, train)
        x = x + self.drop1.forward(self.attn.forward(h, h, key_mask, train), train, rng)
        f = self.norm2.forward(x, train)
        return x + self.drop2.forward(self.ff.forward(f, train), train, rng)

    def backward(self, g):
        gf = self.norm2.backward(self.ff.backward(self.drop2.backward(g)))
        g = g + gf
        d_q, d_kv = self.attn.backward(self.drop1.backward(g))
        return g + self.norm1.backward(d_q + d_kv)

    def params(self, prefix):
        yield from self.norm1.params(prefix + ".norm1")
        yield from self.attn.params(prefix + ".attn")
        yield from self.norm2.params(prefix + ".norm2")
        yield from self.ff.params(prefix + ".ff")


class _CombinerBlock:
    def __init__(self, rng, cfg: ModelConfig):
        e = cfg.embed_width
        self.norm1 = LayerNorm(e)
        self.attn = MultiHeadAttention(rng, e, cfg.n_heads)
        self.drop1 = Dropout(cfg.dropout_rate)
        self.norm2 = LayerNorm(e)
        self.ff = FeedForward(rng, e, cfg.ff_width)
        self.drop2 = Dropout(cfg.dropout_rate)

    def forward(self, q, enc, key_mask, train=False, rng=None, kv=None):
        h = self.norm1.forward(q, train)
        q = q + self.drop1.forward(
            self.attn.forward(h, None if kv is not None else enc, key_mask, train, kv=kv),
            train,
            rng,
        )
        f = self.norm2.forward(q, train)
        return q + self.drop2.forward(self.ff.forward(f, train), train, rng)

    def backward(self, g):
        gf = self.norm2.backward(self.ff.backward(self.drop2.backward(g)))
        g = g + gf
        d_q, d_enc = self.attn.backward(self.drop1.backward(g))
        return g + self.norm1.backward(d_q), d_enc

    def params(self, prefix):
        yield from self.norm1.params(prefix + ".norm1")
        yield from self.attn.params(prefix + ".attn")
        yield from self.norm2.params(prefix + ".norm2")
        yield from self.ff.params(prefix + ".ff")


class FieldOperator:
    """Branch/trunk/combiner operator with exact hand-derived gradients."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([int(seed), 2024])
        e = cfg.embed_width
        self.embed = Linear(rng, TOKEN_FEATURES, e)
        self.encoder = [_EncoderBlock(rng, cfg) for _ in range(cfg.n_encoder_layers)]
        self.enc_norm = LayerNorm(e)
        self.trunk = Linear(rng, MAX_DIM, e, stable_rows=True)
        self.combiner = [_CombinerBlock(rng, cfg) for _ in range(cfg.n_combiner_layers)]
        self.out_norm = LayerNorm(e)
        # zero-initialized head: an untrained model estimates the zero field
        self.head = Linear(rng, e, MAX_DIM, zero_init=True, stable_rows=True)
        self._fwd = None

    # -- parameter plumbing -------------------------------------------------

    def named_params(self):
        out = []
        out.extend(self.embed.params("embed"))
        for i, blk in enumerate(self.encoder):
            out.extend(blk.params(f"encoder.{i}"))
        out.extend(self.enc_norm.params("enc_norm"))
        out.extend(self.trunk.params("trunk"))
        for i, blk in enumerate(self.combiner):
            out.extend(blk.params(f"combiner.{i}"))
        out.extend(self.out_norm.params("out_norm"))
        out.extend(self.head.params("head"))
        return out

    def zero_grad(self):
        for _, _, g in self.named_params():
            g[...] = 0.0

    def n_params(self) -> int:
        return sum(p.size for _, p, _ in self.named_params())

    # -- forward / backward -------------------------------------------------

    def branch_encode_batch(self, tokens: np.ndarray, key_mask=None, train=False, rng=None):
        """(B, N, 11) tokens -> (B, N, E) context representations."""
        x = self.embed.forward(tokens, train)
        for blk in self.encoder:
            x = blk.forward(x, key_mask, train, rng)
        x = self.enc_norm.forward(x, train)
        if not np.all(np.isfinite(x)):
            raise NumericFailure("non-finite context encoding")
        return x

    def combine_batch(self, enc, queries3, key_mask=None, train=False, rng=None, kv_list=None):
        """(B, N, E) context + (B, M, 3) padded queries -> (B, M, 3).

        Queries never attend to each other; a singleton query batch is
        internally doubled so the arithmetic path (and hence the bits of the
        result) cannot depend on how many queries share the batch.
        """
        padded = queries3.shape[1] == 1
        if padded:
            queries3 = np.concatenate([queries3, queries3], axis=1)
        q = self.trunk.forward(queries3, train)
        for i, blk in enumerate(self.combiner):
            kv = None if kv_list is None else kv_list[i]
            q = blk.forward(q, enc, key_mask, train, rng, kv=kv)
        out = self.head.forward(self.out_norm.forward(q, train), train)
        if not np.all(np.isfinite(out)):
            raise NumericFailure("non-finite field estimate")
        self._m_padded = padded if train else None
        return out[:, :1, :] if padded else out

    def forward(self, tokens, queries3, key_mask=None, train=False, rng=None):
        """Full pipeline on already-normalized, tokenized data."""
        enc = self.branch_encode_batch(tokens, key_mask, train, rng)
        out = self.combine_batch(enc, queries3, key_mask, train, rng)
        if train:
            self._fwd = True
        return out

    def backward(self, d_out: np.ndarray) -> None:
        """Accumulate exact parameter gradients for the last train forward."""
        if not self._fwd:
            raise InvalidStateError("backward requires a preceding train-mode forward")
        self._fwd = None
        if self._m_padded:
            d_out = np.concatenate([d_out, np.zeros_like(d_out)], axis=1)
        g = self.out_norm.backward(self.head.backward(d_out))
        d_enc_total = None
        for blk in reversed(self.combiner):
            g, d_enc = blk.backward(g)
            d_enc_total = d_enc if d_enc_total is None else d_enc_total + d_enc
        self.trunk.backward(g)
        g = self.enc_norm.backward(d_enc_total)
        for blk in reversed(self.encoder):
            g = blk.backward(g)
        self.embed.backward(g)

    # -- single-system convenience (the published operations) ---------------

    def branch_encode(self, tokens: np.ndarray, mask: np.ndarray | None = None) -> ContextEncoding:
        """Encode one system's (N, 11) tokens into a ContextEncoding."""
        if mask is None:
            mask = np.ones(tokens.shape[0], dtype=bool)
        vec = self.branch_encode_batch(tokens[None], mask[None])[0]
        return ContextEncoding(vec, mask)

    def trunk_encode(self, x3: np.ndarray) -> np.ndarray:
        """Affine embedding of a padded query location, (3,) -> (E,)."""
        return self.trunk.forward(np.asarray(x3, dtype=float))

    def combine(self, encoding: ContextEncoding, queries3: np.ndarray) -> np.ndarray:
        """Estimate (M, 3) normalized field values at padded queries."""
        queries3 = np.asarray(queries3, dtype=float)
        if queries3.ndim == 1:
            return self.combine_batch(
                encoding.vectors[None], queries3[None, None], encoding.mask[None]
            )[0, 0]
        return self.combine_batch(encoding.vectors[None], queries3[None], encoding.mask[None])[0]

    def estimate_field(self, obs: ObservationSet, queries) -> np.ndarray:
        """Zero-shot estimates f^(x) at raw-scale queries; returns (M, D)."""
        tf, obs_n = fit_normalization(obs)
        tokens, _ = tokenize(obs_n)
        enc = self.branch_encode_batch(tokens[None])
        pts = np.stack(
            [q.values if isinstance(q, StatePoint) else np.asarray(q, float) for q in queries],
            axis=0,
        )
        q3 = pad_queries(tf.normalize_states(pts), obs.dim)
        out = self.combine_batch(enc, q3[None])[0]
        return out[:, : obs.dim] * (tf.state_scale / tf.time_scale)

    def context_function(self, obs: ObservationSet):
        """Build the estimated field as a plain callable for the solver.

        Encodes the context once, precomputes each combiner layer's
        keys/values, and returns (transform, f) where f maps a raw (D,)
        state to the raw-scale (D,) estimate.
        """
        tf, obs_n = fit_normalization(obs)
        tokens, _ = tokenize(obs_n)
        enc = self.branch_encode_batch(tokens[None])
        kv_list = [blk.attn.project_kv(enc) for blk in self.combiner]
        dim = obs.dim
        denorm = tf.state_scale / tf.time_scale

        def f(x: np.ndarray) -> np.ndarray:
            u = tf.normalize_states(np.asarray(x, dtype=float))
            q3 = np.zeros((1, 1, MAX_DIM))
            q3[0, 0, :dim] = u
            out = self.combine_batch(enc, q3, kv_list=kv_list)[0, 0]
            return out[:dim] * denorm

        return tf, f

    # -- persistence ----------------------------------------------------------

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: p for name, p, _ in self.named_params()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        mine = {name: p for name, p, _ in self.named_params()}
        if set(mine) != set(tensors):
            raise ValueError("checkpoint tensor names do not match the model config")
        for name, p in mine.items():
            if p.shape != tensors[name].shape:
                raise ValueError(f"checkpoint tensor {name} has shape "
                                 f"{tensors[name].shape}, expected {p.shape}")
            p[...] = tensors[name]


def save_model(path, model: FieldOperator, extra_meta: dict | None = None,
               extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    meta = {"kind": "fimode-model", "model_config": dataclasses.asdict(model.cfg)}
    if extra_meta:
        meta.update(extra_meta)
    tensors = {"param." + k: v for k, v in model.tensors().items()}
    if extra_tensors:
        tensors.update(extra_tensors)
    checkpoint.save_tensors(path, meta, tensors)


def load_model(path) -> tuple[FieldOperator, dict, dict[str, np.ndarray]]:
    """Restore a model; returns (model, meta, non-parameter tensors)."""
    meta, tensors = checkpoint.load_tensors(path)
    if meta.get("kind") != "fimode-model":
        raise ValueError(f"{path}: not a model checkpoint")
    cfg = ModelConfig(**meta["model_config"])
    model = FieldOperator(cfg)
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    model.load_tensors(params)
    rest = {k: v for k, v in tensors.items() if not k.startswith("param.")}
    return model, meta, rest
