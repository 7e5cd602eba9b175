"""Self-attention encoder-decoder producing source encodings and decoder states.

A reduced-size stack of identical layers on each side: multi-head attention,
position-wise feed-forward, residual connections with layer norm after each
sublayer, sinusoidal positions.  The decoder output here is the raw state
sequence z, before any capsule routing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor

NEG_BIAS = -1e9  # additive score for excluded attention positions


@dataclass
class SourceEncoding:
    """Encoded source sentence(s): states (..., I, d), mask (..., I) of 0/1."""

    states: Tensor
    mask: np.ndarray

    @property
    def length(self) -> int:
        return self.states.shape[-2]


@dataclass
class DecoderStates:
    """Last-layer decoder states z (..., T, d) with target validity mask."""

    states: Tensor
    mask: np.ndarray


def sinusoid_table(max_len: int, dim: int) -> np.ndarray:
    """Standard fixed positional encodings, shape (max_len, dim)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / dim)
    table = np.zeros((max_len, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


def attention(queries, keys, values, mask=None):
    """Scaled dot-product attention.

    queries (..., Tq, d), keys/values (..., Tk, d).  ``mask`` holds 1 for
    keys that may be attended to, broadcastable to (..., Tq, Tk); positions
    with 0 are excluded from the normalization.  Every query must keep at
    least one admissible key.
    """
    queries, keys, values = (
        x if isinstance(x, Tensor) else T.constant(x) for x in (queries, keys, values)
    )
    if keys.shape[-2] != values.shape[-2]:
        raise T.ShapeError(
            f"key/value lengths differ: {keys.shape[-2]} vs {values.shape[-2]}"
        )
    d = queries.shape[-1]
    scores = T.scale(
        T.matmul(queries, T.transpose(keys, tuple(range(keys.ndim - 2)) + (keys.ndim - 1, keys.ndim - 2))),
        1.0 / math.sqrt(d),
    )
    if mask is not None:
        mask_arr = np.asarray(mask, dtype=scores.data.dtype)
        valid = np.broadcast_to(mask_arr, scores.shape)
        if not valid.max(axis=-1).all():
            raise ValueError("attention: some query has a fully masked key set")
        scores = T.add(scores, T.constant((1.0 - mask_arr) * NEG_BIAS))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, values), weights


class MultiHeadAttention:
    def __init__(self, store, rng, prefix: str, dim: int, heads: int):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        init = lambda name: store.add(
            f"{prefix}.{name}", T.xavier_uniform(rng, (dim, dim), dim, dim)
        )
        self.wq, self.wk, self.wv, self.wo = map(init, ("wq", "wk", "wv", "wo"))

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return T.transpose(T.reshape(x, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, q_in, k_in, v_in, mask=None) -> Tensor:
        b, tq, _ = q_in.shape
        q = self._split(T.matmul(q_in, self.wq.value))
        k = self._split(T.matmul(k_in, self.wk.value))
        v = self._split(T.matmul(v_in, self.wv.value))
        ctx, _ = attention(q, k, v, mask=mask)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, self.dim))
        return T.matmul(merged, self.wo.value)


class FeedForward:
    """Two-layer position-wise network with ReLU."""

    def __init__(self, store, rng, prefix: str, dim: int, hidden: int):
        self.w1 = store.add(f"{prefix}.w1", T.xavier_uniform(rng, (dim, hidden), dim, hidden))
        self.b1 = store.add(f"{prefix}.b1", np.zeros(hidden))
        self.w2 = store.add(f"{prefix}.w2", T.xavier_uniform(rng, (hidden, dim), hidden, dim))
        self.b2 = store.add(f"{prefix}.b2", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(T.add(T.matmul(x, self.w1.value), self.b1.value))
        return T.add(T.matmul(h, self.w2.value), self.b2.value)


class LayerNorm:
    def __init__(self, store, prefix: str, dim: int):
        self.gain = store.add(f"{prefix}.gain", np.ones(dim))
        self.bias = store.add(f"{prefix}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain.value, self.bias.value)


class EncoderLayer:
    def __init__(self, store, rng, prefix: str, cfg: ModelConfig):
        self.attn = MultiHeadAttention(store, rng, f"{prefix}.attn", cfg.dim, cfg.heads)
        self.norm1 = LayerNorm(store, f"{prefix}.norm1", cfg.dim)
        self.ffn = FeedForward(store, rng, f"{prefix}.ffn", cfg.dim, cfg.ffn_dim)
        self.norm2 = LayerNorm(store, f"{prefix}.norm2", cfg.dim)

    def __call__(self, x, key_mask, dropout):
        x = self.norm1(T.add(x, dropout(self.attn(x, x, x, mask=key_mask))))
        return self.norm2(T.add(x, dropout(self.ffn(x))))


class DecoderLayer:
    def __init__(self, store, rng, prefix: str, cfg: ModelConfig):
        self.self_attn = MultiHeadAttention(store, rng, f"{prefix}.self_attn", cfg.dim, cfg.heads)
        self.norm1 = LayerNorm(store, f"{prefix}.norm1", cfg.dim)
        self.cross_attn = MultiHeadAttention(store, rng, f"{prefix}.cross_attn", cfg.dim, cfg.heads)
        self.norm2 = LayerNorm(store, f"{prefix}.norm2", cfg.dim)
        self.ffn = FeedForward(store, rng, f"{prefix}.ffn", cfg.dim, cfg.ffn_dim)
        self.norm3 = LayerNorm(store, f"{prefix}.norm3", cfg.dim)

    def __call__(self, x, causal_mask, memory, memory_mask, dropout):
        x = self.norm1(T.add(x, dropout(self.self_attn(x, x, x, mask=causal_mask))))
        x = self.norm2(
            T.add(x, dropout(self.cross_attn(x, memory, memory, mask=memory_mask)))
        )
        return self.norm3(T.add(x, dropout(self.ffn(x))))


class Backbone:
    """Embeddings plus the encoder and decoder stacks."""

    def __init__(self, store, rng: np.random.Generator, cfg: ModelConfig):
        self.cfg = cfg
        d = cfg.dim
        self.src_embed = store.add(
            "embed.src", T.xavier_uniform(rng, (cfg.src_vocab, d), cfg.src_vocab, d)
        )
        if cfg.share_embeddings:
            if cfg.src_vocab != cfg.tgt_vocab:
                raise ValueError("shared embeddings require equal vocab sizes")
            self.tgt_embed = self.src_embed
        else:
            self.tgt_embed = store.add(
                "embed.tgt", T.xavier_uniform(rng, (cfg.tgt_vocab, d), cfg.tgt_vocab, d)
            )
        self.positions = sinusoid_table(cfg.max_len, d).astype(T.default_dtype())
        self.enc_layers = [
            EncoderLayer(store, rng, f"encoder.{i}", cfg) for i in range(cfg.layers)
        ]
        self.dec_layers = [
            DecoderLayer(store, rng, f"decoder.{i}", cfg) for i in range(cfg.layers)
        ]
        self._train_mode = False
        self._dropout_rng = np.random.default_rng(0)

    def set_train(self, training: bool, dropout_rng=None) -> None:
        self._train_mode = training
        if dropout_rng is not None:
            self._dropout_rng = dropout_rng

    def _dropout(self, x: Tensor) -> Tensor:
        rate = self.cfg.dropout
        if not self._train_mode or rate <= 0.0:
            return x
        keep = (self._dropout_rng.random(x.shape) >= rate).astype(x.data.dtype)
        return T.mul(x, T.constant(keep / (1.0 - rate)))

    def _embed(self, table, ids: np.ndarray, vocab: int) -> Tensor:
        ids = np.asarray(ids)
        if ids.min() < 0 or ids.max() >= vocab:
            raise ValueError(
                f"token id out of range [0, {vocab}): {int(ids.min())}..{int(ids.max())}"
            )
        if ids.shape[-1] > self.cfg.max_len:
            raise ValueError(
                f"sequence length {ids.shape[-1]} exceeds max_len {self.cfg.max_len}"
            )
        x = T.scale(T.gather_rows(table.value, ids), math.sqrt(self.cfg.dim))
        return T.add(x, T.constant(self.positions[: ids.shape[-1]]))

    def encode(self, token_ids, mask) -> SourceEncoding:
        """Encode (B, I) token ids into (B, I, d) states; padding stays zero."""
        token_ids = np.atleast_2d(np.asarray(token_ids))
        mask = np.atleast_2d(np.asarray(mask)).astype(np.float64)
        if token_ids.shape[-1] == 0 or not mask.max(axis=-1, initial=0).all():
            raise ValueError("encode: every sentence needs at least one unmasked token")
        x = self._embed(self.src_embed, token_ids, self.cfg.src_vocab)
        key_mask = mask[:, None, None, :]  # (B, 1, 1, I)
        for layer in self.enc_layers:
            x = layer(x, key_mask, self._dropout)
        x = T.mul(x, T.constant(mask[:, :, None]))
        return SourceEncoding(states=x, mask=mask)

    def decode_states(self, dec_input_ids, tgt_mask, src: SourceEncoding) -> DecoderStates:
        """Decoder states for teacher forcing.

        ``dec_input_ids`` (B, T) must already be shifted right (BOS first);
        position t attends only to positions <= t and the full source, so
        z_t depends on target tokens strictly before t.
        """
        dec_input_ids = np.atleast_2d(np.asarray(dec_input_ids))
        t_len = dec_input_ids.shape[-1]
        if t_len == 0:
            raise ValueError("decode_states: empty target")
        tgt_mask = np.atleast_2d(np.asarray(tgt_mask)).astype(np.float64)
        if not src.mask.max(axis=-1).all():
            raise ValueError("decode_states: source is fully masked")
        x = self._embed(self.tgt_embed, dec_input_ids, self.cfg.tgt_vocab)
        causal = np.tril(np.ones((t_len, t_len)))[None, None, :, :]
        memory_mask = src.mask[:, None, None, :]
        for layer in self.dec_layers:
            x = layer(x, causal, src.states, memory_mask, self._dropout)
        return DecoderStates(states=x, mask=tgt_mask)
