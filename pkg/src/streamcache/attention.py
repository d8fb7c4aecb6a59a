"""Toy causal multi-head attention decoder with a per-token key/value store.

The engine processes one token at a time: the new token's query attends over
every cached key/value plus itself, the new key/value pair is stored, and an
exact multiply-add count is charged. Tokens can later be evicted from the
middle of the store without touching the surviving entries.

Two choices make mid-sequence eviction exact rather than approximate: the
position signal is a relative bias on entry-position deltas (no re-indexing
on eviction), and each layer's key/value projections read the token's raw
embedding while only the query path evolves through the stack. Cached
keys/values therefore never encode neighbours that might later be evicted,
and every append reproduces the ``full_recompute`` oracle over the surviving
sequence to float64 round-off.

All arithmetic is float64. Not safe for concurrent mutation; one engine per
stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .types import Token

REL_BIAS_CLIP = 1024  # position deltas beyond this share one bias slot


@dataclass
class AttentionWeights:
    """Seeded projection stack plus the vocab output head."""

    d: int
    heads: int
    layers: int
    vocab_size: int
    w_q: np.ndarray  # (L, d, d)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    rel_bias: np.ndarray  # (L, heads, REL_BIAS_CLIP + 1)
    w_lm: np.ndarray  # (d, vocab_size)


def init_weights(d: int, heads: int, layers: int, vocab_size: int, seed: int) -> AttentionWeights:
    """Deterministic uniform[-1/sqrt(d), 1/sqrt(d)] weights from ``seed``."""
    if d % heads != 0:
        raise ValueError(f"d={d} not divisible by heads={heads}")
    if layers < 1 or vocab_size < 1:
        raise ValueError("layers and vocab_size must be >= 1")
    rng = np.random.default_rng(seed)
    lim = 1.0 / np.sqrt(d)

    def draw(*shape):
        return rng.uniform(-lim, lim, size=shape)

    w_q = np.empty((layers, d, d))
    w_k = np.empty((layers, d, d))
    w_v = np.empty((layers, d, d))
    w_o = np.empty((layers, d, d))
    rel_bias = np.empty((layers, heads, REL_BIAS_CLIP + 1))
    for layer in range(layers):
        w_q[layer] = draw(d, d)
        w_k[layer] = draw(d, d)
        w_v[layer] = draw(d, d)
        w_o[layer] = draw(d, d)
        rel_bias[layer] = draw(heads, REL_BIAS_CLIP + 1)
    w_lm = draw(d, vocab_size)
    return AttentionWeights(d, heads, layers, vocab_size, w_q, w_k, w_v, w_o, rel_bias, w_lm)


def append_flop_cost(n_live: int, d: int, layers: int, vocab_size: int) -> int:
    """Multiply-adds for one incremental append at live size ``n_live``
    (the new token included): per layer 4*d^2 projections plus 2*n*d for
    scores and value mixing, then the d*vocab output head."""
    return layers * (4 * d * d + 2 * n_live * d) + d * vocab_size


def recompute_flop_cost(n_queries: int, n_prefix: int, d: int, layers: int) -> int:
    """Multiply-adds to re-encode ``n_queries`` tokens causally over a fixed
    ``n_prefix``-token prefix: the conversion penalty of a separately cached
    design, quadratic in the re-encoded span."""
    pair_terms = n_queries * n_prefix + n_queries * (n_queries + 1) // 2
    return layers * (4 * d * d * n_queries + 2 * d * pair_terms)


class _LayerStore:
    """Per-layer key/value rows in entry order, with grow-in-place buffers."""

    def __init__(self, d: int) -> None:
        self.d = d
        self.cap = 64
        self.k = np.zeros((self.cap, d))
        self.v = np.zeros((self.cap, d))
        self.pos = np.zeros(self.cap, dtype=np.int64)
        self.n = 0

    def append(self, k_row: np.ndarray, v_row: np.ndarray, pos: int) -> None:
        if self.n == self.cap:
            self.cap *= 2
            for name in ("k", "v"):
                buf = np.zeros((self.cap, self.d))
                buf[: self.n] = getattr(self, name)[: self.n]
                setattr(self, name, buf)
            pos_buf = np.zeros(self.cap, dtype=np.int64)
            pos_buf[: self.n] = self.pos[: self.n]
            self.pos = pos_buf
        self.k[self.n] = k_row
        self.v[self.n] = v_row
        self.pos[self.n] = pos
        self.n += 1

    def remove_rows(self, keep_mask: np.ndarray) -> None:
        kept = int(keep_mask.sum())
        self.k[:kept] = self.k[: self.n][keep_mask]
        self.v[:kept] = self.v[: self.n][keep_mask]
        self.pos[:kept] = self.pos[: self.n][keep_mask]
        self.n = kept


class AttentionEngine:
    """Incremental decoder state: per-layer K/V stores plus a flop counter."""

    def __init__(self, d: int, heads: int, layers: int, vocab_size: int, seed: int) -> None:
        self.weights = init_weights(d, heads, layers, vocab_size, seed)
        self.d = d
        self.heads = heads
        self.layers = layers
        self.vocab_size = vocab_size
        self._stores = [_LayerStore(d) for _ in range(layers)]
        self._order: List[int] = []  # token ids in entry order
        self._row_of: Dict[int, int] = {}
        self.flop_counter = 0

    @property
    def live_size(self) -> int:
        return len(self._order)

    def live_ids(self) -> tuple:
        return tuple(self._order)

    def flops_snapshot(self) -> int:
        return self.flop_counter

    def append_token(self, token: Token) -> Tuple[np.ndarray, np.ndarray]:
        """Run one token through the stack; returns (output vector, logits).

        The token's query attends over every stored key/value plus itself;
        its own key/value pair is appended to each layer store.
        """
        if token.id in self._row_of:
            raise ValueError(f"token {token.id} already in attention store")
        if token.entry_position is None:
            raise ValueError(f"token {token.id} has no entry position")
        pos = token.entry_position
        if self._order and pos <= int(self._stores[0].pos[self._stores[0].n - 1]):
            raise ValueError(
                f"token {token.id} position {pos} not beyond stored positions")
        w = self.weights
        d, h = self.d, self.heads
        dh = d // h
        emb = np.asarray(token.embedding, dtype=np.float64)
        if emb.shape != (d,):
            raise ValueError(f"embedding shape {emb.shape} != ({d},)")
        x = emb

        for layer, store in enumerate(self._stores):
            q = x @ w.w_q[layer]
            k_new = emb @ w.w_k[layer]
            v_new = emb @ w.w_v[layer]
            self.flop_counter += 3 * d * d

            n_ctx = store.n + 1
            k_ctx = np.vstack([store.k[: store.n], k_new[None, :]])
            v_ctx = np.vstack([store.v[: store.n], v_new[None, :]])
            deltas = pos - np.concatenate([store.pos[: store.n], [pos]])
            bias_idx = np.minimum(deltas, REL_BIAS_CLIP)

            q_h = q.reshape(h, dh)
            k_h = k_ctx.reshape(n_ctx, h, dh)
            v_h = v_ctx.reshape(n_ctx, h, dh)
            scores = np.einsum("hd,nhd->hn", q_h, k_h) / np.sqrt(dh)
            scores += w.rel_bias[layer][:, bias_idx]
            self.flop_counter += n_ctx * d

            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            mixed = np.einsum("hn,nhd->hd", probs, v_h).reshape(d)
            self.flop_counter += n_ctx * d

            x = x + mixed @ w.w_o[layer]
            self.flop_counter += d * d

            store.append(k_new, v_new, pos)

        logits = x @ w.w_lm
        self.flop_counter += d * self.vocab_size
        self._row_of[token.id] = len(self._order)
        self._order.append(token.id)
        return x, logits

    def evict(self, token_ids: Sequence[int]) -> None:
        """Drop the given tokens' key/value rows. Surviving positions are
        untouched and no flops are charged."""
        ids = list(token_ids)
        if not ids:
            return
        unknown = [tid for tid in ids if tid not in self._row_of]
        if unknown:
            raise KeyError(f"unknown token ids: {unknown}")
        drop = set(ids)
        keep_mask = np.array([tid not in drop for tid in self._order], dtype=bool)
        for store in self._stores:
            store.remove_rows(keep_mask)
        self._order = [tid for tid in self._order if tid not in drop]
        self._row_of = {tid: i for i, tid in enumerate(self._order)}


def full_recompute(weights: AttentionWeights, tokens: Sequence[Token],
                   return_attn: bool = False):
    """Oracle: causal attention over the whole sequence in one pass.

    ``tokens`` must be ordered by strictly increasing entry position. Returns
    the (n, d) final-layer outputs; with ``return_attn`` also a list of
    per-layer (heads, n, n) attention probability arrays.
    """
    if not tokens:
        raise ValueError("empty token sequence")
    positions = np.array([t.entry_position for t in tokens], dtype=np.int64)
    if any(t.entry_position is None for t in tokens):
        raise ValueError("all tokens need entry positions")
    if np.any(np.diff(positions) <= 0):
        raise ValueError("tokens must be ordered by strictly increasing position")
    d, h, dh = weights.d, weights.heads, weights.d // weights.heads
    emb = np.stack([np.asarray(t.embedding, dtype=np.float64) for t in tokens])
    x = emb
    n = x.shape[0]
    deltas = positions[:, None] - positions[None, :]
    bias_idx = np.clip(deltas, -REL_BIAS_CLIP, REL_BIAS_CLIP)
    causal = deltas >= 0  # row i may attend to j iff pos_j <= pos_i
    attn_layers = []
    for layer in range(weights.layers):
        q = (x @ weights.w_q[layer]).reshape(n, h, dh)
        k = (emb @ weights.w_k[layer]).reshape(n, h, dh)
        v = (emb @ weights.w_v[layer]).reshape(n, h, dh)
        scores = np.einsum("ihd,jhd->hij", q, k) / np.sqrt(dh)
        scores += weights.rel_bias[layer][:, np.abs(bias_idx)]
        scores = np.where(causal[None, :, :], scores, -np.inf)
        scores -= scores.max(axis=2, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=2, keepdims=True)
        if return_attn:
            attn_layers.append(probs)
        mixed = np.einsum("hij,jhd->ihd", probs, v).reshape(n, d)
        x = x + mixed @ weights.w_o[layer]
    if return_attn:
        return x, attn_layers
    return x


def lm_logits(weights: AttentionWeights, outputs: np.ndarray) -> np.ndarray:
    """Vocab logits for decoder outputs (softmax temperature fixed at 1)."""
    return np.atleast_2d(outputs) @ weights.w_lm
