"""Text/entity encoder: position-LSTM embeddings, multi-head attention on
attention (AoA), and the visual selective gate that fuses image features into
every token embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class AttentionResult:
    out: T.Tensor                 # [Lq x H]
    head_weights: list            # per-head [Lq x Lk] weight tensors

    def averaged_weights(self):
        acc = self.head_weights[0]
        for w in self.head_weights[1:]:
            acc = acc + w
        return acc * (1.0 / len(self.head_weights))


@dataclass
class Dropout:
    """Threaded through forward passes; None means inference."""
    rate: float
    rng: np.random.Generator

    def __call__(self, x):
        return T.dropout(x, self.rate, True, self.rng)


def _drop(x, drop):
    return drop(x) if drop is not None else x


def mh_attention(params, pfx, q, k, v, heads, mask=None):
    """Scaled dot-product attention with `heads` heads.

    mask, if given, is a boolean [Lq x Lk] array; False entries are not
    attendable. A row with no attendable key is an error.
    """
    h = q.shape[1]
    if h % heads:
        raise ValueError("head count must divide hidden size")
    dh = h // heads
    scale = 1.0 / math.sqrt(dh)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("attention row with no attendable key")
        penalty = np.where(mask, 0.0, -1e9).astype(q.data.dtype)
    qp = T.matmul(q, params[pfx + "/wq"])
    kp = T.matmul(k, params[pfx + "/wk"])
    vp = T.matmul(v, params[pfx + "/wv"])
    ctxs = []
    weights = []
    for i in range(heads):
        lo, hi = i * dh, (i + 1) * dh
        scores = T.matmul(T.slice_cols(qp, lo, hi),
                          T.transpose(T.slice_cols(kp, lo, hi))) * scale
        if mask is not None:
            scores = scores + T.Tensor(penalty)
        w = T.softmax(scores, axis=1)
        weights.append(w)
        ctxs.append(T.matmul(w, T.slice_cols(vp, lo, hi)))
    out = T.matmul(T.concat(ctxs, axis=1), params[pfx + "/wo"])
    return AttentionResult(out=out, head_weights=weights)


def aoa(params, pfx, query_in, k, v, heads, mask=None, drop=None):
    """Attention on attention: gate the attended vector with a sigmoid of the
    concatenated [attended ; query] features."""
    att = mh_attention(params, pfx, query_in, k, v, heads, mask=mask)
    cat = T.concat([att.out, query_in], axis=1)
    gate = T.sigmoid(T.matmul(cat, params[pfx + "/gate_wg"]) + params[pfx + "/gate_bg"])
    info = T.matmul(cat, params[pfx + "/gate_wa"]) + params[pfx + "/gate_ba"]
    out = _drop(gate * info, drop)
    return out, att


def ffn(params, pfx, x, drop=None):
    """Two-layer position-wise feed-forward with ReLU."""
    h = T.relu(T.matmul(x, params[pfx + "/w1"]) + params[pfx + "/b1"])
    return _drop(T.matmul(h, params[pfx + "/w2"]) + params[pfx + "/b2"], drop)


def lstm_rows(params, pfx, x):
    """Unidirectional LSTM over the rows of x [L x H] -> [L x H]."""
    h_dim = x.shape[1]
    wx, wh, b = params[pfx + "/wx"], params[pfx + "/wh"], params[pfx + "/b"]
    h = T.Tensor(np.zeros((1, h_dim), dtype=x.data.dtype))
    c = T.Tensor(np.zeros((1, h_dim), dtype=x.data.dtype))
    outs = []
    for t in range(x.shape[0]):
        row = T.slice_rows(x, t, t + 1)
        gates = T.matmul(row, wx) + T.matmul(h, wh) + b
        i = T.sigmoid(T.slice_cols(gates, 0, h_dim))
        f = T.sigmoid(T.slice_cols(gates, h_dim, 2 * h_dim))
        g = T.tanh(T.slice_cols(gates, 2 * h_dim, 3 * h_dim))
        o = T.sigmoid(T.slice_cols(gates, 3 * h_dim, 4 * h_dim))
        c = f * c + i * g
        h = o * T.tanh(c)
        outs.append(h)
    return T.concat(outs, axis=0)


def position_lstm(params, cfg, length):
    """LSTM-updated position embeddings for positions 1..length."""
    if length > cfg.max_pos:
        raise ValueError(
            f"sequence length {length} exceeds position table {cfg.max_pos}")
    return lstm_rows(params, "emb/lstm", T.slice_rows(params["emb/pos"], 0, length))


def embed_positions(params, cfg, ids, pos_cache=None):
    """Word embedding plus LSTM-updated position embedding.

    The position path depends only on parameters, so callers inside one
    forward/backward step may share it via pos_cache (a mutable dict).
    """
    n = len(ids)
    if n == 0:
        raise ValueError("cannot embed an empty token sequence")
    words = T.embedding_lookup(params["emb/word"], ids)
    if pos_cache is not None:
        cached = pos_cache.get("lstm")
        if cached is None or cached.shape[0] < n:
            cached = position_lstm(params, cfg, max(n, pos_cache.get("min_len", 0)))
            pos_cache["lstm"] = cached
        pos = cached if cached.shape[0] == n else T.slice_rows(cached, 0, n)
    else:
        pos = position_lstm(params, cfg, n)
    return words + pos


def project_image(params, grid):
    """Per-patch affine map of raw image features [K x D] -> [K x H]."""
    feats = T.Tensor(np.asarray(grid))
    if feats.shape[1] != params["img/proj/w"].shape[0]:
        raise ValueError("image feature dim does not match projection")
    return T.matmul(feats, params["img/proj/w"]) + params["img/proj/b"]


def visual_selective(params, pfx, t_tilde, vproj, heads, drop=None):
    """Gate every token embedding by a tanh of image-attended pooled text,
    then residual FFN + layer norm."""
    pooled = T.avg_pool_rows(t_tilde)
    att_out, _ = aoa(params, pfx + "/att", pooled, vproj, vproj, heads, drop=drop)
    gate = T.tanh(T.matmul(att_out, params[pfx + "/gate_w"]) + params[pfx + "/gate_b"])
    gated = gate * t_tilde
    return T.layer_norm(gated + ffn(params, pfx + "/ffn", gated, drop=drop),
                        params[pfx + "/ln_g"], params[pfx + "/ln_b"])


def encode_text(params, cfg, ids, vproj, drop=None, pos_cache=None):
    """Full text encoder: embeddings, then per layer self-AoA + visual gate."""
    x = embed_positions(params, cfg, ids, pos_cache=pos_cache)
    for l in range(cfg.enc_layers):
        x, _ = aoa(params, f"enc/l{l}/self", x, x, x, cfg.heads, drop=drop)
        x = visual_selective(params, f"enc/l{l}/vs", x, vproj, cfg.heads, drop=drop)
    return x


def encode_entities(params, cfg, mention_token_ids, vproj, drop=None,
                    pos_cache=None):
    """Encode entity mentions with the shared text encoder.

    mention_token_ids is a list of token-id lists, one per mention. The
    mentions are concatenated into one sequence; each mention embedding is the
    mean over its token positions. Returns None when there are no mentions.
    """
    groups = [ids for ids in mention_token_ids if ids]
    if not groups:
        return None
    flat = [t for g in groups for t in g]
    enc = encode_text(params, cfg, flat, vproj, drop=drop, pos_cache=pos_cache)
    rows = []
    offset = 0
    for g in groups:
        rows.append(T.avg_pool_rows(T.slice_rows(enc, offset, offset + len(g))))
        offset += len(g)
    return T.concat(rows, axis=0)
