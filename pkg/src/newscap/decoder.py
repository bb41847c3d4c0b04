"""Caption decoder: masked self-AoA, multi-modal AoA over image/article/entity
contexts, fusion, and the dual-source pointer-generator with NLL loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import aoa, embed_positions, ffn


@dataclass
class StepOutput:
    p_s: np.ndarray        # vocabulary distribution
    a_v: np.ndarray        # attention over article positions
    a_e: np.ndarray | None  # attention over entity mentions (None if no entities)
    p_gen: float
    q_gen: float
    p_star: np.ndarray     # final mixed distribution


@dataclass
class DecoderOutput:
    p_star: T.Tensor       # [N x V]
    steps: list            # per-step StepOutput (detached numpy views)


def causal_mask(n):
    return np.tril(np.ones((n, n), dtype=bool))


def masked_self_aoa(params, pfx, x, heads, drop=None):
    """Self-AoA where position t attends to positions 1..t."""
    out, _ = aoa(params, pfx, x, x, x, heads, mask=causal_mask(x.shape[0]),
                 drop=drop)
    return out


def multimodal_aoa(params, pfx, xa, vproj, art, ent, heads, drop=None):
    """Three AoA blocks sharing the query; returns attended contexts plus the
    head-averaged article/entity attention weights."""
    v_ctx, _ = aoa(params, pfx + "/img", xa, vproj, vproj, heads, drop=drop)
    a_ctx, a_att = aoa(params, pfx + "/art", xa, art, art, heads, drop=drop)
    if ent is not None:
        e_ctx, e_att = aoa(params, pfx + "/ent", xa, ent, ent, heads, drop=drop)
        a_e = e_att.averaged_weights()
    else:
        e_ctx = T.Tensor(np.zeros(xa.data.shape, dtype=xa.data.dtype))
        a_e = None
    return v_ctx, a_ctx, e_ctx, a_att.averaged_weights(), a_e


def fuse_and_project(params, pfx, xa, v_ctx, a_ctx, e_ctx, drop=None):
    """Residual fusion of the three contexts followed by FFN and layer norms."""
    combined = xa + (v_ctx + a_ctx + e_ctx)
    x1 = T.layer_norm(combined, params[pfx + "/ln1_g"], params[pfx + "/ln1_b"])
    return T.layer_norm(x1 + ffn(params, pfx + "/ffn", x1, drop=drop),
                        params[pfx + "/ln2_g"], params[pfx + "/ln2_b"])


def _one_hot(ids, vocab_size, dtype):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError("copy map id out of vocabulary range")
    m = np.zeros((len(ids), vocab_size), dtype=dtype)
    m[np.arange(len(ids)), ids] = 1.0
    return m


def pointer_mix(params, x0, v_ctx, a_ctx, e_ctx, a_v, a_e, p_s,
                article_map, entity_map, vocab_size):
    """Mix the vocabulary distribution with the two copy distributions.

    The raw mixture weights (p_gen, q_gen, 1-p_gen-q_gen) can leave the
    simplex since the switches are independent sigmoids; the last weight is
    clamped at zero and the triple renormalized so the result is always a
    distribution.
    """
    dtype = p_s.data.dtype
    p_gen = T.sigmoid(T.matmul(T.concat([x0, a_ctx, v_ctx], axis=1),
                               params["ptr/wp"]) + params["ptr/bp"])
    if a_e is not None:
        q_gen = T.sigmoid(T.matmul(T.concat([x0, e_ctx, v_ctx], axis=1),
                                   params["ptr/wq"]) + params["ptr/bq"])
    else:
        q_gen = T.Tensor(np.zeros(p_gen.data.shape, dtype=dtype))
    w_s = T.relu(1.0 - p_gen - q_gen)
    denom = p_gen + q_gen + w_s
    copy_v = T.matmul(a_v, T.Tensor(_one_hot(article_map, vocab_size, dtype)))
    mixed = (p_gen / denom) * copy_v + (w_s / denom) * p_s
    if a_e is not None:
        copy_e = T.matmul(a_e, T.Tensor(_one_hot(entity_map, vocab_size, dtype)))
        mixed = mixed + (q_gen / denom) * copy_e
    return mixed, p_gen, q_gen


def decode_distributions(params, cfg, input_ids, contexts, drop=None,
                         collect_steps=False, pos_cache=None):
    """Run the decoder stack on an input prefix; returns per-position final
    distributions. input_ids is BOS + tokens (targets are not consumed here)."""
    x0 = embed_positions(params, cfg, input_ids, pos_cache=pos_cache)
    x = x0
    a_v = a_e = None
    v_ctx = a_ctx = e_ctx = None
    for l in range(cfg.dec_layers):
        xa = masked_self_aoa(params, f"dec/l{l}/self", x, cfg.heads, drop=drop)
        v_ctx, a_ctx, e_ctx, a_v, a_e = multimodal_aoa(
            params, f"dec/l{l}", xa, contexts.vproj, contexts.article,
            contexts.entities, cfg.heads, drop=drop)
        x = fuse_and_project(params, f"dec/l{l}", xa, v_ctx, a_ctx, e_ctx,
                             drop=drop)
    p_s = T.softmax(T.matmul(x, params["out/w"]) + params["out/b"], axis=1)
    if cfg.pointer:
        p_star, p_gen, q_gen = pointer_mix(
            params, x0, v_ctx, a_ctx, e_ctx, a_v, a_e, p_s,
            contexts.article_map, contexts.entity_map, cfg.vocab_size)
    else:
        p_star = p_s
        p_gen = q_gen = None
    steps = []
    if collect_steps:
        n = len(input_ids)
        for t in range(n):
            steps.append(StepOutput(
                p_s=p_s.data[t].copy(),
                a_v=a_v.data[t].copy(),
                a_e=None if a_e is None else a_e.data[t].copy(),
                p_gen=0.0 if p_gen is None else float(p_gen.data[t, 0]),
                q_gen=0.0 if q_gen is None else float(q_gen.data[t, 0]),
                p_star=p_star.data[t].copy(),
            ))
    return DecoderOutput(p_star=p_star, steps=steps)


def nll_loss(p_star, target_ids):
    """Sum of negative log-likelihood of the targets; also the per-token mean."""
    n = len(target_ids)
    if p_star.shape[0] != n:
        raise ValueError("distribution/target length mismatch")
    picked = T.pick(p_star, np.arange(n), target_ids)
    total = -T.sum_all(T.log_clamped(picked))
    return total, total.item() / n


def forward_teacher_forced(params, cfg, caption_ids, contexts, drop=None,
                           collect_steps=False, pos_cache=None):
    """Teacher-forced decoder pass over a full caption (BOS ... EOS)."""
    if len(caption_ids) < 2:
        raise ValueError("caption must contain BOS and at least one target")
    inputs = caption_ids[:-1]
    targets = caption_ids[1:]
    out = decode_distributions(params, cfg, inputs, contexts, drop=drop,
                               collect_steps=collect_steps,
                               pos_cache=pos_cache)
    loss, per_token = nll_loss(out.p_star, targets)
    return loss, per_token, out
