"""Model configuration, parameter initialization, and the full captioner:
encoder + decoder wired together over processed samples."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from . import decoder as D
from .encoder import Dropout, encode_entities, encode_text, project_image


@dataclass
class ModelConfig:
    vocab_size: int
    hidden: int = 512
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    k_patches: int = 49
    feat_dim: int = 2048
    max_pos: int = 512
    dropout: float = 0.1
    ffn_mult: int = 4
    pointer: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("heads must divide hidden size")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _init_mha(params, pfx, rng, h):
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{pfx}/{name}"] = _glorot(rng, h, h)
    params[f"{pfx}/gate_wg"] = _glorot(rng, 2 * h, h)
    params[f"{pfx}/gate_bg"] = np.zeros((1, h))
    params[f"{pfx}/gate_wa"] = _glorot(rng, 2 * h, h)
    params[f"{pfx}/gate_ba"] = np.zeros((1, h))


def _init_ffn(params, pfx, rng, h, mult):
    params[f"{pfx}/w1"] = _glorot(rng, h, mult * h)
    params[f"{pfx}/b1"] = np.zeros((1, mult * h))
    params[f"{pfx}/w2"] = _glorot(rng, mult * h, h)
    params[f"{pfx}/b2"] = np.zeros((1, h))


def _init_ln(params, pfx, h):
    params[f"{pfx}_g"] = np.ones((1, h))
    params[f"{pfx}_b"] = np.zeros((1, h))


def init_params(cfg, seed=0):
    """All trainable weights, addressable by path. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    h = cfg.hidden
    p = {}
    p["emb/word"] = rng.normal(0.0, 0.02, size=(cfg.vocab_size, h))
    p["emb/pos"] = rng.normal(0.0, 0.02, size=(cfg.max_pos, h))
    p["emb/lstm/wx"] = _glorot(rng, h, 4 * h)
    p["emb/lstm/wh"] = _glorot(rng, h, 4 * h)
    p["emb/lstm/b"] = np.zeros((1, 4 * h))
    p["img/proj/w"] = _glorot(rng, cfg.feat_dim, h)
    p["img/proj/b"] = np.zeros((1, h))
    for l in range(cfg.enc_layers):
        _init_mha(p, f"enc/l{l}/self", rng, h)
        _init_mha(p, f"enc/l{l}/vs/att", rng, h)
        p[f"enc/l{l}/vs/gate_w"] = _glorot(rng, h, h)
        p[f"enc/l{l}/vs/gate_b"] = np.zeros((1, h))
        _init_ffn(p, f"enc/l{l}/vs/ffn", rng, h, cfg.ffn_mult)
        _init_ln(p, f"enc/l{l}/vs/ln", h)
    for l in range(cfg.dec_layers):
        _init_mha(p, f"dec/l{l}/self", rng, h)
        _init_mha(p, f"dec/l{l}/img", rng, h)
        _init_mha(p, f"dec/l{l}/art", rng, h)
        _init_mha(p, f"dec/l{l}/ent", rng, h)
        _init_ln(p, f"dec/l{l}/ln1", h)
        _init_ffn(p, f"dec/l{l}/ffn", rng, h, cfg.ffn_mult)
        _init_ln(p, f"dec/l{l}/ln2", h)
    p["out/w"] = _glorot(rng, h, cfg.vocab_size)
    p["out/b"] = np.zeros((1, cfg.vocab_size))
    p["ptr/wp"] = _glorot(rng, 3 * h, 1)
    p["ptr/bp"] = np.zeros((1, 1))
    p["ptr/wq"] = _glorot(rng, 3 * h, 1)
    p["ptr/bq"] = np.zeros((1, 1))
    dtype = T.current_dtype()
    return {k: T.Tensor(v.astype(dtype)) for k, v in p.items()}


@dataclass
class EncodedContexts:
    article: T.Tensor          # [L x H]
    entities: T.Tensor | None  # [M x H] or None when the sample has no entities
    vproj: T.Tensor            # [K x H]
    article_map: np.ndarray    # per article position -> vocabulary id to copy
    entity_map: np.ndarray     # per mention -> vocabulary id to copy
    mentions: list             # EntityMentions aligned with entity rows


def build_copy_maps(sample, vocab):
    """Vocabulary ids emitted when copying article positions or mentions.

    An article token copies as its own id when in-vocab; inside an entity span
    it falls back to the entity's tag id, otherwise UNK. A mention copies as
    its tag id when any of its tokens is OOV, else its first token's id.
    """
    tag_of_pos = {}
    for m in sample.entities:
        for i in range(m.start, m.end):
            tag_of_pos[i] = vocab.tag_id(m.etype)
    article_map = []
    for i, tok in enumerate(sample.article_tokens):
        if tok in vocab:
            article_map.append(vocab.id_of(tok))
        elif i in tag_of_pos:
            article_map.append(tag_of_pos[i])
        else:
            article_map.append(vocab.unk_id)
    entity_map = []
    for m in sample.entities:
        span = sample.article_tokens[m.start:m.end]
        if all(t in vocab for t in span):
            entity_map.append(vocab.id_of(span[0]))
        else:
            entity_map.append(vocab.tag_id(m.etype))
    return np.asarray(article_map, dtype=np.int64), \
        np.asarray(entity_map, dtype=np.int64)


class CaptionModel:
    """Parameters plus the forward passes the runtime needs."""

    def __init__(self, cfg, vocab, params=None, seed=0):
        if cfg.vocab_size != len(vocab):
            raise ValueError("config vocab_size does not match vocabulary")
        self.cfg = cfg
        self.vocab = vocab
        self.params = params if params is not None else init_params(cfg, seed)

    def dropout_ctx(self, rng):
        if self.cfg.dropout <= 0.0:
            return None
        return Dropout(self.cfg.dropout, rng)

    def encode(self, sample, feat_grid, drop=None, pos_cache=None):
        vproj = project_image(self.params, feat_grid)
        article = encode_text(self.params, self.cfg, sample.article_ids, vproj,
                              drop=drop, pos_cache=pos_cache)
        mentions = [m for m in sample.entities if m.end > m.start]
        groups = [sample.article_ids[m.start:m.end] for m in mentions]
        entities = encode_entities(self.params, self.cfg, groups, vproj,
                                   drop=drop, pos_cache=pos_cache)
        article_map, entity_map = build_copy_maps(sample, self.vocab)
        return EncodedContexts(
            article=article,
            entities=entities,
            vproj=vproj,
            article_map=article_map,
            entity_map=entity_map,
            mentions=mentions,
        )

    def loss(self, sample, contexts, drop=None, collect_steps=False,
             pos_cache=None):
        return D.forward_teacher_forced(
            self.params, self.cfg, sample.caption_ids, contexts, drop=drop,
            collect_steps=collect_steps, pos_cache=pos_cache)

    def next_token_dist(self, prefix_ids, contexts, pos_cache=None):
        """Distribution over the next token given a BOS-rooted prefix."""
        out = D.decode_distributions(self.params, self.cfg, prefix_ids,
                                     contexts, pos_cache=pos_cache)
        return out.p_star.data[-1]
