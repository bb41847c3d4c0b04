"""Training loop, checkpointing, greedy/beam decoding, tag cleaning, and the
evaluation driver."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from . import metrics
from .corpus import ENTITY_TYPES, UNK, extract_entities, tag_token
from .model import CaptionModel, ModelConfig

CKPT_MAGIC = b"NCKP"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    base_lr: float = 5e-4
    warmup: int = 4000
    dropout: float = 0.1
    patience: int = 20          # evaluations without val CIDEr improvement
    max_epochs: int = 100
    eval_every: int = 1         # epochs between validation decodes
    seed: int = 0
    max_decode_len: int = 31
    target_loss: float | None = None  # stop once per-token loss drops below
    model: ModelConfig = None

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("model") is not None:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict               # name -> np.ndarray
    vocab_hash: str
    step: int = 0
    epoch: int = 0
    seed: int = 0
    rng_state: dict | None = None
    adam: T.AdamState | None = None
    train_config: dict | None = None
    best_val_cider: float | None = None


def vocab_hash(vocab):
    payload = json.dumps(
        {t: i for i, t in enumerate(vocab.decode(range(len(vocab))))},
        sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def checkpoint_from_model(model, **kw):
    return Checkpoint(
        config=model.cfg,
        params={k: p.data.copy() for k, p in model.params.items()},
        vocab_hash=vocab_hash(model.vocab),
        **kw,
    )


def model_from_checkpoint(ckpt, vocab):
    if ckpt.vocab_hash != vocab_hash(vocab):
        raise ValueError("checkpoint vocabulary hash does not match vocabulary")
    params = {k: T.Tensor(v.copy()) for k, v in ckpt.params.items()}
    return CaptionModel(ckpt.config, vocab, params=params)


def save_checkpoint(ckpt, path):
    """Versioned container: magic, header JSON, concatenated raw blobs.
    Written atomically (temp file + rename)."""
    names = sorted(ckpt.params)
    dtype = str(ckpt.params[names[0]].dtype) if names else "float32"
    blobs = [np.ascontiguousarray(ckpt.params[n]).tobytes() for n in names]
    adam = None
    if ckpt.adam is not None:
        adam = {
            "base_lr": ckpt.adam.base_lr, "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps,
            "warmup": ckpt.adam.warmup, "step": ckpt.adam.step,
        }
        for n in names:
            blobs.append(np.ascontiguousarray(
                ckpt.adam.m.get(n, np.zeros_like(ckpt.params[n]))).tobytes())
        for n in names:
            blobs.append(np.ascontiguousarray(
                ckpt.adam.v.get(n, np.zeros_like(ckpt.params[n]))).tobytes())
    blob = b"".join(blobs)
    header = {
        "version": CKPT_VERSION,
        "dtype": dtype,
        "config": ckpt.config.to_dict(),
        "vocab_hash": ckpt.vocab_hash,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "rng_state": ckpt.rng_state,
        "adam": adam,
        "train_config": ckpt.train_config,
        "best_val_cider": ckpt.best_val_cider,
        "params": [{"name": n, "shape": list(ckpt.params[n].shape)}
                   for n in names],
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hdr_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hdr_len).decode())
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != header["checksum"]:
        raise ValueError("checkpoint checksum failure")
    dtype = np.dtype(header["dtype"])
    params = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * dtype.itemsize
        params[entry["name"]] = np.frombuffer(
            blob[offset:offset + size], dtype=dtype).reshape(shape).copy()
        offset += size
    adam = None
    if header["adam"] is not None:
        a = header["adam"]
        adam = T.AdamState(base_lr=a["base_lr"], beta1=a["beta1"],
                           beta2=a["beta2"], eps=a["eps"], warmup=a["warmup"],
                           step=a["step"])
        for bucket in (adam.m, adam.v):
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                size = int(np.prod(shape)) * dtype.itemsize
                bucket[entry["name"]] = np.frombuffer(
                    blob[offset:offset + size], dtype=dtype).reshape(shape).copy()
                offset += size
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        vocab_hash=header["vocab_hash"],
        step=header["step"],
        epoch=header["epoch"],
        seed=header["seed"],
        rng_state=header["rng_state"],
        adam=adam,
        train_config=header["train_config"],
        best_val_cider=header["best_val_cider"],
    )


# ---------------------------------------------------------------------------
# Decoding


def greedy_decode(model, contexts, max_len=31):
    """Argmax decoding; ties break toward the lowest token id."""
    bos, eos = model.vocab.bos_id, model.vocab.eos_id
    prefix = [bos]
    out = []
    with T.no_grad():
        # parameters are fixed during decoding, so position embeddings
        # for all prefix lengths can be computed once
        cache = {"min_len": max_len}
        for _ in range(max_len):
            dist = model.next_token_dist(prefix, contexts, pos_cache=cache)
            nxt = int(np.argmax(dist))
            if nxt == eos:
                break
            out.append(nxt)
            prefix.append(nxt)
    return out


def beam_search(step_fn, bos_id, eos_id, max_len, beam, alpha=0.7):
    """Length-normalized beam search over an abstract next-token distribution.

    step_fn(prefix_ids) -> probability vector. Continuing hypotheses compete
    on raw log-probability; final selection uses logprob / len^alpha.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")

    def norm_score(seq_len, lp):
        return lp / (max(seq_len, 1) ** alpha)

    beams = [([bos_id], 0.0)]
    done = []
    for _ in range(max_len):
        cands = []
        for seq, lp in beams:
            logd = np.log(np.maximum(step_fn(seq), 1e-12))
            top = np.argsort(-logd, kind="stable")[:beam]
            for tok in top:
                cands.append((seq + [int(tok)], lp + float(logd[tok])))
        cands.sort(key=lambda c: -c[1])
        beams = []
        for seq, lp in cands:
            if seq[-1] == eos_id:
                done.append((seq[1:-1], norm_score(len(seq) - 2, lp)))
            else:
                beams.append((seq, lp))
            if len(beams) >= beam:
                break
        if not beams:
            break
    for seq, lp in beams:
        done.append((seq[1:], norm_score(len(seq) - 1, lp)))
    done.sort(key=lambda d: -d[1])
    return done[0][0] if done else []


def beam_decode(model, contexts, beam=5, max_len=31, alpha=0.7):
    """Beam search over the model; never returns a sequence scoring below the
    greedy one under the same normalized scoring function."""
    bos, eos = model.vocab.bos_id, model.vocab.eos_id

    with T.no_grad():
        cache = {"min_len": max_len}

        def step_fn(prefix):
            return model.next_token_dist(prefix, contexts, pos_cache=cache)

        best = beam_search(step_fn, bos, eos, max_len, beam, alpha)
        if beam == 1:
            return best
        greedy = greedy_decode(model, contexts, max_len=max_len)

        def score(seq):
            lp = 0.0
            prefix = [bos]
            for tok in seq + [eos]:
                dist = step_fn(prefix)
                lp += float(np.log(max(dist[tok], 1e-12)))
                prefix.append(tok)
            return lp / (max(len(seq), 1) ** alpha)

        if greedy != best and score(greedy) > score(best):
            return greedy
    return best


# ---------------------------------------------------------------------------
# Tag cleaning

_TAG_TYPES = {tag_token(t): t for t in ENTITY_TYPES}


def tag_clean(tokens, entity_set):
    """Replace predicted entity-tag tokens by the same-category article entity
    with the highest frequency (ties: earliest article occurrence). Tags with
    no same-category entity stay in place and are counted.

    Returns (cleaned_tokens, n_unresolved).
    """
    out = []
    unresolved = 0
    for tok in tokens:
        etype = _TAG_TYPES.get(tok)
        if etype is None:
            out.append(tok)
            continue
        candidates = [m for m in entity_set if m.etype == etype]
        if not candidates:
            out.append(tok)
            unresolved += 1
            continue
        best = min(candidates, key=lambda m: (-m.frequency, m.start))
        out.extend(best.text.split())
    return out, unresolved


# ---------------------------------------------------------------------------
# Training


class TrainingDiverged(RuntimeError):
    pass


def _val_cider(model, samples, feature_store, max_len):
    pairs = []
    for s in samples:
        ctx = model.encode(s, feature_store.get(s.feature_ref))
        ids = greedy_decode(model, ctx, max_len=max_len)
        cand, _ = tag_clean(model.vocab.decode(ids), s.entities)
        pairs.append(metrics.EvalPair(
            candidate=cand if cand else [UNK],
            reference=s.caption_tokens))
    return metrics.cider(pairs)


def train(cfg, train_samples, val_samples, vocab, feature_store,
          log_fh=None, log_cb=None):
    """Mini-batch teacher-forced training with Adam and warmup; keeps the
    checkpoint with the best validation CIDEr (greedy decode) and stops after
    `patience` non-improving evaluations."""
    if not train_samples or not val_samples:
        raise ValueError("train and validation sets must be nonempty")
    model = CaptionModel(cfg.model, vocab, seed=cfg.seed)
    adam = T.AdamState(base_lr=cfg.base_lr, warmup=cfg.warmup)
    rng = np.random.default_rng(cfg.seed)

    best = None
    best_cider = -1.0
    bad_evals = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_samples))
        epoch_loss = 0.0
        epoch_tokens = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            T.zero_grads(model.params)
            inv = 1.0 / len(batch)
            # position embeddings depend only on parameters; share them
            # across the batch and run one backward over the summed loss
            pos_cache = {"min_len": max(
                max(len(s.article_ids), len(s.caption_ids) - 1) for s in batch)}
            total = None
            for s in batch:
                drop = model.dropout_ctx(rng)
                ctx = model.encode(s, feature_store.get(s.feature_ref),
                                   drop=drop, pos_cache=pos_cache)
                loss, _, _ = model.loss(s, ctx, drop=drop, pos_cache=pos_cache)
                if not np.isfinite(loss.data).all():
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, sample {s.id}")
                epoch_loss += loss.item()
                epoch_tokens += len(s.caption_ids) - 1
                total = loss if total is None else total + loss
            T.backward(total * inv)
            T.adam_step(model.params, T.collect_grads(model.params), adam)
            step += 1
        per_token = epoch_loss / max(epoch_tokens, 1)

        val = None
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            val = _val_cider(model, val_samples, feature_store,
                             cfg.max_decode_len)
            if val > best_cider:
                best_cider = val
                bad_evals = 0
                best = checkpoint_from_model(
                    model, step=step, epoch=epoch, seed=cfg.seed,
                    rng_state=rng.bit_generator.state,
                    adam=copy.deepcopy(adam),
                    train_config=cfg.to_dict(),
                    best_val_cider=val,
                )
            else:
                bad_evals += 1

        record = {"epoch": epoch, "step": step, "loss": per_token,
                  "val_cider": val, "lr": T.effective_lr(adam)}
        if log_fh is not None:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
        if log_cb is not None:
            log_cb(record)
        if val is not None and bad_evals > cfg.patience:
            break
        if cfg.target_loss is not None and per_token < cfg.target_loss:
            # overfit use-case: the final (memorized) weights are the product
            best = checkpoint_from_model(
                model, step=step, epoch=epoch, seed=cfg.seed,
                rng_state=rng.bit_generator.state, adam=copy.deepcopy(adam),
                train_config=cfg.to_dict(), best_val_cider=val)
            break
    if best is None:
        best = checkpoint_from_model(
            model, step=step, epoch=cfg.max_epochs, seed=cfg.seed,
            rng_state=rng.bit_generator.state, adam=copy.deepcopy(adam),
            train_config=cfg.to_dict(), best_val_cider=None)
    return best


# ---------------------------------------------------------------------------
# Evaluation driver


def decode_sample(model, sample, feat_grid, decode="greedy", beam=5,
                  max_len=31):
    ctx = model.encode(sample, feat_grid)
    if decode == "greedy":
        ids = greedy_decode(model, ctx, max_len=max_len)
    elif decode == "beam":
        ids = beam_decode(model, ctx, beam=beam, max_len=max_len)
    else:
        raise ValueError(f"unknown decode mode {decode!r}")
    return model.vocab.decode(ids)


def evaluate(model, samples, feature_store, decode="greedy", beam=5,
             max_len=31):
    """Decode, tag-clean, and score; reports metrics both before and after
    tag cleaning to quantify the post-processing contribution."""
    pre_pairs = []
    post_pairs = []
    unresolved = 0
    for s in samples:
        raw = decode_sample(model, s, feature_store.get(s.feature_ref),
                            decode=decode, beam=beam, max_len=max_len)
        cleaned, n_un = tag_clean(raw, s.entities)
        unresolved += n_un
        ref_entities = [m.text for m in s.caption_entities] \
            if s.caption_entities else \
            [m.text for m in extract_entities(s.caption_tokens)]
        for pairs, cand in ((pre_pairs, raw), (post_pairs, cleaned)):
            pairs.append(metrics.EvalPair(
                candidate=cand if cand else [UNK],
                reference=s.caption_tokens,
                candidate_entities=[m.text for m in extract_entities(cand)],
                reference_entities=ref_entities,
            ))
    report = metrics.score_pairs(post_pairs)
    report["pre_tc"] = metrics.score_pairs(pre_pairs)
    report["decode_mode"] = decode
    report["unresolved_tags"] = unresolved
    return report
