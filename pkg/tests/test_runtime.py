"""Tests for the runtime: checkpoint round-trips, greedy/beam decoding
(against exhaustive enumeration), tag cleaning, and the training loop."""

import copy
import itertools
import json
import os

import numpy as np
import pytest

from newscap import runtime as R
from newscap import tensor as T
from newscap.corpus import EntityMention, ProcessedSample, Vocabulary
from newscap.features import FeatureStore, save_features, synthetic_features
from newscap.model import CaptionModel, ModelConfig


VOCAB = Vocabulary(["alpha", "beta", "gamma", "delta"])


def tiny_cfg(**kw):
    base = dict(vocab_size=len(VOCAB), hidden=8, heads=2, enc_layers=1,
                dec_layers=1, k_patches=3, feat_dim=5, max_pos=16,
                dropout=0.0, ffn_mult=2)
    base.update(kw)
    return ModelConfig(**base)


def make_sample(idx=0, feature_ref=""):
    toks = ["alpha", "beta", "Zorb", "gamma", "beta"]
    caps = [["alpha", "beta", "gamma"], ["beta", "gamma", "alpha"],
            ["gamma", "alpha", "beta"]]
    cap = caps[idx % len(caps)]
    return ProcessedSample(
        id=f"s{idx}", source="t",
        article_tokens=toks,
        article_ids=[VOCAB.id_of(t) for t in toks],
        entities=[EntityMention("Zorb", "PERSON", 2, 3, 1)],
        caption_tokens=cap,
        caption_entities=[],
        caption_ids=[VOCAB.bos_id] + [VOCAB.id_of(t) for t in cap]
        + [VOCAB.eos_id],
        feature_ref=feature_ref)


def make_model(seed=0, **kw):
    return CaptionModel(tiny_cfg(**kw), VOCAB, seed=seed)


def encoded(model, sample=None, seed=0):
    sample = sample or make_sample()
    grid = np.random.default_rng(seed).normal(
        size=(model.cfg.k_patches, model.cfg.feat_dim)).astype(np.float32)
    return sample, model.encode(sample, grid)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = make_model(seed=1)
    sample, ctx = encoded(model)
    before = model.next_token_dist(sample.caption_ids[:2], ctx).copy()
    ckpt = R.checkpoint_from_model(model, step=7, epoch=3, seed=1)
    path = str(tmp_path / "m.bin")
    R.save_checkpoint(ckpt, path)
    loaded = R.load_checkpoint(path)
    assert loaded.step == 7 and loaded.epoch == 3 and loaded.seed == 1
    for name, arr in ckpt.params.items():
        assert np.array_equal(loaded.params[name], arr)
    model2 = R.model_from_checkpoint(loaded, VOCAB)
    _, ctx2 = encoded(model2)
    after = model2.next_token_dist(sample.caption_ids[:2], ctx2)
    assert np.array_equal(before, after)


def test_checkpoint_with_adam_state_round_trip(tmp_path):
    model = make_model(seed=2)
    adam = T.AdamState(base_lr=1e-3, warmup=5)
    grads = {k: np.ones_like(p.data) for k, p in model.params.items()}
    T.adam_step(model.params, grads, adam)
    ckpt = R.checkpoint_from_model(model, adam=copy.deepcopy(adam))
    path = str(tmp_path / "m.bin")
    R.save_checkpoint(ckpt, path)
    loaded = R.load_checkpoint(path)
    assert loaded.adam.step == 1
    for name in model.params:
        assert np.array_equal(loaded.adam.m[name], adam.m[name])
        assert np.array_equal(loaded.adam.v[name], adam.v[name])


def test_checkpoint_corruption_detected(tmp_path):
    model = make_model(seed=3)
    path = str(tmp_path / "m.bin")
    R.save_checkpoint(R.checkpoint_from_model(model), path)
    blob = bytearray(open(path, "rb").read())
    blob[-3] ^= 0xFF
    open(path, "wb").write(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        R.load_checkpoint(path)


def test_checkpoint_not_a_checkpoint(tmp_path):
    path = str(tmp_path / "junk.bin")
    open(path, "wb").write(b"garbage bytes")
    with pytest.raises(ValueError):
        R.load_checkpoint(path)


def test_checkpoint_vocab_hash_mismatch(tmp_path):
    model = make_model(seed=4)
    path = str(tmp_path / "m.bin")
    R.save_checkpoint(R.checkpoint_from_model(model), path)
    other = Vocabulary(["different", "words", "here", "now"])
    with pytest.raises(ValueError, match="vocabulary"):
        R.model_from_checkpoint(R.load_checkpoint(path), other)


# ---------------------------------------------------------------------------
# decoding


def test_greedy_decode_deterministic():
    model = make_model(seed=5)
    _, ctx = encoded(model)
    a = R.greedy_decode(model, ctx, max_len=6)
    b = R.greedy_decode(model, ctx, max_len=6)
    assert a == b


def test_greedy_decode_max_len_one():
    model = make_model(seed=6)
    _, ctx = encoded(model)
    assert len(R.greedy_decode(model, ctx, max_len=1)) <= 1


def test_beam_one_equals_greedy():
    for seed in range(5):
        model = make_model(seed=seed)
        _, ctx = encoded(model, seed=seed)
        assert R.beam_decode(model, ctx, beam=1, max_len=6) == \
            R.greedy_decode(model, ctx, max_len=6)


def _table_step_fn(table, vocab_size):
    def fn(prefix):
        key = tuple(prefix)
        dist = table.get(key)
        if dist is None:
            dist = np.zeros(vocab_size)
            dist[1] = 1.0  # force EOS when off-table
        return np.asarray(dist, dtype=float)
    return fn


def _exhaustive_best(table, bos, eos, max_len, vocab_size, alpha=0.7):
    """Enumerate every sequence up to max_len; return the best normalized one."""
    fn = _table_step_fn(table, vocab_size)
    best = (None, -np.inf)
    for length in range(1, max_len + 1):
        for seq in itertools.product(range(vocab_size), repeat=length):
            if eos in seq[:-1] or bos in seq:
                continue
            toks = list(seq)
            ends_with_eos = toks[-1] == eos
            lp = 0.0
            prefix = [bos]
            ok = True
            for tok in toks:
                p = fn(prefix)[tok]
                if p <= 0:
                    ok = False
                    break
                lp += np.log(p)
                prefix.append(tok)
            if not ok:
                continue
            body = toks[:-1] if ends_with_eos else toks
            if not ends_with_eos and length < max_len:
                continue  # only terminal sequences compete
            score = lp / (max(len(body), 1) ** alpha)
            if score > best[1]:
                best = (body, score)
    return best[0]


def test_beam_search_matches_exhaustive_enumeration():
    # hand-set 3-step distribution table: ids 0=BOS, 1=EOS, 2..4 words
    v = 5
    table = {
        (0,): [0, 0.05, 0.5, 0.25, 0.2],
        (0, 2): [0, 0.1, 0.1, 0.7, 0.1],
        (0, 3): [0, 0.3, 0.3, 0.2, 0.2],
        (0, 4): [0, 0.9, 0.02, 0.04, 0.04],
        (0, 2, 3): [0, 0.8, 0.1, 0.05, 0.05],
        (0, 3, 2): [0, 0.5, 0.2, 0.2, 0.1],
    }
    fn = _table_step_fn(table, v)
    got = R.beam_search(fn, bos_id=0, eos_id=1, max_len=3, beam=5)
    expect = _exhaustive_best(table, bos=0, eos=1, max_len=3, vocab_size=v)
    assert got == expect


def test_beam_search_wider_never_worse():
    model = make_model(seed=7)
    _, ctx = encoded(model, seed=7)

    def score(seq, alpha=0.7):
        lp = 0.0
        prefix = [VOCAB.bos_id]
        with T.no_grad():
            for tok in seq + [VOCAB.eos_id]:
                lp += float(np.log(max(
                    model.next_token_dist(prefix, ctx)[tok], 1e-12)))
                prefix.append(tok)
        return lp / (max(len(seq), 1) ** 0.7)

    greedy = R.greedy_decode(model, ctx, max_len=5)
    wide = R.beam_decode(model, ctx, beam=4, max_len=5)
    assert score(wide) >= score(greedy) - 1e-12


def test_beam_search_rejects_bad_beam():
    with pytest.raises(ValueError):
        R.beam_search(lambda p: np.ones(3), 0, 1, 4, beam=0)


# ---------------------------------------------------------------------------
# tag cleaning


def ent(text, etype, start, freq):
    return EntityMention(text, etype, start, start + len(text.split()), freq)


def test_tag_clean_highest_frequency_wins():
    ents = [ent("John Smith", "PERSON", 0, 3), ent("Mary", "PERSON", 5, 1)]
    out, n = R.tag_clean(["PERSON_", "spoke"], ents)
    assert out == ["John", "Smith", "spoke"]
    assert n == 0


def test_tag_clean_identity_without_tags():
    ents = [ent("Paris", "GPE", 0, 2)]
    toks = ["a", "plain", "caption", "."]
    out, n = R.tag_clean(toks, ents)
    assert out == toks and n == 0


def test_tag_clean_tie_breaks_earliest():
    ents = [ent("Late Corp", "ORG", 9, 2), ent("Early Inc", "ORG", 4, 2)]
    out, _ = R.tag_clean(["ORG_"], ents)
    assert out == ["Early", "Inc"]


def test_tag_clean_missing_category_counted():
    out, n = R.tag_clean(["GPE_", "x", "PERSON_"],
                         [ent("Acme", "ORG", 0, 1)])
    assert out == ["GPE_", "x", "PERSON_"]
    assert n == 2


def test_tag_clean_never_touches_non_tags():
    ents = [ent("Zorb", "PERSON", 2, 3)]
    toks = ["alpha", "PERSON", "_PERSON", "PERSONS_", "PERSON_"]
    out, _ = R.tag_clean(toks, ents)
    assert out == ["alpha", "PERSON", "_PERSON", "PERSONS_", "Zorb"]


# ---------------------------------------------------------------------------
# training


def _training_setup(tmp_path, n=3):
    store_dir = tmp_path / "feat"
    store_dir.mkdir(exist_ok=True)
    samples = []
    for i in range(n):
        ref = f"f{i}.bin"
        save_features(synthetic_features(3, 5, seed=i), str(store_dir / ref))
        samples.append(make_sample(i, feature_ref=ref))
    return samples, FeatureStore(str(store_dir))


def _train_cfg(**kw):
    base = dict(batch_size=2, base_lr=1e-3, warmup=5, dropout=0.0,
                patience=100, max_epochs=3, eval_every=1, seed=0,
                max_decode_len=6, model=tiny_cfg())
    base.update(kw)
    return R.TrainConfig(**base)


def test_train_runs_and_returns_best_checkpoint(tmp_path):
    samples, store = _training_setup(tmp_path)
    records = []
    best = R.train(_train_cfg(), samples, samples, VOCAB, store,
                   log_cb=records.append)
    assert best.best_val_cider is not None
    assert len(records) == 3
    assert all(np.isfinite(r["loss"]) for r in records)


def test_train_determinism_identical_logs(tmp_path):
    samples, store = _training_setup(tmp_path)
    logs = []
    for _ in range(2):
        records = []
        R.train(_train_cfg(), samples, samples, VOCAB, store,
                log_cb=records.append)
        logs.append(json.dumps(records, sort_keys=True))
    assert logs[0] == logs[1]


def test_train_patience_zero_stops_after_first_regression(tmp_path):
    samples, store = _training_setup(tmp_path)
    records = []
    R.train(_train_cfg(patience=0, max_epochs=50), samples, samples, VOCAB,
            store, log_cb=records.append)
    # must stop well before the epoch cap once CIDEr stops improving
    assert len(records) < 50


def test_train_target_loss_stop(tmp_path):
    samples, store = _training_setup(tmp_path)
    records = []
    best = R.train(_train_cfg(target_loss=100.0, max_epochs=50), samples,
                   samples, VOCAB, store, log_cb=records.append)
    assert len(records) == 1  # any finite loss beats the silly target
    assert best.epoch == 1


def test_train_empty_sets_rejected(tmp_path):
    samples, store = _training_setup(tmp_path)
    with pytest.raises(ValueError):
        R.train(_train_cfg(), [], samples, VOCAB, store)


def test_train_log_written(tmp_path):
    samples, store = _training_setup(tmp_path)
    log_path = tmp_path / "log.jsonl"
    with open(log_path, "w") as fh:
        R.train(_train_cfg(), samples, samples, VOCAB, store, log_fh=fh)
    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    assert len(lines) == 3
    assert set(lines[0]) == {"epoch", "step", "loss", "val_cider", "lr"}


# ---------------------------------------------------------------------------
# evaluation driver


def test_evaluate_reports_pre_and_post_tc(tmp_path):
    samples, store = _training_setup(tmp_path)
    model = make_model(seed=8)
    report = R.evaluate(model, samples, store, decode="greedy", max_len=6)
    for key in ("bleu4", "rouge_l", "cider", "entity_precision",
                "entity_recall", "pre_tc", "unresolved_tags"):
        assert key in report
    assert report["n"] == len(samples)


def test_evaluate_unknown_decode_mode(tmp_path):
    samples, store = _training_setup(tmp_path)
    model = make_model(seed=9)
    with pytest.raises(ValueError):
        R.decode_sample(model, samples[0], store.get(samples[0].feature_ref),
                        decode="sampling")
