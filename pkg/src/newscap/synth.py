"""Seeded synthetic news corpus generator.

Captions are programmatic functions of planted article content so copy
behavior has ground truth:
  - each sample plants one PERSON and one GPE entity whose surface strings
    occur only in that sample (OOV under a min-freq vocabulary cutoff of 5),
    with in-article frequencies making them the tag-cleaning winners;
  - each sample carries a unique in-vocabulary "topic" word that appears
    several times in the article and once in the caption, so producing it on
    held-out samples requires copying from the article.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .features import save_features, synthetic_features

# Appears once per sample (4x article + 1x caption = 5 >= min_freq 5).
TOPIC_REPEATS_ARTICLE = 4

# Planted entities stay under a min_freq=5 cutoff.
SUGGESTED_MIN_FREQ = 5

_FILLER_SENTENCES = [
    "officials said the {topic} program would continue for several months .",
    "residents discussed the {topic} plans during a long public meeting .",
    "reporters described the {topic} session as calm and well attended .",
    "organisers expect the {topic} effort to expand again next year .",
    "supporters praised the {topic} agenda despite some earlier delays .",
]

_CAPTION_TEMPLATES = [
    "{person} joined the {topic} program in {gpe} yesterday .",
    "{person} spoke about the {topic} plans while visiting {gpe} .",
    "{person} praised the {topic} effort during a stop in {gpe} .",
]

_SYL_A = ["zar", "vel", "mok", "tir", "qub", "fen", "dal", "rix", "bol", "nuv"]
_SYL_B = ["an", "or", "ek", "il", "us", "ae", "om", "yr", "ix", "ud"]
_SYL_C = ["dor", "mak", "vin", "tel", "rop", "gul", "zan", "het", "bex", "lim"]


_DIGIT_LETTERS = "abcdefghij"


def _name(index, salt):
    """Deterministic alphabetic pseudo-word unique per (index, salt)."""
    i = index
    parts = [_SYL_A[(i + salt) % 10], _SYL_B[(i // 10 + salt) % 10],
             _SYL_C[(i // 100 + salt) % 10]]
    suffix = "".join(_DIGIT_LETTERS[int(c)] for c in str(index))
    return "".join(parts) + suffix


def person_name(index):
    first = _name(index, 1).capitalize()
    last = _name(index, 2).capitalize()
    return f"{first} {last}"


def gpe_name(index):
    return _name(index, 3).capitalize()


def decoy_person_name(index):
    return _name(index, 4).capitalize() + " " + _name(index, 5).capitalize()


def topic_word(index):
    return _name(index, 6)


def _find_spans(tokens, phrase):
    """Token spans where the phrase's token sequence occurs."""
    words = phrase.split()
    spans = []
    for i in range(len(tokens) - len(words) + 1):
        if tokens[i:i + len(words)] == words:
            spans.append((i, i + len(words)))
    return spans


def _entity_annotations(tokens, phrases_types):
    anns = []
    for phrase, etype in phrases_types:
        for a, b in _find_spans(tokens, phrase):
            anns.append({"text": phrase, "type": etype, "start": a, "end": b})
    anns.sort(key=lambda d: d["start"])
    return anns


def make_sample(index, rng, sources, plant_prob=1.0, n_templates=None):
    """One synthetic record (without feature file).

    n_templates restricts the caption template pool; with a single template
    the caption is a deterministic function of the planted article content,
    which makes held-out caption quality a pure measure of copy behavior.
    """
    topic = topic_word(index)
    person = person_name(index)
    gpe = gpe_name(index)
    decoy = decoy_person_name(index)

    planted = rng.random() < plant_prob
    caption_person = person if planted else person_name(100_000 + index)

    filler = list(_FILLER_SENTENCES)
    rng.shuffle(filler)
    sentences = [
        f"{person} announced the {topic} program in {gpe} this week .",
        filler[0].format(topic=topic),
        f"{person} met residents while touring {gpe} with local officials .",
        filler[1].format(topic=topic),
        f"{decoy} also attended the briefing held by {person} .",
        filler[2].format(topic=topic),
        # keeps every caption-template word above the vocabulary cutoff
        "he joined local leaders yesterday and spoke about the plans "
        "during a short stop while visiting the area .",
    ]
    article = " ".join(sentences)
    art_tokens = article.split()
    assert art_tokens.count(topic) == TOPIC_REPEATS_ARTICLE

    pool = _CAPTION_TEMPLATES[:n_templates] if n_templates else _CAPTION_TEMPLATES
    template = pool[int(rng.integers(len(pool)))]
    caption = template.format(person=caption_person, topic=topic, gpe=gpe)
    cap_tokens = caption.split()

    art_entities = _entity_annotations(art_tokens, [
        (person, "PERSON"), (decoy, "PERSON"), (gpe, "GPE")])
    cap_entities = _entity_annotations(cap_tokens, [
        (caption_person, "PERSON"), (gpe, "GPE")])

    return {
        "id": f"synth-{index:05d}",
        "article": article,
        "caption": caption,
        "image": {"width": 320, "height": 240},
        "source": sources[index % len(sources)],
        "feature_path": f"features/synth-{index:05d}.bin",
        "entities": {"article": art_entities, "caption": cap_entities},
    }


def generate_corpus(out_dir, n=64, seed=0, k_patches=9, feat_dim=32,
                    sources=("alpha-news", "beta-wire"), plant_prob=1.0,
                    n_templates=None):
    """Write raw.jsonl plus matching feature files; fully deterministic."""
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    records = []
    for i in range(n):
        rec = make_sample(i, rng, list(sources), plant_prob=plant_prob,
                          n_templates=n_templates)
        records.append(rec)
        feat_seed = int(np.random.default_rng([seed, i]).integers(2 ** 31))
        save_features(
            synthetic_features(k_patches, feat_dim, feat_seed),
            os.path.join(out_dir, rec["feature_path"]))
    path = os.path.join(out_dir, "raw.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path, records
