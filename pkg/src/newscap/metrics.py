"""Caption quality metrics: corpus BLEU-4, ROUGE-L, CIDEr, and named-entity
precision/recall over single-reference pairs."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field


@dataclass
class EvalPair:
    candidate: list          # candidate tokens
    reference: list          # reference tokens
    candidate_entities: list = field(default_factory=list)  # surface strings
    reference_entities: list = field(default_factory=list)

    def __post_init__(self):
        if not self.candidate or not self.reference:
            raise ValueError("candidate and reference must be nonempty")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(pairs, smoothing_eps=1e-9):
    """Corpus-level BLEU with clipped n-gram precisions (n=1..4), uniform
    weights and brevity penalty. Zero corpus-level precisions are replaced by
    a small epsilon so tiny corpora do not degenerate to -inf logs."""
    if not pairs:
        raise ValueError("bleu4 needs at least one pair")
    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for p in pairs:
        cand_len += len(p.candidate)
        ref_len += len(p.reference)
        for n in range(1, 5):
            cg = _ngrams(p.candidate, n)
            rg = _ngrams(p.reference, n)
            totals[n - 1] += sum(cg.values())
            matches[n - 1] += sum(min(c, rg[g]) for g, c in cg.items())
    log_prec = 0.0
    for n in range(4):
        if totals[n] == 0:
            prec = smoothing_eps
        else:
            prec = matches[n] / totals[n]
            if prec == 0.0:
                prec = smoothing_eps
        log_prec += 0.25 * math.log(prec)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(cand_len, 1))
    return bp * math.exp(log_prec)


def _lcs_len(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(pairs, beta=1.2):
    """Mean longest-common-subsequence F-measure."""
    if not pairs:
        raise ValueError("rouge_l needs at least one pair")
    total = 0.0
    for p in pairs:
        lcs = _lcs_len(p.candidate, p.reference)
        prec = lcs / len(p.candidate)
        rec = lcs / len(p.reference)
        denom = rec + beta * beta * prec
        total += (1 + beta * beta) * prec * rec / denom if denom > 0 else 0.0
    return total / len(pairs)


def cider(pairs):
    """Plain CIDEr: per-n (n=1..4) cosine similarity of TF-IDF n-gram vectors,
    averaged over n, scaled by 10, averaged over pairs. Document frequencies
    come from the evaluation set's references."""
    if not pairs:
        raise ValueError("cider needs at least one pair")
    n_docs = len(pairs)
    df = [Counter() for _ in range(4)]
    for p in pairs:
        for n in range(1, 5):
            df[n - 1].update(set(_ngrams(p.reference, n)))

    def vec(tokens, n):
        counts = _ngrams(tokens, n)
        return {
            g: c * math.log(n_docs / df[n - 1][g])
            for g, c in counts.items() if df[n - 1][g] > 0
        }

    def cosine(u, v):
        dot = sum(u[g] * v.get(g, 0.0) for g in u)
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        return dot / (nu * nv) if nu > 0 and nv > 0 else 0.0

    total = 0.0
    for p in pairs:
        score = 0.0
        for n in range(1, 5):
            score += cosine(vec(p.candidate, n), vec(p.reference, n))
        total += 10.0 * score / 4.0
    return total / n_docs


_WS = re.compile(r"\s+")


def _norm_entity(s):
    return _WS.sub(" ", s.strip()).casefold()


def entity_pr(pairs):
    """Micro-averaged entity precision/recall with multiset clipping; matches
    are on normalized surface strings. An empty candidate side reports
    precision 0 with a flag."""
    matched = 0
    n_cand = 0
    n_ref = 0
    for p in pairs:
        cc = Counter(_norm_entity(e) for e in p.candidate_entities)
        rc = Counter(_norm_entity(e) for e in p.reference_entities)
        matched += sum(min(c, rc[e]) for e, c in cc.items())
        n_cand += sum(cc.values())
        n_ref += sum(rc.values())
    precision = matched / n_cand if n_cand else 0.0
    recall = matched / n_ref if n_ref else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "no_candidate_entities": n_cand == 0,
        "matched": matched,
        "n_candidate": n_cand,
        "n_reference": n_ref,
    }


def score_pairs(pairs):
    """All metrics over one set of pairs."""
    pr = entity_pr(pairs)
    return {
        "bleu4": bleu4(pairs),
        "rouge_l": rouge_l(pairs),
        "cider": cider(pairs),
        "entity_precision": pr["precision"],
        "entity_recall": pr["recall"],
        "no_candidate_entities": pr["no_candidate_entities"],
        "n": len(pairs),
    }


def format_report(report):
    """Human-readable table for an evaluate() report dict."""
    lines = [
        f"samples: {report['n']}   decode: {report['decode_mode']}",
        "                 BLEU-4   ROUGE-L  CIDEr    Ent-P    Ent-R",
    ]
    for label, key in (("post tag-clean", None), ("pre tag-clean", "pre_tc")):
        src = report if key is None else report[key]
        lines.append(
            f"{label:15s}  {src['bleu4']:.4f}   {src['rouge_l']:.4f}   "
            f"{src['cider']:.4f}  {src['entity_precision']:.4f}   "
            f"{src['entity_recall']:.4f}"
        )
    return "\n".join(lines)
