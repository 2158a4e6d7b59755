"""QA exact match / token F1, macro-F1 for classification, entity-level F1 for NER."""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .tokenizer import TATWEEL, _TASHKEEL

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_ALEF = str.maketrans({"أ": "ا", "إ": "ا", "آ": "ا"})


@dataclass(frozen=True)
class NormalizationRules:
    strip_punctuation: bool = True
    strip_diacritics: bool = True
    fold_alef: bool = False
    fold_ta_marbuta: bool = False
    strip_articles: bool = True
    lowercase: bool = True
    collapse_whitespace: bool = True


DEFAULT_RULES = NormalizationRules()


def normalize_answer(s: str, rules: NormalizationRules = DEFAULT_RULES) -> str:
    if rules.lowercase:
        s = s.lower()
    if rules.strip_diacritics:
        s = "".join(ch for ch in s if ch not in _TASHKEEL and ch != TATWEEL)
    if rules.fold_alef:
        s = s.translate(_ALEF)
    if rules.fold_ta_marbuta:
        s = s.replace("ة", "ه")
    if rules.strip_punctuation:
        s = "".join(ch for ch in s if not unicodedata.category(ch).startswith("P"))
    if rules.strip_articles:
        s = _ARTICLES.sub(" ", s)
    if rules.collapse_whitespace:
        s = " ".join(s.split())
    return s


def squad_em(prediction: str, golds: Sequence[str], rules: NormalizationRules = DEFAULT_RULES) -> int:
    if not golds:
        raise ValueError("need at least one gold answer")
    p = normalize_answer(prediction, rules)
    return int(any(p == normalize_answer(g, rules) for g in golds))


def _token_f1(pred: str, gold: str) -> float:
    pt, gt = pred.split(), gold.split()
    if not pt and not gt:
        return 1.0
    if not pt or not gt:
        return 0.0
    overlap = sum((Counter(pt) & Counter(gt)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pt)
    recall = overlap / len(gt)
    return 2 * precision * recall / (precision + recall)


def squad_f1(prediction: str, golds: Sequence[str], rules: NormalizationRules = DEFAULT_RULES) -> float:
    """Max over golds of bag-of-tokens F1 after normalization."""
    if not golds:
        raise ValueError("need at least one gold answer")
    p = normalize_answer(prediction, rules)
    return max(_token_f1(p, normalize_answer(g, rules)) for g in golds)


def squad_scores(predictions: dict[str, str], golds: dict[str, Sequence[str]],
                 rules: NormalizationRules = DEFAULT_RULES) -> dict[str, float]:
    """Corpus EM/F1 as percentages; a missing prediction scores 0."""
    if not golds:
        raise ValueError("no gold examples")
    em = f1 = 0.0
    for qid, answers in golds.items():
        pred = predictions.get(qid, "")
        em += squad_em(pred, answers, rules)
        f1 += squad_f1(pred, answers, rules)
    n = len(golds)
    return {"exact_match": 100.0 * em / n, "f1": 100.0 * f1 / n, "count": n}


def per_class_f1(gold: Sequence[int], pred: Sequence[int], num_classes: int) -> list[float]:
    """Per-class F1; a class absent from both gold and pred scores 1."""
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(pred)} predicted")
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    for g, p in zip(gold, pred):
        if not (0 <= g < num_classes and 0 <= p < num_classes):
            raise ValueError(f"label outside 0..{num_classes - 1}: gold {g}, pred {p}")
        if g == p:
            tp[g] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    out = []
    for k in range(num_classes):
        if tp[k] + fp[k] + fn[k] == 0:
            out.append(1.0)
        else:
            out.append(2 * tp[k] / (2 * tp[k] + fp[k] + fn[k]))
    return out


def macro_f1(gold: Sequence[int], pred: Sequence[int], num_classes: int) -> float:
    scores = per_class_f1(gold, pred, num_classes)
    return sum(scores) / num_classes


def weighted_f1(gold: Sequence[int], pred: Sequence[int], num_classes: int) -> float:
    """Per-class F1 weighted by gold support."""
    scores = per_class_f1(gold, pred, num_classes)
    support = Counter(gold)
    n = len(gold)
    return sum(scores[k] * support[k] / n for k in range(num_classes)) if n else 1.0


def accuracy(gold: Sequence, pred: Sequence) -> float:
    if len(gold) != len(pred):
        raise ValueError("length mismatch")
    return sum(g == p for g, p in zip(gold, pred)) / len(gold) if gold else 1.0


# ---------------------------------------------------------------------------
# entities


ENTITY_TYPES = ("ORG", "PER", "LOC", "MISC")


@dataclass(frozen=True, order=True)
class EntitySpan:
    label: str
    start: int
    end: int


def _parse(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI" and tag[2:] in ENTITY_TYPES:
        return tag[0], tag[2:]
    raise ValueError(f"unknown tag {tag!r}")


def decode_entities(tags: Sequence[str]) -> list[EntitySpan]:
    """IOB2 to spans. ``I-X`` after ``O`` or after another type opens a new
    ``X`` span instead of being discarded."""
    spans: list[EntitySpan] = []
    cur_type, cur_start = None, -1
    for i, tag in enumerate(tags):
        prefix, typ = _parse(tag)
        if prefix == "I" and typ == cur_type:
            continue
        if cur_type is not None:
            spans.append(EntitySpan(cur_type, cur_start, i - 1))
        cur_type, cur_start = (typ, i) if typ is not None else (None, -1)
    if cur_type is not None:
        spans.append(EntitySpan(cur_type, cur_start, len(tags) - 1))
    return spans


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def _prf(tp: int, n_pred: int, n_gold: int) -> PRF:
    if n_pred == 0 and n_gold == 0:
        return PRF(1.0, 1.0, 1.0)
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f)


def entity_f1(gold_tags: Sequence[Sequence[str]] | Sequence[str], pred_tags, average: str = "micro") -> PRF:
    """Exact-match (label, start, end) entity scores.

    Accepts one sentence (a list of tags) or a list of sentences. ``micro``
    pools counts over all entities; ``macro`` averages per-type scores. When
    neither side has any entity the score is 1 by convention.
    """
    if gold_tags and isinstance(gold_tags[0], str):
        gold_tags, pred_tags = [gold_tags], [pred_tags]
    if len(gold_tags) != len(pred_tags):
        raise ValueError("different number of sentences")
    tp: Counter = Counter()
    n_pred: Counter = Counter()
    n_gold: Counter = Counter()
    for g, p in zip(gold_tags, pred_tags):
        if len(g) != len(p):
            raise ValueError(f"sentence length mismatch: {len(g)} gold vs {len(p)} predicted tags")
        gs, ps = set(decode_entities(g)), set(decode_entities(p))
        for s in gs:
            n_gold[s.label] += 1
        for s in ps:
            n_pred[s.label] += 1
        for s in gs & ps:
            tp[s.label] += 1
    if average == "micro":
        return _prf(sum(tp.values()), sum(n_pred.values()), sum(n_gold.values()))
    if average == "macro":
        types = sorted(set(n_gold) | set(n_pred))
        if not types:
            return PRF(1.0, 1.0, 1.0)
        scores = [_prf(tp[t], n_pred[t], n_gold[t]) for t in types]
        return PRF(*(sum(getattr(s, f) for s in scores) / len(scores) for f in ("precision", "recall", "f1")))
    raise ValueError(f"average must be 'micro' or 'macro', got {average!r}")
