"""Sliding-window features and span decoding for extractive QA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tokenizer import CLS, PAD, SEP, Vocab, tokenize


class AnswerMismatch(ValueError):
    """The text at the answer offset differs from the answer string."""


@dataclass
class QaFeature:
    example_id: str
    window: int
    input_ids: list[int]
    segment_ids: list[int]
    attention_mask: list[int]
    # per position: (start, end) char offsets into the context, None outside it
    token_to_char: list[tuple[int, int] | None]
    context_start: int  # first context position in the window
    context_end: int  # one past the last context position
    doc_start: int  # index of the window's first token within the whole context
    start_position: int = 0
    end_position: int = 0
    tokens: list[str] = field(default_factory=list, repr=False)

    @property
    def has_answer(self) -> bool:
        return self.start_position > 0


def answer_token_span(ctx_tokens: Sequence[tuple], char_start: int, char_end: int) -> tuple[int, int] | None:
    """First and last context tokens overlapping ``[char_start, char_end)``."""
    first = last = None
    for i, (_, s, e, _) in enumerate(ctx_tokens):
        if e > char_start and s < char_end:
            if first is None:
                first = i
            last = i
    return None if first is None else (first, last)


def window_starts(n_context: int, available: int, stride: int) -> list[int]:
    """Start offsets of context windows; each advances by ``stride`` tokens
    and the last one reaches the end of the context."""
    if available <= 0:
        raise ValueError("no room for context tokens; lower max_query_len or raise max_len")
    if stride <= 0:
        raise ValueError("stride must be positive")
    starts = [0]
    while starts[-1] + available < n_context:
        starts.append(starts[-1] + stride)
    return starts


def build_qa_features(
    question: str,
    context: str,
    vocab: Vocab,
    answer: tuple[str, int] | None = None,
    max_len: int = 384,
    stride: int = 128,
    max_query_len: int = 64,
    example_id: str = "",
) -> list[QaFeature]:
    """Split ``context`` into overlapping windows framed as
    ``[CLS] question [SEP] window [SEP]``.

    ``answer`` is ``(text, char_start)``. Windows holding the whole answer
    target its token span; the others target [CLS] (position 0).
    """
    q = tokenize(question, vocab)[:max_query_len]
    ctx = tokenize(context, vocab)
    span = None
    if answer is not None:
        text, cs = answer
        if context[cs:cs + len(text)] != text:
            raise AnswerMismatch(f"{example_id}: context has {context[cs:cs + len(text)]!r} at {cs}, answer is {text!r}")
        span = answer_token_span(ctx, cs, cs + len(text))
    available = max_len - len(q) - 3
    features = []
    for w, start in enumerate(window_starts(len(ctx), available, stride)):
        piece = ctx[start:start + available]
        tokens = [CLS] + [t[0] for t in q] + [SEP]
        offset = len(tokens)
        tokens += [t[0] for t in piece] + [SEP]
        seg = [0] * offset + [1] * (len(piece) + 1)
        t2c: list[tuple[int, int] | None] = [None] * offset + [(t[1], t[2]) for t in piece] + [None]
        pad = max_len - len(tokens)
        mask = [1] * len(tokens) + [0] * pad
        tokens += [PAD] * pad
        seg += [0] * pad
        t2c += [None] * pad
        f = QaFeature(
            example_id, w, [vocab.token_to_id[t] for t in tokens], seg, mask, t2c,
            offset, offset + len(piece), start, tokens=tokens,
        )
        if span is not None and start <= span[0] and span[1] < start + len(piece):
            f.start_position = span[0] - start + offset
            f.end_position = span[1] - start + offset
        features.append(f)
    return features


@dataclass
class SpanPrediction:
    text: str
    score: float
    null_score: float
    window: int = -1
    token_span: tuple[int, int] | None = None
    char_span: tuple[int, int] | None = None


def _top(x: np.ndarray, lo: int, hi: int, n: int) -> list[int]:
    idx = np.arange(lo, hi)
    order = np.argsort(-x[lo:hi], kind="stable")[:n]
    return [int(i) for i in idx[order]]


def best_span(start_logits, end_logits, feature: QaFeature, max_answer_len: int = 30, n_best: int = 20):
    """Highest ``start[i] + end[j]`` with ``i <= j``, ``j - i < max_answer_len``,
    both inside the context segment; ``None`` if no pair qualifies."""
    s = np.asarray(start_logits, dtype=np.float64)
    e = np.asarray(end_logits, dtype=np.float64)
    best = None
    for i in _top(s, feature.context_start, feature.context_end, n_best):
        for j in _top(e, feature.context_start, feature.context_end, n_best):
            if j < i or j - i >= max_answer_len:
                continue
            score = s[i] + e[j]
            if best is None or score > best[0] or (score == best[0] and (i, j) < best[1]):
                best = (score, (i, j))
    return best


def predict_span(
    features: Sequence[QaFeature],
    start_logits: Sequence,
    end_logits: Sequence,
    context: str,
    max_answer_len: int = 30,
    n_best: int = 20,
) -> SpanPrediction:
    """Pick the answer for one example across all of its windows.

    The best-scoring valid span over all windows wins if it beats the null
    ([CLS]) score, taken as the smallest per-window ``start[0] + end[0]``;
    otherwise the answer is empty. Text comes from the character offsets.
    """
    if isinstance(features, QaFeature):
        features, start_logits, end_logits = [features], [start_logits], [end_logits]
    null = min(float(s[0]) + float(e[0]) for s, e in zip(start_logits, end_logits))
    top = None
    for f, s, e in zip(features, start_logits, end_logits):
        cand = best_span(s, e, f, max_answer_len, n_best)
        if cand is not None and (top is None or cand[0] > top[0]):
            top = (cand[0], cand[1], f)
    if top is None or not top[0] > null:
        return SpanPrediction("", null, null)
    score, (i, j), f = top
    cs, ce = f.token_to_char[i][0], f.token_to_char[j][1]
    return SpanPrediction(context[cs:ce], score, null, f.window, (i, j), (cs, ce))
