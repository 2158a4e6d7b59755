"""WordPiece vocabulary training and greedy longest-match-first tokenization."""

from __future__ import annotations

import heapq
import os
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"
MAX_WORD_CHARS = 100

# Arabic harakat, tanween, shadda, sukun, superscript alef, Quranic marks
_TASHKEEL = set(chr(c) for c in range(0x064B, 0x0660)) | {"ٰ"} | set(chr(c) for c in range(0x06D6, 0x06EE))
TATWEEL = "ـ"


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(compare=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> Vocab:
        tokens = tuple(tokens)
        mapping: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in mapping:
                raise VocabError(f"duplicate token {tok!r} at line {i + 1} (first seen at line {mapping[tok] + 1})")
            if not tok:
                raise VocabError(f"empty token at line {i + 1}")
            mapping[tok] = i
        missing = [s for s in SPECIAL_TOKENS if s not in mapping]
        if missing:
            raise VocabError(f"vocabulary is missing special tokens {missing}")
        if mapping[PAD] != 0:
            raise VocabError(f"{PAD} must have id 0, found {mapping[PAD]}")
        return cls(tokens, mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __getitem__(self, token: str) -> int:
        return self.token_to_id[token]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.token_to_id[s] for s in SPECIAL_TOKENS)


@dataclass
class Encoding:
    """One framed sequence. Special and pad tokens have offsets (0, 0),
    word_index -1 and segment None in ``sequence_ids``; offsets of real tokens
    index into whichever input text their segment came from."""

    ids: list[int]
    tokens: list[str]
    word_offsets: list[tuple[int, int]]
    word_index: list[int]
    segment_ids: list[int]
    sequence_ids: list[int | None]

    @property
    def attention_mask(self) -> list[int]:
        return [0 if t == PAD else 1 for t in self.tokens]

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# normalization and pre-tokenization


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def normalize_with_map(text: str) -> tuple[str, list[int]]:
    """NFC, drop tashkeel and tatweel, lowercase Latin.

    Returns the normalized string and, per normalized character, the index of
    the source character it came from. Composition is applied per base
    character plus its trailing combining marks, so the map stays monotone.
    """
    out: list[str] = []
    src: list[int] = []
    i, n = 0, len(text)
    while i < n:
        j = i + 1
        while j < n and unicodedata.combining(text[j]):
            j += 1
        cluster = unicodedata.normalize("NFC", text[i:j])
        for ch in cluster:
            if ch in _TASHKEEL or ch == TATWEEL:
                continue
            if "A" <= ch <= "Z" or ("À" <= ch <= "ɏ" and ch.isupper()):
                low = ch.lower()
                ch = low if len(low) == 1 else ch
            out.append(ch)
            src.append(i)
        i = j
    return "".join(out), src


def normalize_text(text: str) -> str:
    return normalize_with_map(text)[0]


def pre_tokenize(text: str) -> list[tuple[str, int, int]]:
    """Split into words on whitespace, isolating punctuation characters.

    Yields ``(normalized_word, start, end)`` where start/end are character
    offsets into the *original* text, covering any stripped diacritics.
    """
    norm, src = normalize_with_map(text)
    words: list[tuple[str, int, int]] = []
    cur: list[int] = []

    def flush():
        if cur:
            words.append(("".join(norm[k] for k in cur), cur[0], -1))
            cur.clear()

    for k, ch in enumerate(norm):
        if ch.isspace():
            flush()
        elif _is_punct(ch):
            flush()
            words.append((ch, k, -1))
        else:
            cur.append(k)
    flush()
    # convert normalized positions to source offsets; a word extends up to the
    # next kept source character so trailing marks stay inside it
    result = []
    for w, kstart, _ in words:
        kend = kstart + len(w)
        start = src[kstart]
        end = src[kend] if kend < len(src) else len(text)
        # do not swallow whitespace that separated this word from the next
        while end > start and text[end - 1].isspace():
            end -= 1
        result.append((w, start, end))
    return result


# ---------------------------------------------------------------------------
# greedy longest-match segmentation


def wordpiece(word: str, vocab: Vocab) -> list[tuple[str, int, int]] | None:
    """Segment one normalized word; ``None`` when no full decomposition exists.

    Returns ``(piece, char_start, char_end)`` relative to the word.
    """
    if len(word) > MAX_WORD_CHARS:
        return None
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            sub = word[start:end]
            if start > 0:
                sub = CONTINUATION + sub
            if sub in vocab.token_to_id:
                found = sub
                break
            end -= 1
        if found is None:
            return None
        pieces.append((found, start, end))
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> list[tuple[str, int, int, int]]:
    """Tokenize without framing: ``(token, start, end, word_index)`` per piece."""
    out = []
    for wi, (word, wstart, wend) in enumerate(pre_tokenize(text)):
        pieces = wordpiece(word, vocab)
        if pieces is None:
            out.append((UNK, wstart, wend, wi))
            continue
        _, src = normalize_with_map(text[wstart:wend])
        for k, (piece, a, b) in enumerate(pieces):
            s = wstart + src[a]
            e = wstart + src[b] if b < len(src) else wend
            out.append((piece, s, e, wi))
    return out


def _truncate_longest_first(a: list, b: list, budget: int) -> None:
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()


def encode(text: str, vocab: Vocab, max_len: int, pair: str | None = None) -> Encoding:
    """Frame as ``[CLS] a [SEP]`` or ``[CLS] a [SEP] b [SEP]``, truncate, pad."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    a = tokenize(text, vocab)
    b = tokenize(pair, vocab) if pair is not None else []
    budget = max_len - (3 if pair is not None else 2)
    if pair is None:
        del a[max(budget, 0):]
    else:
        _truncate_longest_first(a, b, budget)
    return frame(vocab, a, b if pair is not None else None, max_len)


def frame(vocab: Vocab, a: list, b: list | None, max_len: int) -> Encoding:
    enc = Encoding([], [], [], [], [], [])

    def put(tok, off, wi, seg, seq):
        enc.ids.append(vocab.token_to_id[tok])
        enc.tokens.append(tok)
        enc.word_offsets.append(off)
        enc.word_index.append(wi)
        enc.segment_ids.append(seg)
        enc.sequence_ids.append(seq)

    put(CLS, (0, 0), -1, 0, None)
    for tok, s, e, wi in a:
        put(tok, (s, e), wi, 0, 0)
    put(SEP, (0, 0), -1, 0, None)
    if b is not None:
        for tok, s, e, wi in b:
            put(tok, (s, e), wi, 1, 1)
        put(SEP, (0, 0), -1, 1, None)
    while len(enc.ids) < max_len:
        put(PAD, (0, 0), -1, 0, None)
    return enc


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    words: list[str] = []
    specials = vocab.special_ids
    for i in ids:
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} out of range for vocabulary of {len(vocab)}")
        if i in specials:
            continue
        tok = vocab.id_to_token[i]
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


# ---------------------------------------------------------------------------
# training


def _word_counts(corpus: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for line in corpus:
        for word, _, _ in pre_tokenize(line):
            counts[word] += 1
    return counts


def train_vocab(corpus: Iterable[str], target_size: int, min_frequency: int = 1) -> Vocab:
    """Learn a WordPiece vocabulary.

    Words start as character sequences (non-initial characters carry ``##``).
    Characters seen fewer than ``min_frequency`` times are left out, so words
    containing them encode as ``[UNK]``. Each round merges the adjacent pair
    with the highest ``count(ab) / (count(a) * count(b))`` (ties broken by
    the lexicographically smallest pair) until the vocabulary reaches
    ``target_size`` or no pair with count >= ``min_frequency`` remains.
    """
    counts = _word_counts(corpus)
    if not counts:
        raise VocabError("cannot train a vocabulary on an empty corpus")

    char_freq: Counter = Counter()
    for word, c in counts.items():
        for k, ch in enumerate(word):
            char_freq[ch if k == 0 else CONTINUATION + ch] += c
    alphabet = sorted(t for t, c in char_freq.items() if c >= min_frequency)
    if target_size < len(SPECIAL_TOKENS) + len(alphabet):
        raise VocabError(
            f"target_size {target_size} cannot hold {len(SPECIAL_TOKENS)} specials and {len(alphabet)} characters"
        )
    alpha_set = set(alphabet)
    tokens = list(SPECIAL_TOKENS) + alphabet

    # only words fully covered by the alphabet take part in merging
    words: list[list[str]] = []
    freqs: list[int] = []
    for word, c in sorted(counts.items()):
        pieces = [ch if k == 0 else CONTINUATION + ch for k, ch in enumerate(word)]
        if all(p in alpha_set for p in pieces):
            words.append(pieces)
            freqs.append(c)

    tok_freq: Counter = Counter()
    pair_freq: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    pairs_of: dict[str, set[tuple[str, str]]] = defaultdict(set)
    for wi, (pieces, c) in enumerate(zip(words, freqs)):
        for p in pieces:
            tok_freq[p] += c
        for pair in zip(pieces, pieces[1:]):
            pair_freq[pair] += c
            where[pair].add(wi)
            pairs_of[pair[0]].add(pair)
            pairs_of[pair[1]].add(pair)

    def score(pair):
        return pair_freq[pair] / (tok_freq[pair[0]] * tok_freq[pair[1]])

    # lazy max-heap: entries may be stale and are re-scored when popped
    heap = [(-score(p), p) for p, c in pair_freq.items() if c >= min_frequency]
    heapq.heapify(heap)
    known = set(tokens)

    while len(tokens) < target_size and heap:
        neg, pair = heapq.heappop(heap)
        if pair_freq.get(pair, 0) < min_frequency:
            continue
        current = -score(pair)
        if current != neg:
            heapq.heappush(heap, (current, pair))
            continue
        a, b = pair
        merged = a + b[len(CONTINUATION):] if b.startswith(CONTINUATION) else a + b
        if merged not in known:
            tokens.append(merged)
            known.add(merged)
        touched: set[tuple[str, str]] = set()
        for wi in sorted(where.pop(pair, ())):
            pieces, c = words[wi], freqs[wi]
            for old in zip(pieces, pieces[1:]):
                pair_freq[old] -= c
                where[old].discard(wi)
                touched.add(old)
            for p in pieces:
                tok_freq[p] -= c
            new: list[str] = []
            k = 0
            while k < len(pieces):
                if k + 1 < len(pieces) and pieces[k] == a and pieces[k + 1] == b:
                    new.append(merged)
                    k += 2
                else:
                    new.append(pieces[k])
                    k += 1
            words[wi] = new
            for p in new:
                tok_freq[p] += c
            for nw in zip(new, new[1:]):
                pair_freq[nw] += c
                where[nw].add(wi)
                pairs_of[nw[0]].add(nw)
                pairs_of[nw[1]].add(nw)
                touched.add(nw)
        pair_freq.pop(pair, None)
        # a and b lost frequency, which raises the score of their other pairs
        touched |= pairs_of[a] | pairs_of[b]
        for p in touched:
            if pair_freq.get(p, 0) >= min_frequency:
                heapq.heappush(heap, (-score(p), p))
            elif p in pair_freq and pair_freq[p] <= 0:
                del pair_freq[p]
                pairs_of[p[0]].discard(p)
                pairs_of[p[1]].discard(p)
    return Vocab.from_tokens(tokens)


# ---------------------------------------------------------------------------
# persistence


def save_vocab(vocab: Vocab, path: str | os.PathLike) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for tok in vocab.id_to_token:
            f.write(tok + "\n")
    os.replace(tmp, path)


def load_vocab(path: str | os.PathLike) -> Vocab:
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise VocabError(f"{path}: empty vocabulary file")
    return Vocab.from_tokens(lines)
