"""Dataset ingestion, validation, splits, and the synthetic pretraining language."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .tokenizer import SPECIAL_TOKENS, Vocab

ENTITY_TYPES = ("ORG", "PER", "LOC", "MISC")
NER_LABELS = ("O",) + tuple(f"{p}-{t}" for t in ENTITY_TYPES for p in ("B", "I"))
TYPE_ALIASES = {"PERS": "PER", "PERSON": "PER", "ORGANIZATION": "ORG", "LOCATION": "LOC"}
ARSENTD_LABELS = ("very_negative", "negative", "neutral", "positive", "very_positive")


class DataFormatError(ValueError):
    pass


@dataclass
class QaExample:
    id: str
    question: str
    context: str
    answers: list[tuple[str, int]]


@dataclass
class ClsExample:
    id: str
    text: str
    label: int


@dataclass
class NerExample:
    id: str
    words: list[str]
    tags: list[str]


TaskExample = Union[QaExample, ClsExample, NerExample]


@dataclass
class QualityReport:
    total: int = 0
    kept: int = 0
    dropped: int = 0
    reasons: list[str] = field(default_factory=list)

    def keep(self) -> None:
        self.total += 1
        self.kept += 1

    def drop(self, reason: str) -> None:
        self.total += 1
        self.dropped += 1
        self.reasons.append(reason)


# ---------------------------------------------------------------------------
# SQuAD-style QA


def _require(obj, key: str, where: str, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise DataFormatError(f"{where}: missing required field {key!r}")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise DataFormatError(f"{where}.{key}: expected {kind.__name__}, got {type(val).__name__}")
    return val


def parse_squad(doc: dict, require_answers: bool = True) -> tuple[list[QaExample], QualityReport]:
    report = QualityReport()
    examples = []
    for di, article in enumerate(_require(doc, "data", "$", list)):
        for pi, para in enumerate(_require(article, "paragraphs", f"data[{di}]", list)):
            where_p = f"data[{di}].paragraphs[{pi}]"
            context = _require(para, "context", where_p, str)
            for qi, qa in enumerate(_require(para, "qas", where_p, list)):
                where = f"{where_p}.qas[{qi}]"
                qid = str(_require(qa, "id", where))
                question = _require(qa, "question", where, str)
                answers = []
                bad = None
                for ai, ans in enumerate(_require(qa, "answers", where, list)):
                    text = _require(ans, "text", f"{where}.answers[{ai}]", str)
                    start = _require(ans, "answer_start", f"{where}.answers[{ai}]", int)
                    if context[start:start + len(text)] != text:
                        bad = f"{where} (id {qid}): answer {ai} {text!r} not found at offset {start}"
                        break
                    answers.append((text, start))
                if bad is not None:
                    report.drop(bad)
                elif require_answers and not answers:
                    report.drop(f"{where} (id {qid}): no answers")
                else:
                    report.keep()
                    examples.append(QaExample(qid, question, context, answers))
    return examples, report


def read_squad_json(path: str | os.PathLike, require_answers: bool = True) -> tuple[list[QaExample], QualityReport]:
    """Read SQuAD v1-style JSON. Questions whose answer text does not sit at
    ``answer_start`` are dropped and listed in the report, never repaired."""
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed JSON ({exc})") from None
    return parse_squad(doc, require_answers)


def write_squad_json(path: str | os.PathLike, examples: Sequence[QaExample]) -> None:
    paras = [{
        "context": ex.context,
        "qas": [{"id": ex.id, "question": ex.question,
                 "answers": [{"text": t, "answer_start": s} for t, s in ex.answers]}],
    } for ex in examples]
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"version": "1.1", "data": [{"title": "", "paragraphs": paras}]}, f, ensure_ascii=False)


# ---------------------------------------------------------------------------
# CoNLL NER


def _split_tag(tag: str) -> tuple[str | None, str | None]:
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
        prefix, typ = tag[0], tag[2:]
    else:
        prefix, typ = None, tag
    typ = TYPE_ALIASES.get(typ, typ)
    if typ not in ENTITY_TYPES:
        raise DataFormatError(f"unknown tag {tag!r}")
    return prefix, typ


def to_iob2(tags: Sequence[str]) -> list[str]:
    """Normalise IOB1, IOB2 or prefix-less tags to IOB2.

    A tag opens a new entity (``B-``) unless it is ``I-X`` or bare ``X``
    directly following a tag of the same type.
    """
    out: list[str] = []
    prev_type = None
    for tag in tags:
        prefix, typ = _split_tag(tag)
        if typ is None:
            out.append("O")
        elif prefix == "B" or typ != prev_type:
            out.append(f"B-{typ}")
        else:
            out.append(f"I-{typ}")
        prev_type = typ
    return out


def read_conll(path: str | os.PathLike) -> list[NerExample]:
    examples: list[NerExample] = []
    words: list[str] = []
    tags: list[str] = []

    def flush():
        if words:
            examples.append(NerExample(f"sent-{len(examples)}", list(words), to_iob2(tags)))
            words.clear()
            tags.clear()

    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            cols = line.split()
            if len(cols) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'token tag', got {len(cols)} columns")
            try:
                _split_tag(cols[1])
            except DataFormatError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            words.append(cols[0])
            tags.append(cols[1])
    flush()
    return examples


def write_conll(path: str | os.PathLike, examples: Sequence[NerExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            for w, t in zip(ex.words, ex.tags):
                f.write(f"{w} {t}\n")
            f.write("\n")


# ---------------------------------------------------------------------------
# classification TSV


def read_tsv_classification(path: str | os.PathLike, num_labels: int = 5) -> list[ClsExample]:
    """Read ``text<TAB>label`` rows after a ``text\\tlabel`` header.

    An optional first line ``# labels: name0,name1,...`` declares label
    names, after which the label column may use names instead of integers.
    Tabs inside the text are not allowed, quoted or not.
    """
    names: dict[str, int] = {}
    out: list[ClsExample] = []
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    i = 0
    if lines and lines[0].startswith("#"):
        head, _, rest = lines[0][1:].partition(":")
        if head.strip() != "labels":
            raise DataFormatError(f"{path}:1: unknown directive {lines[0]!r}")
        names = {n.strip(): k for k, n in enumerate(rest.split(",")) if n.strip()}
        i = 1
    if i >= len(lines) or lines[i].split("\t") != ["text", "label"]:
        raise DataFormatError(f"{path}:{i + 1}: expected header 'text<TAB>label'")
    for lineno in range(i + 2, len(lines) + 1):
        line = lines[lineno - 1]
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(cols)}")
        text, raw = cols
        if raw in names:
            label = names[raw]
        else:
            try:
                label = int(raw)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: label {raw!r} is neither an integer nor a declared name") from None
        if not 0 <= label < num_labels:
            raise DataFormatError(f"{path}:{lineno}: label {label} outside 0..{num_labels - 1}")
        out.append(ClsExample(f"row-{len(out)}", text, label))
    return out


def write_tsv_classification(path: str | os.PathLike, examples: Sequence[ClsExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("text\tlabel\n")
        for ex in examples:
            if "\t" in ex.text or "\n" in ex.text:
                raise DataFormatError(f"{ex.id}: text contains a tab or newline")
            f.write(f"{ex.text}\t{ex.label}\n")


def convert_arsentd_lev(csv_path: str | os.PathLike, tsv_path: str | os.PathLike) -> int:
    """Reduce an ArSenTD-Lev CSV to ``text<TAB>label``.

    Keeps the ``Tweet`` column (whitespace runs, including tabs and newlines,
    collapsed to one space) and maps ``Sentiment`` names to ids in the order
    very_negative=0, negative=1, neutral=2, positive=3, very_positive=4.
    Topic and sentiment-target annotations are discarded.
    """
    ids = {n: k for k, n in enumerate(ARSENTD_LABELS)}
    rows = []
    with open(csv_path, encoding="utf-8", newline="") as f:
        for lineno, rec in enumerate(csv.DictReader(f), 2):
            try:
                label = ids[rec["Sentiment"].strip().lower()]
            except KeyError:
                raise DataFormatError(f"{csv_path}:{lineno}: unknown or missing sentiment") from None
            rows.append(ClsExample(f"row-{len(rows)}", " ".join(rec["Tweet"].split()), label))
    write_tsv_classification(tsv_path, rows)
    return len(rows)


# ---------------------------------------------------------------------------
# splits


def train_test_split(examples: Sequence, test_fraction: float = 0.2, seed: int = 0) -> tuple[list, list]:
    """Seeded shuffle, then cut; used for the 80/20 sentiment split."""
    order = list(range(len(examples)))
    random.Random(seed).shuffle(order)
    n_test = int(round(test_fraction * len(examples)))
    test = set(order[:n_test])
    return [e for i, e in enumerate(examples) if i not in test], [e for i, e in enumerate(examples) if i in test]


def hash_split(examples: Sequence, dev_fraction: float = 0.1, seed: int = 0) -> tuple[list, list]:
    """Deterministic dev split by hashing (seed, example index); order preserved."""
    train, dev = [], []
    for i, ex in enumerate(examples):
        h = hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest()
        (dev if int.from_bytes(h, "big") / 2**64 < dev_fraction else train).append(ex)
    return train, dev


# ---------------------------------------------------------------------------
# raw corpora


def read_corpus(paths: Iterable[str | os.PathLike]) -> list[str]:
    """Documents separated by blank lines; a document never spans files."""
    docs: list[str] = []
    for p in paths:
        cur: list[str] = []
        with open(p, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    cur.append(line.strip())
                elif cur:
                    docs.append(" ".join(cur))
                    cur = []
        if cur:
            docs.append(" ".join(cur))
    return docs


# ---------------------------------------------------------------------------
# synthetic language


@dataclass(frozen=True)
class SyntheticLangSpec:
    """Order-2 Markov source over ``vocab_size - 5`` symbols (the rest of the
    id space is taken by the special tokens).

    Next-token rule, first match wins: the previous symbol is a planted bigram
    head -> its partner; the previous two symbols form a planted trigram
    context -> its completion; otherwise an independent draw from a Zipf base
    distribution.

    With ``doc_vocab > 0`` each document first draws that many distinct
    symbols from the base distribution and takes its free draws uniformly
    from them. Replacements proposed by a context-blind generator then tend
    to be words the document never uses, which a discriminator can spot by
    comparing a token with its neighbours.
    """

    vocab_size: int = 8192
    seq_len: int = 128
    num_sequences: int = 200
    num_bigrams: int = 64
    num_trigrams: int = 64
    head_pool: int = 256
    zipf_exponent: float = 1.0
    doc_vocab: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 16:
            raise ValueError("vocab_size must be at least 16")
        if self.seq_len < 4:
            raise ValueError("seq_len must be at least 4")
        if not 0 <= self.doc_vocab <= self.num_symbols:
            raise ValueError("doc_vocab must be in [0, vocab_size - 5]")

    @property
    def num_symbols(self) -> int:
        return self.vocab_size - len(SPECIAL_TOKENS)


class SyntheticLanguage:
    def __init__(self, spec: SyntheticLangSpec):
        self.spec = spec
        n = spec.num_symbols
        rng = np.random.default_rng([spec.seed, 1])
        ranks = np.arange(1, n + 1, dtype=np.float64)
        base = ranks ** -spec.zipf_exponent
        self.base = base / base.sum()
        pool = min(spec.head_pool, n // 2)
        nb = min(spec.num_bigrams, pool // 2)
        heads = rng.choice(pool, size=nb, replace=False)
        rest = np.setdiff1d(np.arange(n), heads)
        partners = rng.choice(rest, size=nb, replace=False)
        self.bigrams = {int(a): int(b) for a, b in zip(heads, partners)}
        self.trigrams: dict[tuple[int, int], int] = {}
        non_heads = np.setdiff1d(np.arange(pool), heads)
        while len(self.trigrams) < spec.num_trigrams and len(non_heads) >= 2:
            c, d = (int(x) for x in rng.choice(non_heads, size=2, replace=False))
            if (c, d) not in self.trigrams:
                self.trigrams[(c, d)] = int(rng.integers(n))
            if len(self.trigrams) >= len(non_heads) * (len(non_heads) - 1):
                break

    def forced(self, prev2: int | None, prev1: int | None) -> int | None:
        if prev1 is not None and prev1 in self.bigrams:
            return self.bigrams[prev1]
        if prev2 is not None and (prev2, prev1) in self.trigrams:
            return self.trigrams[(prev2, prev1)]
        return None

    def sample(self, length: int, rng: np.random.Generator) -> np.ndarray:
        """``length`` symbols (0-based, before the special-token offset)."""
        if self.spec.doc_vocab:
            words = rng.choice(len(self.base), size=self.spec.doc_vocab, replace=False, p=self.base)
            free = words[rng.integers(len(words), size=length)]
        else:
            free = rng.choice(len(self.base), size=length, p=self.base)
        out = np.empty(length, dtype=np.int64)
        p2 = p1 = None
        for i in range(length):
            f = self.forced(p2, p1)
            out[i] = free[i] if f is None else f
            p2, p1 = p1, int(out[i])
        return out

    def free_mask(self, seq: np.ndarray) -> np.ndarray:
        """True where the symbol came from the base distribution."""
        mask = np.ones(len(seq), dtype=bool)
        for i in range(len(seq)):
            p1 = int(seq[i - 1]) if i >= 1 else None
            p2 = int(seq[i - 2]) if i >= 2 else None
            mask[i] = self.forced(p2, p1) is None
        return mask


@dataclass
class SyntheticCorpus:
    train: list[np.ndarray]
    heldout: list[np.ndarray]
    vocab: Vocab
    language: SyntheticLanguage

    def to_text(self, docs: Sequence[np.ndarray]) -> str:
        return "\n\n".join(" ".join(self.vocab.id_to_token[i] for i in d) for d in docs) + "\n"


def synthetic_vocab(spec: SyntheticLangSpec) -> Vocab:
    return Vocab.from_tokens(list(SPECIAL_TOKENS) + [f"w{k}" for k in range(spec.num_symbols)])


def gen_synthetic_corpus(spec: SyntheticLangSpec) -> SyntheticCorpus:
    """Documents of ``seq_len - 2`` token ids (room for [CLS] and [SEP]),
    split 95/5 into train and held-out."""
    lang = SyntheticLanguage(spec)
    rng = np.random.default_rng([spec.seed, 2])
    offset = len(SPECIAL_TOKENS)
    docs = [lang.sample(spec.seq_len - 2, rng) + offset for _ in range(spec.num_sequences)]
    n_held = max(1, int(round(0.05 * len(docs)))) if len(docs) > 1 else 0
    return SyntheticCorpus(docs[: len(docs) - n_held], docs[len(docs) - n_held:], synthetic_vocab(spec), lang)


def synthetic_probe_task(lang: SyntheticLanguage, num_examples: int, length: int, seed: int,
                         swap_fraction: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Binary "well-formedness" task for linear probes.

    Label 1 sequences come straight from the language. Label 0 sequences are
    drawn the same way, then a fraction of planted (head, partner) pairs are
    swapped in place, so both classes have identical token counts and differ
    only in order. Returns symbol-id arrays [N, length] and labels [N].
    """
    rng = np.random.default_rng([seed, 3])
    seqs = np.empty((num_examples, length), dtype=np.int64)
    labels = np.zeros(num_examples, dtype=np.int64)
    heads = lang.bigrams
    i = 0
    while i < num_examples:
        s = lang.sample(length, rng)
        label = i % 2
        # both classes need a planted pair, else its presence alone gives the label away
        spots = [k for k in range(length - 1) if int(s[k]) in heads and heads[int(s[k])] == s[k + 1]]
        if not spots:
            continue
        if label == 0:
            n_swap = max(1, int(round(swap_fraction * len(spots))))
            chosen = sorted(rng.choice(len(spots), size=n_swap, replace=False))
            last = -2
            for c in chosen:
                k = spots[c]
                if k <= last + 1:
                    continue
                s[k], s[k + 1] = s[k + 1], s[k]
                last = k
        seqs[i] = s
        labels[i] = label
        i += 1
    return seqs, labels
