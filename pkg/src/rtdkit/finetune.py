"""Fine-tuning loops for span QA, sentence classification and NER, plus the
learning-rate sweep used to pick a model on the dev split."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .data import NER_LABELS, ClsExample, NerExample, QaExample, hash_split
from .metrics import accuracy, entity_f1, macro_f1, squad_scores, weighted_f1
from .model import ClsHead, Encoder, EncoderConfig, Module, SpanHead, TokenHead, init_parameters
from .optim import Adam, NonFiniteError, linear_warmup_decay
from .qa import AnswerMismatch, QaFeature, build_qa_features, predict_span
from .tokenizer import CLS, PAD, SEP, UNK, Vocab, encode, tokenize

TASKS = ("qa", "sa", "ner")
LR_GRID = (2e-5, 3e-5, 5e-5)
DEFAULT_SEQ_LEN = {"qa": 384, "sa": 256, "ner": 256}
DEFAULT_EPOCHS = {"qa": 3, "sa": 10, "ner": 10}
IGNORE_INDEX = -100


@dataclass
class FinetuneConfig:
    task: str = "sa"
    batch_size: int = 32
    max_seq_len: int | None = None  # None: task default
    learning_rate: float = 3e-5
    epochs: int | None = None  # None: task default
    seed: int = 0
    num_labels: int = 5
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    lr_grid: tuple[float, ...] = LR_GRID
    stride: int = 128
    max_query_len: int = 64
    max_answer_len: int = 30
    n_best: int = 20
    max_steps: int | None = None  # optional hard cap on updates

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        self.lr_grid = tuple(float(x) for x in self.lr_grid)
        if self.max_seq_len is None:
            self.max_seq_len = DEFAULT_SEQ_LEN[self.task]
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.task]
        if self.task == "ner":
            self.num_labels = len(NER_LABELS)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FinetuneConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown FinetuneConfig fields: {sorted(unknown)}")
        return cls(**d)


class TaskModel(Module):
    """Encoder plus one task head."""

    def __init__(self, config: EncoderConfig, task: str, num_labels: int = 5):
        self.config = config
        self.task = task
        self.encoder = Encoder(config)
        if task == "qa":
            self.head = SpanHead(config)
        elif task == "sa":
            self.head = ClsHead(config, num_labels)
        elif task == "ner":
            self.head = TokenHead(config, num_labels)
        else:
            raise ValueError(f"unknown task {task!r}")

    def __call__(self, ids, segment_ids, attention_mask, rng=None):
        return self.head(self.encoder(ids, segment_ids, attention_mask, rng))


def build_task_model(config: EncoderConfig, ft: FinetuneConfig, pretrained: Checkpoint | None = None) -> TaskModel:
    model = TaskModel(config, ft.task, ft.num_labels)
    init_parameters(model, ft.seed)
    if pretrained is not None:
        load_encoder(model.encoder, pretrained)
    return model


def load_encoder(encoder: Encoder, ckpt: Checkpoint) -> None:
    """Copy the discriminator (RTD checkpoint) or the encoder (MLM checkpoint)."""
    key = {"rtd": "discriminator", "mlm": "encoder"}.get(ckpt.kind)
    if key is None:
        raise CheckpointError(f"cannot fine-tune from checkpoint kind {ckpt.kind!r}")
    have = ckpt.configs.get(key)
    if have is not None and have.to_dict() != encoder.config.to_dict():
        diff = [k for k, v in encoder.config.to_dict().items() if have.to_dict()[k] != v]
        raise CheckpointError(f"encoder config differs from checkpoint in: {', '.join(diff)}")
    for name, t in encoder.named_parameters().items():
        src = ckpt.arrays.get(f"{key}.{name}")
        if src is None:
            raise CheckpointError(f"checkpoint lacks {key}.{name}")
        if src.shape != t.shape:
            raise CheckpointError(f"{key}.{name}: shape {src.shape} vs {t.shape}")
        t.data[...] = src


# ---------------------------------------------------------------------------
# features


@dataclass
class Batch:
    ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray | None = None
    end_labels: np.ndarray | None = None


def _stack(rows: Sequence[Sequence[int]]) -> np.ndarray:
    return np.asarray(rows, dtype=np.int64)


def cls_features(examples: Sequence[ClsExample], vocab: Vocab, max_len: int, num_labels: int) -> list[tuple]:
    out = []
    for ex in examples:
        if not 0 <= ex.label < num_labels:
            raise ValueError(f"{ex.id}: label {ex.label} outside 0..{num_labels - 1}")
        enc = encode(ex.text, vocab, max_len)
        out.append((enc.ids, enc.segment_ids, enc.attention_mask, ex.label))
    return out


@dataclass
class NerFeature:
    ids: list[int]
    segment_ids: list[int]
    attention_mask: list[int]
    labels: list[int]
    first_subtoken: list[int]  # per word: position of its first piece, -1 if truncated


def align_ner(words: Sequence[str], tags: Sequence[str] | None, vocab: Vocab, max_len: int) -> NerFeature:
    """First wordpiece of each word carries its tag; continuation pieces and
    specials get the ignore index."""
    if tags is not None and len(tags) != len(words):
        raise ValueError(f"{len(words)} words but {len(tags)} tags")
    label_id = {t: i for i, t in enumerate(NER_LABELS)}
    tokens, labels, first = [CLS], [IGNORE_INDEX], []
    budget = max_len - 1
    for wi, word in enumerate(words):
        pieces = [p[0] for p in tokenize(word, vocab)] or [UNK]
        if len(tokens) + 1 > budget:
            first.append(-1)
            continue
        first.append(len(tokens))
        tag = IGNORE_INDEX
        if tags is not None:
            if tags[wi] not in label_id:
                raise ValueError(f"unknown tag {tags[wi]!r}")
            tag = label_id[tags[wi]]
        for k, p in enumerate(pieces):
            if len(tokens) >= budget:
                break
            tokens.append(p)
            labels.append(tag if k == 0 else IGNORE_INDEX)
    tokens.append(SEP)
    labels.append(IGNORE_INDEX)
    pad = max_len - len(tokens)
    mask = [1] * len(tokens) + [0] * pad
    tokens += [PAD] * pad
    labels += [IGNORE_INDEX] * pad
    return NerFeature([vocab.token_to_id[t] for t in tokens], [0] * max_len, mask, labels, first)


def qa_features(examples: Sequence[QaExample], vocab: Vocab, config: FinetuneConfig,
                training: bool) -> tuple[list[QaFeature], int]:
    """Features for every window; training uses the first answer. Returns
    the features and the number of examples skipped for answer mismatch."""
    feats, skipped = [], 0
    for ex in examples:
        answer = ex.answers[0] if training and ex.answers else None
        try:
            feats += build_qa_features(ex.question, ex.context, vocab, answer, config.max_seq_len,
                                       config.stride, config.max_query_len, ex.id)
        except AnswerMismatch:
            skipped += 1
    return feats, skipped


def _batch(task: str, rows: list) -> Batch:
    if task == "sa":
        return Batch(_stack([r[0] for r in rows]), _stack([r[1] for r in rows]), _stack([r[2] for r in rows]),
                     np.asarray([r[3] for r in rows], dtype=np.int64))
    if task == "ner":
        return Batch(_stack([r.ids for r in rows]), _stack([r.segment_ids for r in rows]),
                     _stack([r.attention_mask for r in rows]), _stack([r.labels for r in rows]))
    return Batch(_stack([r.input_ids for r in rows]), _stack([r.segment_ids for r in rows]),
                 _stack([r.attention_mask for r in rows]),
                 np.asarray([r.start_position for r in rows], dtype=np.int64),
                 np.asarray([r.end_position for r in rows], dtype=np.int64))


def _masked(logits: T.Tensor, attention_mask: np.ndarray) -> T.Tensor:
    # pad positions can never be chosen as a span boundary
    bias = np.where(attention_mask.astype(bool), 0.0, -1e4).astype(logits.dtype)
    return T.add(logits, bias)


def task_loss(model: TaskModel, batch: Batch, rng=None) -> T.Tensor:
    out = model(batch.ids, batch.segment_ids, batch.attention_mask, rng)
    if model.task == "sa":
        return T.cross_entropy(out, batch.labels)
    if model.task == "ner":
        B, L, K = out.shape
        return T.cross_entropy(T.reshape(out, (B * L, K)), batch.labels.reshape(-1), IGNORE_INDEX)
    start, end = (_masked(x, batch.attention_mask) for x in out)
    return T.scale(T.add(T.cross_entropy(start, batch.labels), T.cross_entropy(end, batch.end_labels)), 0.5)


def _forward(model: TaskModel, rows: list, task: str, batch_size: int) -> list[np.ndarray]:
    model.eval()
    outs = []
    with T.no_grad():
        for i in range(0, len(rows), batch_size):
            b = _batch(task, rows[i:i + batch_size])
            out = model(b.ids, b.segment_ids, b.attention_mask)
            if task == "qa":
                s, e = (_masked(x, b.attention_mask).data for x in out)
                outs += list(zip(s, e))
            else:
                outs += list(out.data)
    return outs


# ---------------------------------------------------------------------------
# prediction and scoring


def predict_classes(model: TaskModel, examples: Sequence[ClsExample], vocab: Vocab, config: FinetuneConfig) -> list[int]:
    rows = []
    for ex in examples:
        enc = encode(ex.text, vocab, config.max_seq_len)
        rows.append((enc.ids, enc.segment_ids, enc.attention_mask, 0))
    return [int(np.argmax(o)) for o in _forward(model, rows, "sa", config.batch_size)]


def predict_tags(model: TaskModel, examples: Sequence[NerExample], vocab: Vocab, config: FinetuneConfig) -> list[list[str]]:
    """Tag of each word read from its first subtoken; truncated words get O."""
    feats = [align_ner(ex.words, None, vocab, config.max_seq_len) for ex in examples]
    outs = _forward(model, feats, "ner", config.batch_size)
    return [[NER_LABELS[int(np.argmax(o[p]))] if p >= 0 else "O" for p in f.first_subtoken]
            for f, o in zip(feats, outs)]


def predict_answers(model: TaskModel, examples: Sequence[QaExample], vocab: Vocab, config: FinetuneConfig) -> dict[str, str]:
    feats, _ = qa_features(examples, vocab, config, training=False)
    outs = _forward(model, feats, "qa", config.batch_size)
    by_id: dict[str, list] = {}
    for f, o in zip(feats, outs):
        by_id.setdefault(f.example_id, []).append((f, o))
    preds = {}
    for ex in examples:
        group = by_id.get(ex.id, [])
        if not group:
            preds[ex.id] = ""
            continue
        p = predict_span([g[0] for g in group], [g[1][0] for g in group], [g[1][1] for g in group],
                         ex.context, config.max_answer_len, config.n_best)
        preds[ex.id] = p.text
    return preds


def evaluate(model: TaskModel, examples: Sequence, vocab: Vocab, config: FinetuneConfig) -> dict:
    """Task metrics on labelled examples. ``f1`` is the selection metric for
    every task: SQuAD F1 (percent), macro F1, or micro entity F1."""
    if config.task == "sa":
        gold = [ex.label for ex in examples]
        pred = predict_classes(model, examples, vocab, config)
        return {"f1": macro_f1(gold, pred, config.num_labels), "weighted_f1": weighted_f1(gold, pred, config.num_labels),
                "accuracy": accuracy(gold, pred), "predictions": pred}
    if config.task == "ner":
        gold = [ex.tags for ex in examples]
        pred = predict_tags(model, examples, vocab, config)
        prf = entity_f1(gold, pred)
        flat_g = [t for s in gold for t in s]
        flat_p = [t for s in pred for t in s]
        return {"f1": prf.f1, "precision": prf.precision, "recall": prf.recall,
                "token_accuracy": accuracy(flat_g, flat_p), "predictions": pred}
    preds = predict_answers(model, examples, vocab, config)
    scores = squad_scores(preds, {ex.id: [a[0] for a in ex.answers] for ex in examples})
    return {"f1": scores["f1"], "exact_match": scores["exact_match"], "predictions": preds}


# ---------------------------------------------------------------------------
# training


@dataclass
class FinetuneResult:
    model: TaskModel
    config: FinetuneConfig
    curve: list[dict] = field(default_factory=list)  # per update: step, epoch, loss, lr
    epochs: list[dict] = field(default_factory=list)  # per epoch: mean loss and dev metrics
    skipped: int = 0


def _train_rows(task: str, examples: Sequence, vocab: Vocab, config: FinetuneConfig) -> tuple[list, int]:
    if task == "sa":
        return cls_features(examples, vocab, config.max_seq_len, config.num_labels), 0
    if task == "ner":
        return [align_ner(ex.words, ex.tags, vocab, config.max_seq_len) for ex in examples], 0
    return qa_features(examples, vocab, config, training=True)


def finetune(model: TaskModel, train: Sequence, vocab: Vocab, config: FinetuneConfig,
             dev: Sequence | None = None, on_step: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Adam with linear warmup/decay over ``epochs`` passes of shuffled
    mini-batches. Shuffling and dropout are seeded per epoch and per step."""
    if model.task != config.task:
        raise ValueError(f"model is for {model.task!r}, config for {config.task!r}")
    rows, skipped = _train_rows(config.task, train, vocab, config)
    if not rows:
        raise ValueError("no training features")
    per_epoch = math.ceil(len(rows) / config.batch_size)
    total = config.epochs * per_epoch
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    warmup = int(config.warmup_fraction * total)
    opt = Adam(model.named_parameters(), weight_decay=config.weight_decay)
    result = FinetuneResult(model, config, skipped=skipped)
    step = 0
    for epoch in range(config.epochs):
        if step >= total:
            break
        order = np.random.default_rng([config.seed, 11, epoch]).permutation(len(rows))
        losses = []
        for i in range(0, len(rows), config.batch_size):
            if step >= total:
                break
            batch = _batch(config.task, [rows[k] for k in order[i:i + config.batch_size]])
            lr = linear_warmup_decay(step, config.learning_rate, warmup, total)
            model.train()
            opt.zero_grad()
            loss = task_loss(model, batch, np.random.default_rng([config.seed, 12, step]))
            if not np.isfinite(loss.data).all():
                raise NonFiniteError(f"fine-tuning loss is not finite at step {step}")
            loss.backward()
            opt.step(lr)
            step += 1
            row = {"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr}
            result.curve.append(row)
            losses.append(row["loss"])
            if on_step is not None:
                on_step(row)
        summary = {"epoch": epoch, "loss": float(np.mean(losses))}
        if dev:
            summary.update({k: v for k, v in evaluate(model, dev, vocab, config).items() if k != "predictions"})
        result.epochs.append(summary)
    return result


def finetune_classifier(model: TaskModel, train: Sequence[ClsExample], vocab: Vocab, config: FinetuneConfig,
                        dev=None) -> FinetuneResult:
    if config.task != "sa":
        raise ValueError("finetune_classifier needs task 'sa'")
    return finetune(model, train, vocab, config, dev)


def finetune_ner(model: TaskModel, train: Sequence[NerExample], vocab: Vocab, config: FinetuneConfig,
                 dev=None) -> FinetuneResult:
    if config.task != "ner":
        raise ValueError("finetune_ner needs task 'ner'")
    return finetune(model, train, vocab, config, dev)


def finetune_qa(model: TaskModel, train: Sequence[QaExample], vocab: Vocab, config: FinetuneConfig,
                dev=None) -> FinetuneResult:
    if config.task != "qa":
        raise ValueError("finetune_qa needs task 'qa'")
    return finetune(model, train, vocab, config, dev)


@dataclass
class SweepResult:
    best_lr: float
    best: FinetuneResult
    rows: list[dict]  # one per grid point: lr, dev, test


def lr_sweep(make_model: Callable[[FinetuneConfig], TaskModel], train: Sequence, vocab: Vocab,
             config: FinetuneConfig, dev: Sequence | None = None, test: Sequence | None = None) -> SweepResult:
    """One fine-tune per learning rate in ``config.lr_grid`` with identical
    seeds; the best dev ``f1`` wins and ties go to the smaller rate."""
    if dev is None:
        train, dev = hash_split(train, 0.1, config.seed)
    if not dev:
        raise ValueError("empty dev split")
    rows, best, best_key = [], None, None
    for lr in sorted(config.lr_grid):
        cfg = FinetuneConfig.from_dict({**config.to_dict(), "learning_rate": lr})
        res = finetune(make_model(cfg), train, vocab, cfg)
        dev_f1 = evaluate(res.model, dev, vocab, cfg)["f1"]
        test_f1 = evaluate(res.model, test, vocab, cfg)["f1"] if test else None
        rows.append({"lr": lr, "dev": dev_f1, "test": test_f1})
        if best_key is None or dev_f1 > best_key:
            best, best_key = res, dev_f1
    return SweepResult(best.config.learning_rate, best, rows)
