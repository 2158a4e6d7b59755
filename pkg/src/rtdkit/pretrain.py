"""Replaced-token-detection pretraining and the masked-LM-only baseline.

Per step: mask a fraction of the non-special tokens, let the generator
predict them (MLM loss on masked positions only), sample replacements from
its output distribution outside the autodiff graph, label every token of the
corrupted sequence as replaced or original, and train the discriminator with
per-token sigmoid cross-entropy over all non-pad positions. Both networks are
updated jointly on ``mlm_loss + disc_loss_weight * disc_loss``.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .model import MaskedLanguageModel, PretrainingModels
from .optim import Adam, NonFiniteError, linear_warmup_decay
from .tensor import Tensor
from .tokenizer import Vocab

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "mlm_loss", "disc_loss", "disc_acc", "lr")


@dataclass
class PretrainConfig:
    mask_fraction: float = 0.15
    steps: int = 300
    batch_size: int = 16
    seq_len: int = 128
    peak_lr: float = 5e-4
    warmup_steps: int = 30
    disc_loss_weight: float = 50.0
    temperature: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_fraction < 1.0:
            raise ValueError("mask_fraction must be in (0, 1)")
        if self.warmup_steps > self.steps:
            raise ValueError("warmup_steps must not exceed steps")
        if self.disc_loss_weight < 0:
            raise ValueError("disc_loss_weight must be >= 0")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ValueError("peak_lr and weight_decay must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size <= 0 or self.steps <= 0 or self.seq_len < 3:
            raise ValueError("batch_size and steps must be positive, seq_len >= 3")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PretrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown PretrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RtdBatch:
    original_ids: np.ndarray
    masked_ids: np.ndarray
    mask_positions: np.ndarray
    attention_mask: np.ndarray
    corrupted_ids: np.ndarray | None = None
    rtd_labels: np.ndarray | None = None
    skipped: int = 0


# ---------------------------------------------------------------------------
# data preparation


def pack_sequences(docs: Iterable[Sequence[int]], seq_len: int, vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate documents with [SEP] after each, cut into windows of
    ``seq_len - 1`` tokens and prepend [CLS]. The final short window is padded.

    Returns ``(ids, attention_mask)``, each [N, seq_len].
    """
    stream: list[int] = []
    for d in docs:
        stream.extend(int(t) for t in d)
        stream.append(vocab.sep_id)
    width = seq_len - 1
    rows = []
    for start in range(0, len(stream), width):
        chunk = stream[start:start + width]
        rows.append([vocab.cls_id] + chunk + [vocab.pad_id] * (width - len(chunk)))
    ids = np.asarray(rows, dtype=np.int64).reshape(-1, seq_len)
    return ids, (ids != vocab.pad_id).astype(np.int64)


def num_to_mask(eligible: int, fraction: float) -> int:
    # round half up; Python's round() would send 0.5 to 0
    return int(math.floor(fraction * eligible + 0.5))


def make_masked_batch(
    original_ids: np.ndarray,
    mask_fraction: float,
    rng: np.random.Generator,
    special_ids: Iterable[int],
    mask_id: int,
    pad_id: int = 0,
) -> RtdBatch:
    """Choose ``round(fraction * eligible)`` positions per row uniformly
    without replacement among non-special tokens and replace them by [MASK].
    Rows where that count is zero are dropped and counted in ``skipped``."""
    original_ids = np.asarray(original_ids, dtype=np.int64)
    special = np.isin(original_ids, np.fromiter(special_ids, dtype=np.int64))
    keep_rows = []
    positions = np.zeros(original_ids.shape, dtype=bool)
    for r in range(original_ids.shape[0]):
        eligible = np.flatnonzero(~special[r])
        n = num_to_mask(len(eligible), mask_fraction)
        if n == 0:
            continue
        positions[r, rng.choice(eligible, size=n, replace=False)] = True
        keep_rows.append(r)
    skipped = original_ids.shape[0] - len(keep_rows)
    if skipped:
        log.debug("skipped %d sequences with nothing to mask", skipped)
    original = original_ids[keep_rows]
    positions = positions[keep_rows]
    masked = np.where(positions, mask_id, original)
    return RtdBatch(original, masked, positions, (original != pad_id).astype(np.int64), skipped=skipped)


def sample_replacements(logits: np.ndarray, rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
    """One categorical draw per row of ``softmax(logits / temperature)``.

    Works on plain arrays, so nothing downstream can backpropagate into the
    generator through the sampled ids.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise NonFiniteError("generator logits are not finite")
    z = logits / temperature
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(len(cdf)) * cdf[:, -1]
    out = (cdf < u[:, None]).sum(axis=-1)
    return np.minimum(out, logits.shape[-1] - 1)


def corrupt(batch: RtdBatch, sampled: np.ndarray) -> RtdBatch:
    """Write sampled ids into the masked positions (row-major order) and
    label every position replaced iff it differs from the original."""
    corrupted = batch.original_ids.copy()
    corrupted[batch.mask_positions] = sampled
    batch.corrupted_ids = corrupted
    batch.rtd_labels = corrupted != batch.original_ids
    return batch


# ---------------------------------------------------------------------------
# losses


def _rows_at(h: Tensor, positions: np.ndarray) -> Tensor:
    B, L, H = h.shape
    return T.reshape(h, (B * L, H))[np.flatnonzero(positions.reshape(-1))]


def generator_step(models: PretrainingModels, batch: RtdBatch, rng=None) -> tuple[Tensor, Tensor]:
    """MLM loss over masked positions only, plus the logits there ([M, V])."""
    if not batch.mask_positions.any():
        raise ValueError("batch has no masked positions")
    h = models.generator(batch.masked_ids, None, batch.attention_mask, rng)
    logits = models.mlm_head(_rows_at(h, batch.mask_positions))
    targets = batch.original_ids[batch.mask_positions]
    return T.cross_entropy(logits, targets), logits


def discriminator_step(models: PretrainingModels, batch: RtdBatch, rng=None) -> tuple[Tensor, Tensor]:
    """Mean sigmoid cross-entropy over every non-pad token; returns (loss, logits [B, L])."""
    h = models.discriminator(batch.corrupted_ids, None, batch.attention_mask, rng)
    logits = models.rtd_head(h)
    loss = T.binary_cross_entropy_with_logits(logits, batch.rtd_labels.astype(np.float32), batch.attention_mask)
    return loss, logits


@dataclass
class StepStats:
    step: int
    lr: float
    mlm_loss: float
    disc_loss: float = float("nan")
    total: float = float("nan")
    disc_acc: float = float("nan")
    replaced: int = 0
    tokens: int = 0

    def csv_row(self) -> list:
        return [self.step, self.mlm_loss, self.disc_loss, self.disc_acc, self.lr]


def _check_finite(loss: Tensor, what: str) -> None:
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"{what} is not finite ({float(loss.data)})")


def rtd_train_step(
    models: PretrainingModels,
    batch: RtdBatch,
    config: PretrainConfig,
    optimizer: Adam,
    step: int,
    rngs: dict[str, np.random.Generator],
) -> StepStats:
    """One joint update; ``step`` is the number of updates already applied."""
    lr = linear_warmup_decay(step, config.peak_lr, config.warmup_steps, config.steps)
    optimizer.zero_grad()
    models.train()
    mlm_loss, logits = generator_step(models, batch, rngs.get("dropout"))
    sampled = sample_replacements(logits.data, rngs["sample"], config.temperature)
    corrupt(batch, sampled)
    disc_loss, disc_logits = discriminator_step(models, batch, rngs.get("dropout"))
    total = T.add(mlm_loss, T.scale(disc_loss, config.disc_loss_weight))
    _check_finite(total, "total loss")
    total.backward()
    optimizer.step(lr)
    real = batch.attention_mask.astype(bool)
    correct = ((disc_logits.data > 0) == batch.rtd_labels)[real]
    return StepStats(
        step=step + 1, lr=lr,
        mlm_loss=float(mlm_loss.data), disc_loss=float(disc_loss.data), total=float(total.data),
        disc_acc=float(correct.mean()), replaced=int(batch.rtd_labels[real].sum()), tokens=int(real.sum()),
    )


def mlm_train_step(
    model: MaskedLanguageModel,
    batch: RtdBatch,
    config: PretrainConfig,
    optimizer: Adam,
    step: int,
    rngs: dict[str, np.random.Generator],
) -> StepStats:
    lr = linear_warmup_decay(step, config.peak_lr, config.warmup_steps, config.steps)
    optimizer.zero_grad()
    model.train()
    loss = mlm_loss(model, batch, rngs.get("dropout"))
    _check_finite(loss, "MLM loss")
    loss.backward()
    optimizer.step(lr)
    return StepStats(step=step + 1, lr=lr, mlm_loss=float(loss.data), total=float(loss.data))


def mlm_loss(model: MaskedLanguageModel, batch: RtdBatch, rng=None) -> Tensor:
    if not batch.mask_positions.any():
        raise ValueError("batch has no masked positions")
    h = model.encoder(batch.masked_ids, None, batch.attention_mask, rng)
    logits = model.mlm_head(_rows_at(h, batch.mask_positions))
    return T.cross_entropy(logits, batch.original_ids[batch.mask_positions])


# ---------------------------------------------------------------------------
# training loops


def prefetch(items: Iterable, depth: int = 2) -> Iterator:
    """Run ``items`` on a background thread through a bounded queue.

    Order is preserved, so results are identical to plain iteration.
    """
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for item in items:
                while not stop.is_set():
                    try:
                        q.put(("ok", item), timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(("ok", done))
        except BaseException as exc:  # surfaced on the consumer side
            q.put(("err", exc))

    thread = threading.Thread(target=produce, daemon=True)
    thread.start()
    try:
        while True:
            kind, item = q.get()
            if kind == "err":
                raise item
            if item is done:
                return
            yield item
    finally:
        stop.set()


class Pretrainer:
    """Deterministic training loop over packed windows.

    Everything random in step ``s`` (batch order, masking, replacement
    sampling, dropout) is derived from ``(seed, s)``, so a run resumed from a
    checkpoint at step ``s`` continues exactly as an uninterrupted one.
    """

    objective = "rtd"

    def __init__(self, model, windows: np.ndarray, vocab: Vocab, config: PretrainConfig, optimizer: Adam | None = None):
        self.model = model
        self.windows = np.asarray(windows)
        if len(self.windows) == 0:
            raise ValueError("no training windows")
        self.vocab = vocab
        self.config = config
        self.optimizer = optimizer or Adam(model.named_parameters(), weight_decay=config.weight_decay)
        self.step = 0
        self.history: list[StepStats] = []
        self.skipped = 0

    def _order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, 7, epoch]).permutation(len(self.windows))

    def batch_for_step(self, step: int) -> RtdBatch:
        cfg = self.config
        n = len(self.windows)
        orders: dict[int, np.ndarray] = {}
        idx = []
        for k in range(step * cfg.batch_size, (step + 1) * cfg.batch_size):
            epoch = k // n
            if epoch not in orders:
                orders[epoch] = self._order(epoch)
            idx.append(orders[epoch][k % n])
        rng = np.random.default_rng([cfg.seed, 8, step])
        return make_masked_batch(self.windows[idx], cfg.mask_fraction, rng,
                                 self.vocab.special_ids - {self.vocab.unk_id}, self.vocab.mask_id, self.vocab.pad_id)

    def rngs_for_step(self, step: int) -> dict[str, np.random.Generator]:
        s = self.config.seed
        return {"dropout": np.random.default_rng([s, 9, step]), "sample": np.random.default_rng([s, 10, step])}

    def train_step(self, batch: RtdBatch) -> StepStats:
        return rtd_train_step(self.model, batch, self.config, self.optimizer, self.step, self.rngs_for_step(self.step))

    def run(self, num_steps: int | None = None, on_step: Callable[[StepStats], None] | None = None) -> list[StepStats]:
        end = self.config.steps if num_steps is None else min(self.config.steps, self.step + num_steps)
        out = []
        for batch in prefetch(self.batch_for_step(s) for s in range(self.step, end)):
            self.skipped += batch.skipped
            stats = self.train_step(batch)
            self.step += 1
            self.history.append(stats)
            out.append(stats)
            if on_step is not None:
                on_step(stats)
        return out


class MlmPretrainer(Pretrainer):
    objective = "mlm"

    def train_step(self, batch: RtdBatch) -> StepStats:
        return mlm_train_step(self.model, batch, self.config, self.optimizer, self.step, self.rngs_for_step(self.step))


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def interval_means(history: Sequence[StepStats], every: int) -> list[list]:
    """Average metrics over consecutive ``every``-step blocks (one CSV row each)."""
    rows = []
    for start in range(0, len(history), every):
        block = history[start:start + every]
        last = block[-1]
        mean = lambda xs: float(np.mean(xs)) if not all(math.isnan(x) for x in xs) else float("nan")
        rows.append([last.step, mean([b.mlm_loss for b in block]), mean([b.disc_loss for b in block]),
                     mean([b.disc_acc for b in block]), last.lr])
    return rows
