"""MLM vs RTD sample-efficiency benchmark on the synthetic language.

Both objectives train an encoder of the same shape on the same windows in
the same order. The frozen encoders are then compared by a linear probe on a
word-order task whose two classes have identical token counts, so a probe
can only beat chance if pretraining taught the encoder something about order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from . import tensor as T
from .data import SyntheticLangSpec, gen_synthetic_corpus, synthetic_probe_task
from .model import ConfigError, Encoder, EncoderConfig, MaskedLanguageModel, PretrainingModels, init_parameters
from .pretrain import MlmPretrainer, PretrainConfig, Pretrainer, pack_sequences
from .tokenizer import SPECIAL_TOKENS, Vocab

REPORT_COLUMNS = ("seed", "step", "mlm_probe_metric", "rtd_probe_metric")


def pooled_features(encoder: Encoder, seqs: np.ndarray, vocab: Vocab, batch_size: int = 64) -> np.ndarray:
    """Mean of the final hidden states over the real tokens of
    ``[CLS] seq [SEP]``; ``seqs`` holds language symbols (no specials)."""
    n, length = seqs.shape
    ids = np.empty((n, length + 2), dtype=np.int64)
    ids[:, 0] = vocab.cls_id
    ids[:, 1:-1] = seqs + len(SPECIAL_TOKENS)
    ids[:, -1] = vocab.sep_id
    encoder.eval()
    out = []
    with T.no_grad():
        for i in range(0, n, batch_size):
            h = encoder(ids[i:i + batch_size]).data.astype(np.float64)
            out.append(h.mean(axis=1))
    return np.concatenate(out)


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1.0) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """L2-regularized logistic regression on standardized features.
    Returns (weights, bias, feature mean, feature scale)."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0) + 1e-8
    z = (x - mu) / sd
    n, d = z.shape
    yy = y.astype(np.float64)

    def objective(theta):
        w, b = theta[:d], theta[d]
        logits = z @ w + b
        # log(1 + e^t) - y t, written to stay finite for large |t|
        loss = np.logaddexp(0.0, logits) - yy * logits
        p = 1.0 / (1.0 + np.exp(-logits))
        g = p - yy
        f = loss.mean() + 0.5 * l2 * (w @ w) / n
        grad = np.concatenate([z.T @ g / n + l2 * w / n, [g.mean()]])
        return f, grad

    res = minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B", options={"maxiter": 500})
    return res.x[:d], float(res.x[d]), mu, sd


def probe_accuracy(train_x, train_y, test_x, test_y, l2: float = 1.0) -> float:
    w, b, mu, sd = fit_logistic(train_x, train_y, l2)
    pred = ((test_x - mu) / sd) @ w + b > 0
    return float((pred == test_y.astype(bool)).mean())


@dataclass
class BenchSettings:
    discriminator: EncoderConfig = field(default_factory=lambda: EncoderConfig(2, 2, 64, 8192, 128))
    generator: EncoderConfig = field(default_factory=lambda: EncoderConfig(2, 1, 32, 8192, 128, embedding_size=64))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    mlm_encoder: EncoderConfig | None = None  # defaults to the discriminator config
    tying: str = "all"
    probe_examples: int = 400
    probe_length: int = 64
    probe_l2: float = 1.0


@dataclass
class BenchRow:
    seed: int
    step: int
    mlm_probe_metric: float
    rtd_probe_metric: float


def bench_efficiency(spec: SyntheticLangSpec, budget_steps: int, seeds: Sequence[int],
                     settings: BenchSettings | None = None, eval_steps: Sequence[int] | None = None,
                     on_row: Callable[[BenchRow], None] | None = None) -> list[BenchRow]:
    """Per seed: pretrain an MLM encoder and an RTD discriminator for
    ``budget_steps`` updates each, then report held-out linear-probe accuracy
    of both at every step in ``eval_steps`` (default: only the budget)."""
    s = settings or BenchSettings()
    mlm_cfg = s.mlm_encoder or s.discriminator
    if mlm_cfg.to_dict() != s.discriminator.to_dict():
        raise ConfigError("MLM encoder and RTD discriminator must share one EncoderConfig")
    if budget_steps < 0:
        raise ValueError("budget_steps must be >= 0")
    checkpoints = sorted(set(eval_steps or [budget_steps]))
    if checkpoints[0] < 0 or checkpoints[-1] > budget_steps:
        raise ValueError("eval_steps must lie in [0, budget_steps]")
    corpus = gen_synthetic_corpus(spec)
    if len(corpus.vocab) != s.discriminator.vocab_size:
        raise ConfigError(f"synthetic vocab has {len(corpus.vocab)} tokens, encoder expects {s.discriminator.vocab_size}")
    windows, _ = pack_sequences(corpus.train, s.pretrain.seq_len, corpus.vocab)
    seqs, labels = synthetic_probe_task(corpus.language, s.probe_examples, s.probe_length, spec.seed)
    half = len(seqs) // 2
    rows = []
    for seed in seeds:
        cfg = replace(s.pretrain, seed=seed, steps=max(budget_steps, 1))
        rtd = PretrainingModels(s.generator, s.discriminator, s.tying)
        init_parameters(rtd, seed)
        mlm = MaskedLanguageModel(mlm_cfg)
        init_parameters(mlm, seed)
        runs = [(MlmPretrainer(mlm, windows, corpus.vocab, cfg), mlm.encoder),
                (Pretrainer(rtd, windows, corpus.vocab, cfg), rtd.discriminator)]
        for target in checkpoints:
            scores = []
            for trainer, encoder in runs:
                trainer.run(target - trainer.step)
                feats = pooled_features(encoder, seqs, corpus.vocab)
                scores.append(probe_accuracy(feats[:half], labels[:half], feats[half:], labels[half:], s.probe_l2))
            row = BenchRow(seed, target, scores[0], scores[1])
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def report_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.seed, r.step, f"{r.mlm_probe_metric:.6f}", f"{r.rtd_probe_metric:.6f}"])
    return buf.getvalue()


def summarize(rows: Sequence[BenchRow]) -> dict:
    """Seeds where RTD's final probe is at least MLM's."""
    final: dict[int, BenchRow] = {}
    for r in rows:
        if r.seed not in final or r.step >= final[r.seed].step:
            final[r.seed] = r
    wins = sum(r.rtd_probe_metric >= r.mlm_probe_metric for r in final.values())
    return {"seeds": len(final), "rtd_at_least_mlm": wins,
            "mean_mlm": float(np.mean([r.mlm_probe_metric for r in final.values()])) if final else float("nan"),
            "mean_rtd": float(np.mean([r.rtd_probe_metric for r in final.values()])) if final else float("nan")}
