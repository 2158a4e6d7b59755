import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from rtdkit import tensor as T
from rtdkit.data import NER_LABELS, ClsExample, NerExample, QaExample
from rtdkit.finetune import (IGNORE_INDEX, FinetuneConfig, _batch, align_ner, build_task_model, cls_features,
                             evaluate, finetune, finetune_classifier, lr_sweep, task_loss)
from rtdkit.model import EncoderConfig
from rtdkit.tokenizer import SPECIAL_TOKENS, Vocab

WORDS = ["a", "b", "c", "d", "ab", "##c", "##d", "كتب", "في", "القاهرة"]
VOCAB = Vocab.from_tokens(list(SPECIAL_TOKENS) + WORDS)


def tiny(positions=32, dropout=0.0):
    return EncoderConfig(2, 2, 32, len(VOCAB), positions, dropout=dropout)


def cfg(**kw):
    base = dict(batch_size=1, warmup_fraction=0.0, learning_rate=3e-3, max_seq_len=16)
    return FinetuneConfig(**{**base, **kw})


def test_config_defaults_per_task():
    assert FinetuneConfig(task="qa").max_seq_len == 384 and FinetuneConfig(task="qa").epochs == 3
    assert FinetuneConfig(task="sa").max_seq_len == 256 and FinetuneConfig(task="sa").epochs == 10
    assert FinetuneConfig(task="ner").num_labels == len(NER_LABELS) == 9


@pytest.mark.parametrize("bad", [dict(task="pos"), dict(batch_size=0), dict(learning_rate=0.0),
                                 dict(warmup_fraction=1.0)])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        FinetuneConfig(**bad)


def test_config_round_trip():
    c = cfg(task="ner", lr_grid=(1e-4, 2e-4))
    assert FinetuneConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError, match="unknown"):
        FinetuneConfig.from_dict({"nope": 1})


def test_uniform_logits_give_ln5():
    c = cfg()
    model = build_task_model(tiny(), c)
    for name, p in model.head.named_parameters().items():
        p.data[...] = 0.0
    batch = _batch("sa", cls_features([ClsExample(str(i), "a b", i) for i in range(5)], VOCAB, 16, 5))
    model.eval()
    assert task_loss(model, batch).item() == pytest.approx(math.log(5), abs=1e-6)


def test_untrained_head_is_at_chance():
    rng = np.random.default_rng(0)
    n = 500
    examples = [ClsExample(str(i), " ".join(rng.choice(WORDS[:5], size=4)), i % 5) for i in range(n)]
    c = cfg(batch_size=64)
    res = evaluate(build_task_model(tiny(), c), examples, VOCAB, c)
    assert abs(res["accuracy"] - 0.2) < 3 * math.sqrt(0.16 / n)


def test_one_example_overfits():
    c = cfg(epochs=200)
    res = finetune_classifier(build_task_model(tiny(), c), [ClsExample("x", "a b c", 3)], VOCAB, c)
    assert len(res.curve) == 200
    assert res.curve[-1]["loss"] < 0.01


def test_label_out_of_range():
    with pytest.raises(ValueError, match="label 5"):
        cls_features([ClsExample("x", "a", 5)], VOCAB, 16, 5)


def test_task_mismatch_rejected():
    with pytest.raises(ValueError):
        finetune(build_task_model(tiny(), cfg(task="ner")), [], VOCAB, cfg())


def test_max_steps_caps_updates():
    c = cfg(epochs=50, max_steps=7)
    res = finetune(build_task_model(tiny(), c), [ClsExample("x", "a", 0)], VOCAB, c)
    assert len(res.curve) == 7 and res.curve[-1]["lr"] > 0


def test_fixed_seed_reproduces_curve():
    c = cfg(epochs=3, batch_size=2, learning_rate=1e-3)
    data = [ClsExample(str(i), "a b" if i % 2 else "c d", i % 2) for i in range(6)]
    runs = [[r["loss"] for r in finetune(build_task_model(tiny(dropout=0.1), c), data, VOCAB, c).curve]
            for _ in range(2)]
    assert runs[0] == runs[1]


# ---- NER


def test_first_subtoken_alignment():
    f = align_ner(["abc", "d"], ["B-PER", "O"], VOCAB, 8)
    toks = [VOCAB.id_to_token[i] for i in f.ids]
    assert toks[:5] == ["[CLS]", "ab", "##c", "d", "[SEP]"]
    assert f.labels[:5] == [IGNORE_INDEX, NER_LABELS.index("B-PER"), IGNORE_INDEX, 0, IGNORE_INDEX]
    assert f.first_subtoken == [1, 3]
    assert f.attention_mask == [1] * 5 + [0] * 3


def test_align_length_mismatch_and_unknown_tag():
    with pytest.raises(ValueError, match="2 words but 1 tags"):
        align_ner(["a", "b"], ["O"], VOCAB, 8)
    with pytest.raises(ValueError, match="unknown tag"):
        align_ner(["a"], ["B-XYZ"], VOCAB, 8)


def test_truncated_words_are_marked():
    f = align_ner(["a"] * 10, ["O"] * 10, VOCAB, 6)
    assert f.first_subtoken == [1, 2, 3, 4, -1, -1, -1, -1, -1, -1]


@settings(max_examples=15)
@given(st.lists(st.sampled_from(["a", "abc", "abd", "d", "كتب"]), min_size=1, max_size=6),
       st.integers(0, 2**32 - 1))
def test_ner_loss_uses_only_first_subtokens(words, seed):
    rng = np.random.default_rng(seed)
    tags = [NER_LABELS[k] for k in rng.integers(0, len(NER_LABELS), size=len(words))]
    c = cfg(task="ner")
    model = build_task_model(tiny(), c)
    model.eval()
    f = align_ner(words, tags, VOCAB, 16)
    batch = _batch("ner", [f])
    loss = task_loss(model, batch).item()
    with T.no_grad():
        logits = model(batch.ids, batch.segment_ids, batch.attention_mask).data[0].astype(np.float64)
    logp = logits - logsumexp(logits, axis=-1, keepdims=True)
    firsts = [p for p in f.first_subtoken if p >= 0]
    manual = -np.mean([logp[p, NER_LABELS.index(t)] for p, t in zip(firsts, tags)])
    assert loss == pytest.approx(manual, rel=1e-4)


def test_ner_overfits_one_sentence():
    c = cfg(task="ner", epochs=200)
    ex = NerExample("s", ["كتب", "abc", "في", "القاهرة", "d"], ["O", "B-PER", "O", "B-LOC", "I-LOC"])
    res = finetune(build_task_model(tiny(), c), [ex], VOCAB, c)
    out = evaluate(res.model, [ex], VOCAB, c)
    assert out["f1"] == 1.0
    assert out["predictions"] == [ex.tags]


# ---- QA


def test_qa_overfits_one_example():
    c = cfg(task="qa", epochs=200, max_seq_len=384, stride=128, max_query_len=64)
    context = "كتب a b في القاهرة c d"
    ex = QaExample("q", "a b", context, [("القاهرة", context.index("القاهرة"))])
    res = finetune(build_task_model(tiny(positions=384), c), [ex], VOCAB, c)
    out = evaluate(res.model, [ex], VOCAB, c)
    assert out["exact_match"] == 100.0
    assert out["predictions"] == {"q": "القاهرة"}


# ---- learning-rate sweep


def sweep_data():
    train = [ClsExample(f"t{i}", "a b" if i % 2 else "c d", i % 2) for i in range(8)]
    dev = [ClsExample(f"d{i}", "a b" if i % 2 else "c d", i % 2) for i in range(4)]
    return train, dev


def test_sweep_reports_each_rate():
    train, dev = sweep_data()
    c = cfg(epochs=2, batch_size=4, num_labels=2, lr_grid=(3e-3, 1e-3, 2e-3))
    res = lr_sweep(lambda fc: build_task_model(tiny(), fc), train, VOCAB, c, dev, dev)
    assert [r["lr"] for r in res.rows] == [1e-3, 2e-3, 3e-3]
    assert all(set(r) == {"lr", "dev", "test"} for r in res.rows)
    assert res.best_lr == max(res.rows, key=lambda r: (r["dev"], -r["lr"]))["lr"]
    assert res.best.config.learning_rate == res.best_lr


def test_sweep_ties_go_to_smaller_rate():
    train, dev = sweep_data()
    # rates this small cannot move any prediction, so every dev score ties
    c = cfg(epochs=1, batch_size=8, num_labels=2, lr_grid=(5e-12, 1e-12, 3e-12))
    res = lr_sweep(lambda fc: build_task_model(tiny(), fc), train, VOCAB, c, dev)
    assert len({r["dev"] for r in res.rows}) == 1
    assert res.best_lr == 1e-12
    assert all(r["test"] is None for r in res.rows)


def test_sweep_empty_dev():
    train, _ = sweep_data()
    with pytest.raises(ValueError, match="empty dev"):
        lr_sweep(lambda fc: build_task_model(tiny(), fc), train, VOCAB, cfg(num_labels=2), [])
