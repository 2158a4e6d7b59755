import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rtdkit import tensor as T
from rtdkit.model import EncoderConfig, PretrainingModels, init_parameters
from rtdkit.optim import Adam, NonFiniteError
from rtdkit.pretrain import (PretrainConfig, Pretrainer, RtdBatch, corrupt, discriminator_step, generator_step,
                             interval_means, make_masked_batch, num_to_mask, pack_sequences, prefetch,
                             rtd_train_step, sample_replacements, smoothed)
from rtdkit.tokenizer import SPECIAL_TOKENS, Vocab

VOCAB = Vocab.from_tokens(list(SPECIAL_TOKENS) + [f"w{i}" for i in range(59)])
SPECIAL = VOCAB.special_ids - {VOCAB.unk_id}
MASK = VOCAB.mask_id


def tiny_models(tying="all", vocab=len(VOCAB), seed=0):
    g = EncoderConfig(1, 1, 8, vocab, 16, embedding_size=16, dropout=0.0)
    d = EncoderConfig(1, 2, 16, vocab, 16, dropout=0.0)
    m = PretrainingModels(g, d, tying)
    init_parameters(m, seed)
    return m


def random_windows(rng, n=4, length=12):
    ids = rng.integers(len(SPECIAL_TOKENS), len(VOCAB), size=(n, length))
    ids[:, 0] = VOCAB.cls_id
    return ids


def masked_batch(rng, n=4, length=12):
    return make_masked_batch(random_windows(rng, n, length), 0.15, rng, SPECIAL, MASK)


def test_mask_count_at_512():
    assert num_to_mask(512, 0.15) == 77
    ids = np.full((3, 512), 10)
    batch = make_masked_batch(ids, 0.15, np.random.default_rng(0), SPECIAL, MASK)
    assert batch.mask_positions.sum(axis=1).tolist() == [77, 77, 77]


def test_rows_with_nothing_to_mask_are_skipped():
    v = VOCAB
    # two eligible tokens: 0.15 * 2 rounds to 0
    short = [v.cls_id, 9, 10, v.sep_id] + [v.pad_id] * 12
    long = [v.cls_id] + [9] * 14 + [v.sep_id]
    batch = make_masked_batch(np.array([short, long]), 0.15, np.random.default_rng(0), SPECIAL, MASK)
    assert batch.skipped == 1
    assert batch.original_ids.tolist() == [long]


def test_empirical_mask_fraction():
    rng = np.random.default_rng(1)
    masked = eligible = 0
    for _ in range(1000):
        ids = rng.integers(5, 60, size=(4, 64))
        ids[:, 0] = VOCAB.cls_id
        ids[rng.random(ids.shape) < 0.1] = VOCAB.pad_id
        b = make_masked_batch(ids, 0.15, rng, SPECIAL, MASK)
        masked += b.mask_positions.sum()
        eligible += (~np.isin(b.original_ids, list(SPECIAL))).sum()
    assert abs(masked / eligible - 0.15) <= 0.01


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_masking_invariants(seed, fraction):
    rng = np.random.default_rng(seed)
    ids = random_windows(rng, 3, 20)
    ids[rng.random(ids.shape) < 0.2] = VOCAB.pad_id
    ids[rng.random(ids.shape) < 0.1] = VOCAB.sep_id
    b = make_masked_batch(ids, fraction, rng, SPECIAL, MASK)
    assert np.array_equal(b.masked_ids != b.original_ids, b.mask_positions)
    assert not np.isin(b.original_ids[b.mask_positions], list(SPECIAL)).any()
    eligible = (~np.isin(b.original_ids, list(SPECIAL))).sum(axis=1)
    assert b.mask_positions.sum(axis=1).tolist() == [num_to_mask(int(e), fraction) for e in eligible]


@given(st.integers(0, 2**32 - 1))
def test_corruption_locality_and_label_soundness(seed):
    rng = np.random.default_rng(seed)
    b = masked_batch(rng)
    sampled = np.where(rng.random(b.mask_positions.sum()) < 0.4, b.original_ids[b.mask_positions],
                       rng.integers(5, len(VOCAB), size=b.mask_positions.sum()))
    corrupt(b, sampled)
    assert np.array_equal(b.corrupted_ids[~b.mask_positions], b.original_ids[~b.mask_positions])
    assert np.array_equal(b.rtd_labels, b.corrupted_ids != b.original_ids)
    # a correct guess is labelled original
    guessed = b.mask_positions & (b.corrupted_ids == b.original_ids)
    assert not b.rtd_labels[guessed].any()


def test_label_example():
    b = RtdBatch(np.array([[5, 9, 2]]), np.array([[5, MASK, 2]]), np.array([[False, True, False]]),
                 np.ones((1, 3), dtype=int))
    corrupt(b, np.array([7]))
    assert b.rtd_labels.tolist() == [[False, True, False]]


def test_confident_generator_labels_everything_original():
    rng = np.random.default_rng(0)
    b = masked_batch(rng)
    targets = b.original_ids[b.mask_positions]
    logits = np.full((len(targets), len(VOCAB)), -1e4)
    logits[np.arange(len(targets)), targets] = 1e4
    corrupt(b, sample_replacements(logits, rng))
    assert not b.rtd_labels.any()


def test_sampling_frequencies():
    probs = np.array([0.2, 0.3, 0.5])
    logits = np.tile(np.log(probs), (100_000, 1))
    draws = sample_replacements(logits, np.random.default_rng(3))
    freq = np.bincount(draws, minlength=3) / len(draws)
    np.testing.assert_allclose(freq, probs, atol=0.01)


def test_sampling_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        sample_replacements(np.array([[0.0, np.nan]]), np.random.default_rng(0))


def test_uniform_generator_loss_is_log_vocab():
    m = tiny_models(vocab=8192)
    m.mlm_head.decoder.data[...] = 0.0
    m.mlm_head.bias.data[...] = 0.0
    rng = np.random.default_rng(0)
    ids = rng.integers(5, 8192, size=(2, 12))
    b = make_masked_batch(ids, 0.15, rng, SPECIAL, MASK)
    loss, _ = generator_step(m, b)
    assert loss.item() == pytest.approx(math.log(8192), abs=1e-5)
    assert math.log(8192) == pytest.approx(9.0109, abs=1e-4)


class Leaf:
    """Stand-in encoder returning a fixed leaf tensor, so its gradient is visible."""

    def __init__(self, shape, seed=0):
        self.h = T.Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True, dtype=np.float32)

    def __call__(self, *args, **kwargs):
        return self.h


def test_mlm_loss_ignores_unmasked_positions():
    m = tiny_models()
    b = masked_batch(np.random.default_rng(0))
    m.generator = Leaf(b.original_ids.shape + (8,))
    loss, _ = generator_step(m, b)
    loss.backward()
    grad = np.abs(m.generator.h.grad).sum(-1)
    assert np.all(grad[~b.mask_positions] == 0)
    assert np.all(grad[b.mask_positions] > 0)


def test_generator_step_needs_masked_positions():
    b = RtdBatch(np.array([[2, 9]]), np.array([[2, 9]]), np.zeros((1, 2), bool), np.ones((1, 2), int))
    with pytest.raises(ValueError):
        generator_step(tiny_models(), b)


def _disc_batch(rng, pad=3):
    b = masked_batch(rng)
    b.original_ids[:, -pad:] = VOCAB.pad_id
    b.mask_positions[:, -pad:] = False
    b.attention_mask = (b.original_ids != VOCAB.pad_id).astype(int)
    sampled = rng.integers(5, len(VOCAB), size=b.mask_positions.sum())
    return corrupt(b, sampled)


def test_zero_logits_give_log_two():
    m = tiny_models()
    m.rtd_head.out.weight.data[...] = 0.0
    m.rtd_head.out.bias.data[...] = 0.0
    loss, _ = discriminator_step(m, _disc_batch(np.random.default_rng(0)))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_disc_loss_support_is_every_real_token():
    m = tiny_models()
    rng = np.random.default_rng(1)
    b = _disc_batch(rng)
    logits = T.Tensor(rng.normal(size=b.original_ids.shape), requires_grad=True)
    m.rtd_head = lambda h: logits
    loss, _ = discriminator_step(m, b)
    loss.backward()
    contributing = logits.grad != 0
    assert np.array_equal(contributing, b.attention_mask.astype(bool))
    assert contributing.sum() > b.mask_positions.sum()


def test_confident_discriminator_loss_vanishes():
    m = tiny_models()
    b = _disc_batch(np.random.default_rng(2))
    target = np.where(b.rtd_labels, 50.0, -50.0)
    m.rtd_head = lambda h: T.Tensor(target)
    loss, _ = discriminator_step(m, b)
    assert loss.item() < 1e-10


def test_no_replacements_still_finite():
    m = tiny_models()
    b = masked_batch(np.random.default_rng(0))
    corrupt(b, b.original_ids[b.mask_positions])
    loss, _ = discriminator_step(m, b)
    assert np.isfinite(loss.item()) and not b.rtd_labels.any()


@pytest.mark.parametrize("tying", ["none", "token", "all"])
def test_disc_loss_leaves_unshared_generator_untouched(tying):
    m = tiny_models(tying)
    b = masked_batch(np.random.default_rng(0))
    _, logits = generator_step(m, b)
    corrupt(b, sample_replacements(logits.data, np.random.default_rng(1)))
    m.zero_grad()
    loss, _ = discriminator_step(m, b)
    loss.backward()
    shared = m.shared_parameter_ids()
    for name, p in m.generator_parameters().items():
        if id(p) not in shared:
            assert p.grad is None or not p.grad.any(), name


def test_zero_weight_freezes_discriminator_but_not_generator():
    m = tiny_models()
    cfg = PretrainConfig(steps=10, warmup_steps=0, disc_loss_weight=0.0, batch_size=4, seq_len=12)
    opt = Adam(m.named_parameters())
    rng = np.random.default_rng(0)
    rtd_train_step(m, masked_batch(rng), cfg, opt, 0, {"sample": rng})
    shared = m.shared_parameter_ids()
    for name, p in m.discriminator_parameters().items():
        if id(p) not in shared:
            assert p.grad is None or not p.grad.any(), name
    assert any(p.grad is not None and p.grad.any() for p in m.generator.layers[0].parameters())


def test_joint_step_rejects_non_finite_loss():
    m = tiny_models()
    m.mlm_head.bias.data[0] = np.nan
    cfg = PretrainConfig(steps=10, warmup_steps=0, batch_size=4, seq_len=12)
    rng = np.random.default_rng(0)
    with pytest.raises(NonFiniteError):
        rtd_train_step(m, masked_batch(rng), cfg, Adam(m.named_parameters()), 0, {"sample": rng})


def test_pack_sequences():
    v = VOCAB
    ids, mask = pack_sequences([[10, 11, 12], [13]], 4, v)
    assert ids.tolist() == [[v.cls_id, 10, 11, 12], [v.cls_id, v.sep_id, 13, v.sep_id]]
    ids, mask = pack_sequences([[10]], 4, v)
    assert ids.tolist() == [[v.cls_id, 10, v.sep_id, 0]]
    assert mask.tolist() == [[1, 1, 1, 0]]


def _trainer(seed=0, steps=6):
    rng = np.random.default_rng(99)
    windows = random_windows(rng, 10, 12)
    cfg = PretrainConfig(steps=steps, warmup_steps=2, batch_size=3, seq_len=12, seed=seed)
    m = tiny_models(seed=seed)
    return Pretrainer(m, windows, VOCAB, cfg)


def test_loss_trajectory_is_deterministic():
    a = [(s.mlm_loss, s.disc_loss) for s in _trainer().run()]
    b = [(s.mlm_loss, s.disc_loss) for s in _trainer().run()]
    assert a == b
    c = [(s.mlm_loss, s.disc_loss) for s in _trainer(seed=1).run()]
    assert a != c


def test_run_in_pieces_equals_run_at_once():
    whole = _trainer().run()
    t = _trainer()
    pieces = t.run(2) + t.run(4)
    assert [s.mlm_loss for s in whole] == [s.mlm_loss for s in pieces]
    assert t.step == 6 and t.run(3) == []


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(mask_fraction=0.0)
    with pytest.raises(ValueError):
        PretrainConfig(steps=10, warmup_steps=11)
    with pytest.raises(ValueError):
        PretrainConfig(disc_loss_weight=-1)
    with pytest.raises(ValueError):
        PretrainConfig.from_dict({"bogus": 1})


def test_prefetch_keeps_order_and_raises():
    assert list(prefetch(iter(range(50)), depth=3)) == list(range(50))

    def broken():
        yield 1
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError, match="boom"):
        list(prefetch(broken()))


def test_smoothing_and_interval_means():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])
    hist = _trainer().run()
    rows = interval_means(hist, 4)
    assert [r[0] for r in rows] == [4, 6]
    assert rows[0][1] == pytest.approx(np.mean([s.mlm_loss for s in hist[:4]]))
