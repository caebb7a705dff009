import logging
import math

import numpy as np
import pytest

from semspeech.corpus import ScoredPairSet
from semspeech.errors import ValidationError
from semspeech.evaluation import spearman
from semspeech.nn.layers import EncoderConfig
from semspeech.nn.losses import masked_cross_entropy
from semspeech.random_utils import derive_rng
from semspeech.teachers import (
    EarlyStopper,
    SequenceEncoder,
    Teacher,
    TeacherConfig,
    _mask_batch,
    delete_tokens,
    mlm_forward,
    mlm_pretrain,
    simcse_batch_loss,
    teacher_embed,
    train_simcse,
    train_tsdae,
)
from semspeech.tokenizer import CLS, MASK, PAD, SEP, TokenSequence

TINY = EncoderConfig(layers=1, model_dim=16, heads=2, ff_dim=24, dropout_rate=0.1)


def make_seqs(n, vocab=20, min_len=3, max_len=8, seed=0):
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        toks = [CLS] + [int(t) for t in rng.integers(5, vocab, size=length)] + [SEP]
        seqs.append(TokenSequence(toks, source_id=f"u{i:03d}"))
    return seqs


# ---------------------------------------------------------------------------
# sequence encoder
# ---------------------------------------------------------------------------

def test_embed_dimension_and_determinism():
    enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=0)
    seq = TokenSequence([CLS, 7, 9, 12, SEP])
    z1, z2 = enc.embed(seq), enc.embed(seq)
    assert z1.shape == (16,)
    assert np.array_equal(z1, z2)


def test_mean_pool_single_content_token_is_its_state():
    enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=1)
    toks = np.array([[CLS, 9, SEP]])
    states = enc.encode(toks)
    pooled = enc.pool(states, toks)
    assert np.allclose(pooled.data[0], states.data[0, 1], atol=1e-12)


def test_cls_and_mean_pooling_differ():
    mean_enc = SequenceEncoder.create(vocab=20, cfg=TINY, pooling="mean", seed=2)
    cls_enc = SequenceEncoder(mean_enc.store, TINY, 20, pooling="cls")
    seq = TokenSequence([CLS, 6, 11, 14, SEP])
    assert np.linalg.norm(mean_enc.embed(seq) - cls_enc.embed(seq)) > 0


def test_embed_batch_matches_single():
    enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=3)
    seqs = make_seqs(5, seed=3)
    batched = enc.embed_batch(seqs)
    for i, s in enumerate(seqs):
        assert np.allclose(batched[i], enc.embed(s), atol=1e-10)


def test_mean_pool_rejects_no_content():
    enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=4)
    with pytest.raises(ValidationError):
        enc.embed(TokenSequence([CLS, SEP]))


def test_encoder_rejects_out_of_vocab():
    enc = SequenceEncoder.create(vocab=10, cfg=TINY, seed=5)
    with pytest.raises(ValidationError):
        enc.embed(np.array([CLS, 15, SEP]))


# ---------------------------------------------------------------------------
# masked pretraining
# ---------------------------------------------------------------------------

def test_mask_rate_zero_rejected():
    enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=0)
    with pytest.raises(ValidationError):
        mlm_pretrain(enc, make_seqs(4), mask_rate=0.0, steps=1)


def test_mask_count_contract():
    rng = derive_rng(0, "test-mask")
    lengths_seen = set()
    for trial in range(200):
        n = int(rng.integers(1, 30))
        lengths_seen.add(n)
        toks = np.array([[CLS] + [7] * n + [SEP]])
        _, mask = _mask_batch(toks, 0.15, 20, rng)
        n_masked = int(mask.sum())
        assert abs(n_masked - round(0.15 * n)) <= 1
        assert n_masked >= 1
        # never a structural token
        assert not mask[0, 0] and not mask[0, -1]
    assert min(lengths_seen) <= 3  # short sequences exercised the max(1,...) rule


def test_mask_split_statistics():
    rng = derive_rng(1, "test-mask-split")
    toks = np.tile(np.array([[CLS] + [9] * 40 + [SEP]]), (200, 1))
    corrupted, mask = _mask_batch(toks, 0.5, 20, rng)
    picked = mask.sum()
    became_mask = ((corrupted == MASK) & mask).sum()
    changed_other = ((corrupted != MASK) & (corrupted != toks) & mask).sum()
    unchanged = ((corrupted == toks) & mask).sum()
    assert abs(became_mask / picked - 0.8) < 0.03
    assert abs(changed_other / picked - 0.09) < 0.03  # ~10% redraws, some hit the original
    assert abs(unchanged / picked - 0.11) < 0.04


def test_mlm_skips_special_only_sequence(caplog):
    enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=6)
    seqs = make_seqs(4, seed=6) + [TokenSequence([CLS, SEP], source_id="empty-one")]
    with caplog.at_level(logging.WARNING):
        mlm_pretrain(enc, seqs, steps=2, batch_size=2, seed=0)
    assert any("empty-one" in r.message for r in caplog.records)


def test_mlm_loss_below_log_vocab_after_500_steps():
    vocab = 13
    enc = SequenceEncoder.create(vocab=vocab, cfg=TINY, seed=7)
    seqs = make_seqs(30, vocab=vocab, seed=7)
    history = mlm_pretrain(enc, seqs, steps=500, batch_size=8, seed=7, lr=1e-3)
    assert len(history) == 500
    tail = np.mean(history[-20:])
    assert tail < math.log(vocab)


def test_mlm_unmasked_positions_get_zero_logit_grads():
    enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=8)
    rng = derive_rng(8, "probe")
    toks = np.array([[CLS, 7, 9, 12, 6, SEP]])
    corrupted, mask = _mask_batch(toks, 0.4, 20, rng)
    logits = mlm_forward(enc, corrupted)
    loss = masked_cross_entropy(logits, toks, mask)
    loss.backward()
    g = logits.grad
    assert np.all(g[~mask] == 0.0)
    assert np.any(g[mask] != 0.0)


# ---------------------------------------------------------------------------
# deletion
# ---------------------------------------------------------------------------

def test_delete_ratio_zero_identity():
    seq = TokenSequence([CLS, 7, 9, 12, SEP], source_id="a")
    out = delete_tokens(seq, 0.0, 0)
    assert out.tokens == seq.tokens
    assert out.source_id == "a"


def test_delete_ratio_one_single_survivor():
    seq = TokenSequence([CLS, 7, 9, 12, 6, SEP])
    rng = derive_rng(0, "del")
    survivors = set()
    for _ in range(200):
        out = delete_tokens(seq, 1.0, rng)
        assert out.tokens[0] == CLS and out.tokens[-1] == SEP
        assert len(out.tokens) == 3
        survivors.add(out.tokens[1])
    assert survivors == {7, 9, 12, 6}  # uniform choice reaches every token


def test_delete_preserves_frame_and_min_length():
    rng = derive_rng(1, "del")
    seq = TokenSequence([CLS, 5, 6, 7, 8, 9, SEP])
    for _ in range(300):
        out = delete_tokens(seq, 0.7, rng)
        assert out.tokens[0] == CLS and out.tokens[-1] == SEP
        assert len(out.tokens) >= 3


def test_delete_empirical_rate():
    rng = derive_rng(2, "del")
    interior = list(range(5, 15))  # 10 interior tokens
    seq = TokenSequence([CLS] + interior + [SEP])
    deleted = 0
    trials = 10_000
    for _ in range(trials):
        out = delete_tokens(seq, 0.6, rng)
        deleted += len(interior) - (len(out.tokens) - 2)
    rate = deleted / (trials * len(interior))
    assert abs(rate - 0.6) < 0.02


def test_delete_no_interior_passthrough():
    seq = TokenSequence([CLS, SEP])
    out = delete_tokens(seq, 0.9, 0)
    assert out.tokens == [CLS, SEP]


def test_delete_ratio_out_of_range():
    with pytest.raises(ValidationError):
        delete_tokens(TokenSequence([CLS, 5, SEP]), 1.5, 0)


# ---------------------------------------------------------------------------
# tsdae
# ---------------------------------------------------------------------------

def test_tsdae_smoke_ratio_zero():
    enc = SequenceEncoder.create(vocab=13, cfg=TINY, seed=9)
    seqs = make_seqs(30, vocab=13, seed=9)
    cfg = TeacherConfig(kind="tsdae", deletion_ratio=0.0, epochs=3, lr=3e-3,
                        batch_size=8, seed=9)
    teacher, curve = train_tsdae(enc, seqs, cfg)
    assert teacher.kind == "tsdae"
    assert min(p.dev_loss for p in curve) < curve[0].dev_loss
    z = teacher.embed(seqs[0])
    assert z.shape == (16,)


def test_tsdae_keep_best_and_determinism():
    runs = []
    for _ in range(2):
        enc = SequenceEncoder.create(vocab=13, cfg=TINY, seed=10)
        seqs = make_seqs(20, vocab=13, seed=10)
        cfg = TeacherConfig(kind="tsdae", deletion_ratio=0.4, epochs=2, lr=1e-3,
                            batch_size=8, seed=10)
        teacher, curve = train_tsdae(enc, seqs, cfg)
        runs.append((teacher, curve))
    t1, c1 = runs[0]
    t2, c2 = runs[1]
    for (name, p), (_, q) in zip(t1.encoder.store.items(), t2.encoder.store.items()):
        assert np.array_equal(p.data, q.data), name
    assert [p.dev_loss for p in c1] == [p.dev_loss for p in c2]
    assert min(p.dev_loss for p in c1) == t1.info["best_dev_loss"]


def test_tsdae_rejects_wrong_kind():
    enc = SequenceEncoder.create(vocab=13, cfg=TINY, seed=0)
    with pytest.raises(ValidationError):
        train_tsdae(enc, make_seqs(5, vocab=13), TeacherConfig(kind="simcse"))


# ---------------------------------------------------------------------------
# simcse
# ---------------------------------------------------------------------------

def test_simcse_requires_dropout():
    enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=0)
    cfg = TeacherConfig(kind="simcse", dropout_rate=0.0)
    pairs = ScoredPairSet(pairs=[("u000", "u001", 4.0)], split="dev")
    with pytest.raises(ValidationError):
        train_simcse(enc, make_seqs(4), cfg, pairs)


def test_simcse_requires_batch_of_two():
    enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=0)
    cfg = TeacherConfig(kind="simcse", batch_size=1)
    pairs = ScoredPairSet(pairs=[("u000", "u001", 4.0)], split="dev")
    with pytest.raises(ValidationError):
        train_simcse(enc, make_seqs(4), cfg, pairs)


def test_simcse_initial_loss_near_log_batch():
    losses = []
    for seed in range(3):
        enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=seed)
        seqs = make_seqs(16, seed=seed)
        loss = simcse_batch_loss(enc, seqs, tau=0.05, rng=derive_rng(seed, "probe"))
        losses.append(float(loss.data))
    target = math.log(16)
    for value in losses:
        assert abs(value - target) / target < 0.2


def test_simcse_trains_and_keeps_best():
    enc = SequenceEncoder.create(vocab=13, cfg=TINY, seed=11)
    seqs = make_seqs(24, vocab=13, seed=11)
    # dev pairs judged by token overlap so the metric is computable
    rng = np.random.default_rng(11)
    entries = []
    for _ in range(12):
        i, j = rng.choice(24, size=2, replace=False)
        a, b = seqs[i], seqs[j]
        inter = len(set(a.tokens[1:-1]) & set(b.tokens[1:-1]))
        union = len(set(a.tokens[1:-1]) | set(b.tokens[1:-1]))
        entries.append((a.source_id, b.source_id, 5.0 * inter / union))
    pairs = ScoredPairSet(pairs=entries, split="dev")
    cfg = TeacherConfig(kind="simcse", epochs=2, lr=1e-3, batch_size=8, seed=11,
                        eval_every_steps=2)
    teacher, history = train_simcse(enc, seqs, cfg, pairs)
    assert teacher.kind == "simcse"
    assert len(history) >= 2
    best = max(m for _, m in history)
    assert teacher.info["best_dev_spearman"] == best


def test_simcse_missing_dev_id_errors():
    enc = SequenceEncoder.create(vocab=20, cfg=TINY, seed=0)
    pairs = ScoredPairSet(pairs=[("u000", "not-there", 3.0)], split="dev")
    with pytest.raises(ValidationError) as e:
        train_simcse(enc, make_seqs(4), TeacherConfig(kind="simcse", batch_size=2), pairs)
    assert "not-there" in str(e.value)


def test_early_stopper_exact_patience():
    stopper = EarlyStopper(patience=80)
    assert not stopper.update(1.0)
    for i in range(79):
        assert not stopper.update(0.9 - i * 0.001), f"stopped early at stale eval {i + 1}"
    assert stopper.update(0.0)  # the 80th consecutive stale evaluation


def test_early_stopper_resets_on_improvement():
    stopper = EarlyStopper(patience=3)
    stopper.update(1.0)
    stopper.update(0.5)
    stopper.update(0.4)
    assert not stopper.update(2.0)  # improvement resets the counter
    assert not stopper.update(1.0)
    assert not stopper.update(1.0)
    assert stopper.update(1.0)


# ---------------------------------------------------------------------------
# teacher embedding + persistence
# ---------------------------------------------------------------------------

def test_teacher_embed_vocab_mismatch():
    enc = SequenceEncoder.create(vocab=10, cfg=TINY, seed=0)
    teacher = Teacher(encoder=enc, kind="tsdae")
    with pytest.raises(ValidationError):
        teacher_embed(teacher, np.array([CLS, 55, SEP]))


def test_teacher_save_load_round_trip(tmp_path):
    enc = SequenceEncoder.create(vocab=13, cfg=TINY, seed=12)
    seqs = make_seqs(10, vocab=13, seed=12)
    cfg = TeacherConfig(kind="tsdae", deletion_ratio=0.0, epochs=1, batch_size=4, seed=12)
    teacher, _ = train_tsdae(enc, seqs, cfg)
    z = teacher.embed(seqs[0])
    path = tmp_path / "teacher.semm"
    teacher.save(path)
    loaded = Teacher.load(path)
    assert loaded.kind == "tsdae"
    assert np.allclose(loaded.embed(seqs[0]), z, atol=1e-5)  # float32 storage
    # decoder params were discarded with the checkpoint
    assert not any(n.startswith("dec.") for n in loaded.encoder.store.names())
