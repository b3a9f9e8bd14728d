"""Backoff n-gram: hand-count oracle, exact normalization, persistence."""

import math

import numpy as np
import pytest

from haed.ngram import NGramError, NGramLM, ngram_train


def hand_unigram_probs(sequences, vocab_size, eos_id, discount):
    """Independent counting oracle for the unigram level."""
    counts = {}
    for seq in sequences:
        for w in list(seq) + [eos_id]:
            counts[w] = counts.get(w, 0) + 1
    total = sum(counts.values())
    bow = discount * len(counts) / total
    floor = bow / vocab_size
    return {
        w: (counts.get(w, 0) - discount) / total + floor if w in counts else floor
        for w in range(vocab_size)
    }


class TestTraining:
    def test_unigram_hand_count(self):
        # corpus "aa b" as id sequences over a 5-token space (a=0, b=1, eos=4)
        seqs = [[0, 0], [1]]
        lm = ngram_train(seqs, order=1, vocab_size=5, sos_id=3, eos_id=4, discount=0.1)
        expected = hand_unigram_probs(seqs, 5, 4, 0.1)
        row = np.exp(lm.next_log_probs([]))
        for w in range(5):
            assert row[w] == pytest.approx(expected[w], abs=1e-12)
        # counts dominate: p(a) ~ 2/5 of events (with eos), p(a|no-eos view) ~ 2/3
        assert row[0] > row[1] > 0

    def test_every_context_normalized(self):
        rng = np.random.default_rng(0)
        seqs = [rng.integers(0, 4, size=rng.integers(1, 9)).tolist() for _ in range(40)]
        lm = ngram_train(seqs, order=3, vocab_size=7, sos_id=5, eos_id=6, discount=0.1)
        contexts = [[], [0], [1, 2], [3, 3], [0, 1, 2, 3], [4]]
        for ctx in contexts:
            total = float(np.exp(lm.next_log_probs(ctx)).sum())
            assert total == pytest.approx(1.0, abs=1e-6)

    def test_unseen_token_nonzero(self):
        lm = ngram_train([[0, 0, 0]], order=2, vocab_size=6, sos_id=4, eos_id=5, discount=0.1)
        row = lm.next_log_probs([0])
        assert np.isfinite(row).all()
        assert math.exp(row[3]) > 0.0

    def test_order_below_one_rejected(self):
        with pytest.raises(NGramError):
            ngram_train([[0]], order=0, vocab_size=3, sos_id=1, eos_id=2)

    def test_empty_text_rejected(self):
        with pytest.raises(NGramError):
            ngram_train([], order=2, vocab_size=3, sos_id=1, eos_id=2)

    def test_fit_beats_uniform_on_training_text(self):
        rng = np.random.default_rng(1)
        # skewed text: token 0 dominates
        seqs = [rng.choice(3, p=[0.8, 0.15, 0.05], size=6).tolist() for _ in range(50)]
        lm = ngram_train(seqs, order=2, vocab_size=6, sos_id=4, eos_id=5, discount=0.1)
        total_lp = sum(lm.sequence_log_prob(s) for s in seqs)
        n_events = sum(len(s) + 1 for s in seqs)
        ppl = math.exp(-total_lp / n_events)
        assert ppl < 6.0  # uniform would be exactly 6


class TestPersistence:
    def test_round_trip_identical_rows(self, tmp_path):
        rng = np.random.default_rng(2)
        seqs = [rng.integers(0, 4, size=5).tolist() for _ in range(30)]
        lm = ngram_train(seqs, order=3, vocab_size=7, sos_id=5, eos_id=6, discount=0.1)
        path = str(tmp_path / "lm.ngram")
        lm.save(path)
        back = NGramLM.load(path)
        for ctx in ([], [1], [2, 3], [0, 0, 0]):
            np.testing.assert_array_equal(lm.next_log_probs(ctx), back.next_log_probs(ctx))

    def test_file_is_text_and_diffable(self, tmp_path):
        lm = ngram_train([[0, 1]], order=2, vocab_size=5, sos_id=3, eos_id=4)
        p1, p2 = str(tmp_path / "a.ngram"), str(tmp_path / "b.ngram")
        lm.save(p1)
        lm.save(p2)
        text = open(p1).read()
        assert text.startswith("HAED-NGRAM 1\norder 2\n")
        assert "\\1-grams" in text and "\\0-backoff" in text
        assert open(p2).read() == text

    def test_bad_file_rejected(self, tmp_path):
        path = tmp_path / "x.ngram"
        path.write_text("garbage\n")
        with pytest.raises(NGramError):
            NGramLM.load(str(path))
