"""WER arithmetic and corpus-level evaluation."""

import pytest

from haed.corpus import Tokenizer
from haed.data import Utterance
from haed.decoding import TranscriptRecord
from haed.metrics import MetricsError, edit_counts, evaluate, wer


class TestWer:
    def test_identity(self):
        rate, s, i, d = wer(["a", "b", "c"], ["a", "b", "c"])
        assert (rate, s, i, d) == (0.0, 0, 0, 0)

    def test_single_substitution(self):
        rate, s, i, d = wer("a b c".split(), "a x c".split())
        assert rate == pytest.approx(1 / 3)
        assert (s, i, d) == (1, 0, 0)

    def test_full_deletion(self):
        rate, s, i, d = wer(["a", "b"], [])
        assert rate == pytest.approx(1.0)
        assert (s, i, d) == (0, 0, 2)

    def test_insertion(self):
        rate, s, i, d = wer(["a"], ["a", "b", "c"])
        assert (s, i, d) == (0, 2, 0)
        assert rate == pytest.approx(2.0)

    def test_empty_reference_rejected(self):
        with pytest.raises(MetricsError):
            wer([], ["a"])

    def test_counts_consistent_with_distance(self):
        ref = list("abcabca")
        hyp = list("abxbcaa")
        _, s, i, d = wer(ref, hyp)
        # total errors equal the DP distance
        dist = s + i + d
        n, m = len(ref), len(hyp)
        table = [[0] * (m + 1) for _ in range(n + 1)]
        for a in range(1, n + 1):
            table[a][0] = a
        for b in range(1, m + 1):
            table[0][b] = b
        for a in range(1, n + 1):
            for b in range(1, m + 1):
                table[a][b] = min(
                    table[a - 1][b - 1] + (ref[a - 1] != hyp[b - 1]),
                    table[a - 1][b] + 1,
                    table[a][b - 1] + 1,
                )
        assert dist == table[n][m]


def _tok():
    return Tokenizer(["a", "b", "c", " "])


def _ref(utt_id, text, domain="general"):
    tok = _tok()
    return Utterance(utt_id, None, tok.encode(text), domain)


def _hyp(utt_id, text, domain="general"):
    tok = _tok()
    return TranscriptRecord(
        id=utt_id, text=text, tokens=tok.encode(text), domain=domain,
        total=0.0, attention=0.0, ctc=0.0, fusion=0.0,
    )


class TestEvaluate:
    def test_all_correct(self):
        refs = [_ref("u1", "ab c"), _ref("u2", "ca")]
        hyps = [_hyp("u1", "ab c"), _hyp("u2", "ca")]
        rep = evaluate(hyps, refs, _tok(), config_fingerprint="f00")
        assert rep.overall.wer == 0.0
        assert rep.overall.token_error_rate == 0.0
        assert rep.config_fingerprint == "f00"

    def test_pooling_is_not_mean_of_rates(self):
        # hand-computed: u1 has 1 error over 1 ref word, u2 has 1 over 4
        refs = [_ref("u1", "a"), _ref("u2", "a b c a")]
        hyps = [_hyp("u1", "b"), _hyp("u2", "a b c b")]
        rep = evaluate(hyps, refs, _tok())
        pooled = (1 + 1) / (1 + 4)
        mean_of_rates = (1.0 + 0.25) / 2
        assert rep.overall.wer == pytest.approx(pooled)
        assert rep.overall.wer != pytest.approx(mean_of_rates)

    def test_per_domain_breakdown(self):
        refs = [_ref("u1", "ab", "general"), _ref("u2", "ca", "target")]
        hyps = [_hyp("u1", "ab", "general"), _hyp("u2", "cb", "target")]
        rep = evaluate(hyps, refs, _tok())
        assert rep.per_domain["general"].wer == 0.0
        assert rep.per_domain["target"].wer > 0.0

    def test_missing_ids_rejected(self):
        refs = [_ref("u1", "ab"), _ref("u2", "ca")]
        with pytest.raises(MetricsError) as err:
            evaluate([_hyp("u1", "ab")], refs, _tok())
        assert "u2" in str(err.value)
        with pytest.raises(MetricsError):
            evaluate([_hyp("u1", "ab"), _hyp("zz", "a")], refs, _tok())

    def test_report_round_trip(self, tmp_path):
        refs = [_ref("u1", "ab c")]
        hyps = [_hyp("u1", "ab a")]
        rep = evaluate(hyps, refs, _tok(), ppl=12.5, tags={"row": "HAED"})
        path = str(tmp_path / "eval_report.json")
        rep.save(path)
        from haed.metrics import EvalReport

        back = EvalReport.load(path)
        assert back.to_dict() == rep.to_dict()
