"""Error-rate scoring: edit-distance WER/TER and corpus-level evaluation.

Corpus rates pool errors (sum of S+I+D over utterances divided by total
reference length), which is not the mean of per-utterance rates. At
character-token scale, "words" are the whitespace-separated chunks of the
detokenized text; the token-level rate is reported alongside.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field


class MetricsError(ValueError):
    pass


def edit_counts(reference: list, hypothesis: list) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimal alignment.

    Uniform costs; among cost-ties the backtrace prefers substitution,
    then deletion, then insertion, which keeps counts deterministic.
    """
    n, m = len(reference), len(hypothesis)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        ri = reference[i - 1]
        for j in range(1, m + 1):
            sub = dist[i - 1][j - 1] + (ri != hypothesis[j - 1])
            dele = dist[i - 1][j] + 1
            ins = dist[i][j - 1] + 1
            dist[i][j] = min(sub, dele, ins)
    s = i_cnt = d = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            s += reference[i - 1] != hypothesis[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            d += 1
            i -= 1
        else:
            i_cnt += 1
            j -= 1
    return s, i_cnt, d


def wer(reference: list, hypothesis: list) -> tuple[float, int, int, int]:
    """(rate, S, I, D) against a nonempty reference."""
    if not reference:
        raise MetricsError("empty reference")
    s, i, d = edit_counts(list(reference), list(hypothesis))
    return (s + i + d) / len(reference), s, i, d


@dataclass
class DomainScore:
    wer: float = 0.0
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0
    token_error_rate: float = 0.0
    token_errors: int = 0
    ref_tokens: int = 0
    utterances: int = 0

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class EvalReport:
    overall: DomainScore
    per_domain: dict[str, DomainScore]
    ppl: float | None
    config_fingerprint: str
    tags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "per_domain": {k: v.to_dict() for k, v in self.per_domain.items()},
            "ppl": self.ppl,
            "config_fingerprint": self.config_fingerprint,
            "tags": self.tags,
        }

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as f:
            d = json.load(f)
        return cls(
            overall=DomainScore(**d["overall"]),
            per_domain={k: DomainScore(**v) for k, v in d["per_domain"].items()},
            ppl=d["ppl"],
            config_fingerprint=d["config_fingerprint"],
            tags=d.get("tags", {}),
        )


def evaluate(
    transcripts,
    references,
    tokenizer,
    ppl: float | None = None,
    config_fingerprint: str = "",
    tags: dict | None = None,
) -> EvalReport:
    """Score transcripts against manifest references, pooled by domain.

    `transcripts` are TranscriptRecords; `references` are manifest
    utterances (anything with id/tokens/domain). Missing or unmatched ids
    are an error.
    """
    by_id = {r.id: r for r in references}
    missing = [t.id for t in transcripts if t.id not in by_id]
    if missing:
        raise MetricsError(f"transcripts reference unknown ids: {missing[:10]}")
    missing = set(by_id) - {t.id for t in transcripts}
    if missing:
        raise MetricsError(f"no transcript for ids: {sorted(missing)[:10]}")

    totals: dict[str, DomainScore] = {}
    overall = DomainScore()
    for t in transcripts:
        ref = by_id[t.id]
        ref_words = tokenizer.decode(list(ref.tokens)).split()
        hyp_words = (t.text or "").split()
        if not ref_words:
            raise MetricsError(f"{t.id}: reference detokenizes to no words")
        s, i, d = edit_counts(ref_words, hyp_words)
        ts, ti, td = edit_counts(list(ref.tokens), list(t.tokens))
        for score in (overall, totals.setdefault(ref.domain, DomainScore())):
            score.substitutions += s
            score.insertions += i
            score.deletions += d
            score.ref_words += len(ref_words)
            score.token_errors += ts + ti + td
            score.ref_tokens += len(ref.tokens)
            score.utterances += 1
    for score in [overall, *totals.values()]:
        score.wer = (score.substitutions + score.insertions + score.deletions) / score.ref_words
        score.token_error_rate = score.token_errors / score.ref_tokens
    return EvalReport(
        overall=overall,
        per_domain=totals,
        ppl=ppl,
        config_fingerprint=config_fingerprint,
        tags=tags or {},
    )
