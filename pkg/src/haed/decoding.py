"""Inference: joint attention + CTC beam search with LM fusion.

Each hypothesis carries its own CTC prefix state; extending it fetches
the cross-attention query from that hypothesis' last-emission frame, so
two competing prefixes ending at different frames attend differently.
Scores combine as (1-beta) * attention + beta * ctc_prefix + fusion, all
recomputable from the stored components. Length normalization applies
only at the final ranking.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .ctc import CTCPrefixScorer, PrefixState, prune_blank_frames
from .model import HybridModel


class DecodingError(ValueError):
    pass


@dataclass
class FusionConfig:
    mode: str = "none"  # none | shallow | density_ratio
    target_weight: float = 0.1
    source_weight: float = 0.1

    def validate(self) -> None:
        if self.mode not in ("none", "shallow", "density_ratio"):
            raise DecodingError(f"unknown fusion mode {self.mode!r}")
        if self.target_weight < 0 or self.source_weight < 0:
            raise DecodingError("fusion weights must be >= 0")


def fused_step_score(
    log_posterior_row: np.ndarray,
    prefix_tokens,
    fusion: FusionConfig,
    target_lm=None,
    source_lm=None,
) -> np.ndarray:
    """Per-step fused score row over the vocabulary.

    shallow:       log p_model + w_tgt * log p_tgt
    density_ratio: log p_model + w_tgt * log p_tgt - w_src * log p_src
    """
    fusion.validate()
    row = np.asarray(log_posterior_row, dtype=np.float64).copy()
    if fusion.mode == "none":
        return row
    if target_lm is None:
        raise DecodingError(f"fusion mode {fusion.mode} needs a target LM")
    row = row + fusion.target_weight * target_lm.next_log_probs(list(prefix_tokens))
    if fusion.mode == "density_ratio":
        if source_lm is None:
            raise DecodingError("density_ratio fusion needs a source LM")
        row = row - fusion.source_weight * source_lm.next_log_probs(list(prefix_tokens))
    return row


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    attention: float  # cumulative log joint posterior
    ctc: float  # CTC prefix score (final score once finished)
    fusion_target: float  # cumulative target-LM log prob
    fusion_source: float
    ctc_state: PrefixState
    finished: bool = False

    def fusion_term(self, fusion: FusionConfig) -> float:
        if fusion.mode == "none":
            return 0.0
        term = fusion.target_weight * self.fusion_target
        if fusion.mode == "density_ratio":
            term -= fusion.source_weight * self.fusion_source
        return term

    def total(self, beta: float, fusion: FusionConfig) -> float:
        return (1.0 - beta) * self.attention + beta * self.ctc + self.fusion_term(fusion)


@dataclass
class DecodeResult:
    tokens: list[int]
    text: str
    total: float
    normalized: float
    attention: float
    ctc: float
    fusion: float
    empty: bool = False  # no hypothesis finished; emitted empty transcript
    nbest: list = field(default_factory=list)


def beam_search(
    model: HybridModel,
    features: np.ndarray,
    tokenizer=None,
    beam_size: int = 4,
    beta: float | None = None,
    fusion: FusionConfig | None = None,
    target_lm=None,
    source_lm=None,
    prune_threshold: float | None = None,
    lm_override=None,
    length_normalize: bool = True,
    max_steps: int | None = None,
    trace: list | None = None,
) -> DecodeResult:
    """Decode one utterance; returns the best hypothesis plus an n-best list.

    `lm_override` replaces the model's decoder LM by any object with
    `next_log_probs(prefix) -> (V,)`; `lm_override=False` disables the LM
    term entirely.
    """
    if beam_size < 1:
        raise DecodingError("beam size must be >= 1")
    fusion = fusion or FusionConfig()
    fusion.validate()
    beta = model.config.ctc_weight if beta is None else float(beta)

    with torch.no_grad():
        h, ctc_lp = model.encode_utterance(features)
    t_frames = h.shape[0]
    scorer = CTCPrefixScorer(ctc_lp, model.blank_id)
    kept = None
    if prune_threshold is not None:
        kept = prune_blank_frames(ctc_lp, prune_threshold)
        if len(kept) == 0:
            return _empty_result()

    lm = model.lm if lm_override is None else (None if lm_override is False else lm_override)
    eos = model.eos_id
    candidates = [v for v in range(model.vocab_size) if v != model.sos_id]

    root = Hypothesis(
        tokens=(),
        attention=0.0,
        ctc=0.0,
        fusion_target=0.0,
        fusion_source=0.0,
        ctc_state=scorer.initial_state(),
    )
    live = [root]
    # the greedy chain is kept alive even when it falls out of the beam, so
    # widening the beam can only add hypotheses (1-best never degrades)
    chain = root
    finished: list[Hypothesis] = []
    if max_steps is None:
        max_steps = t_frames + 2

    frame_mask = None
    if kept is not None:
        frame_mask = torch.zeros(1, t_frames, dtype=torch.bool)
        frame_mask[0, torch.as_tensor(np.asarray(kept), dtype=torch.long)] = True

    for _ in range(max_steps):
        if not live:
            break
        if trace is not None:
            trace.append([hyp.ctc_state.last_emission_frame for hyp in live])
        # one forward per hypothesis: a hypothesis' score must not depend on
        # what else is in the beam (keeps wider beams strictly better)
        log_post_rows = []
        with torch.no_grad():
            for hyp in live:
                frame = hyp.ctc_state.last_emission_frame
                query = h[frame].reshape(1, 1, -1)
                qf = torch.tensor([[frame]], dtype=torch.long)
                ac = model.acoustic(query, h.unsqueeze(0), frame_mask, query_frames=qf)
                scores = ac.scores[0, 0]
                if lm is model.lm and lm is not None:
                    toks = torch.tensor(
                        [[model.sos_id, *hyp.tokens]], dtype=torch.long
                    )
                    lm_row = model.lm(toks).log_probs[0, -1]
                    row = torch.log_softmax(scores + lm_row, dim=-1).double().numpy()
                elif lm is not None:
                    combined = scores.double().numpy() + lm.next_log_probs(list(hyp.tokens))
                    row = _log_softmax_np(combined)
                else:
                    row = _log_softmax_np(scores.double().numpy())
                log_post_rows.append(row)
        log_post = np.stack(log_post_rows)

        pool: list[Hypothesis] = []  # eos candidates compete for beam slots,
        # so beam_size=1 degenerates to exact greedy decoding
        chain_pool: list[Hypothesis] = []
        for i, hyp in enumerate(live):
            psi, t_emit, gamma_n, gamma_b = scorer.extend_all(hyp.ctc_state)
            final_ctc = scorer.final_score(hyp.ctc_state)
            tgt_row = src_row = None
            if fusion.mode != "none":
                if target_lm is None:
                    raise DecodingError(f"fusion mode {fusion.mode} needs a target LM")
                tgt_row = target_lm.next_log_probs(list(hyp.tokens))
                if fusion.mode == "density_ratio":
                    if source_lm is None:
                        raise DecodingError("density_ratio fusion needs a source LM")
                    src_row = source_lm.next_log_probs(list(hyp.tokens))
            for v in candidates:
                att = hyp.attention + float(log_post[i, v])
                f_tgt = hyp.fusion_target + (float(tgt_row[v]) if tgt_row is not None else 0.0)
                f_src = hyp.fusion_source + (float(src_row[v]) if src_row is not None else 0.0)
                if v == eos:
                    cand = Hypothesis(
                        tokens=hyp.tokens,
                        attention=att,
                        ctc=final_ctc,
                        fusion_target=f_tgt,
                        fusion_source=f_src,
                        ctc_state=hyp.ctc_state,
                        finished=True,
                    )
                    if np.isfinite(cand.total(beta, fusion)):
                        pool.append(cand)
                        if hyp is chain:
                            chain_pool.append(cand)
                    continue
                ctc_score = float(psi[v])
                if beta > 0.0 and not np.isfinite(ctc_score):
                    continue  # ran out of frames for this extension
                cand = Hypothesis(
                    tokens=hyp.tokens + (v,),
                    attention=att,
                    ctc=ctc_score,
                    fusion_target=f_tgt,
                    fusion_source=f_src,
                    ctc_state=PrefixState(
                        hyp.tokens + (v,),
                        gamma_n[v],
                        gamma_b[v],
                        ctc_score,
                        int(t_emit[v]),
                        out_of_frames=not np.isfinite(ctc_score),
                    ),
                )
                pool.append(cand)
                if hyp is chain:
                    chain_pool.append(cand)

        def order(c: Hypothesis):
            return (-c.total(beta, fusion), c.tokens, c.finished)

        pool.sort(key=order)
        selected = pool[:beam_size]
        if chain is not None and chain_pool:
            chain_next = min(chain_pool, key=order)
            if not any(c is chain_next for c in selected):
                selected = selected + [chain_next]
            chain = None if chain_next.finished else chain_next
        else:
            chain = None
        finished.extend(c for c in selected if c.finished)
        live = [c for c in selected if not c.finished]

    if not finished:
        return _empty_result()

    def rank_key(hyp: Hypothesis):
        tot = hyp.total(beta, fusion)
        norm = tot / (len(hyp.tokens) + 1) if length_normalize else tot
        return (-norm, hyp.tokens)

    finished.sort(key=rank_key)
    nbest = []
    for hyp in finished[:beam_size]:
        tot = hyp.total(beta, fusion)
        nbest.append(
            {
                "tokens": list(hyp.tokens),
                "text": tokenizer.decode(list(hyp.tokens)) if tokenizer else "",
                "total": tot,
                "normalized": tot / (len(hyp.tokens) + 1) if length_normalize else tot,
                "attention": hyp.attention,
                "ctc": hyp.ctc,
                "fusion": hyp.fusion_term(fusion),
            }
        )
    best = nbest[0]
    return DecodeResult(
        tokens=best["tokens"],
        text=best["text"],
        total=best["total"],
        normalized=best["normalized"],
        attention=best["attention"],
        ctc=best["ctc"],
        fusion=best["fusion"],
        empty=False,
        nbest=nbest,
    )


def _empty_result() -> DecodeResult:
    return DecodeResult(
        tokens=[], text="", total=float("-inf"), normalized=float("-inf"),
        attention=float("-inf"), ctc=float("-inf"), fusion=0.0, empty=True, nbest=[],
    )


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m
    return x - z


def measure_emission_agreement(model, utterances, beam_size: int) -> float:
    """Fraction of live beam hypotheses sharing the modal last-emission frame,
    averaged over steps and utterances. By definition 1.0 at beam size 1."""
    fractions = []
    for utt in utterances:
        trace: list = []
        beam_search(model, utt.features, beam_size=beam_size, trace=trace)
        for frames in trace:
            if frames:
                counts = np.bincount(np.asarray(frames))
                fractions.append(counts.max() / len(frames))
    return float(np.mean(fractions)) if fractions else 1.0


# ---------------------------------------------------------------------------
# Batch decoding
# ---------------------------------------------------------------------------


@dataclass
class TranscriptRecord:
    id: str
    text: str
    tokens: list[int]
    domain: str
    total: float
    attention: float
    ctc: float
    fusion: float
    empty: bool = False
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "text": self.text,
                "tokens": self.tokens,
                "domain": self.domain,
                "total": self.total,
                "attention": self.attention,
                "ctc": self.ctc,
                "fusion": self.fusion,
                "empty": self.empty,
                "error": self.error,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "TranscriptRecord":
        d = json.loads(line)
        return cls(**d)


def write_transcripts(path: str, records: list[TranscriptRecord]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")
    os.replace(tmp, path)


def read_transcripts(path: str) -> list[TranscriptRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(TranscriptRecord.from_json(line))
    return out


def decode_set(
    model: HybridModel,
    utterances,
    tokenizer,
    beam_size: int = 4,
    beta: float | None = None,
    fusion: FusionConfig | None = None,
    target_lm=None,
    source_lm=None,
    prune_threshold: float | None = None,
    length_normalize: bool = True,
) -> list[TranscriptRecord]:
    """Decode a manifest's utterances in order; per-utterance failures are
    recorded in the transcript rather than aborting the run."""
    records = []
    for utt in utterances:
        try:
            res = beam_search(
                model,
                utt.features,
                tokenizer,
                beam_size=beam_size,
                beta=beta,
                fusion=fusion,
                target_lm=target_lm,
                source_lm=source_lm,
                prune_threshold=prune_threshold,
                length_normalize=length_normalize,
            )
            records.append(
                TranscriptRecord(
                    id=utt.id,
                    text=res.text,
                    tokens=res.tokens,
                    domain=utt.domain,
                    total=res.total,
                    attention=res.attention,
                    ctc=res.ctc,
                    fusion=res.fusion,
                    empty=res.empty,
                )
            )
        except Exception as exc:  # per-utterance failure: record and continue
            records.append(
                TranscriptRecord(
                    id=utt.id,
                    text="",
                    tokens=[],
                    domain=utt.domain,
                    total=float("-inf"),
                    attention=float("-inf"),
                    ctc=float("-inf"),
                    fusion=0.0,
                    empty=True,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    return records
