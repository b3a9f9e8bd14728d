"""Joint hybrid model: encoder + CTC branch + decoder LM + acoustic branch.

Per-step posterior: Softmax(acoustic_logits + log_softmax(lm_logits)).
Because the acoustic term enters pre-normalization, adding a constant
vector to it leaves the posterior equal to the LM distribution exactly;
that identity is what lets the LM half be trained, evaluated, and adapted
as a standalone language model.

Training loss per utterance: attention cross-entropy under the joint
posterior, plus lm_weight * LM negative log-likelihood, plus
ctc_weight * CTC loss. Alignment frames feeding the acoustic queries are
recomputed from the current CTC branch every batch and treated as
non-differentiable indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .acoustic import AcousticBranch, AcousticConfig
from .ctc import ctc_loss_batch, forced_alignment_batch, min_frames
from .encoder import Encoder, EncoderConfig
from .lm import DecoderLM, LMConfig


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    acoustic: AcousticConfig = field(default_factory=AcousticConfig)
    lm_weight: float = 0.8  # weight on the decoder LM loss term
    ctc_weight: float = 0.2
    sos_frame: int = 0  # query frame for the first decoder step
    no_decoder: bool = False  # ablation: posterior is Softmax(acoustic) only

    def validate(self) -> None:
        if self.lm_weight < 0:
            raise ModelError("lm_weight must be >= 0")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ModelError("ctc_weight must be in [0, 1]")
        if self.encoder.model_dim != self.acoustic.model_dim:
            raise ModelError("acoustic branch dim must match encoder dim")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    attention_ce: torch.Tensor
    lm_nll: torch.Tensor
    ctc: torch.Tensor
    n_utterances: int
    n_tokens: int
    skipped: list[str]

    def scalars(self) -> dict:
        return {
            "total": float(self.total),
            "attention_ce": float(self.attention_ce),
            "lm_nll": float(self.lm_nll),
            "ctc": float(self.ctc),
            "n_utterances": self.n_utterances,
            "n_tokens": self.n_tokens,
            "n_skipped": len(self.skipped),
        }


def joint_posterior(acoustic_row, lm_log_row) -> torch.Tensor:
    """Softmax of (acoustic logits + LM log-probs) for one step; sums to 1."""
    a = torch.as_tensor(acoustic_row)
    l = torch.as_tensor(lm_log_row)
    if a.shape != l.shape or a.dim() != 1:
        raise ModelError("rows must be 1-d and the same length")
    if not (torch.isfinite(a).all() and torch.isfinite(l).all()):
        raise ModelError("non-finite score row")
    return torch.softmax(a + l, dim=-1)


class HybridModel(nn.Module):
    def __init__(
        self,
        feature_dim: int,
        vocab_size: int,
        sos_id: int,
        eos_id: int,
        config: ModelConfig,
        dtype=torch.float32,
    ):
        super().__init__()
        config.validate()
        self.feature_dim = feature_dim
        self.vocab_size = vocab_size
        self.sos_id = sos_id
        self.eos_id = eos_id
        self.blank_id = vocab_size  # blank sits one past the vocabulary
        self.config = config
        self.encoder = Encoder(feature_dim, config.encoder, dtype=dtype)
        self.ctc_head = nn.Linear(config.encoder.model_dim, vocab_size + 1, dtype=dtype)
        self.acoustic = AcousticBranch(vocab_size, config.acoustic, dtype=dtype)
        self.lm = None if config.no_decoder else DecoderLM(vocab_size, sos_id, config.lm, dtype=dtype)

    # -- initialization / partitions ------------------------------------

    def init_parameters(self, seed: int) -> None:
        self.encoder.init_parameters(seed)
        self.acoustic.init_parameters(seed + 1)
        if self.lm is not None:
            self.lm.init_parameters(seed + 2)
        gen = torch.Generator().manual_seed(seed + 3)
        with torch.no_grad():
            w = self.ctc_head.weight
            fan_in, fan_out = w.shape[1], w.shape[0]
            std = (2.0 / (fan_in + fan_out)) ** 0.5
            w.copy_((torch.randn(w.shape, generator=gen, dtype=torch.float64) * std).to(w.dtype))
            self.ctc_head.bias.zero_()

    PARTITIONS = ("encoder", "ctc_head", "lm", "acoustic")

    def partition_table(self) -> dict[str, str]:
        """Map every parameter name to exactly one partition."""
        table = {}
        for name, _ in self.named_parameters():
            part = name.split(".", 1)[0]
            if part not in self.PARTITIONS:
                raise ModelError(f"parameter {name} outside known partitions")
            table[name] = part
        return table

    # -- forward pieces ---------------------------------------------------

    def ctc_log_posteriors(self, h: torch.Tensor) -> torch.Tensor:
        """(..., T', D) encoder states -> row-normalized (..., T', V+1)."""
        if not torch.isfinite(h).all():
            raise ModelError("non-finite encoder states")
        return torch.log_softmax(self.ctc_head(h), dim=-1)

    def encode_utterance(self, feats: np.ndarray):
        """Single utterance -> (h (T', D), ctc log-posteriors (T', V+1))."""
        x = torch.as_tensor(np.asarray(feats), dtype=self.ctc_head.weight.dtype)
        h = self.encoder.encode_single(x)
        return h, self.ctc_log_posteriors(h)

    def joint_step_log_probs(self, acoustic_scores: torch.Tensor, lm_log_probs=None) -> torch.Tensor:
        """Normalized per-step log posterior under the score combination."""
        logits = acoustic_scores if lm_log_probs is None else acoustic_scores + lm_log_probs
        return torch.log_softmax(logits, dim=-1)

    # -- training loss ----------------------------------------------------

    def forward_losses(self, batch, train: bool = False, generator=None) -> LossBreakdown:
        """Joint loss over a padded batch; infeasible utterances are skipped.

        `batch` carries features (B, T, F), feat_lengths, tokens (B, U),
        token_lengths, ids.
        """
        feats, flens = batch.features, batch.feat_lengths
        tokens, tlens = batch.tokens, batch.token_lengths
        h, hlens = self.encoder(feats, flens, train=train, generator=generator)
        ctc_lp = self.ctc_log_posteriors(h)

        keep, skipped = [], []
        for b in range(feats.shape[0]):
            labels = tokens[b, : int(tlens[b])].tolist()
            if labels and int(hlens[b]) >= min_frames(labels):
                keep.append(b)
            else:
                skipped.append(batch.ids[b])
        if not keep:
            raise ModelError("no utterance in batch fits its CTC lattice")
        sel = torch.tensor(keep, dtype=torch.long)
        h, hlens, ctc_lp = h[sel], hlens[sel], ctc_lp[sel]
        tokens, tlens = tokens[sel], tlens[sel]

        ctc_nll = ctc_loss_batch(ctc_lp, hlens, tokens, tlens, self.blank_id)
        alignments = forced_alignment_batch(ctc_lp, hlens, tokens, tlens, self.blank_id)

        B = len(keep)
        U_max = int(tlens.max())
        steps = U_max + 1  # predicts y_1..y_U then eos
        qidx = torch.full((B, steps), self.config.sos_frame, dtype=torch.long)
        lm_in = torch.full((B, steps), self.sos_id, dtype=torch.long)
        targets = torch.full((B, steps), self.eos_id, dtype=torch.long)
        for i in range(B):
            u = int(tlens[i])
            qidx[i, 1 : u + 1] = torch.from_numpy(alignments[i])
            lm_in[i, 1 : u + 1] = tokens[i, :u]
            targets[i, :u] = tokens[i, :u]
            targets[i, u] = self.eos_id
        step_lens = tlens + 1
        step_mask = torch.arange(steps)[None, :] < step_lens[:, None]

        queries = h.gather(1, qidx.unsqueeze(-1).expand(-1, -1, h.shape[-1]))
        frame_mask = torch.arange(h.shape[1])[None, :] < hlens[:, None]
        ac = self.acoustic(
            queries, h, frame_mask, query_frames=qidx, train=train, generator=generator
        )

        if self.lm is not None:
            lm_out = self.lm(lm_in, lengths=step_lens, train=train, generator=generator)
            log_post = self.joint_step_log_probs(ac.scores, lm_out.log_probs)
            lm_rows = lm_out.log_probs.gather(2, targets.unsqueeze(-1)).squeeze(-1)
            lm_nll_b = -(lm_rows * step_mask).sum(dim=1)
        else:
            log_post = self.joint_step_log_probs(ac.scores)
            lm_nll_b = torch.zeros(B, dtype=log_post.dtype)

        ce_rows = log_post.gather(2, targets.unsqueeze(-1)).squeeze(-1)
        ce_b = -(ce_rows * step_mask).sum(dim=1)
        lam = 0.0 if self.lm is None else self.config.lm_weight
        total_b = ce_b + lam * lm_nll_b + self.config.ctc_weight * ctc_nll

        return LossBreakdown(
            total=total_b.mean(),
            attention_ce=ce_b.mean(),
            lm_nll=lm_nll_b.mean(),
            ctc=ctc_nll.mean(),
            n_utterances=B,
            n_tokens=int(step_lens.sum()),
            skipped=skipped,
        )

    # -- internal LM views --------------------------------------------------

    def ilm_log_prob(self, tokens: list[int], features=None) -> float:
        """Internal-LM score of `tokens` (ending in eos): sum of decoder
        log-probs. `features` is accepted to demonstrate there is no
        acoustic path; it is ignored.
        """
        if self.lm is None:
            raise ModelError("model trained without a decoder has no internal LM")
        from .lm import lm_nll

        with torch.no_grad():
            return -float(lm_nll(self.lm, tokens))


@dataclass
class ILMReport:
    identity_max_error: float
    identity_ok: bool
    n_probes: int
    emission_agreement: float | None  # top-k beam hyps sharing t^{u-1}
    beam_size: int

    def to_dict(self) -> dict:
        return {
            "identity_max_error": self.identity_max_error,
            "identity_ok": self.identity_ok,
            "n_probes": self.n_probes,
            "emission_agreement": self.emission_agreement,
            "beam_size": self.beam_size,
        }


def ilm_consistency_check(
    model: HybridModel,
    probe_utterances,
    beam_size: int = 4,
    seed: int = 0,
    tolerance: float = 1e-6,
) -> ILMReport:
    """Two checks behind the decoder-as-LM claim.

    (a) Exact: replacing the acoustic scores with a vocabulary-constant
        vector makes the joint posterior equal the decoder distribution.
    (b) Measured, not asserted: among top-k live beam hypotheses at each
        step, the fraction sharing the same last-emission frame.
    """
    if model.lm is None:
        raise ModelError("no decoder LM to check")
    rng = np.random.default_rng(seed)
    max_err = 0.0
    n = 0
    with torch.no_grad():
        for utt in probe_utterances:
            tokens = [model.sos_id] + list(utt.tokens)
            out = model.lm(torch.tensor([tokens], dtype=torch.long))
            for u in range(out.log_probs.shape[1]):
                row = out.log_probs[0, u]
                const = float(rng.normal())
                post = joint_posterior(torch.full_like(row, const), row)
                err = float((post - torch.softmax(row, dim=-1)).abs().max())
                max_err = max(max_err, err)
                n += 1

    agreement = None
    if beam_size >= 1:
        from .decoding import measure_emission_agreement

        agreement = measure_emission_agreement(model, probe_utterances, beam_size)
    return ILMReport(
        identity_max_error=max_err,
        identity_ok=max_err <= tolerance,
        n_probes=n,
        emission_agreement=agreement,
        beam_size=beam_size,
    )
