"""Text-only adaptation of the decoder LM partition.

Fine-tunes only the `lm` parameters against adaptation text with a KL
penalty pulling the adapted decoder's output distributions toward the
frozen baseline decoder's, which limits drift on the original domain.
Loss per step: -log p_adapted(y_u | y_<u) + alpha * KL(adapted || baseline).
Encoder, CTC head, and acoustic branch are never touched: every non-lm
array in the adapted checkpoint is byte-identical to the baseline's.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Utterance, epoch_permutation

KL_EPS = 1e-10


class AdaptationError(ValueError):
    pass


@dataclass
class AdaptConfig:
    alpha: float = 0.1  # KL weight
    lr: float = 2e-4  # desk-scale sweet spot: big target gain, tiny drift
    sweeps: int = 1
    batch_size: int = 16
    seed: int = 23

    def validate(self) -> None:
        if self.alpha < 0:
            raise AdaptationError("alpha must be >= 0")
        if self.sweeps < 0 or self.batch_size < 1:
            raise AdaptationError("invalid sweeps/batch_size")


def kl_term(adapted_probs: torch.Tensor, baseline_probs: torch.Tensor) -> torch.Tensor:
    """KL(adapted || baseline) summed over steps; rows are distributions.

    Zero baseline mass under nonzero adapted mass is clamped at 1e-10
    rather than letting the divergence blow up.
    """
    p = torch.as_tensor(adapted_probs)
    q = torch.as_tensor(baseline_probs).clamp_min(KL_EPS)
    logp = torch.where(p > 0, torch.log(p.clamp_min(KL_EPS)), torch.zeros_like(p))
    return (p * (logp - torch.log(q))).sum()


def _text_batches(sequences: list[list[int]], batch_size: int, seed: int, sweeps: int):
    n = len(sequences)
    for sweep in range(sweeps):
        perm = epoch_permutation(n, seed, sweep)
        for start in range(0, n, batch_size):
            yield [sequences[i] for i in perm[start : start + batch_size]]


def _padded_lm_batch(seqs: list[list[int]], sos_id: int, eos_id: int):
    steps = max(len(s) for s in seqs) + 1
    B = len(seqs)
    inp = torch.full((B, steps), sos_id, dtype=torch.long)
    tgt = torch.full((B, steps), eos_id, dtype=torch.long)
    lens = torch.zeros(B, dtype=torch.long)
    for i, s in enumerate(seqs):
        u = len(s)
        inp[i, 1 : u + 1] = torch.tensor(s, dtype=torch.long)
        tgt[i, :u] = torch.tensor(s, dtype=torch.long)
        lens[i] = u + 1
    mask = torch.arange(steps)[None, :] < lens[:, None]
    return inp, tgt, lens, mask


def adapt_decoder(
    baseline: Checkpoint | str,
    text_utterances: list[Utterance],
    cfg: AdaptConfig,
    out_dir: str,
    build_model,
) -> Checkpoint:
    """Adapt the decoder on text; returns the adapted checkpoint.

    `build_model` maps a config snapshot dict to a fresh HybridModel (the
    config module provides it; injected here to keep this module free of
    config parsing). With sweeps=0 the output equals the baseline.
    """
    cfg.validate()
    if isinstance(baseline, str):
        baseline = load_checkpoint(baseline)
    sequences = [list(u.tokens) for u in text_utterances]
    if not sequences:
        raise AdaptationError("adaptation text is empty")

    from .checkpoint import load_into_model

    model = build_model(baseline.config)
    load_into_model(model, baseline)
    if model.lm is None:
        raise AdaptationError("baseline has no decoder LM to adapt")
    reference = build_model(baseline.config)
    load_into_model(reference, baseline)
    for p in reference.parameters():
        p.requires_grad_(False)

    optimizer = torch.optim.AdamW(model.lm.parameters(), lr=cfg.lr, weight_decay=0.0)
    sos, eos = model.sos_id, model.eos_id
    steps_done = 0
    for batch in _text_batches(sequences, cfg.batch_size, cfg.seed, cfg.sweeps):
        inp, tgt, lens, mask = _padded_lm_batch(batch, sos, eos)
        out = model.lm(inp, lengths=lens)
        picked = out.log_probs.gather(2, tgt.unsqueeze(-1)).squeeze(-1)
        ce = -(picked * mask).sum()
        loss = ce
        if cfg.alpha > 0:
            with torch.no_grad():
                base_out = reference.lm(inp, lengths=lens)
                base_probs = base_out.log_probs.exp()
            probs = out.log_probs.exp()
            kl = kl_term(probs[mask], base_probs[mask])
            loss = ce + cfg.alpha * kl
        loss = loss / int(mask.sum())
        if not torch.isfinite(loss):
            raise AdaptationError(f"non-finite adaptation loss at step {steps_done}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        steps_done += 1

    extra = dict(baseline.metadata.get("extra") or {})
    extra["adaptation"] = {
        "alpha": cfg.alpha,
        "lr": cfg.lr,
        "sweeps": cfg.sweeps,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "steps": steps_done,
        "baseline": os.path.abspath(baseline.directory),
    }
    ckpt = save_checkpoint(
        out_dir,
        model,
        baseline.config,
        step=baseline.step,
        seed=cfg.seed,
        extra=extra,
    )
    return ckpt
