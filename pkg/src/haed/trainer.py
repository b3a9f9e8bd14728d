"""Training loop: AdamW with linear warmup, deterministic batch order.

All randomness is a pure function of (seed, step): batch order comes from
per-epoch seeded permutations and dropout from a per-step generator, so a
run resumed from a checkpoint regenerates exactly the batches and masks
an uninterrupted run would see.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_into_model,
    load_optimizer_state,
    save_checkpoint,
)
from .config import RunConfig, build_model_from_config
from .data import batches_for_step_range, load_utterances
from .lm import lm_perplexity
from .metrics import edit_counts


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint_dir: str
    metrics_path: str
    steps: int
    last_eval: dict


def _step_generator(seed: int, step: int) -> torch.Generator:
    mixed = int(np.random.SeedSequence([seed, 0xDD, step]).generate_state(1)[0])
    return torch.Generator().manual_seed(mixed)


def quick_error_rates(model, utterances, tokenizer, beam_size: int = 1) -> dict:
    """Pooled WER/TER from a greedy (or small-beam) decode of a subset."""
    from .decoding import beam_search

    word_err = word_ref = tok_err = tok_ref = 0
    for utt in utterances:
        res = beam_search(model, utt.features, tokenizer, beam_size=beam_size)
        ref_words = tokenizer.decode(list(utt.tokens)).split()
        hyp_words = res.text.split()
        s, i, d = edit_counts(ref_words, hyp_words)
        word_err += s + i + d
        word_ref += len(ref_words)
        ts, ti, td = edit_counts(list(utt.tokens), list(res.tokens))
        tok_err += ts + ti + td
        tok_ref += len(utt.tokens)
    return {
        "wer": word_err / max(1, word_ref),
        "ter": tok_err / max(1, tok_ref),
    }


def train(
    cfg: RunConfig,
    train_manifest: str,
    dev_manifest: str | None,
    out_dir: str,
    max_steps: int | None = None,
    resume_from: str | None = None,
) -> TrainResult:
    """Train a model from scratch (or resume) and checkpoint it at the end."""
    tcfg = cfg.trainer
    torch.set_num_threads(tcfg.torch_threads)
    max_steps = tcfg.max_steps if max_steps is None else max_steps
    os.makedirs(out_dir, exist_ok=True)

    tokenizer = cfg.corpus.tokenizer()
    train_utts = load_utterances(train_manifest)
    if not train_utts:
        raise ValueError("training manifest is empty")
    dev_utts = load_utterances(dev_manifest) if dev_manifest else []

    model = build_model_from_config(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay
    )
    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        load_into_model(model, ckpt)
        load_optimizer_state(optimizer, model, ckpt)
        start_step = ckpt.step
    else:
        model.init_parameters(tcfg.seed)
        if tcfg.external_lm_init:
            if model.lm is None:
                raise ValueError("external_lm_init set but model has no decoder LM")
            lm_ckpt = load_checkpoint(tcfg.external_lm_init)
            load_into_model(model, lm_ckpt, partitions=["lm"])

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    mode = "a" if resume_from is not None else "w"
    last_eval: dict = {}
    with open(metrics_path, mode, encoding="utf-8") as log:
        for step, batch in batches_for_step_range(
            train_utts, tcfg.batch_size, tcfg.seed, start_step, max_steps
        ):
            gen = _step_generator(tcfg.seed, step)
            try:
                breakdown = model.forward_losses(batch, train=True, generator=gen)
            except ValueError as exc:
                if "non-finite" in str(exc):
                    raise TrainingDivergedError(
                        f"non-finite activations at step {step}: {exc}"
                    ) from exc
                raise
            loss = breakdown.total
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}: {breakdown.scalars()}"
                )
            optimizer.zero_grad()
            loss.backward()
            if tcfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
            lr = tcfg.lr * min(1.0, (step + 1) / max(1, tcfg.warmup_steps))
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.step()
            with torch.no_grad():
                for name, p in model.named_parameters():
                    if not torch.isfinite(p).all():
                        raise TrainingDivergedError(
                            f"parameter {name} became non-finite after step {step}"
                        )

            entry = {"step": step, "lr": lr, **breakdown.scalars()}
            if dev_utts and (step + 1) % tcfg.eval_interval == 0:
                entry.update(_dev_eval(model, dev_utts, tokenizer, tcfg, cfg))
                last_eval = {k: entry[k] for k in ("dev_wer", "dev_ter", "dev_ppl")}
            log.write(json.dumps(entry, sort_keys=True) + "\n")

        if dev_utts and not last_eval:
            final = _dev_eval(model, dev_utts, tokenizer, tcfg, cfg)
            log.write(json.dumps({"step": max_steps, **final}, sort_keys=True) + "\n")
            last_eval = final

    ckpt_dir = os.path.join(out_dir, "checkpoint")
    save_checkpoint(
        ckpt_dir,
        model,
        cfg.to_dict(),
        step=max_steps,
        seed=tcfg.seed,
        extra={"train_manifest": os.path.abspath(train_manifest)},
        optimizer=optimizer,
    )
    return TrainResult(ckpt_dir, metrics_path, max_steps, last_eval)


def _dev_eval(model, dev_utts, tokenizer, tcfg, cfg) -> dict:
    subset = dev_utts[: tcfg.eval_utterances]
    with torch.no_grad():
        rates = quick_error_rates(model, subset, tokenizer)
        out = {"dev_wer": rates["wer"], "dev_ter": rates["ter"], "dev_ppl": None}
        if model.lm is not None:
            out["dev_ppl"] = lm_perplexity(
                model.lm, [u.tokens for u in subset], tokenizer.eos_id
            )
    return out


def next_step_loss(checkpoint_dir: str, train_manifest: str) -> float:
    """Loss the next training step would see, reconstructed from a
    checkpoint alone; used to verify save/resume determinism."""
    ckpt = load_checkpoint(checkpoint_dir)
    cfg = RunConfig.from_dict(ckpt.config)
    torch.set_num_threads(cfg.trainer.torch_threads)
    model = build_model_from_config(cfg)
    load_into_model(model, ckpt)
    utts = load_utterances(train_manifest)
    step = ckpt.step
    for _, batch in batches_for_step_range(
        utts, cfg.trainer.batch_size, cfg.trainer.seed, step, step + 1
    ):
        gen = _step_generator(cfg.trainer.seed, step)
        with torch.no_grad():
            breakdown = model.forward_losses(batch, train=True, generator=gen)
        return float(breakdown.total)
    raise ValueError("no batch available")
