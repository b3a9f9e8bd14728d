"""Shared fixtures-in-code for model-level tests: tiny corpora and models."""

from __future__ import annotations

import numpy as np
import torch

from haed.acoustic import AcousticConfig
from haed.config import RunConfig, default_run_config
from haed.corpus import CorpusConfig, DomainConfig, build_dataset
from haed.data import Utterance, make_batch
from haed.encoder import EncoderConfig
from haed.lm import LMConfig
from haed.model import HybridModel, ModelConfig


def tiny_model_config(layers: int = 1, dim: int = 8, factor: int = 2) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(
            layers=layers, model_dim=dim, heads=2, feedforward_dim=16,
            subsampling_factor=factor, dropout=0.0,
        ),
        lm=LMConfig(layers=layers, model_dim=dim, heads=2, feedforward_dim=16, dropout=0.0),
        acoustic=AcousticConfig(layers=layers, model_dim=dim, feedforward_dim=16, dropout=0.0),
        lm_weight=0.8,
        ctc_weight=0.2,
    )


def tiny_model(
    vocab_text: int = 3,
    feature_dim: int = 4,
    dtype=torch.float64,
    seed: int = 99,
    randomize_scale: float = 0.3,
    config: ModelConfig | None = None,
) -> HybridModel:
    vocab_size = vocab_text + 3
    model = HybridModel(
        feature_dim=feature_dim,
        vocab_size=vocab_size,
        sos_id=vocab_text + 1,
        eos_id=vocab_text + 2,
        config=config or tiny_model_config(),
        dtype=dtype,
    )
    model.init_parameters(seed)
    if randomize_scale:
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for _, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
                p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * randomize_scale)
    return model


def random_utterances(
    n: int,
    vocab_text: int = 3,
    feature_dim: int = 4,
    seed: int = 0,
    min_tokens: int = 2,
    max_tokens: int = 4,
    frames_per_token: int = 4,
) -> list[Utterance]:
    rng = np.random.default_rng(seed)
    utts = []
    for i in range(n):
        u = int(rng.integers(min_tokens, max_tokens + 1))
        tokens = rng.integers(0, vocab_text, size=u).tolist()
        feats = rng.normal(size=(u * frames_per_token, feature_dim)).astype(np.float32)
        utts.append(Utterance(f"u{i:03d}", feats, tokens, "test"))
    return utts


def tiny_batch(n=3, seed=0, dtype=torch.float64, **kw):
    return make_batch(random_utterances(n, seed=seed, **kw), dtype=dtype)


def small_run_config(tmp_dir: str | None = None) -> RunConfig:
    """A fast end-to-end config: small corpus, short training."""
    cfg = default_run_config()
    cfg.corpus = CorpusConfig(
        alphabet="abcdef ",
        feature_dim=8,
        frames_per_token=(4, 6),
        prototype_seed=17,
        noise_std=1.2,
        domains=[
            DomainConfig(name="general", domain_seed=101, concentration=0.4,
                         mean_utterance_length=6, train=96, dev=24, test=24),
            DomainConfig(name="target", domain_seed=202, concentration=0.12,
                         mean_utterance_length=6, dev=16, test=24, text_only=64),
        ],
    )
    cfg.model.encoder = EncoderConfig(layers=1, model_dim=32, heads=4,
                                      feedforward_dim=64, subsampling_factor=2, dropout=0.0)
    cfg.model.lm = LMConfig(layers=1, model_dim=32, heads=4, feedforward_dim=64, dropout=0.0)
    cfg.model.acoustic = AcousticConfig(layers=1, model_dim=32, feedforward_dim=64, dropout=0.0)
    cfg.trainer.batch_size = 16
    cfg.trainer.max_steps = 60
    cfg.trainer.warmup_steps = 20
    cfg.trainer.lr = 3e-3
    cfg.trainer.eval_interval = 30
    cfg.trainer.eval_utterances = 12
    return cfg


def build_corpus(cfg: RunConfig, out_dir: str, seed: int = 5) -> dict[str, str]:
    return build_dataset(cfg.corpus, out_dir, seed)
