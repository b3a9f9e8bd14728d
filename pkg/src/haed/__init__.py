"""Desk-scale hybrid attention encoder-decoder speech recognition.

A factorized end-to-end ASR model whose decoder is split into a pure
causal language model and a cross-attention-only acoustic branch queried
at CTC forced-alignment frames. Because the LM half never sees acoustics,
it can be evaluated, swapped, and adapted on text alone; decoding
supports joint attention+CTC beam search with optional shallow-fusion or
density-ratio n-gram integration.
"""

from .acoustic import AcousticBranch, AcousticConfig, AcousticScores, gather_queries
from .adaptation import AdaptConfig, adapt_decoder, kl_term
from .config import RunConfig, default_run_config
from .corpus import (
    CorpusConfig,
    DomainConfig,
    DomainSpec,
    RenderSpec,
    Tokenizer,
    build_dataset,
    build_tokenizer,
    render_features,
    sample_text,
)
from .ctc import (
    CTCPrefixScorer,
    ctc_loss,
    ctc_loss_batch,
    forced_alignment,
    label_occupancy,
    prune_blank_frames,
)
from .decoding import FusionConfig, beam_search, decode_set, fused_step_score
from .encoder import Encoder, EncoderConfig
from .lm import DecoderLM, LMConfig, lm_forward, lm_nll, lm_perplexity
from .metrics import EvalReport, evaluate, wer
from .model import HybridModel, ModelConfig, ilm_consistency_check, joint_posterior
from .ngram import NGramLM, ngram_train
from .trainer import TrainResult, train

__all__ = [
    "AcousticBranch", "AcousticConfig", "AcousticScores", "gather_queries",
    "AdaptConfig", "adapt_decoder", "kl_term",
    "RunConfig", "default_run_config",
    "CorpusConfig", "DomainConfig", "DomainSpec", "RenderSpec", "Tokenizer",
    "build_dataset", "build_tokenizer", "render_features", "sample_text",
    "CTCPrefixScorer", "ctc_loss", "ctc_loss_batch", "forced_alignment",
    "label_occupancy", "prune_blank_frames",
    "FusionConfig", "beam_search", "decode_set", "fused_step_score",
    "Encoder", "EncoderConfig",
    "DecoderLM", "LMConfig", "lm_forward", "lm_nll", "lm_perplexity",
    "EvalReport", "evaluate", "wer",
    "HybridModel", "ModelConfig", "ilm_consistency_check", "joint_posterior",
    "NGramLM", "ngram_train",
    "TrainResult", "train",
]

__version__ = "0.1.0"
