"""Run configuration: one JSON document drives every pipeline stage.

Loading is fail-closed (unknown keys are an error) and every stated
default lives on the dataclasses here or in the owning modules. The
fingerprint (sha256 of the canonical JSON) names run directories and is
embedded in reports so any artifact can be traced to its exact config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field

from .acoustic import AcousticConfig
from .adaptation import AdaptConfig
from .corpus import CorpusConfig, DomainConfig
from .encoder import EncoderConfig
from .lm import LMConfig
from .model import ModelConfig

RUN_ROOT_ENV = "HAED_RUN_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class TrainerConfig:
    seed: int = 11
    batch_size: int = 16
    max_steps: int = 3000
    lr: float = 3e-4
    warmup_steps: int = 200
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    eval_interval: int = 500
    eval_utterances: int = 64  # dev subset for periodic error rates
    external_lm_init: str | None = None  # checkpoint whose lm partition seeds ours
    torch_threads: int = 1  # single thread keeps reruns bit-identical


@dataclass
class DecodingConfig:
    beam_size: int = 4
    beta: float | None = None  # None: use the model's ctc_weight
    prune_threshold: float | None = None  # blank-pruning off unless set
    fusion_mode: str = "none"
    target_lm_weight: float = 0.1
    source_lm_weight: float = 0.1
    ngram_order: int = 3
    ngram_discount: float = 0.1
    length_normalize: bool = True


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    adaptation: AdaptConfig = field(default_factory=AdaptConfig)
    decoding: DecodingConfig = field(default_factory=DecodingConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _hydrate(cls, d, "")

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def _hydrate(cls, value, path: str):
    """Build a dataclass tree from plain JSON data, rejecting unknown keys."""
    if not dataclasses.is_dataclass(cls):
        return _coerce(cls, value, path)
    if not isinstance(value, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, raw in value.items():
        kwargs[key] = _hydrate_typed(hints[key], raw, f"{path}.{key}" if path else key)
    return cls(**kwargs)


def _hydrate_typed(hint, raw, path: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw is None:
            return None
        return _hydrate_typed(args[0], raw, path)
    if origin in (list, typing.List):
        (item_type,) = typing.get_args(hint)
        if not isinstance(raw, list):
            raise ConfigError(f"{path}: expected a list")
        return [_hydrate_typed(item_type, v, f"{path}[{i}]") for i, v in enumerate(raw)]
    if origin in (tuple, typing.Tuple):
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(raw)
    if dataclasses.is_dataclass(hint):
        return _hydrate(hint, raw, path)
    return _coerce(hint, raw, path)


def _coerce(hint, raw, path: str):
    if hint is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    if hint is int and isinstance(raw, int) and not isinstance(raw, bool):
        return raw
    if hint is bool and isinstance(raw, bool):
        return raw
    if hint is str and isinstance(raw, str):
        return raw
    if hint is typing.Any:
        return raw
    raise ConfigError(f"{path}: cannot interpret {raw!r} as {hint}")


def default_run_config() -> RunConfig:
    """Desk-scale defaults: a general domain plus one low-entropy target
    domain with text-only adaptation data."""
    cfg = RunConfig()
    cfg.corpus.domains = [
        DomainConfig(
            name="general",
            domain_seed=101,
            concentration=0.4,
            mean_utterance_length=12,
            train=2000,
            dev=150,
            test=200,
        ),
        DomainConfig(
            name="target",
            domain_seed=202,
            concentration=0.12,
            mean_utterance_length=12,
            dev=100,
            test=200,
            text_only=400,
        ),
    ]
    return cfg


def run_root(default: str = "runs") -> str:
    return os.environ.get(RUN_ROOT_ENV, default)


def run_directory(cfg: RunConfig, root: str | None = None) -> str:
    return os.path.join(root or run_root(), cfg.fingerprint())


def build_model_from_config(cfg: RunConfig, dtype=None):
    """Fresh (uninitialized) model matching the config's corpus/vocab."""
    import torch

    from .model import HybridModel

    tok = cfg.corpus.tokenizer()
    return HybridModel(
        feature_dim=cfg.corpus.feature_dim,
        vocab_size=tok.vocab_size,
        sos_id=tok.sos_id,
        eos_id=tok.eos_id,
        config=cfg.model,
        dtype=dtype or torch.float32,
    )


def build_model_from_snapshot(snapshot: dict, dtype=None):
    """Model factory used when loading checkpoints (config snapshot dict)."""
    return build_model_from_config(RunConfig.from_dict(snapshot), dtype=dtype)
