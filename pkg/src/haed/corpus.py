"""Synthetic bi-domain speech corpus.

Text is sampled from per-domain Markov chains over a character alphabet,
then rendered to feature frames by a deterministic token->prototype map
plus Gaussian noise. Everything is a pure function of (config, seed), so
datasets regenerate bit-identically. The renderer also emits gold
per-token frame spans, used only by test oracles.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

FEATURE_MAGIC = b"HFEA"

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz .,'"


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


class Tokenizer:
    """Character tokenizer with dense ids: text tokens, then unk/sos/eos.

    The CTC blank is not part of the vocabulary; it lives at index
    ``blank_id == vocab_size``, reserved for the CTC output head only.
    """

    UNK = "<unk>"
    SOS = "<sos>"
    EOS = "<eos>"

    def __init__(self, symbols: list[str]):
        if not symbols:
            raise CorpusError("tokenizer needs at least one text symbol")
        if len(set(symbols)) != len(symbols):
            raise CorpusError("duplicate symbols")
        self.text_tokens = list(symbols)
        self.vocab = self.text_tokens + [self.UNK, self.SOS, self.EOS]
        self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}
        self.unk_id = self.token_to_id[self.UNK]
        self.sos_id = self.token_to_id[self.SOS]
        self.eos_id = self.token_to_id[self.EOS]

    @property
    def text_vocab_size(self) -> int:
        return len(self.text_tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def blank_id(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(ch, self.unk_id) for ch in text]

    def decode(self, ids: list[int]) -> str:
        out = []
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise CorpusError(f"id {i} outside vocabulary")
            out.append(self.vocab[i])
        return "".join(out)

    def to_dict(self) -> dict:
        return {"text_tokens": self.text_tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        return cls(d["text_tokens"])


def build_tokenizer(corpus: list[str]) -> Tokenizer:
    """Build a character tokenizer covering every symbol observed in `corpus`."""
    if not corpus:
        raise CorpusError("empty corpus")
    symbols = sorted({ch for line in corpus for ch in line})
    if not symbols:
        raise CorpusError("corpus contains no symbols")
    return Tokenizer(symbols)


# ---------------------------------------------------------------------------
# Domain text model
# ---------------------------------------------------------------------------


@dataclass
class DomainSpec:
    """A Markov chain over text token ids plus an utterance-length model."""

    name: str
    transition_table: np.ndarray  # (V_text, V_text) row-stochastic
    initial_distribution: np.ndarray  # (V_text,)
    mean_utterance_length: int = 12

    def validate(self) -> None:
        t = np.asarray(self.transition_table, dtype=np.float64)
        p0 = np.asarray(self.initial_distribution, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise CorpusError(f"transition table must be square, got {t.shape}")
        if p0.shape != (t.shape[0],):
            raise CorpusError("initial distribution length does not match table")
        if (t < 0).any() or (p0 < 0).any():
            raise CorpusError("negative probabilities")
        if not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise CorpusError("transition rows must sum to 1")
        if not np.isclose(p0.sum(), 1.0, atol=1e-9):
            raise CorpusError("initial distribution must sum to 1")
        if self.mean_utterance_length < 1:
            raise CorpusError("mean utterance length must be >= 1")


def make_domain_spec(
    name: str,
    n_tokens: int,
    seed: int,
    mean_utterance_length: int = 12,
    concentration: float = 0.5,
    banned_token: int | None = None,
) -> DomainSpec:
    """Draw a random row-stochastic chain from a Dirichlet prior.

    Lower `concentration` gives peakier (more predictable) rows, which is
    what makes a domain worth adapting a language model to. `banned_token`
    (the space character in the default corpus) is excluded from utterance
    starts and from following itself, so no utterance is all-whitespace.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xD0])))
    table = rng.dirichlet(np.full(n_tokens, concentration), size=n_tokens)
    init = rng.dirichlet(np.full(n_tokens, concentration))
    if banned_token is not None:
        table[banned_token, banned_token] = 0.0
        init[banned_token] = 0.0
    table /= table.sum(axis=1, keepdims=True)
    init /= init.sum()
    spec = DomainSpec(name, table, init, mean_utterance_length)
    spec.validate()
    return spec


def sample_text(spec: DomainSpec, n: int, seed: int) -> list[list[int]]:
    """Sample `n` utterances (token id lists) from the domain chain.

    Lengths are geometric with mean `spec.mean_utterance_length`, clipped
    to at most 3x the mean so tail utterances stay renderable.
    """
    spec.validate()
    if n < 1:
        raise CorpusError("n must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7E]))
                              )
    mean_len = spec.mean_utterance_length
    max_len = max(2, 3 * mean_len)
    init_cdf = np.cumsum(spec.initial_distribution)
    trans_cdf = np.cumsum(spec.transition_table, axis=1)
    out = []
    for _ in range(n):
        length = min(int(rng.geometric(1.0 / mean_len)), max_len)
        toks = np.empty(length, dtype=np.int64)
        toks[0] = np.searchsorted(init_cdf, rng.random(), side="right")
        for i in range(1, length):
            toks[i] = np.searchsorted(trans_cdf[toks[i - 1]], rng.random(), side="right")
        out.append([int(t) for t in toks])
    return out


def bigram_distribution(sequences: list[list[int]], n_tokens: int) -> np.ndarray:
    """Empirical joint bigram distribution over (prev, next) pairs."""
    counts = np.zeros((n_tokens, n_tokens), dtype=np.float64)
    for seq in sequences:
        for a, b in zip(seq, seq[1:]):
            counts[a, b] += 1
    total = counts.sum()
    return counts / total if total > 0 else counts


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


# ---------------------------------------------------------------------------
# Feature renderer
# ---------------------------------------------------------------------------


@dataclass
class RenderSpec:
    feature_dim: int = 16
    frames_per_token: tuple[int, int] = (6, 10)
    prototype_seed: int = 17
    noise_std: float = 0.0

    def validate(self) -> None:
        lo, hi = self.frames_per_token
        if self.feature_dim < 1 or lo < 1 or hi < lo:
            raise CorpusError("invalid render spec")
        if self.noise_std < 0:
            raise CorpusError("noise_std must be >= 0")


def token_prototype(token_id: int, spec: RenderSpec) -> np.ndarray:
    """Deterministic prototype vector for a token id, N(0, I) per dimension."""
    ss = np.random.SeedSequence(entropy=spec.prototype_seed, spawn_key=(token_id,))
    rng = np.random.Generator(np.random.PCG64(ss))
    return rng.standard_normal(spec.feature_dim).astype(np.float32)


def render_features(
    tokens: list[int], spec: RenderSpec, seed: int
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Render token ids to a (T, F) float32 feature array plus gold spans.

    Each token occupies a uniformly sampled number of frames; its frames are
    prototype(token) + noise_std * N(0, I). Spans partition [0, T).
    """
    spec.validate()
    if not tokens:
        raise CorpusError("empty token sequence")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xF3])))
    lo, hi = spec.frames_per_token
    durations = rng.integers(lo, hi + 1, size=len(tokens))
    total = int(durations.sum())
    feats = np.empty((total, spec.feature_dim), dtype=np.float32)
    spans = []
    start = 0
    for tok, dur in zip(tokens, durations):
        proto = token_prototype(int(tok), spec)
        block = np.broadcast_to(proto, (int(dur), spec.feature_dim)).copy()
        if spec.noise_std > 0:
            noise = rng.standard_normal((int(dur), spec.feature_dim))
            block = (block.astype(np.float64) + spec.noise_std * noise).astype(np.float32)
        end = start + int(dur)
        feats[start:end] = block
        spans.append((start, end))
        start = end
    return feats, spans


# ---------------------------------------------------------------------------
# Feature file + manifest I/O
# ---------------------------------------------------------------------------


def _atomic_write_bytes(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_features(path: str, feats: np.ndarray) -> None:
    """Binary feature file: magic, uint32 T, uint32 F, row-major float32 LE."""
    feats = np.ascontiguousarray(feats, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<II", feats.shape[0], feats.shape[1])
    _atomic_write_bytes(path, header + feats.tobytes())


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: bad feature file magic")
    t, fdim = struct.unpack("<II", raw[4:12])
    arr = np.frombuffer(raw[12:], dtype="<f4")
    if arr.size != t * fdim:
        raise CorpusError(f"{path}: truncated feature file")
    return arr.reshape(t, fdim).copy()


@dataclass
class ManifestRecord:
    """One utterance. Text-only records have path/frames/spans set to None."""

    id: str
    path: str | None
    tokens: list[int]
    domain: str
    frames: int | None
    spans: list[list[int]] | None

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "path": self.path,
                "tokens": self.tokens,
                "domain": self.domain,
                "frames": self.frames,
                "spans": self.spans,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        d = json.loads(line)
        return cls(
            id=d["id"],
            path=d["path"],
            tokens=list(d["tokens"]),
            domain=d["domain"],
            frames=d["frames"],
            spans=d["spans"],
        )


def write_manifest(path: str, records: list[ManifestRecord]) -> None:
    data = "".join(r.to_json() + "\n" for r in records)
    _atomic_write_bytes(path, data.encode("utf-8"))


def read_manifest(path: str) -> list[ManifestRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(ManifestRecord.from_json(line))
    return records


# ---------------------------------------------------------------------------
# Dataset builder
# ---------------------------------------------------------------------------


@dataclass
class DomainConfig:
    name: str
    domain_seed: int = 1
    concentration: float = 0.5
    mean_utterance_length: int = 12
    train: int = 0
    dev: int = 0
    test: int = 0
    text_only: int = 0


@dataclass
class CorpusConfig:
    alphabet: str = DEFAULT_ALPHABET
    feature_dim: int = 16
    frames_per_token: tuple[int, int] = (6, 10)
    prototype_seed: int = 17
    noise_std: float = 1.6
    domains: list[DomainConfig] = field(default_factory=list)

    def render_spec(self) -> RenderSpec:
        return RenderSpec(
            feature_dim=self.feature_dim,
            frames_per_token=tuple(self.frames_per_token),
            prototype_seed=self.prototype_seed,
            noise_std=self.noise_std,
        )

    def tokenizer(self) -> Tokenizer:
        return build_tokenizer([self.alphabet])


SPLITS = ("train", "dev", "test")


def build_dataset(config: CorpusConfig, out_dir: str, seed: int) -> dict[str, str]:
    """Render every domain/split to disk; returns manifest paths keyed by name.

    Layout: <out>/features/<domain>/<split>/<id>.fea and
    <out>/manifests/<domain>_<split>.jsonl. Adaptation domains (everything
    after the first) may also carry a text-only split with no audio.
    """
    if len(config.domains) < 2:
        raise CorpusError("need a general domain plus at least one adaptation domain")
    names = [d.name for d in config.domains]
    if len(set(names)) != len(names):
        raise CorpusError("domain names overlap; output paths would collide")

    tokenizer = config.tokenizer()
    render = config.render_spec()
    space_id = tokenizer.token_to_id.get(" ")
    manifest_dir = os.path.join(out_dir, "manifests")
    os.makedirs(manifest_dir, exist_ok=True)

    manifests: dict[str, str] = {}
    for d_idx, dom in enumerate(config.domains):
        spec = make_domain_spec(
            dom.name,
            tokenizer.text_vocab_size,
            dom.domain_seed,
            dom.mean_utterance_length,
            dom.concentration,
            banned_token=space_id,
        )
        for s_idx, split in enumerate(SPLITS):
            n = getattr(dom, split)
            if n <= 0:
                continue
            feat_dir = os.path.join(out_dir, "features", dom.name, split)
            os.makedirs(feat_dir, exist_ok=True)
            text_seed = int(np.random.SeedSequence([seed, d_idx, s_idx]).generate_state(1)[0])
            texts = sample_text(spec, n, text_seed)
            records = []
            for i, toks in enumerate(texts):
                utt_id = f"{dom.name}-{split}-{i:05d}"
                render_seed = int(
                    np.random.SeedSequence([seed, d_idx, s_idx, i, 1]).generate_state(1)[0]
                )
                feats, spans = render_features(toks, render, render_seed)
                path = os.path.join(feat_dir, utt_id + ".fea")
                write_features(path, feats)
                records.append(
                    ManifestRecord(
                        id=utt_id,
                        path=path,
                        tokens=toks,
                        domain=dom.name,
                        frames=feats.shape[0],
                        spans=[[s, e] for s, e in spans],
                    )
                )
            mpath = os.path.join(manifest_dir, f"{dom.name}_{split}.jsonl")
            write_manifest(mpath, records)
            manifests[f"{dom.name}_{split}"] = mpath
        if dom.text_only > 0:
            text_seed = int(np.random.SeedSequence([seed, d_idx, 99]).generate_state(1)[0])
            texts = sample_text(spec, dom.text_only, text_seed)
            records = [
                ManifestRecord(
                    id=f"{dom.name}-text-{i:05d}",
                    path=None,
                    tokens=toks,
                    domain=dom.name,
                    frames=None,
                    spans=None,
                )
                for i, toks in enumerate(texts)
            ]
            mpath = os.path.join(manifest_dir, f"{dom.name}_text.jsonl")
            write_manifest(mpath, records)
            manifests[f"{dom.name}_text"] = mpath
    return manifests
