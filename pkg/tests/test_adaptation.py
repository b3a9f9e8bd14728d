"""KL-regularized text-only adaptation of the decoder partition."""

import math
import os

import numpy as np
import pytest
import torch
from helpers import tiny_model
from hypothesis import given, settings
from hypothesis import strategies as st

from haed.adaptation import AdaptationError, AdaptConfig, adapt_decoder, kl_term
from haed.checkpoint import load_checkpoint, load_into_model, save_checkpoint
from haed.data import Utterance
from haed.lm import lm_perplexity


class TestKLTerm:
    def test_identical_distributions_zero(self):
        p = torch.softmax(torch.randn(3, 7, dtype=torch.float64), dim=-1)
        assert float(kl_term(p, p)) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_vs_uniform_closed_form(self):
        v = 11
        p = torch.zeros(v, dtype=torch.float64)
        p[3] = 1.0
        q = torch.full((v,), 1.0 / v, dtype=torch.float64)
        assert float(kl_term(p, q)) == pytest.approx(math.log(v), abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gibbs_inequality(self, seed):
        rng = np.random.default_rng(seed)
        p = torch.tensor(rng.dirichlet(np.ones(6)))
        q = torch.tensor(rng.dirichlet(np.ones(6)))
        assert float(kl_term(p, q)) >= -1e-12

    def test_zero_baseline_mass_clamped(self):
        p = torch.tensor([0.5, 0.5], dtype=torch.float64)
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        val = float(kl_term(p, q))
        assert math.isfinite(val)
        assert val > 0


def make_baseline(tmp_path, seed=3):
    model = tiny_model(dtype=torch.float32, seed=seed)
    ckpt = save_checkpoint(
        str(tmp_path / "baseline"), model, {"kind": "tiny"}, step=0, seed=seed
    )
    return model, ckpt


def builder(_snapshot):
    return tiny_model(dtype=torch.float32, randomize_scale=0.0)


def text_utts(sequences):
    return [Utterance(f"t{i}", None, list(s), "target") for i, s in enumerate(sequences)]


def skewed_text(n, seed, vocab_text=3):
    rng = np.random.default_rng(seed)
    probs = np.array([0.7, 0.2, 0.1])
    return [rng.choice(vocab_text, p=probs, size=rng.integers(2, 6)).tolist() for _ in range(n)]


def array_bytes(ckpt, names):
    return {n: open(ckpt.array_path(n), "rb").read() for n in names}


class TestAdaptDecoder:
    def test_noop_returns_identical_checkpoint(self, tmp_path):
        _, base = make_baseline(tmp_path)
        cfg = AdaptConfig(alpha=0.0, sweeps=0, lr=1e-3)
        out = adapt_decoder(base, text_utts(skewed_text(8, 0)), cfg, str(tmp_path / "out"), builder)
        base_bytes = array_bytes(base, base.metadata["arrays"])
        out_bytes = array_bytes(out, out.metadata["arrays"])
        assert base_bytes == out_bytes

    def test_partition_isolation(self, tmp_path):
        _, base = make_baseline(tmp_path)
        cfg = AdaptConfig(alpha=0.1, sweeps=2, lr=1e-2)
        out = adapt_decoder(base, text_utts(skewed_text(16, 1)), cfg, str(tmp_path / "out"), builder)
        changed = unchanged = 0
        for name in base.metadata["arrays"]:
            same = open(base.array_path(name), "rb").read() == open(out.array_path(name), "rb").read()
            if base.partitions[name] == "lm":
                changed += not same
            else:
                assert same, f"non-lm array {name} modified by adaptation"
                unchanged += 1
        assert changed > 0 and unchanged > 0

    def test_empty_text_rejected(self, tmp_path):
        _, base = make_baseline(tmp_path)
        with pytest.raises(AdaptationError):
            adapt_decoder(base, [], AdaptConfig(), str(tmp_path / "out"), builder)

    def test_target_ppl_strictly_improves(self, tmp_path):
        _, base = make_baseline(tmp_path)
        text = skewed_text(32, 2)
        cfg = AdaptConfig(alpha=0.0, sweeps=6, lr=1e-2, batch_size=8)
        out = adapt_decoder(base, text_utts(text), cfg, str(tmp_path / "out"), builder)
        before = builder(None)
        load_into_model(before, base)
        after = builder(None)
        load_into_model(after, load_checkpoint(out.directory))
        held_out = skewed_text(16, 99)
        eos = before.eos_id
        ppl_before = lm_perplexity(before.lm, held_out, eos)
        ppl_after = lm_perplexity(after.lm, held_out, eos)
        assert ppl_after < ppl_before

    def test_kl_to_baseline_monotone_in_alpha(self, tmp_path):
        _, base = make_baseline(tmp_path)
        text = skewed_text(24, 3)
        finals = []
        for alpha in (0.0, 0.1, 1.0):
            cfg = AdaptConfig(alpha=alpha, sweeps=4, lr=1e-2, batch_size=8, seed=5)
            out = adapt_decoder(
                base, text_utts(text), cfg, str(tmp_path / f"out{alpha}"), builder
            )
            baseline_model = builder(None)
            load_into_model(baseline_model, base)
            adapted_model = builder(None)
            load_into_model(adapted_model, load_checkpoint(out.directory))
            total = 0.0
            with torch.no_grad():
                for seq in text:
                    toks = torch.tensor([[adapted_model.sos_id] + seq], dtype=torch.long)
                    p = adapted_model.lm(toks).log_probs.exp()
                    q = baseline_model.lm(toks).log_probs.exp()
                    total += float(kl_term(p, q))
            finals.append(total)
        assert finals[0] >= finals[1] >= finals[2]

    def test_general_degradation_smaller_with_kl(self, tmp_path):
        # fit a "general" decoder first, then adapt toward different text
        _, base0 = make_baseline(tmp_path)
        general = skewed_text(48, 7)
        fit_cfg = AdaptConfig(alpha=0.0, sweeps=8, lr=1e-2, batch_size=8)
        general_ckpt = adapt_decoder(
            base0, text_utts(general), fit_cfg, str(tmp_path / "general"), builder
        )
        rng = np.random.default_rng(11)
        target = [rng.choice(3, p=[0.05, 0.15, 0.8], size=rng.integers(2, 6)).tolist()
                  for _ in range(32)]
        ppl_general = {}
        for alpha in (0.0, 0.1):
            cfg = AdaptConfig(alpha=alpha, sweeps=4, lr=1e-2, batch_size=8, seed=5)
            out = adapt_decoder(
                general_ckpt, text_utts(target), cfg, str(tmp_path / f"ad{alpha}"), builder
            )
            m = builder(None)
            load_into_model(m, load_checkpoint(out.directory))
            ppl_general[alpha] = lm_perplexity(m.lm, general, m.eos_id)
        base_model = builder(None)
        load_into_model(base_model, general_ckpt)
        ppl_base = lm_perplexity(base_model.lm, general, base_model.eos_id)
        # KL regularization keeps the adapted decoder closer to the general one
        assert ppl_general[0.1] - ppl_base < ppl_general[0.0] - ppl_base
