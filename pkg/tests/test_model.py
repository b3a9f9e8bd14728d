"""Joint model: score combination, loss, checkpointing, internal-LM views."""

import math

import numpy as np
import pytest
import torch
from helpers import random_utterances, tiny_batch, tiny_model, tiny_model_config
from oracles import finite_difference_gradients

from haed.checkpoint import load_checkpoint, load_into_model, save_checkpoint
from haed.ctc import label_occupancy
from haed.lm import lm_nll
from haed.model import HybridModel, ModelConfig, ModelError, ilm_consistency_check, joint_posterior


class TestJointPosterior:
    def test_constant_acoustic_recovers_lm(self):
        # the identity the whole factorization rests on
        lm_row = torch.log_softmax(torch.randn(7, dtype=torch.float64), dim=-1)
        for const in (0.0, 1.7, -3.2):
            post = joint_posterior(torch.full((7,), const, dtype=torch.float64), lm_row)
            assert torch.allclose(post, torch.softmax(lm_row, dim=-1), atol=1e-12)

    def test_uniform_lm_recovers_acoustic(self):
        c = torch.randn(5, dtype=torch.float64)
        uniform = torch.full((5,), -math.log(5), dtype=torch.float64)
        post = joint_posterior(c, uniform)
        assert torch.allclose(post, torch.softmax(c, dim=-1), atol=1e-12)

    def test_scalar_oracle_case(self):
        c = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        d = torch.log(torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64))
        post = joint_posterior(c, d)
        # independent scalar arithmetic
        raw = [math.exp(1.0) * 0.2, 0.3, 0.5]
        expected = [v / sum(raw) for v in raw]
        np.testing.assert_allclose(post.numpy(), expected, atol=1e-12)
        assert float(post.sum()) == pytest.approx(1.0, abs=1e-12)

    def test_non_finite_rejected(self):
        good = torch.zeros(3, dtype=torch.float64)
        bad = torch.tensor([0.0, float("inf"), 0.0], dtype=torch.float64)
        with pytest.raises(ModelError):
            joint_posterior(bad, good)
        with pytest.raises(ModelError):
            joint_posterior(good, torch.tensor([0.0, float("nan"), 0.0]))


class TestLoss:
    def test_degenerate_weights_reduce_to_ce(self):
        cfg = tiny_model_config()
        cfg.lm_weight = 0.0
        cfg.ctc_weight = 0.0
        model = tiny_model(config=cfg)
        out = model.forward_losses(tiny_batch())
        assert float(out.total) == pytest.approx(float(out.attention_ce), abs=1e-9)

    def test_terms_nonnegative_and_sum(self):
        model = tiny_model()
        out = model.forward_losses(tiny_batch(n=4, seed=2))
        assert float(out.attention_ce) >= 0
        assert float(out.lm_nll) >= 0
        assert float(out.ctc) >= 0
        expected = (
            float(out.attention_ce)
            + model.config.lm_weight * float(out.lm_nll)
            + model.config.ctc_weight * float(out.ctc)
        )
        assert float(out.total) == pytest.approx(expected, abs=1e-9)

    def test_no_decoder_ablation(self):
        cfg = tiny_model_config()
        cfg.no_decoder = True
        model = tiny_model(config=cfg)
        assert model.lm is None
        out = model.forward_losses(tiny_batch())
        assert float(out.lm_nll) == 0.0
        with pytest.raises(ModelError):
            model.ilm_log_prob([0, 1, model.eos_id])

    def test_infeasible_utterances_skipped(self):
        model = tiny_model()
        utts = random_utterances(2, seed=3)
        # make the second utterance unalignable: 11 tokens, 4 frames => T'=2
        utts[1].tokens = [0] * 11
        utts[1].features = utts[1].features[:4]
        from haed.data import make_batch

        out = model.forward_losses(make_batch(utts, dtype=torch.float64))
        assert out.skipped == [utts[1].id]
        assert out.n_utterances == 1

    def test_gradients_match_finite_differences(self):
        model = tiny_model(randomize_scale=0.2)
        batch = tiny_batch(n=2, seed=4)

        # alignment argmax must be stable under the FD epsilon: verify the
        # occupancy margins are comfortably larger than any perturbation
        h, hlens = model.encoder(batch.features, batch.feat_lengths)
        lp = model.ctc_log_posteriors(h)
        for b in range(2):
            labels = batch.tokens[b, : int(batch.token_lengths[b])].tolist()
            gamma, _ = label_occupancy(lp[b, : int(hlens[b])], labels, model.blank_id)
            top2 = np.sort(gamma, axis=1)[:, -2:]
            assert (top2[:, 1] - top2[:, 0] > 1e-3).all()

        def loss_fn():
            return model.forward_losses(batch).total

        err = finite_difference_gradients(loss_fn, list(model.parameters()))
        assert err < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        model = tiny_model(dtype=torch.float32)
        ck = save_checkpoint(str(tmp_path / "ck"), model, {"note": "test"}, step=3, seed=9)
        clone = tiny_model(dtype=torch.float32, seed=1)  # different init
        load_into_model(clone, load_checkpoint(ck.directory))
        for (_, a), (_, b) in zip(model.named_parameters(), clone.named_parameters()):
            assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes()
        batch = tiny_batch(n=2, seed=5, dtype=torch.float32)
        out_a = model.forward_losses(batch)
        out_b = clone.forward_losses(batch)
        assert float(out_a.total) == float(out_b.total)

    def test_partitions_exact(self):
        model = tiny_model()
        table = model.partition_table()
        names = {n for n, _ in model.named_parameters()}
        assert set(table) == names
        assert set(table.values()) == {"encoder", "ctc_head", "lm", "acoustic"}

    def test_saved_metadata(self, tmp_path):
        model = tiny_model(dtype=torch.float32)
        ck = save_checkpoint(str(tmp_path / "ck"), model, {"a": 1}, step=7, seed=2)
        loaded = load_checkpoint(str(tmp_path / "ck"))
        assert loaded.step == 7
        assert loaded.config == {"a": 1}
        assert set(loaded.metadata["arrays"]) == {n for n, _ in model.named_parameters()}


class TestInternalLM:
    def test_ilm_equals_negated_lm_nll(self):
        model = tiny_model()
        tokens = [0, 2, 1, model.eos_id]
        expected = -float(lm_nll(model.lm, tokens).detach())
        assert model.ilm_log_prob(tokens) == pytest.approx(expected, abs=1e-9)

    def test_features_argument_ignored(self):
        model = tiny_model()
        tokens = [1, 0, model.eos_id]
        feats = np.random.default_rng(0).normal(size=(12, 4)).astype(np.float32)
        assert model.ilm_log_prob(tokens) == model.ilm_log_prob(tokens, features=feats)

    def test_consistency_check_identity_and_bounds(self):
        model = tiny_model(dtype=torch.float32)
        utts = random_utterances(4, seed=8)
        rep = ilm_consistency_check(model, utts, beam_size=3)
        assert rep.identity_ok
        assert rep.identity_max_error <= 1e-6
        assert rep.emission_agreement is not None
        assert 0.0 <= rep.emission_agreement <= 1.0

    def test_agreement_is_one_at_beam_one(self):
        model = tiny_model(dtype=torch.float32)
        utts = random_utterances(3, seed=9)
        rep = ilm_consistency_check(model, utts, beam_size=1)
        assert rep.emission_agreement == 1.0


def test_normalization_sweep_all_rows():
    # CTC, LM, and joint rows all logsumexp to ~0 on a random batch
    model = tiny_model()
    batch = tiny_batch(n=3, seed=11)
    h, hlens = model.encoder(batch.features, batch.feat_lengths)
    ctc_rows = model.ctc_log_posteriors(h)
    lse = torch.logsumexp(ctc_rows, dim=-1)
    assert float(lse.abs().max()) < 1e-6

    tokens = torch.cat(
        [torch.full((3, 1), model.sos_id, dtype=torch.long), batch.tokens], dim=1
    )
    lm_out = model.lm(tokens)
    lse = torch.logsumexp(lm_out.log_probs, dim=-1)
    assert float(lse.abs().max()) < 1e-6

    queries = h[:, :1].expand(-1, tokens.shape[1], -1)
    ac = model.acoustic(queries, h)
    joint = model.joint_step_log_probs(ac.scores, lm_out.log_probs)
    lse = torch.logsumexp(joint, dim=-1)
    assert float(lse.abs().max()) < 1e-6
