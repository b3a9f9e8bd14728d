"""Encoder contracts: shapes, determinism, label-blindness, gradients."""

import inspect

import numpy as np
import pytest
import torch
from oracles import finite_difference_gradients

from haed.encoder import Encoder, EncoderConfig, EncoderError, subsampled_length


def tiny_encoder(dtype=torch.float64, layers=2, dim=8, factor=2, feature_dim=4):
    cfg = EncoderConfig(
        layers=layers, model_dim=dim, heads=2, feedforward_dim=16,
        subsampling_factor=factor, dropout=0.0,
    )
    enc = Encoder(feature_dim, cfg, dtype=dtype)
    enc.init_parameters(seed=1234)
    return enc


def test_subsampled_shape():
    enc = tiny_encoder(factor=4, feature_dim=3)
    feats = torch.randn(1, 40, 3, dtype=torch.float64)
    h, lens = enc(feats, [40])
    assert h.shape == (1, 10, 8)
    assert lens.tolist() == [10]
    assert subsampled_length(40, 4) == 10
    assert subsampled_length(41, 4) == 11


def test_eval_mode_deterministic():
    enc = tiny_encoder()
    feats = torch.randn(2, 12, 4, dtype=torch.float64)
    h1, _ = enc(feats, [12, 9])
    h2, _ = enc(feats, [12, 9])
    assert torch.equal(h1, h2)


def test_zero_input_finite():
    enc = tiny_encoder()
    h, _ = enc(torch.zeros(1, 8, 4, dtype=torch.float64), [8])
    assert torch.isfinite(h).all()


def test_feature_dim_mismatch_rejected():
    enc = tiny_encoder(feature_dim=4)
    with pytest.raises(EncoderError):
        enc(torch.randn(1, 8, 5, dtype=torch.float64), [8])


def test_non_finite_input_rejected():
    enc = tiny_encoder()
    bad = torch.randn(1, 8, 4, dtype=torch.float64)
    bad[0, 3, 2] = float("nan")
    with pytest.raises(EncoderError):
        enc(bad, [8])


def test_too_short_input_rejected():
    enc = tiny_encoder(factor=4)
    with pytest.raises(EncoderError):
        enc(torch.randn(1, 2, 4, dtype=torch.float64), [2])


def test_interface_has_no_token_inputs():
    # label independence is structural: the forward signature admits only
    # features, lengths, and mode flags
    params = set(inspect.signature(Encoder.forward).parameters)
    assert params == {"self", "feats", "lengths", "train", "generator"}


def test_padding_does_not_leak_into_valid_frames():
    enc = tiny_encoder()
    feats = torch.randn(1, 12, 4, dtype=torch.float64)
    h_short, lens = enc(feats[:, :8], [8])
    padded = torch.cat([feats[:, :8], torch.randn(1, 4, 4, dtype=torch.float64) * 9], dim=1)
    h_padded, _ = enc(padded, [8])
    valid = int(lens[0])
    np.testing.assert_allclose(
        h_short[0, :valid].detach().numpy(),
        h_padded[0, :valid].detach().numpy(),
        atol=1e-12,
    )


def test_gradients_match_finite_differences():
    enc = tiny_encoder(layers=2, dim=8)
    feats = torch.randn(2, 10, 4, dtype=torch.float64)
    weights = torch.randn(2, 5, 8, dtype=torch.float64)

    def loss_fn():
        h, _ = enc(feats, [10, 7])
        return (h * weights).sum() + (h ** 2).sum() * 0.1

    err = finite_difference_gradients(loss_fn, list(enc.parameters()))
    assert err < 1e-4
