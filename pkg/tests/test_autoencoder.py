"""Autoencoder baseline: shapes, latent bank alignment, storage accounting,
trainer compatibility, and checkpoint round-trips."""

import numpy as np
import pytest
import torch

from krnet import (
    FeatureAutoencoder,
    FeatureCorpus,
    FeatureEncoder,
    RecorderTrainConfig,
    ValidationError,
    decoder_config_tiny,
    load_autoencoder,
    save_autoencoder,
    train_recorder,
)


def tiny_corpus(n=6, seed=0):
    torch.manual_seed(seed)
    feats = torch.rand(n, 2, 2, 2)
    return FeatureCorpus(feats, list(range(10, 10 + n)), np.zeros(n, dtype=np.int64))


def trained_ae(corpus, latent_dim=8, seed=0, iters=30):
    torch.manual_seed(seed)
    ae = FeatureAutoencoder(latent_dim, decoder_config_tiny())
    cfg = RecorderTrainConfig(batch_size=len(corpus), warm_iters=iters, decay_iters=iters, log_every=10**9, seed=seed)
    result = train_recorder(ae, corpus, cfg)
    return ae, result


def test_encoder_output_shape():
    torch.manual_seed(0)
    enc = FeatureEncoder(8, decoder_config_tiny())
    codes = enc(torch.rand(5, 2, 2, 2))
    assert codes.shape == (5, 8)


def test_encoder_rejects_wrong_shape():
    enc = FeatureEncoder(8, decoder_config_tiny())
    with pytest.raises(ValidationError):
        enc(torch.rand(5, 2, 4, 4))


def test_forward_round_trip_shape():
    torch.manual_seed(0)
    ae = FeatureAutoencoder(8, decoder_config_tiny())
    out = ae(torch.rand(3, 2, 2, 2))
    assert out.shape == (3, 2, 2, 2)


def test_train_recorder_builds_bank():
    corpus = tiny_corpus()
    ae, result = trained_ae(corpus)
    assert ae.latent_bank is not None
    assert ae.latent_bank.shape == (len(corpus), 8)
    assert ae.bank_sample_ids == corpus.sample_ids
    assert np.isfinite(result.replay_mse)
    assert ae.norm_stats is not None


def test_latent_bank_bytes_is_n_times_dim_times_four():
    corpus = tiny_corpus(n=6)
    ae, _ = trained_ae(corpus, latent_dim=8)
    assert ae.latent_bank_bytes() == 6 * 8 * 4


def test_bank_requires_norm_stats():
    ae = FeatureAutoencoder(8, decoder_config_tiny())
    with pytest.raises(ValidationError):
        ae.build_latent_bank(torch.rand(4, 2, 2, 2), [0, 1, 2, 3])


def test_reconstruct_requires_bank():
    ae = FeatureAutoencoder(8, decoder_config_tiny())
    with pytest.raises(ValidationError):
        ae.reconstruct([0])


def test_reconstruct_aligns_to_requested_ids():
    corpus = tiny_corpus(n=5)
    ae, _ = trained_ae(corpus)
    forward = ae.reconstruct(corpus.sample_ids)
    reversed_ids = list(reversed(corpus.sample_ids))
    backward = ae.reconstruct(reversed_ids)
    assert torch.equal(backward, forward.flip(0))


def test_reconstruct_unknown_id_rejected():
    corpus = tiny_corpus()
    ae, _ = trained_ae(corpus)
    with pytest.raises(ValidationError):
        ae.reconstruct([999])


def test_reconstruct_empty_request():
    corpus = tiny_corpus()
    ae, _ = trained_ae(corpus)
    out = ae.reconstruct([])
    assert out.shape == (0, 2, 2, 2)


def test_bank_id_count_mismatch_rejected():
    corpus = tiny_corpus()
    ae, _ = trained_ae(corpus)
    with pytest.raises(ValidationError):
        ae.build_latent_bank(corpus.features, corpus.sample_ids[:-1])


def test_checkpoint_round_trip(tmp_path):
    corpus = tiny_corpus()
    ae, _ = trained_ae(corpus)
    path = tmp_path / "baseline.krz"
    save_autoencoder(path, ae)
    clone = load_autoencoder(path)
    assert torch.equal(clone.latent_bank, ae.latent_bank)
    assert clone.bank_sample_ids == ae.bank_sample_ids
    assert torch.equal(clone.reconstruct(corpus.sample_ids), ae.reconstruct(corpus.sample_ids))


def test_checkpoint_requires_stats(tmp_path):
    ae = FeatureAutoencoder(8, decoder_config_tiny())
    with pytest.raises(ValidationError):
        save_autoencoder(tmp_path / "nope.krz", ae)
