"""Recorder training: normalization, the two-term loss, the lr schedule,
frozen-head discipline, convergence oracles, and self-taught target assembly."""

import csv

import numpy as np
import pytest
import torch

from krnet import (
    DecoderConfig,
    FeatureCorpus,
    NormalizationStats,
    RecorderTrainConfig,
    ValidationError,
    clone_untrained,
    compute_norm_stats,
    concat_corpora,
    decoder_config_tiny,
    elementwise_mse,
    learning_rate_at,
    loss_kr,
    recorder_for_corpus,
    self_taught_targets,
    train_recorder,
)

TOY_DECODER = DecoderConfig(d0=128, c0=32, h0=2, w0=2, c1=16, deconv_stride=1, target_shape=(16, 2, 2))


def toy_targets(n=64, seed=11):
    """Unstructured sparse targets: the hardest thing a recorder can memorize."""
    torch.manual_seed(seed)
    feats = torch.rand(n, 16, 2, 2) * (torch.rand(n, 16, 2, 2) > 0.3)
    return FeatureCorpus(feats, list(range(n)), np.zeros(n, dtype=np.int64))


def micro_corpus(n=4, seed=3):
    torch.manual_seed(seed)
    return FeatureCorpus(torch.rand(n, 2, 2, 2), list(range(n)), np.zeros(n, dtype=np.int64))


class SmallHead(torch.nn.Module):
    """Stand-in for a frozen task head: conv + nonlinearity + linear."""

    def __init__(self, in_channels=2, spatial=2):
        super().__init__()
        self.conv = torch.nn.Conv2d(in_channels, 3, 3, padding=1)
        self.act = torch.nn.Tanh()
        self.fc = torch.nn.Linear(3 * spatial * spatial, 5)

    def forward(self, x):
        return self.fc(self.act(self.conv(x)).flatten(1))


def frozen_head(seed=0, **kwargs):
    torch.manual_seed(seed)
    head = SmallHead(**kwargs)
    head.eval()
    for p in head.parameters():
        p.requires_grad_(False)
    return head


# ---------------------------------------------------------------- normalization


def test_norm_stats_two_point_scaling():
    feats = torch.tensor([0.0, 2.0]).view(1, 1, 2, 1)
    stats = compute_norm_stats(feats)
    assert stats.channel_min.tolist() == [0.0]
    assert stats.channel_max.tolist() == [2.0]
    assert stats.normalize(feats).flatten().tolist() == [0.0, 1.0]


def test_norm_stats_degenerate_channel_maps_to_zero():
    feats = torch.zeros(3, 2, 2, 2)
    feats[:, 1] = 0.7  # constant non-zero channel is just as degenerate
    normalized = compute_norm_stats(feats).normalize(feats)
    assert torch.equal(normalized, torch.zeros_like(normalized))


def test_norm_stats_round_trip():
    torch.manual_seed(0)
    feats = torch.randn(8, 3, 4, 4) * 5 + 1
    stats = compute_norm_stats(feats)
    normalized = stats.normalize(feats)
    assert normalized.min() >= 0 and normalized.max() <= 1
    assert torch.allclose(stats.denormalize(normalized), feats, atol=1e-6)


def test_norm_stats_preserve_exact_zeros():
    torch.manual_seed(1)
    feats = torch.rand(16, 4, 3, 3)
    feats[feats < 0.3] = 0.0  # rectifier-style sparsity; channel minima are 0
    normalized = compute_norm_stats(feats).normalize(feats)
    assert torch.equal(normalized == 0, feats == 0)


def test_norm_stats_bad_inputs():
    with pytest.raises(ValidationError):
        compute_norm_stats(torch.empty(0, 2, 2, 2))
    with pytest.raises(ValidationError):
        compute_norm_stats(torch.rand(3, 2, 2))
    with pytest.raises(ValidationError):
        NormalizationStats(np.array([1.0]), np.array([0.5]))


def test_norm_stats_bytes_round_trip():
    stats = NormalizationStats(np.array([0.0, -1.5], dtype=np.float32), np.array([2.0, 3.25], dtype=np.float32))
    clone = NormalizationStats.from_bytes(stats.to_bytes())
    assert np.array_equal(clone.channel_min, stats.channel_min)
    assert np.array_equal(clone.channel_max, stats.channel_max)


# ------------------------------------------------------------------------ loss


def test_loss_identity_is_zero():
    x = torch.rand(3, 2, 2, 2)
    total, kr1, kr2 = loss_kr(x, x.clone())
    assert total.item() == 0.0 and kr1.item() == 0.0 and kr2.item() == 0.0


def test_loss_without_head_is_plain_squared_norm_mean():
    torch.manual_seed(0)
    pred, target = torch.rand(5, 2, 2, 2), torch.rand(5, 2, 2, 2)
    total, kr1, kr2 = loss_kr(pred, target)
    by_hand = (pred - target).pow(2).reshape(5, -1).sum(1).mean()
    assert torch.allclose(total, by_hand)
    assert kr2.item() == 0.0


def test_loss_batch_mean_of_per_sample_norms():
    # per-sample squared norms 0.5 and 1.5 -> batch mean 1.0
    diff = torch.tensor([[0.25, 0.25, 0.0, 0.0], [1.0, 0.25, 0.25, 0.0]]).sqrt().view(2, 1, 2, 2)
    total, _, _ = loss_kr(diff, torch.zeros_like(diff))
    assert total.item() == pytest.approx(1.0, abs=1e-6)


def test_loss_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        loss_kr(torch.rand(2, 2, 2, 2), torch.rand(2, 2, 2, 4))


def test_loss_decomposition_is_exact():
    torch.manual_seed(0)
    pred, target = torch.rand(4, 2, 2, 2, dtype=torch.float64), torch.rand(4, 2, 2, 2, dtype=torch.float64)
    head = frozen_head().double()
    gamma = 0.37
    total, kr1, kr2 = loss_kr(pred, target, head=head, gamma=gamma)
    assert total.item() == (kr1 + gamma * kr2).item()
    assert kr2.item() > 0


def test_loss_rejects_unfrozen_head():
    head = SmallHead()  # fresh module: parameters still require grad
    with pytest.raises(ValidationError):
        loss_kr(torch.rand(2, 2, 2, 2), torch.rand(2, 2, 2, 2), head=head, gamma=1e-3)


def test_loss_head_gap_uses_denormalized_scale():
    torch.manual_seed(0)
    pred, target = torch.rand(3, 2, 2, 2), torch.rand(3, 2, 2, 2)
    head = frozen_head()
    stats = NormalizationStats(np.array([0.0, 0.0], dtype=np.float32), np.array([4.0, 4.0], dtype=np.float32))
    _, _, kr2_raw = loss_kr(pred, target, head=head, gamma=1.0)
    _, _, kr2_denorm = loss_kr(pred, target, head=head, gamma=1.0, denorm=stats)
    expected = (head(stats.denormalize(pred)) - head(stats.denormalize(target))).pow(2).flatten(1).sum(1).mean()
    assert torch.allclose(kr2_denorm, expected)
    assert not torch.allclose(kr2_raw, kr2_denorm)


# -------------------------------------------------------------------- schedule


def test_schedule_constant_then_linear():
    cfg = RecorderTrainConfig(warm_iters=100, decay_iters=50, lr_peak=3e-3, lr_floor=3e-6)
    assert learning_rate_at(1, cfg) == 3e-3
    assert learning_rate_at(100, cfg) == 3e-3
    assert learning_rate_at(101, cfg) < 3e-3
    assert learning_rate_at(125, cfg) == pytest.approx(3e-3 + (3e-6 - 3e-3) * 0.5)
    assert learning_rate_at(150, cfg) == 3e-6
    assert learning_rate_at(9999, cfg) == 3e-6


def test_schedule_monotone_through_decay():
    cfg = RecorderTrainConfig(warm_iters=10, decay_iters=40)
    rates = [learning_rate_at(i, cfg) for i in range(1, 51)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_config_validation():
    with pytest.raises(ValidationError):
        RecorderTrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        RecorderTrainConfig(lr_peak=1e-4, lr_floor=1e-3)
    with pytest.raises(ValidationError):
        RecorderTrainConfig(warm_iters=0, decay_iters=0)
    with pytest.raises(ValidationError):
        RecorderTrainConfig(weight_decay=-1e-4)


# -------------------------------------------------------------------- training


def test_train_rejects_empty_corpus():
    corpus = micro_corpus()
    recorder = recorder_for_corpus(corpus, 4, decoder_config_tiny())
    empty = FeatureCorpus(torch.empty(0, 2, 2, 2), [], np.empty(0, dtype=np.int64))
    with pytest.raises(ValidationError):
        train_recorder(recorder, empty, RecorderTrainConfig(warm_iters=1, decay_iters=0))


def test_train_is_deterministic_given_seed():
    corpus = micro_corpus()
    results = []
    for _ in range(2):
        torch.manual_seed(0)
        recorder = recorder_for_corpus(corpus, 4, decoder_config_tiny())
        cfg = RecorderTrainConfig(batch_size=2, warm_iters=15, decay_iters=15, log_every=10**9, seed=5)
        res = train_recorder(recorder, corpus, cfg)
        results.append((res.final_loss, recorder.replay(corpus.sample_ids)))
    assert results[0][0] == results[1][0]
    assert torch.equal(results[0][1], results[1][1])


def test_train_writes_log_rows_and_csv(tmp_path):
    corpus = micro_corpus()
    torch.manual_seed(0)
    recorder = recorder_for_corpus(corpus, 4, decoder_config_tiny())
    cfg = RecorderTrainConfig(batch_size=4, warm_iters=5, decay_iters=5, log_every=3, seed=0)
    log_path = tmp_path / "train_log.csv"
    res = train_recorder(recorder, corpus, cfg, log_path=log_path)
    assert [row["iteration"] for row in res.log_rows] == [3, 6, 9, 10]
    with open(log_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["iteration"]) for r in rows] == [3, 6, 9, 10]
    assert set(rows[0]) == {"iteration", "lr", "loss_kr1", "loss_kr2", "loss_total"}
    assert float(rows[-1]["lr"]) == pytest.approx(3e-6)


def test_train_keeps_head_frozen():
    corpus = micro_corpus()
    torch.manual_seed(0)
    recorder = recorder_for_corpus(corpus, 4, decoder_config_tiny())
    head = frozen_head()
    before = {k: v.clone() for k, v in head.state_dict().items()}
    cfg = RecorderTrainConfig(batch_size=4, warm_iters=10, decay_iters=10, aux_weight=1e-3, log_every=10**9)
    res = train_recorder(recorder, corpus, cfg, head=head)
    assert all(torch.equal(before[k], v) for k, v in head.state_dict().items())
    assert res.final_kr2 > 0  # the auxiliary term was actually engaged


def test_train_nan_aborts_with_diagnostic():
    corpus = micro_corpus()
    torch.manual_seed(0)
    recorder = recorder_for_corpus(corpus, 4, decoder_config_tiny())
    cfg = RecorderTrainConfig(batch_size=4, lr_peak=1e8, lr_floor=1e8, warm_iters=50, decay_iters=0, seed=0)
    with pytest.raises(RuntimeError, match="non-finite"):
        train_recorder(recorder, corpus, cfg)


def test_train_inherits_norm_stats_on_request():
    corpus = micro_corpus()
    torch.manual_seed(0)
    recorder = recorder_for_corpus(corpus, 4, decoder_config_tiny())
    cfg = RecorderTrainConfig(batch_size=4, warm_iters=2, decay_iters=0, log_every=10**9)
    train_recorder(recorder, corpus, cfg)
    first = recorder.norm_stats
    shifted = FeatureCorpus(corpus.features + 10, corpus.sample_ids, corpus.labels)
    train_recorder(recorder, shifted, RecorderTrainConfig(batch_size=4, warm_iters=2, decay_iters=0, log_every=10**9, inherit_norm_stats=True))
    assert recorder.norm_stats is first
    train_recorder(recorder, shifted, RecorderTrainConfig(batch_size=4, warm_iters=2, decay_iters=0, log_every=10**9))
    assert recorder.norm_stats is not first
    assert float(recorder.norm_stats.channel_min.min()) >= 10.0


# ------------------------------------------------------ convergence oracles


@pytest.fixture(scope="module")
def toy_convergence_runs():
    """One paired run on 64 unstructured targets: mandated zero weight decay
    vs. the 5e-4 a classifier recipe would use."""
    corpus = toy_targets()
    out = {}
    for name, wd in [("clean", 0.0), ("decayed", 5e-4)]:
        torch.manual_seed(0)
        recorder = recorder_for_corpus(corpus, 64, TOY_DECODER)
        cfg = RecorderTrainConfig(
            batch_size=64, warm_iters=1000, decay_iters=1000, weight_decay=wd, log_every=10**9, seed=0,
        )
        out[name] = train_recorder(recorder, corpus, cfg)
    return out


def test_toy_memorization_converges(toy_convergence_runs):
    assert toy_convergence_runs["clean"].replay_mse < 1e-3


def test_weight_decay_measurably_hurts_fitting(toy_convergence_runs):
    clean = toy_convergence_runs["clean"].replay_mse
    decayed = toy_convergence_runs["decayed"].replay_mse
    assert decayed > 2 * clean


# ------------------------------------------------------- self-taught targets


def make_trained_micro_recorder(corpus, seed=0):
    torch.manual_seed(seed)
    recorder = recorder_for_corpus(corpus, 4, decoder_config_tiny())
    cfg = RecorderTrainConfig(batch_size=len(corpus), warm_iters=5, decay_iters=5, log_every=10**9, seed=seed)
    train_recorder(recorder, corpus, cfg)
    return recorder


def test_self_taught_targets_union():
    old = micro_corpus(n=4, seed=3)
    recorder = make_trained_micro_recorder(old)
    torch.manual_seed(4)
    new = FeatureCorpus(torch.rand(3, 2, 2, 2), [100, 101, 102], np.ones(3, dtype=np.int64))
    mixed = self_taught_targets(recorder, new)
    assert len(mixed) == 7
    assert mixed.sample_ids == old.sample_ids + new.sample_ids
    assert torch.equal(mixed.features[:4], recorder.replay(old.sample_ids))
    assert torch.equal(mixed.features[4:], new.features)
    assert mixed.labels.tolist() == [0, 0, 0, 0, 1, 1, 1]


def test_self_taught_rejects_id_collision():
    old = micro_corpus(n=4, seed=3)
    recorder = make_trained_micro_recorder(old)
    clashing = FeatureCorpus(torch.rand(2, 2, 2, 2), [0, 50], np.ones(2, dtype=np.int64))
    with pytest.raises(ValidationError, match="collision"):
        self_taught_targets(recorder, clashing)


def test_clone_untrained_resets_weights_keeps_grouping():
    corpus = micro_corpus()
    recorder = make_trained_micro_recorder(corpus)
    torch.manual_seed(99)
    clone = clone_untrained(recorder)
    assert clone.group_index.num_samples == recorder.group_index.num_samples
    assert clone.norm_stats is None
    trained = dict(recorder.named_parameters())
    assert any(not torch.equal(p, trained[name]) for name, p in clone.named_parameters())


def test_elementwise_mse_constant_offset():
    a = torch.zeros(2, 1, 2, 2)
    assert elementwise_mse(a + 0.1, a) == pytest.approx(0.01, rel=1e-6)
