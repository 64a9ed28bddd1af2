"""Incremental pipeline: task sequences, the replay-aware loss, backbone
splitting, learner growth, and an end-to-end smoke run of every replay mode."""

import copy

import numpy as np
import pytest
import torch

from krnet import (
    DecoderConfig,
    IncTrainConfig,
    RecorderTrainConfig,
    TaskSequence,
    ValidationError,
    cifar_resnet,
    evaluate_model,
    extract_features,
    imagenet_resnet18,
    incremental_loss,
    make_small_image_data,
    make_task_sequence,
    run_kril,
    split_backbone,
    state_hash,
    train_image_classifier,
    train_task_learner,
)
from krnet.data import load_feature_block


# ------------------------------------------------------------- task sequences


def test_sequence_splits_half_then_even():
    seq = make_task_sequence(range(100), 10, seed=0)
    sizes = [len(g) for g in seq.class_groups]
    assert sizes == [50] + [5] * 10
    assert sorted(seq.all_classes) == list(range(100))


def test_sequence_remainder_goes_to_earliest_increments():
    seq = make_task_sequence(range(10), 2, seed=1)
    assert [len(g) for g in seq.class_groups] == [5, 3, 2]
    seq = make_task_sequence(range(7), 2, seed=1)
    assert [len(g) for g in seq.class_groups] == [4, 2, 1]


def test_sequence_deterministic_in_seed():
    assert make_task_sequence(range(50), 5, seed=3) == make_task_sequence(range(50), 5, seed=3)
    assert make_task_sequence(range(50), 5, seed=3) != make_task_sequence(range(50), 5, seed=4)


def test_sequence_classes_through_accumulates():
    seq = make_task_sequence(range(10), 2, seed=0)
    assert seq.classes_through(0) == seq.class_groups[0]
    assert len(seq.classes_through(2)) == 10
    assert seq.num_increments == 2


def test_sequence_label_map_contiguous():
    seq = make_task_sequence(range(20), 3, seed=7)
    mapping = seq.label_map()
    assert sorted(mapping.values()) == list(range(20))
    assert [mapping[c] for c in seq.all_classes] == list(range(20))


def test_sequence_validation():
    with pytest.raises(ValidationError):
        TaskSequence(((1, 2), (2, 3)))  # class 2 in two tasks
    with pytest.raises(ValidationError):
        TaskSequence(((),))
    with pytest.raises(ValidationError):
        make_task_sequence(range(10), 0, seed=0)
    with pytest.raises(ValidationError):
        make_task_sequence(range(3), 3, seed=0)


# -------------------------------------------------------------- the loss


def test_incremental_loss_hand_arithmetic():
    logits = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    labels = torch.tensor([0, 1])
    current = torch.tensor([[1.0, 2.0], [0.0, 0.0]])
    previous = torch.tensor([[0.0, 1.0], [99.0, -99.0]])  # row 1 is masked out
    mask = torch.tensor([True, False])
    total, ce, gap = incremental_loss(logits, labels, current, previous, mask, aux_weight=2.0)
    expected_ce = float(torch.nn.functional.softplus(torch.tensor(-1.0)))
    assert ce.item() == pytest.approx(expected_ce, rel=1e-6)
    assert gap.item() == pytest.approx(2.0)  # (1-0)^2 + (2-1)^2 over one replayed row
    assert total.item() == pytest.approx(expected_ce + 2.0 * 2.0, rel=1e-6)


def test_incremental_loss_ignores_masked_out_garbage():
    logits = torch.randn(3, 4)
    labels = torch.tensor([0, 1, 2])
    current = torch.randn(3, 5)
    previous = torch.full((3, 5), float("nan"))
    mask = torch.zeros(3, dtype=torch.bool)
    total, ce, gap = incremental_loss(logits, labels, current, previous, mask, aux_weight=2.0)
    assert gap.item() == 0.0
    assert torch.isfinite(total)
    assert total.item() == ce.item()


def test_incremental_loss_gradient_locality():
    torch.manual_seed(0)
    logits = torch.randn(4, 3)
    labels = torch.tensor([0, 1, 2, 0])
    current = torch.randn(4, 6, requires_grad=True)
    previous = torch.randn(4, 6)
    mask = torch.tensor([True, False, True, False])
    total, _, _ = incremental_loss(logits, labels, current, previous, mask, aux_weight=1.5)
    total.backward()
    assert torch.all(current.grad[~mask] == 0)
    assert torch.any(current.grad[mask] != 0)


def test_incremental_loss_zero_weight_is_plain_ce():
    torch.manual_seed(0)
    logits = torch.randn(4, 3)
    labels = torch.tensor([0, 1, 2, 0])
    current, previous = torch.randn(4, 6), torch.randn(4, 6)
    mask = torch.ones(4, dtype=torch.bool)
    total, ce, gap = incremental_loss(logits, labels, current, previous, mask, aux_weight=0.0)
    assert gap.item() > 0
    assert total.item() == ce.item()
    assert ce.item() == pytest.approx(float(torch.nn.functional.cross_entropy(logits, labels)), rel=1e-6)


def test_incremental_loss_rejects_negative_weight():
    with pytest.raises(ValidationError):
        incremental_loss(torch.randn(2, 2), torch.tensor([0, 1]), torch.randn(2, 3), torch.randn(2, 3), torch.zeros(2, dtype=torch.bool), -1.0)


# ---------------------------------------------------------- backbone splitting


def test_cifar_resnet_depth_rule():
    net = cifar_resnet(32, num_classes=10)
    assert net.num_blocks == 15
    with pytest.raises(ValidationError):
        cifar_resnet(31, num_classes=10)
    torch.manual_seed(0)
    out = net(torch.rand(2, 3, 32, 32))
    assert out.shape == (2, 10)


def test_cifar_split_layer_arithmetic():
    torch.manual_seed(0)
    net = cifar_resnet(32, num_classes=50)
    split = split_backbone(net, 11, (3, 32, 32))
    assert split.extractor_layers == 1 + 2 * 11
    assert split.learner_layers == 2 * (15 - 11) + 1
    assert split.feature_shape == (64, 8, 8)
    feats = split.extractor(torch.rand(2, 3, 32, 32))
    assert feats.shape == (2, 64, 8, 8)
    assert split.learner(feats).shape == (2, 50)


def test_resnet18_split_layer_arithmetic():
    torch.manual_seed(0)
    net = imagenet_resnet18(num_classes=100)
    split = split_backbone(net, 6, (3, 224, 224))
    assert split.extractor_layers == 13
    assert split.learner_layers == 5
    assert split.feature_shape == (256, 14, 14)


def test_split_index_bounds():
    net = cifar_resnet(8, num_classes=4)
    with pytest.raises(ValidationError):
        split_backbone(net, 0, (3, 8, 8))
    with pytest.raises(ValidationError):
        split_backbone(net, 3, (3, 8, 8))


def test_extractor_is_frozen():
    torch.manual_seed(0)
    net = cifar_resnet(8, num_classes=4)
    split = split_backbone(net, 2, (3, 8, 8))
    extractor = split.extractor
    assert all(not p.requires_grad for p in extractor.parameters())
    extractor.train()
    assert not extractor.training  # stays in eval mode no matter what
    out = extractor(torch.rand(2, 3, 8, 8))
    assert not out.requires_grad
    assert state_hash(extractor) == state_hash(extractor)


def test_learner_grow_classifier_preserves_rows():
    torch.manual_seed(0)
    net = cifar_resnet(8, num_classes=3)
    split = split_backbone(net, 2, (3, 8, 8))
    learner = split.learner
    w = learner.classifier.weight.detach().clone()
    b = learner.classifier.bias.detach().clone()
    learner.grow_classifier(5)
    assert learner.num_classes == 5
    assert torch.equal(learner.classifier.weight[:3], w)
    assert torch.equal(learner.classifier.bias[:3], b)
    with pytest.raises(ValidationError):
        learner.grow_classifier(4)  # shrinking is not growth
    feats = torch.rand(2, *split.feature_shape)
    assert learner(feats).shape == (2, 5)
    assert learner.features(feats).shape == (2, 64)


def test_state_hash_tracks_weights():
    torch.manual_seed(0)
    a = cifar_resnet(8, num_classes=4)
    torch.manual_seed(0)
    b = cifar_resnet(8, num_classes=4)
    assert state_hash(a) == state_hash(b)
    with torch.no_grad():
        b.fc.weight[0, 0] += 1.0
    assert state_hash(a) != state_hash(b)


# ------------------------------------------------------------ small operations


def test_evaluate_model_on_identity_logits():
    images = torch.eye(4).repeat(3, 1)  # one-hot "logits" as raw input
    labels = torch.arange(4).repeat(3)
    acc = evaluate_model(torch.nn.Identity(), torch.nn.Identity(), images, labels)
    assert acc == 1.0
    with pytest.raises(ValidationError):
        evaluate_model(torch.nn.Identity(), torch.nn.Identity(), torch.empty(0, 4), torch.empty(0, dtype=torch.long))


def test_extract_features_matches_direct_call():
    torch.manual_seed(0)
    net = cifar_resnet(8, num_classes=4)
    split = split_backbone(net, 2, (3, 8, 8))
    images = torch.rand(5, 3, 8, 8)
    batched = extract_features(split.extractor, images, batch_size=2)
    assert torch.allclose(batched, split.extractor(images), atol=1e-6)


def test_previous_learner_untouched_by_training():
    torch.manual_seed(0)
    net = cifar_resnet(8, num_classes=4)
    split = split_backbone(net, 2, (3, 8, 8))
    learner = split.learner
    previous = copy.deepcopy(learner)
    before = state_hash(previous)
    feats = torch.rand(32, *split.feature_shape)
    labels = torch.randint(0, 4, (32,))
    mask = torch.zeros(32, dtype=torch.bool)
    mask[:16] = True
    cfg = IncTrainConfig(inc_epochs=2, inc_batch_size=16)
    train_task_learner(learner, previous, feats, labels, mask, cfg, seed=0)
    assert state_hash(previous) == before
    assert state_hash(learner) != before


def test_train_image_classifier_fits_separable_data():
    data = make_small_image_data(num_classes=2, train_per_class=40, test_per_class=10, seed=0)
    torch.manual_seed(0)
    net = cifar_resnet(8, num_classes=2)
    cfg = IncTrainConfig(base_epochs=6, base_lr=0.05, base_batch_size=32)
    final_acc = train_image_classifier(net, data.train_images, data.train_labels, cfg, seed=0)
    assert final_acc >= 0.9


def test_inc_config_validation():
    with pytest.raises(ValidationError):
        IncTrainConfig(block_lr_scale=0.0)
    with pytest.raises(ValidationError):
        IncTrainConfig(aux_weight=-0.5)


# ------------------------------------------------------------- end-to-end runs


TOY_KRIL_DECODER = DecoderConfig(d0=64, c0=32, h0=4, w0=4, c1=16, deconv_stride=1, target_shape=(32, 4, 4))


def quick_kril(tmp_path=None, **overrides):
    data = make_small_image_data(num_classes=6, train_per_class=30, test_per_class=8, seed=1)
    kwargs = dict(
        data=data,
        net_factory=lambda n: cifar_resnet(8, num_classes=n),
        split_index=2,
        group_size=16,
        decoder_config=TOY_KRIL_DECODER,
        recorder_config=RecorderTrainConfig(batch_size=128, warm_iters=40, decay_iters=40, log_every=10**9),
        inc_config=IncTrainConfig(base_epochs=4, inc_epochs=3, base_batch_size=64, inc_batch_size=64),
        num_tasks=2,
        seed=0,
        output_dir=tmp_path,
    )
    kwargs.update(overrides)
    return run_kril(**kwargs)


def test_run_kril_recorder_mode_end_to_end(tmp_path):
    run_dir = tmp_path / "run"
    result = quick_kril(run_dir)
    assert len(result.accuracies) == 3
    assert result.seen_counts == [3, 5, 6]
    assert all(0.0 <= a <= 1.0 for a in result.accuracies)
    assert len(set(result.extractor_hashes)) == 1
    # run-dir layout: recorders for base and the non-final round, learners, features, metrics
    assert (run_dir / "checkpoints" / "recorder_base.krz").exists()
    assert (run_dir / "checkpoints" / "recorder_task_1.krz").exists()
    assert not (run_dir / "checkpoints" / "recorder_task_2.krz").exists()
    assert (run_dir / "checkpoints" / "learner_task_1.pt").exists()
    assert (run_dir / "checkpoints" / "learner_task_2.pt").exists()
    assert (run_dir / "metrics.csv").exists()
    for task in range(3):
        corpus = load_feature_block(run_dir / "features" / f"task_{task}")
        assert corpus.feature_shape == (32, 4, 4)
    rows = (run_dir / "metrics.csv").read_text().strip().splitlines()
    assert rows[0] == "task,seen_classes,split,accuracy,loss_ce,loss_aux"
    assert len(rows) == 4


def test_run_kril_oracle_and_finetune_modes(tmp_path):
    oracle = quick_kril(tmp_path / "oracle", replay_mode="oracle")
    finetune = quick_kril(tmp_path / "ft", replay_mode="none")
    assert len(oracle.accuracies) == len(finetune.accuracies) == 3
    # neither mode trains a recorder
    assert not (tmp_path / "oracle" / "checkpoints" / "recorder_base.krz").exists()
    assert not (tmp_path / "ft" / "checkpoints" / "recorder_base.krz").exists()
    # fine-tuning never replays, so its auxiliary loss never engages
    assert all(row["loss_aux"] == 0.0 for row in finetune.rows if row["task"] > 0)


def test_run_kril_rejects_unknown_replay_mode():
    with pytest.raises(ValidationError):
        quick_kril(replay_mode="telepathy")
