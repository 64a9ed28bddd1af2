"""Class-incremental learning by feature recitation.

The pipeline keeps a frozen shallow extractor, replays old-task features from
trained recorders, and retrains the deep task learner on the mixture.  Upper
and lower reference curves (joint retraining, oracle replay, plain
fine-tuning) reuse the same splits and seeds for comparability.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .backbones import ClassifierResNet, SplitBackbone, split_backbone, state_hash
from .checkpoint import save_krnet
from .corpus import FeatureCorpus, concat_corpora
from .data import save_feature_block
from .errors import ValidationError
from .model import DecoderConfig, KRNet
from .training import (
    RecorderTrainConfig,
    fresh_group_index,
    recorder_for_corpus,
    self_taught_targets,
    train_recorder,
)


# ---------------------------------------------------------------------------
# task scheduling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSequence:
    """Disjoint class groups: index 0 is the base task, the rest are increments."""

    class_groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for group in self.class_groups:
            for label in group:
                if label in seen:
                    raise ValidationError(f"class {label} appears in two tasks")
                seen.add(label)
        if len(self.class_groups) < 1 or not self.class_groups[0]:
            raise ValidationError("task sequence needs a non-empty base task")

    @property
    def num_increments(self) -> int:
        return len(self.class_groups) - 1

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(label for group in self.class_groups for label in group)

    def classes_through(self, task: int) -> tuple[int, ...]:
        """All class labels seen once task ``task`` is finished (0 = base)."""
        return tuple(label for group in self.class_groups[: task + 1] for label in group)

    def label_map(self) -> dict[int, int]:
        """Original label -> contiguous index in order of first appearance."""
        return {label: idx for idx, label in enumerate(self.all_classes)}


def make_task_sequence(classes: Sequence[int], num_tasks: int, seed: int) -> TaskSequence:
    """Shuffle classes, give half to the base task and split the rest into
    ``num_tasks`` increments, earliest increments absorbing any remainder."""
    if num_tasks < 1:
        raise ValidationError(f"need at least one incremental task, got {num_tasks}")
    labels = list(dict.fromkeys(int(c) for c in classes))
    if len(labels) < num_tasks + 1:
        raise ValidationError(f"{len(labels)} classes cannot fill base + {num_tasks} tasks")
    rng = np.random.default_rng(seed)
    order = [labels[i] for i in rng.permutation(len(labels))]
    base_count = math.ceil(len(order) / 2)
    groups = [tuple(order[:base_count])]
    remaining = order[base_count:]
    quot, rem = divmod(len(remaining), num_tasks)
    start = 0
    for t in range(num_tasks):
        size = quot + (1 if t < rem else 0)
        groups.append(tuple(remaining[start : start + size]))
        start += size
    return TaskSequence(tuple(groups))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def incremental_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    current_feats: torch.Tensor,
    previous_feats: torch.Tensor,
    replay_mask: torch.Tensor,
    aux_weight: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Cross-entropy over every row plus a weighted mean squared gap between the
    current and previous pre-classifier representations of the replayed rows.

    ``previous_feats`` only needs valid values where ``replay_mask`` is set, so
    current-task rows contribute nothing to the auxiliary term or its gradient.
    Returns (total, cross_entropy, feature_gap).
    """
    if aux_weight < 0:
        raise ValidationError(f"auxiliary weight must be >= 0, got {aux_weight}")
    ce = F.cross_entropy(logits, labels)
    mask = replay_mask.bool()
    if mask.any():
        diff = current_feats[mask] - previous_feats[mask]
        gap = diff.pow(2).flatten(1).sum(dim=1).mean()
    else:
        gap = logits.new_zeros(())
    return ce + aux_weight * gap, ce, gap


# ---------------------------------------------------------------------------
# training configuration
# ---------------------------------------------------------------------------

@dataclass
class IncTrainConfig:
    """Optimizer budget for the base task and each incremental round."""

    base_epochs: int = 30
    base_lr: float = 0.1
    base_batch_size: int = 128
    base_weight_decay: float = 5e-4
    base_momentum: float = 0.9
    base_lr_drops: tuple[float, ...] = (0.5, 0.75)  # epoch fractions where lr /= 10
    inc_epochs: int = 20
    inc_lr: float = 0.05
    inc_batch_size: int = 128
    block_lr_scale: float = 0.05
    aux_weight: float = 2.0
    use_aux_loss: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.block_lr_scale <= 1:
            raise ValidationError(f"block lr scale must be in (0, 1], got {self.block_lr_scale}")
        if self.aux_weight < 0:
            raise ValidationError(f"aux weight must be >= 0, got {self.aux_weight}")


def train_image_classifier(
    net: ClassifierResNet,
    images: torch.Tensor,
    labels: torch.Tensor,
    config: IncTrainConfig,
    seed: int,
) -> float:
    """SGD training of a full classifier net; returns final-epoch train accuracy."""
    optimizer = torch.optim.SGD(
        net.parameters(),
        lr=config.base_lr,
        momentum=config.base_momentum,
        weight_decay=config.base_weight_decay,
    )
    drop_epochs = {int(f * config.base_epochs) for f in config.base_lr_drops}
    gen = torch.Generator().manual_seed(seed)
    n = images.shape[0]
    batch = min(config.base_batch_size, n)
    net.train()
    correct = total = 0
    for epoch in range(config.base_epochs):
        if epoch in drop_epochs:
            for pg in optimizer.param_groups:
                pg["lr"] /= 10.0
        order = torch.randperm(n, generator=gen)
        correct = total = 0
        for start in range(0, n, batch):
            rows = order[start : start + batch]
            x, y = images[rows], labels[rows]
            logits = net(x)
            loss = F.cross_entropy(logits, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            correct += int((logits.argmax(dim=1) == y).sum())
            total += len(rows)
    return correct / max(total, 1)


def train_task_learner(
    learner: nn.Module,
    previous_learner: nn.Module | None,
    features: torch.Tensor,
    labels: torch.Tensor,
    replay_mask: torch.Tensor,
    config: IncTrainConfig,
    seed: int,
) -> dict[str, float]:
    """Retrain the task learner on a mixed (replayed + current) feature batch.

    The pre-classifier blocks run at ``block_lr_scale`` times the classifier's
    learning rate; the previous learner is a frozen reference for the
    auxiliary feature-consistency term.
    """
    aux_weight = config.aux_weight if (config.use_aux_loss and previous_learner is not None) else 0.0
    if previous_learner is not None:
        previous_learner.eval()
        for p in previous_learner.parameters():
            p.requires_grad_(False)
    optimizer = torch.optim.SGD(
        [
            {"params": learner.blocks.parameters(), "lr": config.inc_lr * config.block_lr_scale},
            {"params": learner.classifier.parameters(), "lr": config.inc_lr},
        ],
        momentum=config.base_momentum,
        weight_decay=config.base_weight_decay,
    )
    gen = torch.Generator().manual_seed(seed)
    n = features.shape[0]
    batch = min(config.inc_batch_size, n)
    mask_all = replay_mask.bool()
    last_ce = last_gap = 0.0
    learner.train()
    for epoch in range(config.inc_epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, batch):
            rows = order[start : start + batch]
            x, y, mask = features[rows], labels[rows], mask_all[rows]
            feats = learner.features(x)
            logits = learner.classifier(feats)
            prev = torch.zeros_like(feats)
            # with the aux term off, report a zero gap rather than a distance
            # to the placeholder
            aux_mask = mask if aux_weight > 0 else torch.zeros_like(mask)
            if aux_weight > 0 and mask.any():
                with torch.no_grad():
                    prev[mask] = previous_learner.features(x[mask])
            total, ce, gap = incremental_loss(logits, y, feats, prev, aux_mask, aux_weight)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            last_ce, last_gap = ce.item(), gap.item()
    return {"loss_ce": last_ce, "loss_aux": last_gap}


@torch.no_grad()
def evaluate_model(
    extractor: nn.Module,
    learner: nn.Module,
    images: torch.Tensor,
    labels: torch.Tensor,
    batch_size: int = 512,
) -> float:
    """Top-1 accuracy of learner∘extractor over a labeled image set."""
    if images.shape[0] == 0:
        raise ValidationError("cannot evaluate on an empty test set")
    learner.eval()
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        x = images[start : start + batch_size]
        pred = learner(extractor(x)).argmax(dim=1)
        correct += int((pred == labels[start : start + batch_size]).sum())
    learner.train()
    return correct / images.shape[0]


# ---------------------------------------------------------------------------
# the full pipeline
# ---------------------------------------------------------------------------

@dataclass
class KRILResult:
    accuracies: list[float]
    seen_counts: list[int]
    sequence: TaskSequence
    rows: list[dict] = field(default_factory=list)
    extractor_hashes: list[str] = field(default_factory=list)
    run_dir: Path | None = None

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1]


def _select(label_set: Sequence[int], labels: torch.Tensor) -> torch.Tensor:
    wanted = torch.as_tensor(sorted(label_set), dtype=labels.dtype)
    return torch.isin(labels, wanted).nonzero(as_tuple=True)[0]


def _remap(labels: torch.Tensor, label_map: dict[int, int]) -> torch.Tensor:
    lut = torch.full((max(label_map) + 1,), -1, dtype=torch.long)
    for orig, idx in label_map.items():
        lut[orig] = idx
    return lut[labels]


@torch.no_grad()
def extract_features(extractor: nn.Module, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    parts = [extractor(images[s : s + batch_size]) for s in range(0, images.shape[0], batch_size)]
    return torch.cat(parts) if parts else images.new_zeros((0,))


class _FeatureHead(nn.Module):
    """Frozen copy of a task learner's pre-classifier part, used as the
    feature-space head in the recorder's auxiliary loss term."""

    def __init__(self, learner: nn.Module):
        super().__init__()
        self.body = copy.deepcopy(learner)
        self.body.eval()
        for p in self.body.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.body.features(x)


def _recorder_head(learner: nn.Module, use_kr2: bool) -> nn.Module | None:
    return _FeatureHead(learner) if use_kr2 else None


def _replayed_corpus(recorder: KRNet) -> FeatureCorpus:
    ids = recorder.group_index.sample_ids
    return FeatureCorpus(recorder.replay(ids), ids, recorder.group_index.labels(ids))


def run_kril(
    data,
    net_factory: Callable[[int], ClassifierResNet],
    split_index: int,
    group_size: int,
    decoder_config: DecoderConfig,
    recorder_config: RecorderTrainConfig,
    inc_config: IncTrainConfig,
    num_tasks: int,
    seed: int = 0,
    double_krnet: bool = True,
    use_kr2: bool = True,
    replay_mode: str = "recorder",
    train_final_recorder: bool = False,
    output_dir: Path | str | None = None,
) -> KRILResult:
    """Run the incremental pipeline end to end.

    ``data`` is a SmallImageData bundle (train/test image tensors with labels).
    ``replay_mode`` selects how old-task features re-enter training:
    "recorder" replays from the trained recorders, "oracle" substitutes the
    cached real features, and "none" disables replay entirely (plain
    fine-tuning, which also drops the auxiliary loss).
    """
    if replay_mode not in ("recorder", "oracle", "none"):
        raise ValidationError(f"unknown replay mode {replay_mode!r}")
    run_dir = None
    if output_dir is not None:
        run_dir = Path(output_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "features").mkdir(parents=True, exist_ok=True)

    classes = sorted(set(int(c) for c in data.train_labels.tolist()))
    sequence = make_task_sequence(classes, num_tasks, seed)
    label_map = sequence.label_map()
    train_labels_mapped = _remap(data.train_labels, label_map)
    test_labels_mapped = _remap(data.test_labels, label_map)

    # --- base task: train the full network, then split and freeze ---
    torch.manual_seed(seed)
    base_classes = sequence.class_groups[0]
    net = net_factory(len(base_classes))
    base_rows = _select(base_classes, data.train_labels)
    train_image_classifier(
        net, data.train_images[base_rows], train_labels_mapped[base_rows], inc_config, seed
    )
    split: SplitBackbone = split_backbone(net, split_index, tuple(data.train_images.shape[1:]))
    extractor, learner = split.extractor, split.learner
    hashes = [state_hash(extractor)]

    def test_accuracy(task: int) -> float:
        rows = _select(sequence.classes_through(task), data.test_labels)
        return evaluate_model(extractor, learner, data.test_images[rows], test_labels_mapped[rows])

    accuracies = [test_accuracy(0)]
    seen_counts = [len(base_classes)]
    rows_out = [
        {"task": 0, "seen_classes": seen_counts[0], "split": "test",
         "accuracy": accuracies[0], "loss_ce": float("nan"), "loss_aux": float("nan")}
    ]

    # --- base recorder over base-task features ---
    base_feats = extract_features(extractor, data.train_images[base_rows])
    base_corpus = FeatureCorpus(
        base_feats, base_rows.tolist(), train_labels_mapped[base_rows].numpy()
    )
    recorder_base: KRNet | None = None
    recorder_inc: KRNet | None = None
    cached = {0: base_corpus}
    if replay_mode == "recorder":
        recorder_base = recorder_for_corpus(base_corpus, group_size, decoder_config)
        train_recorder(recorder_base, base_corpus, recorder_config, head=_recorder_head(learner, use_kr2))
        if run_dir is not None:
            save_krnet(run_dir / "checkpoints" / "recorder_base.krz", recorder_base)
    if run_dir is not None:
        save_feature_block(run_dir / "features" / "task_0", base_corpus)

    # --- incremental rounds ---
    for task in range(1, num_tasks + 1):
        new_classes = sequence.class_groups[task]
        new_rows = _select(new_classes, data.train_labels)
        new_feats = extract_features(extractor, data.train_images[new_rows])
        new_corpus = FeatureCorpus(
            new_feats, new_rows.tolist(), train_labels_mapped[new_rows].numpy()
        )
        cached[task] = new_corpus
        if run_dir is not None:
            save_feature_block(run_dir / "features" / f"task_{task}", new_corpus)

        if replay_mode == "recorder":
            replay_parts = [_replayed_corpus(recorder_base)]
            if recorder_inc is not None:
                replay_parts.append(_replayed_corpus(recorder_inc))
            replayed = replay_parts[0] if len(replay_parts) == 1 else concat_corpora(*replay_parts)
        elif replay_mode == "oracle":
            replayed = cached[0]
            for prev in range(1, task):
                replayed = concat_corpora(replayed, cached[prev])
        else:
            replayed = None

        previous_learner = copy.deepcopy(learner)
        learner.grow_classifier(len(sequence.classes_through(task)))

        if replayed is not None:
            mixed = concat_corpora(replayed, new_corpus)
            mask = torch.zeros(len(mixed), dtype=torch.bool)
            mask[: len(replayed)] = True
        else:
            mixed, mask = new_corpus, torch.zeros(len(new_corpus), dtype=torch.bool)
        losses = train_task_learner(
            learner,
            previous_learner if replay_mode != "none" else None,
            mixed.features,
            torch.as_tensor(mixed.labels, dtype=torch.long),
            mask,
            inc_config,
            seed + task,
        )

        # recorder upkeep: the incremental recorder re-learns everything it
        # replayed plus the new round (the base recorder never retrains)
        if replay_mode == "recorder" and (task < num_tasks or train_final_recorder):
            head = _recorder_head(learner, use_kr2)
            if double_krnet:
                targets = new_corpus if recorder_inc is None else self_taught_targets(recorder_inc, new_corpus)
                recorder_inc = recorder_for_corpus(targets, group_size, decoder_config)
                train_recorder(recorder_inc, targets, recorder_config, head=head)
            else:
                targets = self_taught_targets(recorder_base, new_corpus)
                recorder_base = recorder_for_corpus(targets, group_size, decoder_config)
                train_recorder(recorder_base, targets, recorder_config, head=head)
            if run_dir is not None:
                which = recorder_inc if double_krnet else recorder_base
                save_krnet(run_dir / "checkpoints" / f"recorder_task_{task}.krz", which)

        hashes.append(state_hash(extractor))
        accuracies.append(test_accuracy(task))
        seen_counts.append(len(sequence.classes_through(task)))
        rows_out.append(
            {"task": task, "seen_classes": seen_counts[-1], "split": "test",
             "accuracy": accuracies[-1], **losses}
        )
        if run_dir is not None:
            torch.save(learner.state_dict(), run_dir / "checkpoints" / f"learner_task_{task}.pt")

    if len(set(hashes)) != 1:
        raise RuntimeError("frozen extractor weights changed during incremental training")

    result = KRILResult(accuracies, seen_counts, sequence, rows_out, hashes, run_dir)
    if run_dir is not None:
        write_metrics_csv(run_dir / "metrics.csv", rows_out)
    return result


def write_metrics_csv(path: Path | str, rows: list[dict]) -> None:
    fields = ["task", "seen_classes", "split", "accuracy", "loss_ce", "loss_aux"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


def joint_curve(
    data,
    net_factory: Callable[[int], ClassifierResNet],
    inc_config: IncTrainConfig,
    num_tasks: int,
    seed: int = 0,
) -> list[float]:
    """Upper reference: retrain the whole network from scratch on everything
    seen so far at each step, evaluating on the same growing test set."""
    classes = sorted(set(int(c) for c in data.train_labels.tolist()))
    sequence = make_task_sequence(classes, num_tasks, seed)
    label_map = sequence.label_map()
    train_mapped = _remap(data.train_labels, label_map)
    test_mapped = _remap(data.test_labels, label_map)
    curve = []
    for task in range(num_tasks + 1):
        seen = sequence.classes_through(task)
        torch.manual_seed(seed)
        net = net_factory(len(seen))
        rows = _select(seen, data.train_labels)
        train_image_classifier(net, data.train_images[rows], train_mapped[rows], inc_config, seed)
        net.eval()
        with torch.no_grad():
            test_rows = _select(seen, data.test_labels)
            preds = []
            for start in range(0, len(test_rows), 512):
                chunk = test_rows[start : start + 512]
                preds.append(net(data.test_images[chunk]).argmax(dim=1))
            correct = int((torch.cat(preds) == test_mapped[test_rows]).sum())
        curve.append(correct / len(test_rows))
    return curve


def baseline_bounds(
    data,
    net_factory: Callable[[int], ClassifierResNet],
    split_index: int,
    group_size: int,
    decoder_config: DecoderConfig,
    recorder_config: RecorderTrainConfig,
    inc_config: IncTrainConfig,
    num_tasks: int,
    seed: int = 0,
    include_kril: bool = True,
) -> dict[str, list[float]]:
    """Reference curves sharing the KRIL run's splits and seed: joint retraining
    (upper), oracle replay with real cached features, and replay-free
    fine-tuning (lower)."""
    kwargs = dict(
        data=data,
        net_factory=net_factory,
        split_index=split_index,
        group_size=group_size,
        decoder_config=decoder_config,
        recorder_config=recorder_config,
        inc_config=inc_config,
        num_tasks=num_tasks,
        seed=seed,
    )
    curves = {
        "joint": joint_curve(data, net_factory, inc_config, num_tasks, seed),
        "oracle": run_kril(replay_mode="oracle", **kwargs).accuracies,
        "fine_tune": run_kril(replay_mode="none", **kwargs).accuracies,
    }
    if include_kril:
        curves["kril"] = run_kril(replay_mode="recorder", **kwargs).accuracies
    return curves
