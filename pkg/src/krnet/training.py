"""Recorder training: two-term regression loss, flat-then-linear LR schedule,
per-round feature normalization and the self-taught target recursion."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .autoencoder import FeatureAutoencoder
from .corpus import FeatureCorpus, concat_corpora
from .errors import ValidationError
from .grouping import group_index_from_labels
from .model import KRNet
from .normalization import NormalizationStats, compute_norm_stats

ADAM_BETAS = (0.9, 0.999)


@dataclass
class RecorderTrainConfig:
    """Optimizer and schedule settings for fitting a recorder to its corpus.

    Weight decay defaults to zero and must stay zero for maximum fitting
    capacity; the field exists so the degradation is measurable.
    """

    batch_size: int = 1000
    lr_peak: float = 3e-3
    lr_floor: float = 3e-6
    warm_iters: int = 20_000
    decay_iters: int = 20_000
    weight_decay: float = 0.0
    aux_weight: float = 1e-3
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    inherit_norm_stats: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lr_peak <= 0 or self.lr_floor <= 0 or self.lr_floor > self.lr_peak:
            raise ValidationError("learning rates must satisfy 0 < lr_floor <= lr_peak")
        if self.warm_iters < 0 or self.decay_iters < 0 or self.warm_iters + self.decay_iters < 1:
            raise ValidationError("iteration budget must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.aux_weight < 0:
            raise ValidationError("aux_weight must be >= 0")

    @property
    def total_iters(self) -> int:
        return self.warm_iters + self.decay_iters

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate_at(iteration: int, config: RecorderTrainConfig) -> float:
    """Constant at lr_peak through warm_iters, then linear to lr_floor."""
    if iteration <= config.warm_iters:
        return config.lr_peak
    if iteration >= config.warm_iters + config.decay_iters:
        return config.lr_floor
    frac = (iteration - config.warm_iters) / max(1, config.decay_iters)
    return config.lr_peak + (config.lr_floor - config.lr_peak) * frac


def _check_frozen(head: torch.nn.Module):
    if any(p.requires_grad for p in head.parameters()):
        raise ValidationError("task feature head must be frozen (requires_grad=False) during recorder training")


def loss_kr(
    predicted: torch.Tensor,
    target: torch.Tensor,
    head: torch.nn.Module | None = None,
    gamma: float = 0.0,
    denorm: NormalizationStats | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch-mean squared-norm reconstruction loss plus the head-space auxiliary term.

    Returns (total, reconstruction term, auxiliary term).  The auxiliary term
    compares the frozen head's responses to predicted vs. target features;
    when ``denorm`` is given both are mapped back to raw scale first.
    """
    if predicted.shape != target.shape:
        raise ValidationError(f"prediction shape {tuple(predicted.shape)} != target shape {tuple(target.shape)}")
    kr1 = (predicted - target).pow(2).flatten(1).sum(dim=1).mean()
    kr2 = torch.zeros((), dtype=predicted.dtype, device=predicted.device)
    if head is not None:
        _check_frozen(head)
        kr2 = _head_gap(predicted, target, head, denorm)
    return kr1 + gamma * kr2, kr1, kr2


def _head_gap(predicted, target, head, denorm):
    if denorm is not None:
        predicted = denorm.denormalize(predicted)
        target = denorm.denormalize(target)
    return (head(predicted) - head(target)).pow(2).flatten(1).sum(dim=1).mean()


@dataclass
class RecorderTrainResult:
    final_loss: float
    final_kr1: float
    final_kr2: float
    replay_mse: float
    iterations: int
    log_rows: list = field(default_factory=list)


def _state_clone(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _states_equal(a: dict[str, torch.Tensor], b: dict[str, torch.Tensor]) -> bool:
    return all(torch.equal(a[k], b[k]) for k in a)


def elementwise_mse(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a.double() - b.double()).pow(2).mean())


def train_recorder(
    recorder: KRNet | FeatureAutoencoder,
    corpus: FeatureCorpus,
    config: RecorderTrainConfig,
    head: torch.nn.Module | None = None,
    log_path=None,
    checkpoint_dir=None,
) -> RecorderTrainResult:
    """Fit a recorder (ID-conditioned or autoencoder) to a raw-scale feature corpus.

    Targets are normalized per channel into [0, 1] with stats computed over this
    corpus (or inherited when the config says so); the stats are stored on the
    recorder so replay can denormalize.  The head, when given, is frozen and
    feeds the auxiliary loss term at raw feature scale.
    """
    if len(corpus) == 0:
        raise ValidationError("cannot train a recorder on an empty corpus")

    if config.inherit_norm_stats and recorder.norm_stats is not None:
        stats = recorder.norm_stats
    else:
        stats = compute_norm_stats(corpus.features)
    recorder.norm_stats = stats
    normalized = stats.normalize(corpus.features)

    is_krnet = isinstance(recorder, KRNet)
    if is_krnet:
        group_ids, local_ids = recorder.group_index.slots(corpus.sample_ids)
        group_ids = torch.as_tensor(group_ids)
        local_ids = torch.as_tensor(local_ids)

    head_snapshot = None
    if head is not None:
        head.eval()
        for p in head.parameters():
            p.requires_grad_(False)
        head_snapshot = _state_clone(head)

    optimizer = torch.optim.Adam(
        recorder.parameters(), lr=config.lr_peak, betas=ADAM_BETAS, weight_decay=config.weight_decay,
    )
    gen = torch.Generator().manual_seed(config.seed)
    n = len(corpus)
    order = torch.arange(n)
    cursor = n  # forces a reshuffle on the first iteration

    log_rows = []
    last = (math.nan, math.nan, math.nan)
    recorder.train()
    for it in range(1, config.total_iters + 1):
        if config.batch_size >= n:
            rows = order
        else:
            if cursor + config.batch_size > n:
                order = torch.randperm(n, generator=gen)
                cursor = 0
            rows = order[cursor : cursor + config.batch_size]
            cursor += config.batch_size

        lr = learning_rate_at(it, config)
        for pg in optimizer.param_groups:
            pg["lr"] = lr

        target = normalized[rows]
        if is_krnet:
            pred = recorder(group_ids[rows], local_ids[rows])
        else:
            pred = recorder(target)
        total, kr1, kr2 = loss_kr(pred, target, head=head, gamma=config.aux_weight if head else 0.0, denorm=stats)
        if not torch.isfinite(total):
            raise RuntimeError(
                f"recorder loss became non-finite at iteration {it} "
                "(common causes: weight decay accidentally enabled, learning rate too high)"
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        last = (total.item(), kr1.item(), kr2.item())
        if it % config.log_every == 0 or it == config.total_iters:
            log_rows.append({"iteration": it, "lr": lr, "loss_kr1": last[1], "loss_kr2": last[2], "loss_total": last[0]})
        if checkpoint_dir and config.checkpoint_every and it % config.checkpoint_every == 0:
            _save_checkpoint(recorder, Path(checkpoint_dir) / f"recorder-{it:06d}.ckpt")

    if head_snapshot is not None:
        if not _states_equal(head_snapshot, _state_clone(head)):
            raise RuntimeError("task feature head weights changed during recorder training")

    recorder.eval()
    with torch.no_grad():
        if is_krnet:
            replayed = recorder.replay(corpus.sample_ids)
        else:
            recorder.build_latent_bank(corpus.features, corpus.sample_ids)
            replayed = recorder.reconstruct(corpus.sample_ids)
        mse = elementwise_mse(replayed, corpus.features)

    if log_path is not None:
        write_training_log(log_path, log_rows)

    return RecorderTrainResult(
        final_loss=last[0], final_kr1=last[1], final_kr2=last[2],
        replay_mse=mse, iterations=config.total_iters, log_rows=log_rows,
    )


def _save_checkpoint(recorder, path):
    from .checkpoint import save_autoencoder, save_krnet

    if isinstance(recorder, KRNet):
        save_krnet(path, recorder)
    else:
        save_autoencoder(path, recorder)


def write_training_log(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "lr", "loss_kr1", "loss_kr2", "loss_total"])
        writer.writeheader()
        writer.writerows(rows)


def self_taught_targets(previous: KRNet, current: FeatureCorpus) -> FeatureCorpus:
    """Regression targets for the next recorder round: replays of everything the
    previous recorder holds, plus the current task's real features."""
    prev_ids = previous.group_index.sample_ids
    replayed = FeatureCorpus(
        previous.replay(prev_ids),
        prev_ids,
        previous.group_index.labels(prev_ids),
    )
    return concat_corpora(replayed, current)


def fresh_group_index(corpus: FeatureCorpus, group_size: int):
    """Per-class grouping over a corpus, keyed by its real sample IDs."""
    return group_index_from_labels(corpus.labels.tolist(), group_size, corpus.sample_ids)


def recorder_for_corpus(corpus: FeatureCorpus, group_size: int, config) -> KRNet:
    """Construct an untrained recorder sized for ``corpus`` with a fresh grouping."""
    return KRNet(fresh_group_index(corpus, group_size), config)


def clone_untrained(recorder: KRNet) -> KRNet:
    """A freshly initialized recorder with the same grouping and architecture."""
    return KRNet(copy.deepcopy(recorder.group_index), recorder.config)
