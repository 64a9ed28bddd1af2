"""Classification backbones and their partition into a frozen feature extractor
and an updatable task learner.

A backbone is a stem convolution, a flat list of residual building blocks and
a pooled linear head.  Splitting at block k puts the stem plus blocks[:k] into
the frozen extractor and blocks[k:] plus the head into the task learner, so
the conv-layer count works out to 1 + 2k vs. 2*(B-k) + 1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ValidationError


class ResidualUnit(nn.Module):
    """Standard two-conv residual block with batch norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class ClassifierResNet(nn.Module):
    """Residual classifier with a flat block list so it can be split anywhere."""

    def __init__(self, stem: nn.Module, blocks: list[ResidualUnit], feat_channels: int, num_classes: int):
        super().__init__()
        self.stem = stem
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(feat_channels, num_classes)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


def cifar_resnet(depth: int, num_classes: int, channels=(16, 32, 64), in_channels: int = 3) -> ClassifierResNet:
    """CIFAR-style residual net of depth 6n+2: three stages of n blocks each."""
    if (depth - 2) % 6 != 0:
        raise ValidationError(f"depth must be 6n+2, got {depth}")
    n = (depth - 2) // 6
    stem = nn.Sequential(
        nn.Conv2d(in_channels, channels[0], 3, padding=1, bias=False),
        nn.BatchNorm2d(channels[0]),
        nn.ReLU(inplace=True),
    )
    blocks, in_ch = [], channels[0]
    for stage, out_ch in enumerate(channels):
        for b in range(n):
            stride = 2 if stage > 0 and b == 0 else 1
            blocks.append(ResidualUnit(in_ch, out_ch, stride))
            in_ch = out_ch
    return ClassifierResNet(stem, blocks, channels[-1], num_classes)


def imagenet_resnet18(num_classes: int) -> ClassifierResNet:
    """Standard 18-layer residual net: 7x7 stem, four stages of two blocks."""
    stem = nn.Sequential(
        nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
        nn.BatchNorm2d(64),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(3, stride=2, padding=1),
    )
    blocks, in_ch = [], 64
    for stage, out_ch in enumerate([64, 128, 256, 512]):
        for b in range(2):
            stride = 2 if stage > 0 and b == 0 else 1
            blocks.append(ResidualUnit(in_ch, out_ch, stride))
            in_ch = out_ch
    return ClassifierResNet(stem, blocks, 512, num_classes)


class FeatureExtractor(nn.Module):
    """The frozen shallow part of a split backbone."""

    def __init__(self, stem: nn.Module, blocks: list[nn.Module]):
        super().__init__()
        self.stem = stem
        self.blocks = nn.ModuleList(blocks)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def train(self, mode: bool = True):
        # the extractor is permanently frozen; keep norm layers in eval statistics
        return super().train(False)

    @torch.no_grad()
    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return x


class TaskLearner(nn.Module):
    """The deep, retrainable part: remaining blocks, pooling and a growing classifier."""

    def __init__(self, blocks: list[nn.Module], feat_channels: int, num_classes: int):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.feat_channels = feat_channels
        self.classifier = nn.Linear(feat_channels, num_classes)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-classifier representation (the head-less task learner)."""
        for block in self.blocks:
            x = block(x)
        return F.adaptive_avg_pool2d(x, 1).flatten(1)

    def forward(self, x):
        return self.classifier(self.features(x))

    def grow_classifier(self, new_total: int):
        """Widen the classifier to ``new_total`` outputs, keeping learned rows."""
        old = self.classifier
        if new_total < old.out_features:
            raise ValidationError(f"cannot shrink classifier from {old.out_features} to {new_total}")
        if new_total == old.out_features:
            return
        grown = nn.Linear(old.in_features, new_total)
        with torch.no_grad():
            grown.weight[: old.out_features] = old.weight
            grown.bias[: old.out_features] = old.bias
        self.classifier = grown


@dataclass
class SplitBackbone:
    extractor: FeatureExtractor
    learner: TaskLearner
    split_index: int
    feature_shape: tuple[int, int, int]

    @property
    def extractor_layers(self) -> int:
        return 1 + 2 * self.split_index

    @property
    def learner_layers(self) -> int:
        return 2 * len(self.learner.blocks) + 1


def split_backbone(net: ClassifierResNet, split_index: int, input_shape: tuple[int, int, int]) -> SplitBackbone:
    """Partition a trained classifier at building block ``split_index``.

    Blocks [0, split_index) join the frozen extractor; the rest plus the
    classifier form the task learner.  The feature shape is probed with a
    dummy forward on ``input_shape`` images.
    """
    if not 1 <= split_index < net.num_blocks:
        raise ValidationError(f"split index must lie in [1, {net.num_blocks}), got {split_index}")
    extractor = FeatureExtractor(net.stem, list(net.blocks[:split_index]))
    learner = TaskLearner(list(net.blocks[split_index:]), net.fc.in_features, net.fc.out_features)
    learner.classifier = net.fc
    with torch.no_grad():
        probe = extractor(torch.zeros(1, *input_shape))
    return SplitBackbone(
        extractor=extractor,
        learner=learner,
        split_index=split_index,
        feature_shape=tuple(probe.shape[1:]),
    )


def state_hash(module: nn.Module) -> str:
    """Order-stable digest of every parameter and buffer byte in a module."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
