"""In-memory feature corpora: aligned (feature map, class label, sample ID) records."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError


@dataclass
class FeatureCorpus:
    """An (N, C, H, W) block of raw-scale features with aligned IDs and labels."""

    features: torch.Tensor
    sample_ids: list[int]
    labels: np.ndarray

    def __post_init__(self):
        self.sample_ids = [int(s) for s in self.sample_ids]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.dim() != 4:
            raise ValidationError(f"features must be (N, C, H, W), got shape {tuple(self.features.shape)}")
        n = self.features.shape[0]
        if len(self.sample_ids) != n or self.labels.shape[0] != n:
            raise ValidationError(
                f"misaligned corpus: {n} features, {len(self.sample_ids)} IDs, {self.labels.shape[0]} labels"
            )
        if len(set(self.sample_ids)) != n:
            raise ValidationError("duplicate sample IDs in corpus")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return tuple(self.features.shape[1:])

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def subset(self, rows) -> "FeatureCorpus":
        rows = list(rows)
        return FeatureCorpus(
            self.features[rows],
            [self.sample_ids[i] for i in rows],
            self.labels[rows],
        )


def concat_corpora(first: FeatureCorpus, second: FeatureCorpus) -> FeatureCorpus:
    overlap = set(first.sample_ids) & set(second.sample_ids)
    if overlap:
        raise ValidationError(f"sample ID collision between corpora: {sorted(overlap)[:5]}")
    return FeatureCorpus(
        torch.cat([first.features, second.features], dim=0),
        first.sample_ids + second.sample_ids,
        np.concatenate([first.labels, second.labels]),
    )
