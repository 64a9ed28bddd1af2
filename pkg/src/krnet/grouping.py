"""Sample grouping, group/local ID assignment and the cyclic ID permutation.

Samples are partitioned into groups of at most ``group_size`` members, one
class per group when labels are available.  Each sample is addressed by a
(group ID, local ID) pair; the local ID selects a cyclic permutation of the
group's shared dynamic vector, which is what individualizes samples that
share one embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Group:
    group_id: int
    class_label: int
    member_count: int


@dataclass(frozen=True)
class GroupIndex:
    """Immutable partition of samples into fixed-capacity per-class groups."""

    group_size: int
    groups: tuple[Group, ...]
    sample_map: dict[int, tuple[int, int]] = field(repr=False)

    def __post_init__(self):
        if self.group_size < 1:
            raise ValidationError("group_size must be >= 1")
        for m, g in enumerate(self.groups):
            if g.group_id != m:
                raise ValidationError(f"group IDs must be contiguous, got {g.group_id} at position {m}")
            if not 1 <= g.member_count <= self.group_size:
                raise ValidationError(f"group {m} has member_count {g.member_count} outside [1, {self.group_size}]")
        seen = [0] * len(self.groups)
        for sid, (m, n) in self.sample_map.items():
            if not 0 <= m < len(self.groups):
                raise ValidationError(f"sample {sid} mapped to unknown group {m}")
            if not 0 <= n < self.groups[m].member_count:
                raise ValidationError(f"sample {sid} has local ID {n} >= member_count of group {m}")
            seen[m] += 1
        for m, g in enumerate(self.groups):
            if seen[m] != g.member_count:
                raise ValidationError(f"group {m} maps {seen[m]} samples but declares {g.member_count}")

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def num_samples(self) -> int:
        return len(self.sample_map)

    @property
    def class_labels(self) -> tuple[int, ...]:
        return tuple(sorted({g.class_label for g in self.groups}))

    def slot(self, sample_id: int) -> tuple[int, int]:
        try:
            return self.sample_map[sample_id]
        except KeyError:
            raise ValidationError(f"unknown sample ID {sample_id}") from None

    def slots(self, sample_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """(group IDs, local IDs) arrays for a batch of sample IDs."""
        ms = np.empty(len(sample_ids), dtype=np.int64)
        ns = np.empty(len(sample_ids), dtype=np.int64)
        for i, sid in enumerate(sample_ids):
            ms[i], ns[i] = self.slot(sid)
        return ms, ns

    def label_of(self, sample_id: int) -> int:
        m, _ = self.slot(sample_id)
        return self.groups[m].class_label

    def labels(self, sample_ids: Sequence[int]) -> np.ndarray:
        return np.array([self.label_of(sid) for sid in sample_ids], dtype=np.int64)

    @property
    def sample_ids(self) -> list[int]:
        """All mapped sample IDs ordered by (group ID, local ID)."""
        return sorted(self.sample_map, key=lambda sid: self.sample_map[sid])

    def to_json(self) -> str:
        doc = {
            "H": self.group_size,
            "groups": [{"m": g.group_id, "class": g.class_label, "count": g.member_count} for g in self.groups],
            "samples": [[sid, m, n] for sid, (m, n) in sorted(self.sample_map.items(), key=lambda kv: kv[1])],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "GroupIndex":
        doc = json.loads(text)
        groups = tuple(Group(g["m"], g["class"], g["count"]) for g in doc["groups"])
        sample_map = {sid: (m, n) for sid, m, n in doc["samples"]}
        return cls(group_size=doc["H"], groups=groups, sample_map=sample_map)


def build_group_index(class_counts: Mapping[int, int], group_size: int) -> GroupIndex:
    """Partition per-class sample counts into groups of at most ``group_size``.

    Sample IDs are synthesized as 0..N-1 in (class, within-class rank) order,
    so the index is a deterministic function of its inputs.  For samples with
    externally meaningful IDs use :func:`group_index_from_labels`.
    """
    if not class_counts:
        raise ValidationError("class_counts is empty")
    if group_size < 1:
        raise ValidationError(f"group size must be >= 1, got {group_size}")
    labels: list[int] = []
    for c in sorted(class_counts):
        count = class_counts[c]
        if count < 1:
            raise ValidationError(f"class {c} has non-positive count {count}")
        labels.extend([c] * count)
    return group_index_from_labels(labels, group_size)


def group_index_from_labels(
    labels: Sequence[int],
    group_size: int,
    sample_ids: Sequence[int] | None = None,
) -> GroupIndex:
    """Group labeled samples, one class per group, filling in (class, ID) order.

    ``sample_ids`` defaults to positions 0..N-1; when given it must align with
    ``labels`` and contain no duplicates.
    """
    if len(labels) == 0:
        raise ValidationError("no samples to group")
    if group_size < 1:
        raise ValidationError(f"group size must be >= 1, got {group_size}")
    if sample_ids is None:
        sample_ids = range(len(labels))
    elif len(sample_ids) != len(labels):
        raise ValidationError(f"{len(sample_ids)} sample IDs for {len(labels)} labels")

    by_class: dict[int, list[int]] = {}
    for sid, lab in zip(sample_ids, labels):
        by_class.setdefault(int(lab), []).append(int(sid))

    groups: list[Group] = []
    sample_map: dict[int, tuple[int, int]] = {}
    for c in sorted(by_class):
        ids = sorted(by_class[c])
        for start in range(0, len(ids), group_size):
            chunk = ids[start : start + group_size]
            m = len(groups)
            groups.append(Group(m, c, len(chunk)))
            for n, sid in enumerate(chunk):
                if sid in sample_map:
                    raise ValidationError(f"duplicate sample ID {sid}")
                sample_map[sid] = (m, n)
    index = GroupIndex(group_size=group_size, groups=tuple(groups), sample_map=sample_map)
    expected = sum(math.ceil(len(ids) / group_size) for ids in by_class.values())
    assert index.num_groups == expected
    return index


def group_index_unlabeled(num_samples: int, group_size: int) -> GroupIndex:
    """Sequential-fill grouping for corpora without class labels.

    All groups carry the placeholder label -1; M = ceil(N / H).
    """
    if num_samples < 1:
        raise ValidationError("no samples to group")
    return group_index_from_labels([-1] * num_samples, group_size)


def permutation_matrix(local_id: int, size: int) -> np.ndarray:
    """The H x H binary matrix that cyclically shifts a vector by ``local_id``.

    Entry (i, j) is 1 iff j - i = local_id or i - j = size - local_id.
    """
    if size < 1:
        raise ValidationError(f"size must be >= 1, got {size}")
    if not 0 <= local_id < size:
        raise ValidationError(f"local ID must lie in [0, {size}), got {local_id}")
    mat = np.zeros((size, size), dtype=np.int64)
    for i in range(size):
        mat[i, (i + local_id) % size] = 1
    return mat


def apply_local_permutation(vec: np.ndarray, local_id: int) -> np.ndarray:
    """Apply the local-ID permutation to a vector as an O(H) index roll.

    Equals ``permutation_matrix(local_id, H) @ vec`` exactly.
    """
    vec = np.asarray(vec)
    size = vec.shape[-1]
    if not 0 <= local_id < size:
        raise ValidationError(f"local ID must lie in [0, {size}), got {local_id}")
    return np.roll(vec, -local_id, axis=-1)
