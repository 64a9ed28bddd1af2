"""Datasets and feature caches.

Two synthetic presets keep everything runnable on a laptop: a clustered sparse
feature corpus for recorder-only experiments (no backbone involved) and a
small prototype-image classification set for the incremental pipeline.  Real
datasets (CIFAR-100, an ImageNet-style subset manifest) are plumbed through
torchvision for full-scale runs.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import FeatureCorpus
from .errors import ValidationError

DATA_ROOT_ENV = "KRNET_DATA_ROOT"


def data_root(override: str | os.PathLike | None = None) -> Path:
    """Dataset directory: explicit argument, else $KRNET_DATA_ROOT, else ./data."""
    if override is not None:
        return Path(override)
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


# ---------------------------------------------------------------------------
# synthetic presets
# ---------------------------------------------------------------------------

def make_synthetic_feature_corpus(
    num_samples: int = 2048,
    num_classes: int = 8,
    feature_shape: tuple[int, int, int] = (16, 4, 4),
    sparsity: float = 0.2,
    noise_scale: float = 0.08,
    variation_rank: int = 8,
    jitter_scale: float = 0.03,
    seed: int = 0,
) -> FeatureCorpus:
    """Clustered sparse features: per-class nonnegative prototypes with a fixed
    per-class support pattern (a ``sparsity`` fraction of coordinates is zero),
    per-sample variation along a low-rank per-class basis, and a small
    independent jitter.  Mimics post-ReLU activations — sparse, clustered, and
    varying along class-specific manifolds — without running any backbone.
    """
    if not 0 <= sparsity < 1:
        raise ValidationError(f"sparsity must be in [0, 1), got {sparsity}")
    if variation_rank < 1:
        raise ValidationError(f"variation rank must be >= 1, got {variation_rank}")
    rng = np.random.default_rng(seed)
    dim = int(np.prod(feature_shape))
    counts = [num_samples // num_classes] * num_classes
    for i in range(num_samples % num_classes):
        counts[i] += 1
    rows, labels = [], []
    for cls in range(num_classes):
        prototype = np.abs(rng.normal(0.0, 1.0, size=dim))
        support = rng.random(dim) >= sparsity
        basis = rng.normal(size=(dim, variation_rank)) / np.sqrt(variation_rank)
        for _ in range(counts[cls]):
            wander = basis @ rng.normal(size=variation_rank)
            sample = prototype + noise_scale * wander + jitter_scale * rng.normal(size=dim)
            sample = np.clip(sample, 0.0, None) * support
            rows.append(sample)
            labels.append(cls)
    features = torch.tensor(np.stack(rows), dtype=torch.float32).view(num_samples, *feature_shape)
    return FeatureCorpus(features, list(range(num_samples)), np.array(labels, dtype=np.int64))


@dataclass
class SmallImageData:
    """An in-memory labeled image set with train and test splits."""

    train_images: torch.Tensor
    train_labels: torch.Tensor
    test_images: torch.Tensor
    test_labels: torch.Tensor

    def __post_init__(self):
        if self.train_images.shape[0] != self.train_labels.shape[0]:
            raise ValidationError("train images and labels disagree on sample count")
        if self.test_images.shape[0] != self.test_labels.shape[0]:
            raise ValidationError("test images and labels disagree on sample count")

    @property
    def num_classes(self) -> int:
        return int(self.train_labels.max()) + 1

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_images.shape[1:])


def make_small_image_data(
    num_classes: int = 10,
    train_per_class: int = 100,
    test_per_class: int = 20,
    image_size: int = 8,
    noise_scale: float = 0.35,
    seed: int = 0,
) -> SmallImageData:
    """Prototype-per-class images with additive noise — easy enough that joint
    training saturates, hard enough that forgetting is visible."""
    rng = np.random.default_rng(seed)
    shape = (3, image_size, image_size)
    prototypes = rng.normal(0.0, 1.0, size=(num_classes, *shape))

    def draw(per_class: int):
        images, labels = [], []
        for cls in range(num_classes):
            noise = rng.normal(0.0, noise_scale, size=(per_class, *shape))
            images.append(prototypes[cls][None] + noise)
            labels.extend([cls] * per_class)
        return (
            torch.tensor(np.concatenate(images), dtype=torch.float32),
            torch.tensor(labels, dtype=torch.long),
        )

    train_images, train_labels = draw(train_per_class)
    test_images, test_labels = draw(test_per_class)
    return SmallImageData(train_images, train_labels, test_images, test_labels)


# ---------------------------------------------------------------------------
# real datasets
# ---------------------------------------------------------------------------

def cifar100_datasets(root: str | os.PathLike | None = None, augment: bool = True, download: bool = False):
    """CIFAR-100 train/test with the standard pad-4/random-crop/flip pipeline.

    Returns (train_set, test_set) torchvision datasets; raises a clear error
    when the files are absent and download is off.
    """
    from torchvision import datasets, transforms

    mean = (0.5071, 0.4865, 0.4409)
    std = (0.2673, 0.2564, 0.2762)
    train_tf = [transforms.ToTensor(), transforms.Normalize(mean, std)]
    if augment:
        train_tf = [
            transforms.RandomCrop(32, padding=4),
            transforms.RandomHorizontalFlip(),
        ] + train_tf
    test_tf = [transforms.ToTensor(), transforms.Normalize(mean, std)]
    root = data_root(root)
    try:
        train = datasets.CIFAR100(str(root), train=True, download=download,
                                  transform=transforms.Compose(train_tf))
        test = datasets.CIFAR100(str(root), train=False, download=download,
                                 transform=transforms.Compose(test_tf))
    except RuntimeError as exc:
        raise ValidationError(
            f"CIFAR-100 not found under {root}; set {DATA_ROOT_ENV} or pass download=True"
        ) from exc
    return train, test


def imagenet_subset_manifest(class_names: Sequence[str], num_classes: int = 100, seed: int = 1993) -> dict:
    """Deterministic class subset for ImageNet-style runs.

    The legacy RandomState generator is used on purpose: the fixed seed keeps
    the selected classes identical to the widely used incremental protocol.
    """
    if num_classes > len(class_names):
        raise ValidationError(f"asked for {num_classes} classes, only {len(class_names)} available")
    order = np.random.RandomState(seed).permutation(len(class_names))
    chosen = [str(class_names[i]) for i in order[:num_classes]]
    return {"seed": seed, "num_classes": num_classes, "classes": chosen}


# ---------------------------------------------------------------------------
# feature block cache
# ---------------------------------------------------------------------------

def save_feature_block(prefix: Path | str, corpus: FeatureCorpus) -> Path:
    """Write a corpus as a raw little-endian float32 block plus a JSON manifest."""
    prefix = Path(prefix)
    array = corpus.features.detach().cpu().numpy().astype("<f4")
    payload = array.tobytes()
    prefix.with_suffix(".bin").write_bytes(payload)
    manifest = {
        "dtype": "float32-le",
        "shape": list(array.shape),
        "sample_ids": list(corpus.sample_ids),
        "labels": [int(x) for x in corpus.labels],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
    return prefix.with_suffix(".bin")


def load_feature_block(prefix: Path | str) -> FeatureCorpus:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    payload = prefix.with_suffix(".bin").read_bytes()
    if manifest.get("sha256") and hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ValidationError(f"feature block {prefix}.bin does not match its manifest digest")
    array = np.frombuffer(payload, dtype="<f4").reshape(manifest["shape"]).copy()
    return FeatureCorpus(
        torch.from_numpy(array),
        list(manifest["sample_ids"]),
        np.array(manifest["labels"], dtype=np.int64),
    )


def extract_and_cache_features(
    extractor: torch.nn.Module,
    images: torch.Tensor,
    labels: torch.Tensor,
    sample_ids: Sequence[int],
    cache_prefix: Path | str,
    batch_size: int = 512,
) -> tuple[FeatureCorpus, bool]:
    """Run the frozen extractor over images, caching the result on disk.

    A second call with the same prefix and matching manifest loads the cached
    block byte-for-byte instead of recomputing.  Returns (corpus, cache_hit).
    """
    cache_prefix = Path(cache_prefix)
    manifest_path = cache_prefix.with_suffix(".json")
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("sample_ids") == list(sample_ids):
            return load_feature_block(cache_prefix), True
    parts = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            parts.append(extractor(images[start : start + batch_size]))
    features = torch.cat(parts) if parts else images.new_zeros((0,))
    corpus = FeatureCorpus(features, list(sample_ids), labels.cpu().numpy().astype(np.int64))
    cache_prefix.parent.mkdir(parents=True, exist_ok=True)
    save_feature_block(cache_prefix, corpus)
    return corpus, False


def zero_fraction(features: torch.Tensor) -> float:
    """Share of exactly-zero entries — the sparsity audit for cached features."""
    return float((features == 0).double().mean())
