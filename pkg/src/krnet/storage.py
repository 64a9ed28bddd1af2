"""Byte-exact storage accounting, reconstruction-error metrics and report emission.

All byte math assumes 4-byte scalars and binary units (1 MB = 2**20 bytes,
1 GB = 2**30 bytes); decimal units do not reproduce the published sizes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .corpus import FeatureCorpus
from .errors import ValidationError
from .grouping import build_group_index

BYTES_PER_SCALAR = 4
MIB = 2**20
GIB = 2**30


@dataclass(frozen=True)
class StorageReport:
    num_classes: int
    num_samples: int
    num_groups: int
    group_size: int
    feature_shape: tuple[int, int, int]
    bytes_raw: int
    bytes_ae_latent: int
    bytes_krnet_latent: int
    bytes_model_weights: int
    compression_ratio_overall: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_shape"] = list(self.feature_shape)
        return d


def even_class_counts(num_classes: int, num_samples: int) -> dict[int, int]:
    """Distribute N samples over C classes as evenly as possible."""
    if num_classes < 1 or num_samples < num_classes:
        raise ValidationError(f"cannot spread {num_samples} samples over {num_classes} classes")
    base, extra = divmod(num_samples, num_classes)
    return {c: base + (1 if c < extra else 0) for c in range(num_classes)}


def storage_report(
    class_counts: Mapping[int, int],
    group_size: int,
    feature_shape: tuple[int, int, int],
    model_weight_bytes: int = 0,
    ae_latent_dim: int | None = None,
) -> StorageReport:
    """Account raw-feature, per-sample-code and group-vector storage for one corpus.

    The autoencoder stores one code per sample (default width 2H); the
    recorder stores two vectors of dimension H per group, independent of N.
    """
    index = build_group_index(class_counts, group_size)
    n = index.num_samples
    m = index.num_groups
    c, h, w = feature_shape
    if ae_latent_dim is None:
        ae_latent_dim = 2 * group_size
    bytes_raw = n * c * h * w * BYTES_PER_SCALAR
    bytes_ae = n * ae_latent_dim * BYTES_PER_SCALAR
    bytes_kr = 2 * m * group_size * BYTES_PER_SCALAR
    ratio = bytes_raw / (bytes_kr + model_weight_bytes)
    return StorageReport(
        num_classes=len(class_counts),
        num_samples=n,
        num_groups=m,
        group_size=group_size,
        feature_shape=(c, h, w),
        bytes_raw=bytes_raw,
        bytes_ae_latent=bytes_ae,
        bytes_krnet_latent=bytes_kr,
        bytes_model_weights=model_weight_bytes,
        compression_ratio_overall=ratio,
    )


def format_bytes_binary(num_bytes: int) -> str:
    """Two-decimal binary-unit size string, GB above one binary gigabyte."""
    if num_bytes >= GIB:
        return f"{num_bytes / GIB:.2f} GB"
    return f"{num_bytes / MIB:.2f} MB"


def storage_table_markdown(reports: list[StorageReport]) -> str:
    lines = [
        "| # Classes | # Samples | Feature Storage | AE Storage | KRNet Storage |",
        "|---:|---:|---:|---:|---:|",
    ]
    for r in reports:
        lines.append(
            f"| {r.num_classes} | {r.num_samples:,} | {format_bytes_binary(r.bytes_raw)} "
            f"| {format_bytes_binary(r.bytes_ae_latent)} | {format_bytes_binary(r.bytes_krnet_latent)} |"
        )
    return "\n".join(lines) + "\n"


def reconstruction_metrics(replayed: FeatureCorpus, original: FeatureCorpus) -> dict:
    """Raw-scale error metrics between a replayed corpus and its originals.

    Corpora are aligned by sample ID; differing ID sets are a misalignment
    error, not a silent intersection.
    """
    if set(replayed.sample_ids) != set(original.sample_ids):
        raise ValidationError("corpus misalignment: replayed and original sample ID sets differ")
    order = {sid: i for i, sid in enumerate(replayed.sample_ids)}
    rows = [order[sid] for sid in original.sample_ids]
    rep = replayed.features[rows].double()
    org = original.features.double()
    if rep.shape != org.shape:
        raise ValidationError(f"corpus misalignment: shapes {tuple(rep.shape)} vs {tuple(org.shape)}")
    sq = (rep - org).pow(2)
    per_class = {}
    for cls in sorted(set(original.labels.tolist())):
        mask = original.labels == cls
        per_class[int(cls)] = float(sq[torch.as_tensor(mask)].mean())
    return {
        "mse": float(sq.mean()),
        "per_class_mse": per_class,
        "max_abs_error": float((rep - org).abs().max()),
    }


def write_storage_csv(path, reports: list[StorageReport]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = [
        "num_classes", "num_samples", "num_groups", "group_size", "feature_shape",
        "bytes_raw", "bytes_ae_latent", "bytes_krnet_latent", "bytes_model_weights",
        "compression_ratio_overall",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for r in reports:
            row = r.to_dict()
            row["feature_shape"] = "x".join(str(v) for v in r.feature_shape)
            writer.writerow(row)


def write_curves_csv(path, curves: Mapping[str, list[float]]):
    """Accuracy-vs-task curves, one row per (method, step). Header only when empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "step", "accuracy"])
        for method, values in curves.items():
            for step, acc in enumerate(values):
                writer.writerow([method, step, f"{acc:.6f}"])


def plot_accuracy_curves(path, curves: Mapping[str, list[float]], title: str = "Incremental accuracy"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for method, values in curves.items():
        ax.plot(range(len(values)), values, marker="o", label=method)
    ax.set_xlabel("task")
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
