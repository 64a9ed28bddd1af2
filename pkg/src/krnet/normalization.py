"""Per-channel linear normalization of feature corpora into [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel (min, max) over a corpus; degenerate channels map to 0."""

    channel_min: np.ndarray
    channel_max: np.ndarray

    def __post_init__(self):
        if self.channel_min.shape != self.channel_max.shape or self.channel_min.ndim != 1:
            raise ValidationError("channel_min/channel_max must be 1-D arrays of equal length")
        if np.any(self.channel_max < self.channel_min):
            raise ValidationError("channel max below channel min")

    @property
    def num_channels(self) -> int:
        return self.channel_min.shape[0]

    def _ranges(self):
        span = self.channel_max - self.channel_min
        safe = np.where(span > 0, span, 1.0)
        return span, safe

    def normalize(self, features: torch.Tensor) -> torch.Tensor:
        """Map (..., C, H, W) features channel-wise into [0, 1]."""
        span, safe = self._ranges()
        lo = torch.as_tensor(self.channel_min, dtype=features.dtype, device=features.device)
        scale = torch.as_tensor(1.0 / safe, dtype=features.dtype, device=features.device)
        mask = torch.as_tensor((span > 0).astype(np.float64), dtype=features.dtype, device=features.device)
        lo, scale, mask = (t.view(-1, 1, 1) for t in (lo, scale, mask))
        return (features - lo) * scale * mask

    def denormalize(self, normalized: torch.Tensor) -> torch.Tensor:
        """Inverse of :meth:`normalize`; degenerate channels recover their constant."""
        span, safe = self._ranges()
        lo = torch.as_tensor(self.channel_min, dtype=normalized.dtype, device=normalized.device).view(-1, 1, 1)
        sp = torch.as_tensor(span, dtype=normalized.dtype, device=normalized.device).view(-1, 1, 1)
        return normalized * sp + lo

    def to_bytes(self) -> bytes:
        """Flat little-endian float32 block of interleaved (min, max) pairs."""
        inter = np.empty(2 * self.num_channels, dtype="<f4")
        inter[0::2] = self.channel_min
        inter[1::2] = self.channel_max
        return inter.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NormalizationStats":
        inter = np.frombuffer(blob, dtype="<f4")
        if inter.size % 2 != 0:
            raise ValidationError("normalization block must hold (min, max) pairs")
        return cls(inter[0::2].astype(np.float32), inter[1::2].astype(np.float32))


def compute_norm_stats(features: torch.Tensor) -> NormalizationStats:
    """Per-channel min/max over all samples and spatial positions of an (N, C, H, W) corpus."""
    if features.numel() == 0:
        raise ValidationError("cannot compute normalization stats over an empty corpus")
    if features.dim() != 4:
        raise ValidationError(f"expected an (N, C, H, W) corpus, got shape {tuple(features.shape)}")
    flat = features.permute(1, 0, 2, 3).reshape(features.shape[1], -1)
    lo = flat.min(dim=1).values.cpu().numpy().astype(np.float32)
    hi = flat.max(dim=1).values.cpu().numpy().astype(np.float32)
    return NormalizationStats(lo, hi)
