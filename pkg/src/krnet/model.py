"""The knowledge recorder: batched ID embedding plus a convolutional feature decoder.

A recorder memorizes a fixed corpus of feature maps.  Each sample is addressed
by its (group ID, local ID) slot; the embedding module turns the slot into a
vector of twice the group size and the decoder maps that vector to the target
feature map.  Only the per-group static/dynamic vectors count as latent
storage, so the latent cost is 2*M*H scalars regardless of corpus size.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
from torch import nn

from .blocks import BasicBlock, DeconvModule, FCModule, OutputConvModule, rolled_rows
from .errors import ValidationError
from .grouping import GroupIndex
from .normalization import NormalizationStats

EMBED_INIT_STD = 0.02


@dataclass(frozen=True)
class DecoderConfig:
    """Feature-decoder hyper-parameters; d1 must factor exactly as c0*h0*w0."""

    d0: int
    c0: int
    h0: int
    w0: int
    c1: int
    deconv_stride: int
    target_shape: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "target_shape", tuple(self.target_shape))
        c, h, w = self.target_shape
        if self.deconv_stride not in (1, 2):
            raise ValidationError(f"deconv stride must be 1 or 2, got {self.deconv_stride}")
        if (self.h0 * self.deconv_stride, self.w0 * self.deconv_stride) != (h, w):
            raise ValidationError(
                f"initial spatial size {self.h0}x{self.w0} with stride {self.deconv_stride} "
                f"cannot reach target {h}x{w}"
            )
        for name in ("d0", "c0", "h0", "w0", "c1"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")

    @property
    def d1(self) -> int:
        return self.c0 * self.h0 * self.w0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_shape"] = list(self.target_shape)
        d["d1"] = self.d1
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        d = dict(d)
        d.pop("d1", None)
        d["target_shape"] = tuple(d["target_shape"])
        return cls(**d)


class BatchedIDEmbedding(nn.Module):
    """Maps (group ID, local ID) pairs to embeddings of twice the group size.

    One static and one dynamic vector are learned per group; the local ID
    selects a cyclic permutation of the dynamic vector, so storage is 2*M
    vectors for arbitrarily many samples.
    """

    def __init__(self, num_groups: int, group_size: int, member_counts=None):
        super().__init__()
        self.num_groups = num_groups
        self.group_size = group_size
        self.static_vectors = nn.Parameter(torch.empty(num_groups, group_size))
        self.dynamic_vectors = nn.Parameter(torch.empty(num_groups, group_size))
        nn.init.normal_(self.static_vectors, std=EMBED_INIT_STD)
        nn.init.normal_(self.dynamic_vectors, std=EMBED_INIT_STD)
        self.fc_static = FCModule(group_size, group_size)
        self.fc_dynamic = FCModule(group_size, group_size)
        counts = torch.as_tensor(
            member_counts if member_counts is not None else [group_size] * num_groups,
            dtype=torch.long,
        )
        self.register_buffer("member_counts", counts)

    def _check_pairs(self, group_ids: torch.Tensor, local_ids: torch.Tensor):
        bad_m = (group_ids < 0) | (group_ids >= self.num_groups)
        if bad_m.any():
            i = int(bad_m.nonzero()[0])
            raise ValidationError(f"group ID {int(group_ids[i])} out of range [0, {self.num_groups}) at row {i}")
        bad_n = (local_ids < 0) | (local_ids >= self.member_counts[group_ids])
        if bad_n.any():
            i = int(bad_n.nonzero()[0])
            raise ValidationError(
                f"local ID {int(local_ids[i])} invalid for group {int(group_ids[i])} "
                f"(member count {int(self.member_counts[group_ids[i]])}) at row {i}"
            )

    def forward(self, group_ids: torch.Tensor, local_ids: torch.Tensor) -> torch.Tensor:
        device = self.static_vectors.device
        group_ids = torch.as_tensor(group_ids, dtype=torch.long, device=device)
        local_ids = torch.as_tensor(local_ids, dtype=torch.long, device=device)
        self._check_pairs(group_ids, local_ids)
        static = self.fc_static(self.static_vectors[group_ids])
        dynamic = self.fc_dynamic(rolled_rows(self.dynamic_vectors[group_ids], local_ids))
        return torch.cat([static, dynamic], dim=1)


class FeatureDecoder(nn.Module):
    """Decodes an embedding into a feature map of the configured target shape."""

    def __init__(self, embed_dim: int, config: DecoderConfig):
        super().__init__()
        self.config = config
        c = config.target_shape[0]
        self.fc1 = FCModule(embed_dim, config.d0)
        self.fc2 = FCModule(config.d0, config.d1)
        self.pre_blocks = nn.Sequential(*[BasicBlock(config.c0) for _ in range(4)])
        self.deconv = DeconvModule(config.c0, config.c1, config.deconv_stride)
        self.post_blocks = nn.Sequential(*[BasicBlock(config.c1) for _ in range(2)])
        self.out = OutputConvModule(config.c1, c)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if embeddings.dim() != 2 or embeddings.shape[1] != self.fc1.fc.in_features:
            raise ValidationError(
                f"expected embeddings of shape (B, {self.fc1.fc.in_features}), got {tuple(embeddings.shape)}"
            )
        x = self.fc2(self.fc1(embeddings))
        x = x.view(-1, cfg.c0, cfg.h0, cfg.w0)
        x = self.pre_blocks(x)
        x = self.deconv(x)
        x = self.post_blocks(x)
        return self.out(x)


class KRNet(nn.Module):
    """ID-conditioned recorder over the samples of one :class:`GroupIndex`."""

    def __init__(self, group_index: GroupIndex, config: DecoderConfig):
        super().__init__()
        self.group_index = group_index
        self.config = config
        counts = [g.member_count for g in group_index.groups]
        self.embedding = BatchedIDEmbedding(group_index.num_groups, group_index.group_size, counts)
        self.decoder = FeatureDecoder(2 * group_index.group_size, config)
        self.norm_stats: NormalizationStats | None = None

    def embed(self, group_ids, local_ids) -> torch.Tensor:
        return self.embedding(group_ids, local_ids)

    def decode(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.decoder(embeddings)

    def forward(self, group_ids, local_ids) -> torch.Tensor:
        """Normalized-scale feature maps for a batch of (group, local) slots."""
        return self.decode(self.embed(group_ids, local_ids))

    @torch.no_grad()
    def replay(self, sample_ids, batch_size: int = 512) -> torch.Tensor:
        """Regenerate the stored features for ``sample_ids`` at their original scale."""
        if self.norm_stats is None:
            raise ValidationError("recorder has no normalization stats; train it before replaying")
        sample_ids = list(sample_ids)
        c, h, w = self.config.target_shape
        device = self.embedding.static_vectors.device
        dtype = self.embedding.static_vectors.dtype
        if not sample_ids:
            return torch.empty(0, c, h, w, dtype=dtype, device=device)
        group_ids, local_ids = self.group_index.slots(sample_ids)
        outs = []
        for start in range(0, len(sample_ids), batch_size):
            sl = slice(start, start + batch_size)
            pred = self.forward(
                torch.as_tensor(group_ids[sl], device=device),
                torch.as_tensor(local_ids[sl], device=device),
            )
            outs.append(self.norm_stats.denormalize(pred))
        return torch.cat(outs, dim=0)

    def latent_parameter_count(self) -> int:
        """Scalars in the embedding bank only: 2 * num_groups * group_size."""
        return self.embedding.static_vectors.numel() + self.embedding.dynamic_vectors.numel()
