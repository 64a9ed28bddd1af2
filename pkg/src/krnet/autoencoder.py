"""Autoencoder baseline: per-sample latent codes with the same decoder as the recorder.

The encoder mirrors the decoder layer by layer, the latent code has dimension
2H to match the recorder's embedding width, and one code is stored per sample,
which is exactly what the recorder's shared group vectors avoid.
"""

from __future__ import annotations

import torch
from torch import nn

from .blocks import BasicBlock, ConvModule, FCModule, StridedConvModule
from .errors import ValidationError
from .model import DecoderConfig, FeatureDecoder
from .normalization import NormalizationStats


class FeatureEncoder(nn.Module):
    """Symmetric mirror of :class:`FeatureDecoder` producing per-sample codes."""

    def __init__(self, latent_dim: int, config: DecoderConfig):
        super().__init__()
        self.config = config
        c = config.target_shape[0]
        self.inp = ConvModule(c, config.c1)
        self.pre_blocks = nn.Sequential(*[BasicBlock(config.c1) for _ in range(2)])
        self.down = StridedConvModule(config.c1, config.c0, config.deconv_stride)
        self.post_blocks = nn.Sequential(*[BasicBlock(config.c0) for _ in range(4)])
        self.fc1 = FCModule(config.d1, config.d0)
        self.fc2 = FCModule(config.d0, latent_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[1:] != torch.Size(self.config.target_shape):
            raise ValidationError(
                f"expected features of shape (B, {self.config.target_shape}), got {tuple(features.shape)}"
            )
        x = self.inp(features)
        x = self.pre_blocks(x)
        x = self.down(x)
        x = self.post_blocks(x)
        x = x.flatten(1)
        return self.fc2(self.fc1(x))


class FeatureAutoencoder(nn.Module):
    """Encoder + recorder-identical decoder + an N x latent_dim bank of stored codes."""

    def __init__(self, latent_dim: int, config: DecoderConfig):
        super().__init__()
        self.latent_dim = latent_dim
        self.config = config
        self.encoder = FeatureEncoder(latent_dim, config)
        self.decoder = FeatureDecoder(latent_dim, config)
        self.norm_stats: NormalizationStats | None = None
        self.latent_bank: torch.Tensor | None = None
        self.bank_sample_ids: list[int] | None = None

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        return self.encoder(features)

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        return self.decoder(codes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(features))

    @torch.no_grad()
    def build_latent_bank(self, features: torch.Tensor, sample_ids, batch_size: int = 512):
        """Encode a normalized-scale corpus row by row and store the codes.

        ``features`` are raw-scale; they are normalized with the trained stats
        before encoding, matching the training-time input distribution.
        """
        sample_ids = [int(s) for s in sample_ids]
        if len(sample_ids) != features.shape[0]:
            raise ValidationError(f"{len(sample_ids)} sample IDs for {features.shape[0]} feature maps")
        if self.norm_stats is None:
            raise ValidationError("autoencoder has no normalization stats; train it before building the bank")
        rows = []
        for start in range(0, features.shape[0], batch_size):
            chunk = self.norm_stats.normalize(features[start : start + batch_size])
            rows.append(self.encode(chunk))
        self.latent_bank = torch.cat(rows, dim=0)
        self.bank_sample_ids = sample_ids
        return self.latent_bank

    @torch.no_grad()
    def reconstruct(self, sample_ids, batch_size: int = 512) -> torch.Tensor:
        """Decode stored codes back to raw-scale features, aligned to ``sample_ids``."""
        if self.latent_bank is None or self.bank_sample_ids is None:
            raise ValidationError("latent bank not built")
        index = {sid: i for i, sid in enumerate(self.bank_sample_ids)}
        try:
            rows = [index[int(s)] for s in sample_ids]
        except KeyError as exc:
            raise ValidationError(f"sample ID {exc.args[0]} not present in the latent bank") from None
        c, h, w = self.config.target_shape
        if not rows:
            return torch.empty(0, c, h, w, dtype=self.latent_bank.dtype)
        outs = []
        for start in range(0, len(rows), batch_size):
            codes = self.latent_bank[rows[start : start + batch_size]]
            outs.append(self.norm_stats.denormalize(self.decode(codes)))
        return torch.cat(outs, dim=0)

    def latent_bank_bytes(self) -> int:
        """Exact storage of the code bank: N * latent_dim * 4."""
        if self.latent_bank is None:
            raise ValidationError("latent bank not built")
        return self.latent_bank.shape[0] * self.latent_dim * 4
