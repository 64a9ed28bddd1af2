"""Building blocks shared by the feature decoder and the mirrored encoder."""

import torch
from torch import nn

from .errors import ValidationError

GN_GROUPS = 2
LEAKY_SLOPE = 1e-4
CONV_KERNEL = 3
DECONV_KERNEL = 5


def group_norm(channels: int) -> nn.GroupNorm:
    if channels % GN_GROUPS != 0:
        raise ValidationError(f"channel count {channels} not divisible into {GN_GROUPS} normalization groups")
    return nn.GroupNorm(GN_GROUPS, channels)


class FCModule(nn.Module):
    """Fully-connected layer followed by group normalization and a leaky rectifier."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)
        self.norm = group_norm(out_dim)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x):
        return self.act(self.norm(self.fc(x)))


class ConvModule(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, CONV_KERNEL, padding=CONV_KERNEL // 2)
        self.norm = group_norm(out_ch)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DeconvModule(nn.Module):
    """Transposed convolution sized so stride 1 preserves and stride 2 doubles the spatial size."""

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(
            in_ch, out_ch, DECONV_KERNEL, stride=stride,
            padding=DECONV_KERNEL // 2, output_padding=stride - 1,
        )
        self.norm = group_norm(out_ch)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x):
        return self.act(self.norm(self.deconv(x)))


class StridedConvModule(nn.Module):
    """Mirror of :class:`DeconvModule`: same kernel, downsampling instead of upsampling."""

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, DECONV_KERNEL, stride=stride, padding=DECONV_KERNEL // 2)
        self.norm = group_norm(out_ch)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class BasicBlock(nn.Module):
    """Channel-preserving residual block: conv-GN-act-conv-GN plus identity, then act."""

    def __init__(self, channels: int):
        super().__init__()
        pad = CONV_KERNEL // 2
        self.conv1 = nn.Conv2d(channels, channels, CONV_KERNEL, padding=pad)
        self.norm1 = group_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, CONV_KERNEL, padding=pad)
        self.norm2 = group_norm(channels)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(x + h)


class OutputConvModule(nn.Module):
    """Final projection: conv-GN-act, then a channel-preserving conv with no activation.

    Targets live in [0, 1] after normalization but the output range is left
    unconstrained.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        pad = CONV_KERNEL // 2
        self.conv1 = nn.Conv2d(in_ch, out_ch, CONV_KERNEL, padding=pad)
        self.norm = group_norm(out_ch)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.conv2 = nn.Conv2d(out_ch, out_ch, CONV_KERNEL, padding=pad)

    def forward(self, x):
        return self.conv2(self.act(self.norm(self.conv1(x))))


def rolled_rows(vectors: torch.Tensor, shifts: torch.Tensor) -> torch.Tensor:
    """Cyclically shift each row of ``vectors`` left by its own ``shifts`` entry.

    Row-wise equivalent of the local-ID permutation matrix product.
    """
    size = vectors.shape[-1]
    cols = (torch.arange(size, device=vectors.device).unsqueeze(0) + shifts.unsqueeze(1)) % size
    return torch.gather(vectors, 1, cols)
