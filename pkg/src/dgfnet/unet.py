"""Audio U-Net over log-magnitude spectrograms.

Encoder levels are conv-bn-relu followed by 2x max pooling; the decoder
mirrors them with nearest-neighbor upsampling, a skip concatenation, and
conv-bn-relu, optionally followed by the multi-scale audio attention
block. The bottleneck feature can be swapped through a caller-supplied
hook (fusion lives there) without touching encoder activations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dgfnet.autodiff import Tensor, ops
from dgfnet.autodiff.nn import BatchNorm2d, ChannelNorm, Conv2d, Module
from dgfnet.errors import ContractError


@dataclass(frozen=True)
class AttentionConfig:
    groups: int = 4

    def __post_init__(self):
        if self.groups < 1:
            raise ContractError(f"groups must be >= 1, got {self.groups}")


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 8
    bottleneck_channels: int = 64  # C_A
    final_channels: int = 16  # C'_A
    attention: bool = False
    attention_groups: int = 4

    def __post_init__(self):
        if self.depth < 2:
            raise ContractError(f"depth must be >= 2, got {self.depth}")
        for i in range(self.depth):
            ch = self.base_channels * (1 << i)
            if self.attention and ch % self.attention_groups:
                raise ContractError(
                    f"attention groups {self.attention_groups} do not divide "
                    f"decoder channels {ch}"
                )

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * (1 << i) for i in range(self.depth)]


class AudioAttention(Module):
    """Grouped multi-scale attention over a (B, C, H, W) feature map.

    Channels split into groups. A 1x1 branch builds directional
    descriptors (height-wise and width-wise means), gates the group input
    by their sigmoids, and channel-normalizes. A 3x3 branch is
    conv-batchnorm-relu. Each branch summarizes the other through a
    softmax over its pooled channel descriptor and a matmul against the
    other's flattened map; the summed maps pass a sigmoid and gate the
    group input multiplicatively.
    """

    def __init__(self, channels: int, groups: int, rng: np.random.Generator):
        super().__init__()
        if channels % groups:
            raise ContractError(f"groups {groups} must divide channels {channels}")
        self.channels, self.groups = channels, groups
        cg = channels // groups
        self.conv1x1 = Conv2d(cg, cg, 1, rng)
        self.conv3x3 = Conv2d(cg, cg, 3, rng)
        self.bn3x3 = BatchNorm2d(cg)
        self.gn = ChannelNorm(cg)

    def forward(self, x: Tensor, logit_override: np.ndarray | float | None = None) -> Tensor:
        b, c, h, w = x.shape
        if c != self.channels:
            raise ContractError(f"attention built for {self.channels} channels, got {c}")
        g, cg = self.groups, c // self.groups
        gx = x.reshape(b * g, cg, h, w)

        x_h = ops.mean(gx, axis=3, keepdims=True)  # (BG, cg, H, 1)
        x_w = ops.mean(gx, axis=2, keepdims=True).transpose(0, 1, 3, 2)  # (BG, cg, W, 1)
        hw = self.conv1x1(ops.concat([x_h, x_w], axis=2))
        d_h = ops.slice_axis(hw, 2, 0, h)
        d_w = ops.slice_axis(hw, 2, h, h + w).transpose(0, 1, 3, 2)
        x1 = self.gn(gx * ops.sigmoid(d_h) * ops.sigmoid(d_w))
        x2 = ops.relu(self.bn3x3(self.conv3x3(gx)))

        a1 = ops.softmax(ops.mean(x1, axis=(2, 3)).reshape(b * g, 1, cg), axis=-1)
        a2 = ops.softmax(ops.mean(x2, axis=(2, 3)).reshape(b * g, 1, cg), axis=-1)
        f1 = x1.reshape(b * g, cg, h * w)
        f2 = x2.reshape(b * g, cg, h * w)
        logits = (ops.matmul(a1, f2) + ops.matmul(a2, f1)).reshape(b * g, 1, h, w)
        if logit_override is not None:
            logits = Tensor(np.broadcast_to(
                np.asarray(logit_override, dtype=x.data.dtype), (b * g, 1, h, w)
            ).copy())
        return (gx * ops.sigmoid(logits)).reshape(b, c, h, w)


class _ConvBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class UNet(Module):
    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        chans = cfg.encoder_channels()
        prev = 1
        for i, ch in enumerate(chans):
            setattr(self, f"enc{i}", _ConvBlock(prev, ch, rng))
            prev = ch
        self.bottleneck = _ConvBlock(chans[-1], cfg.bottleneck_channels, rng)
        prev = cfg.bottleneck_channels
        for i in reversed(range(cfg.depth)):
            setattr(self, f"dec{i}", _ConvBlock(prev + chans[i], chans[i], rng))
            if cfg.attention:
                setattr(self, f"att{i}", AudioAttention(chans[i], cfg.attention_groups, rng))
            prev = chans[i]
        self.head = Conv2d(chans[0], cfg.final_channels, 1, rng)

    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        b, c, h, w = x.shape
        if c != 1:
            raise ContractError(f"expected single-channel input, got {c}")
        div = 1 << self.cfg.depth
        if h % div or w % div:
            raise ContractError(
                f"spatial dims ({h}, {w}) must be divisible by 2^depth = {div}"
            )
        skips = []
        for i in range(self.cfg.depth):
            x = getattr(self, f"enc{i}")(x)
            skips.append(x)
            x = ops.maxpool2x(x)
        return self.bottleneck(x), skips

    def decode(self, bottleneck: Tensor, skips: list[Tensor]) -> Tensor:
        x = bottleneck
        for i in reversed(range(self.cfg.depth)):
            x = ops.upsample2x(x)
            x = getattr(self, f"dec{i}")(ops.concat([x, skips[i]], axis=1))
            if self.cfg.attention:
                x = getattr(self, f"att{i}")(x)
        return self.head(x)

    def forward(self, x: Tensor, hook=None) -> tuple[Tensor, Tensor]:
        """Returns (pre-hook bottleneck feature, final feature map)."""
        mid, skips = self.encode(x)
        fed = mid
        if hook is not None:
            fed = hook(mid)
            if not isinstance(fed, Tensor) or fed.shape != mid.shape:
                got = fed.shape if hasattr(fed, "shape") else type(fed)
                raise ContractError(
                    f"bottleneck hook must preserve shape {mid.shape}, got {got}"
                )
        return mid, self.decode(fed, skips)
