"""Multi-scale attention encoder-decoder.

Tensors are NCHW. Blocks:

* ``MultiScaleDenseBlock``: parallel dilated 3x3 branches, dense concat with
  the input, 1x1 fusion, residual add, spatial dropout.
* ``HierarchicalAttention``: channel gate (avg+max descriptors through a shared
  bottleneck) followed by a spatial gate (conv over channel mean/max maps).

Ablation variants swap the block type (``residual`` | ``msdb``) and the
attention type (``none`` | ``se`` | ``ha``).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

BLOCKS = ("msdb", "residual")
ATTENTIONS = ("ha", "se", "none")


@dataclass
class NetworkConfig:
    depth: int = 4
    base_channels: int = 32
    msdb_dilations: list[int] = field(default_factory=lambda: [1, 2, 4])
    ha_channel_reduction: int = 8
    ha_spatial_kernel: int = 7
    groupnorm_groups: int = 8
    spatial_dropout_rate: float = 0.1
    block: str = "msdb"
    attention: str = "ha"
    # foreground prior for the head bias; None leaves the bias at zero
    head_prior: float | None = 0.02

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels % self.groupnorm_groups:
            raise ValueError(f"base_channels={self.base_channels} not divisible by "
                             f"groupnorm_groups={self.groupnorm_groups}")
        if self.block not in BLOCKS:
            raise ValueError(f"block must be one of {BLOCKS}")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"attention must be one of {ATTENTIONS}")
        if self.head_prior is not None and not 0 < self.head_prior < 1:
            raise ValueError("head_prior must lie in (0, 1)")

    @classmethod
    def toy(cls, **overrides) -> "NetworkConfig":
        return cls(**{"depth": 3, "base_channels": 8, **overrides})

    def check_input(self, height: int, width: int) -> None:
        k = 2 ** self.depth
        if height % k or width % k:
            raise ValueError(f"input {height}x{width} not divisible by 2**depth={k}")

    def to_dict(self) -> dict:
        return asdict(self)


# named ablation variants: residual baseline, +SE, +MSDB, full model
ARCHITECTURE_VARIANTS = {
    "residual": dict(block="residual", attention="none"),
    "residual_se": dict(block="residual", attention="se"),
    "msdb_se": dict(block="msdb", attention="se"),
    "msdb_ha": dict(block="msdb", attention="ha"),
}


def _norm_act(channels: int, groups: int) -> nn.Sequential:
    return nn.Sequential(nn.GroupNorm(min(groups, channels), channels), nn.SiLU())


class MultiScaleDenseBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, dilations=(1, 2, 4), groups: int = 8,
                 dropout: float = 0.0):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, padding=d, dilation=d),
                          *_norm_act(out_ch, groups))
            for d in dilations
        )
        self.fuse = nn.Conv2d(in_ch + out_ch * len(dilations), out_ch, 1)
        self.project = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.dropout = nn.Dropout2d(dropout)

    def forward(self, x):
        feats = [x] + [b(x) for b in self.branches]
        return self.dropout(self.fuse(torch.cat(feats, dim=1)) + self.project(x))


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a (projected) identity shortcut."""

    def __init__(self, in_ch: int, out_ch: int, groups: int = 8, dropout: float = 0.0):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1), *_norm_act(out_ch, groups),
            nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.GroupNorm(min(groups, out_ch), out_ch),
        )
        self.project = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.act = nn.SiLU()
        self.dropout = nn.Dropout2d(dropout)

    def forward(self, x):
        return self.dropout(self.act(self.body(x) + self.project(x)))


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 8, use_max: bool = True):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.ReLU(),
                                 nn.Conv2d(hidden, channels, 1))
        self.use_max = use_max

    def logits(self, x):
        out = self.mlp(F.adaptive_avg_pool2d(x, 1))
        if self.use_max:
            out = out + self.mlp(F.adaptive_max_pool2d(x, 1))
        return out

    def forward(self, x):
        return x * torch.sigmoid(self.logits(x))


class SpatialAttention(nn.Module):
    def __init__(self, kernel: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def logits(self, x):
        desc = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return self.conv(desc)

    def forward(self, x):
        return x * torch.sigmoid(self.logits(x))


class HierarchicalAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 8, kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel)

    def forward(self, x):
        return self.spatial(self.channel(x))


def SqueezeExcitation(channels: int, reduction: int = 8) -> ChannelAttention:
    return ChannelAttention(channels, reduction, use_max=False)


class SegmentationNet(nn.Module):
    def __init__(self, config: NetworkConfig | None = None, in_channels: int = 1):
        super().__init__()
        self.config = cfg = config or NetworkConfig()
        chans = [cfg.base_channels * 2 ** s for s in range(cfg.depth + 1)]

        self.encoder = nn.ModuleList()
        prev = in_channels
        for c in chans[:-1]:
            self.encoder.append(self._block(prev, c))
            prev = c
        self.bottleneck = self._block(chans[-2], chans[-1])
        self.bottleneck_attn = self._attention(chans[-1])

        self.up = nn.ModuleList()
        self.skip_attn = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for s in reversed(range(cfg.depth)):
            self.up.append(nn.Conv2d(chans[s + 1], chans[s], 1))
            self.skip_attn.append(self._attention(chans[s]))
            self.decoder.append(self._block(2 * chans[s], chans[s]))
        self.head = nn.Conv2d(chans[0], 1, 1)
        self._init_weights()

    def _block(self, in_ch, out_ch):
        cfg = self.config
        if cfg.block == "msdb":
            return MultiScaleDenseBlock(in_ch, out_ch, cfg.msdb_dilations, cfg.groupnorm_groups,
                                        cfg.spatial_dropout_rate)
        return ResidualBlock(in_ch, out_ch, cfg.groupnorm_groups, cfg.spatial_dropout_rate)

    def _attention(self, ch):
        cfg = self.config
        if cfg.attention == "ha":
            return HierarchicalAttention(ch, cfg.ha_channel_reduction, cfg.ha_spatial_kernel)
        if cfg.attention == "se":
            return SqueezeExcitation(ch, cfg.ha_channel_reduction)
        return nn.Identity()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.normal_(self.head.weight, std=0.01)
        prior = self.config.head_prior
        if prior is not None:
            nn.init.constant_(self.head.bias, math.log(prior / (1 - prior)))

    def logits(self, x):
        self.config.check_input(x.shape[-2], x.shape[-1])
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck_attn(self.bottleneck(x))
        for up, attn, block, skip in zip(self.up, self.skip_attn, self.decoder, reversed(skips)):
            x = up(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
            x = block(torch.cat([x, attn(skip)], dim=1))
        return self.head(x)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def build_model(config: NetworkConfig | None = None, seed: int | None = None) -> SegmentationNet:
    if seed is not None:
        torch.manual_seed(seed)
    return SegmentationNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
