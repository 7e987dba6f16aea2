"""Encoder-decoder backbone with two full-resolution prediction heads.

One head regresses a per-landmark heatmap stack, the other a per-biometry
constraint-mask stack; both are 1x1 projections from the same features and
emit logits (the sigmoid lives in the loss and in decoding). Output spatial
size always equals input size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError
from .geometry import PlaneConfig

__all__ = ["BackboneConfig", "CaliperNet", "count_parameters"]


@dataclass(frozen=True)
class BackboneConfig:
    input_height: int
    input_width: int
    head_landmark_channels: int
    head_constraint_channels: int
    base_channels: int = 12
    depth: int = 4
    output_stride: int = 1

    def __post_init__(self):
        if self.output_stride != 1:
            raise ConfigurationError("only full-resolution output (stride 1) is supported")
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        down = 2**self.depth
        if self.input_height % down or self.input_width % down:
            raise ConfigurationError(
                f"input {self.input_height}x{self.input_width} must be divisible "
                f"by 2^depth = {down}"
            )
        if self.base_channels < 4 or self.base_channels % 4:
            raise ConfigurationError(
                f"base_channels must be a positive multiple of 4, got {self.base_channels}"
            )
        if self.head_landmark_channels < 1 or self.head_constraint_channels < 1:
            raise ConfigurationError("both heads need at least one output channel")

    @classmethod
    def for_plane(
        cls,
        plane: PlaneConfig,
        input_height: int = 160,
        input_width: int = 288,
        base_channels: int = 12,
        depth: int = 4,
    ) -> "BackboneConfig":
        return cls(
            input_height=input_height,
            input_width=input_width,
            head_landmark_channels=plane.n_landmarks,
            head_constraint_channels=plane.n_biometries,
            base_channels=base_channels,
            depth=depth,
        )

    def to_json_dict(self) -> dict:
        return {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "head_landmark_channels": self.head_landmark_channels,
            "head_constraint_channels": self.head_constraint_channels,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "output_stride": self.output_stride,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "BackboneConfig":
        return cls(**{k: int(v) for k, v in obj.items()})


def _norm(channels: int) -> nn.Module:
    # group norm keeps training independent of batch size, which matters at
    # the tiny batches used on CPU
    return nn.GroupNorm(4, channels)


class _DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
            _norm(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1, bias=False),
            _norm(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class _Up(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.upsample = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.reduce = nn.Conv2d(in_ch, out_ch, kernel_size=1)
        self.conv = _DoubleConv(out_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        x = self.reduce(self.upsample(x))
        return self.conv(torch.cat([skip, x], dim=1))


class CaliperNet(nn.Module):
    """U-Net-shaped backbone; ``forward`` returns (landmark, constraint) logits."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        b, depth = config.base_channels, config.depth
        enc_ch = [b * 2**i for i in range(depth)]
        bottleneck_ch = b * 2**depth

        self.stem = _DoubleConv(1, enc_ch[0])
        self.downs = nn.ModuleList(
            _DoubleConv(enc_ch[i], enc_ch[i + 1] if i + 1 < depth else bottleneck_ch)
            for i in range(depth)
        )
        self.pool = nn.MaxPool2d(2)
        ups = []
        in_ch = bottleneck_ch
        for i in reversed(range(depth)):
            ups.append(_Up(in_ch, enc_ch[i], enc_ch[i]))
            in_ch = enc_ch[i]
        self.ups = nn.ModuleList(ups)
        self.head_landmarks = nn.Conv2d(enc_ch[0], config.head_landmark_channels, kernel_size=1)
        self.head_constraints = nn.Conv2d(
            enc_ch[0], config.head_constraint_channels, kernel_size=1
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ConfigurationError(
                f"expected input of shape (batch, 1, H, W), got {tuple(x.shape)}"
            )
        cfg = self.config
        if x.shape[2] != cfg.input_height or x.shape[3] != cfg.input_width:
            raise ConfigurationError(
                f"input is {x.shape[2]}x{x.shape[3]}, backbone is configured for "
                f"{cfg.input_height}x{cfg.input_width}"
            )
        skips = []
        h = self.stem(x)
        for down in self.downs:
            skips.append(h)
            h = down(self.pool(h))
        for up, skip in zip(self.ups, reversed(skips)):
            h = up(h, skip)
        return self.head_landmarks(h), self.head_constraints(h)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
