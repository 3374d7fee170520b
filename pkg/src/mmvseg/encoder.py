"""Per-modality volumetric encoders producing a 5-level feature pyramid.

Each stage is one feature-embedding convolution followed by a run of token
mixing blocks.  The default block mixes via a globally pooled, linearly
projected channel summary added back residually; a local-average-pool block
and a plain convolutional block are available as ablation backbones.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .nn import Conv3d, LayerNorm, Linear, Mlp, Module

N_STAGES = 5


@dataclass
class EncoderConfig:
    stage_channels: tuple = (32, 64, 128, 128, 128)
    blocks_per_stage: int = 2
    mlp_ratio: int = 4
    in_channels: int = 1
    block_kind: str = "global_pool"  # global_pool | local_pool | conv

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != N_STAGES:
            raise ConfigError(f"stage_channels needs {N_STAGES} entries, got {len(self.stage_channels)}")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be positive, got {self.stage_channels}")
        if self.block_kind not in _BLOCKS:
            raise ConfigError(f"unknown encoder block kind {self.block_kind!r}")


@dataclass
class FeaturePyramid:
    """Encoder features at resolutions 1, 1/2, 1/4, 1/8, 1/16."""

    levels: list = field(default_factory=list)

    def top(self):
        return self.levels[-1]


class GlobalPoolBlock(Module):
    """Residual token mixer built on a global channel summary.

    y = x + broadcast(project(global_mean(norm(x))));  z = y + mlp(norm(y)).
    """

    def __init__(self, c, mlp_ratio, rng, dtype=np.float32):
        self.norm1 = LayerNorm(c, dtype)
        self.pool_proj = Linear(c, c, rng, dtype)
        self.norm2 = LayerNorm(c, dtype)
        self.mlp = Mlp(c, mlp_ratio * c, rng, dtype)
        self.c = c

    def __call__(self, x):
        if x.shape[-1] != self.c:
            raise ShapeError(f"block expects {self.c} channels, got {x.shape}")
        pooled = ad.global_pool(self.norm1(x))                  # (C,)
        summary = self.pool_proj(ad.reshape(pooled, (1, self.c)))
        y = ad.add(x, ad.reshape(summary, (1, 1, 1, self.c)))   # broadcast over positions
        return ad.add(y, self.mlp(self.norm2(y)))


class LocalPoolBlock(Module):
    """Residual token mixer using a 3x3x3 box average minus identity."""

    def __init__(self, c, mlp_ratio, rng, dtype=np.float32):
        self.norm1 = LayerNorm(c, dtype)
        self.norm2 = LayerNorm(c, dtype)
        self.mlp = Mlp(c, mlp_ratio * c, rng, dtype)

    def __call__(self, x):
        h = self.norm1(x)
        y = ad.add(x, ad.sub(ad.avg_pool3d(h), h))
        return ad.add(y, self.mlp(self.norm2(y)))


class ConvBlock(Module):
    """Plain 3x3x3 convolution + GELU, the CNN ablation backbone."""

    def __init__(self, c, mlp_ratio, rng, dtype=np.float32):
        del mlp_ratio
        self.conv = Conv3d(c, c, 3, rng, padding=1, dtype=dtype)

    def __call__(self, x):
        return ad.gelu(self.conv(x))


_BLOCKS = {"global_pool": GlobalPoolBlock, "local_pool": LocalPoolBlock, "conv": ConvBlock}


class EncoderStage(Module):
    def __init__(self, stage, cin, cout, cfg, rng, dtype):
        if stage == 1:
            self.embed = Conv3d(cin, cout, 1, rng, stride=1, dtype=dtype)
        else:
            self.embed = Conv3d(cin, cout, 2, rng, stride=2, dtype=dtype)
        block_cls = _BLOCKS[cfg.block_kind]
        self.blocks = [block_cls(cout, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.blocks_per_stage)]
        self.stage = stage

    def feature_embed(self, x):
        if self.stage > 1 and any(s % 2 for s in x.shape[:3]):
            raise ShapeError(
                f"stage {self.stage} needs even spatial extents, got {x.shape[:3]}; pad the input upstream"
            )
        return self.embed(x)

    def __call__(self, x):
        x = self.feature_embed(x)
        for block in self.blocks:
            x = block(x)
        return x


class Encoder(Module):
    """One modality volume (D, H, W, in_channels) -> 5-level pyramid."""

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        chans = (cfg.in_channels,) + cfg.stage_channels
        self.stages = [
            EncoderStage(i + 1, chans[i], chans[i + 1], cfg, rng, dtype)
            for i in range(N_STAGES)
        ]
        self.cfg = cfg

    def __call__(self, volume):
        if volume.ndim != 4 or volume.shape[3] != self.cfg.in_channels:
            raise ShapeError(
                f"encoder expects (D, H, W, {self.cfg.in_channels}), got {volume.shape}"
            )
        if any(s % 16 for s in volume.shape[:3]):
            raise ShapeError(f"spatial extents must be divisible by 16, got {volume.shape[:3]}")
        levels = []
        x = volume
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(levels)
