"""Decoding from fused bottleneck tokens to full-resolution class logits.

The fused tokens are folded back to a volume, and at every level above the
bottleneck the per-modality encoder skips are gated by a learned importance
map (one sigmoid scalar per voxel per modality, derived by projecting the
fused tokens and upsampling) before the usual upsample / concat / conv walk
up to full resolution.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .fusion import TokenSeq
from .nn import Conv3d, Linear, Module

N_LEVELS = 5


@dataclass
class DecoderConfig:
    level_channels: tuple = (128, 64, 64, 32)  # levels 4, 3, 2, 1
    out_classes: int = 2
    merge: str = "concat"

    def __post_init__(self):
        self.level_channels = tuple(int(c) for c in self.level_channels)
        if len(self.level_channels) != N_LEVELS - 1:
            raise ConfigError(
                f"level_channels needs {N_LEVELS - 1} entries, got {len(self.level_channels)}"
            )
        if any(c < 1 for c in self.level_channels):
            raise ConfigError(f"level_channels must be positive, got {self.level_channels}")
        if self.out_classes < 2:
            raise ConfigError(f"need at least 2 output classes, got {self.out_classes}")
        if self.merge != "concat":
            raise ConfigError(f"unsupported skip merge {self.merge!r}")


def fold_tokens(seq: TokenSeq):
    """(N, C) tokens back to the (d, w, h, C) volume they were flattened from;
    exact inverse of the row-major flattening."""
    d, w, h = seq.require_grid()
    return ad.reshape(seq.tokens, (d, w, h, seq.tokens.shape[1]))


def modality_gated_sum(importance, feats):
    """Gate each modality's feature volume by its scalar importance channel
    and sum over modalities: importance (D, H, W, M), feats M x (D, H, W, C)."""
    m = importance.shape[-1]
    if len(feats) != m:
        raise ShapeError(f"importance has {m} modality channels but {len(feats)} features given")
    out = None
    for i, feat in enumerate(feats):
        if feat.shape[:3] != importance.shape[:3]:
            raise ShapeError(
                f"modality {i} extents {feat.shape[:3]} do not match gates {importance.shape[:3]}"
            )
        pick = np.zeros((m, 1), dtype=importance.dtype)
        pick[i, 0] = 1.0
        gate = ad.matmul(importance, Tensor(pick))  # (D, H, W, 1)
        gated = ad.mul(feat, gate)
        out = gated if out is None else ad.add(out, gated)
    return out


class Decoder(Module):
    """Bottom-up decoder over a 5-level pyramid with modality-gated skips.

    `skip_channels` lists the encoder channel widths for levels 4..1 (the
    order the decoder consumes them).
    """

    def __init__(self, bottleneck_channels, modalities, skip_channels, cfg, rng,
                 dtype=np.float32, gated=True):
        if len(skip_channels) != N_LEVELS - 1:
            raise ConfigError(f"skip_channels needs {N_LEVELS - 1} entries, got {len(skip_channels)}")
        self.gate_fc = Linear(bottleneck_channels, modalities, rng, dtype) if gated else None
        if self.gate_fc is not None:
            # neutral gates (exactly 0.5) at init: a random projection starts
            # with an arbitrary modality preference that optimization tends to
            # amplify into saturation, silencing one modality for good
            self.gate_fc.w.data[:] = 0.0
        cins = (bottleneck_channels,) + cfg.level_channels[:-1]
        self.convs = [
            Conv3d(cin + skip, cout, 3, rng, padding=1, dtype=dtype)
            for cin, skip, cout in zip(cins, skip_channels, cfg.level_channels)
        ]
        self.head = Conv3d(cfg.level_channels[-1], cfg.out_classes, 1, rng, dtype=dtype)
        self.modalities = modalities
        self.cfg = cfg

    def importance(self, seq: TokenSeq, level):
        """Per-voxel, per-modality gates in (0,1) at the extents of `level`:
        project folded tokens to M channels, upsample 2x per level climbed,
        squash with the logistic sigmoid."""
        if self.gate_fc is None:
            raise ContractError("this decoder was built without skip gates")
        if not 1 <= level <= N_LEVELS - 1:
            raise ConfigError(f"gates exist for levels 1..{N_LEVELS - 1}, got {level}")
        logits = self.gate_fc(fold_tokens(seq))
        return ad.sigmoid(ad.upsample2x(logits, times=N_LEVELS - level))

    def gated_skip(self, seq, level, feats):
        return modality_gated_sum(self.importance(seq, level), feats)

    def __call__(self, bottleneck, skips):
        """bottleneck (d, w, h, C); skips = gated features for levels 4..1."""
        if len(skips) != N_LEVELS - 1:
            raise ShapeError(f"expected {N_LEVELS - 1} skip volumes, got {len(skips)}")
        x = bottleneck
        for conv, skip in zip(self.convs, skips):
            x = ad.upsample2x(x)
            if skip.shape[:3] != x.shape[:3]:
                raise ShapeError(
                    f"skip extents {skip.shape[:3]} do not match upsampled {x.shape[:3]}"
                )
            x = ad.gelu(conv(ad.concat([x, skip], axis=3)))
        return self.head(x)
