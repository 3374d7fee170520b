"""Bottleneck token fusion across modalities.

The fused bottleneck runs in two stages: spatial self-attention layers that
mix tokens along the depth axis, within each in-plane slice, and inside
non-overlapping 3D windows (the three branch outputs are summed); then one
cross-attention layer whose queries are the mixed spatial tokens and whose
keys/values are a short learned token summary of every modality.

All attention kernels report how many query-key pairs they scored through
`pair_counter`, so closed-form cost claims can be checked against the code
that actually ran.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .nn import LayerNorm, Linear, Mlp, Module


class PairCounter:
    """Counts query-key pairs scored by attention kernels (heads not included,
    so the tally is comparable across head counts)."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += n

    def reset(self):
        self.count = 0


pair_counter = PairCounter()


@dataclass
class AttentionConfig:
    heads: int = 8
    dim: int = 128
    window: tuple = (2, 2, 2)
    qkv_dim: int = 128
    ffn_ratio: int = 4

    def __post_init__(self):
        self.window = tuple(int(x) for x in self.window)
        if self.heads < 1:
            raise ConfigError(f"heads must be positive, got {self.heads}")
        if self.dim % self.heads or self.qkv_dim % self.heads:
            raise ConfigError(
                f"dim {self.dim} and qkv_dim {self.qkv_dim} must be divisible by heads {self.heads}"
            )
        if len(self.window) != 3 or any(x < 1 for x in self.window):
            raise ConfigError(f"window must be three positive extents, got {self.window}")


@dataclass
class TokenSeq:
    """A token matrix (N, C); `grid` gives the (depth, row, col) extents the
    tokens were flattened from, or None for sequences with no spatial layout
    (the per-modality summary tokens)."""

    tokens: Tensor
    grid: tuple = None

    @property
    def n(self):
        return self.tokens.shape[0]

    def require_grid(self):
        if self.grid is None:
            raise ContractError("this operation needs tokens with a spatial grid")
        d, w, h = self.grid
        if d * w * h != self.n:
            raise ShapeError(f"grid {self.grid} does not cover {self.n} tokens")
        return self.grid


def _relative_offset_onehot(window, dtype):
    """One-hot (T*T, B) map from ordered position pairs in a window to their
    relative-offset bucket; B = (2wz-1)(2wy-1)(2wx-1)."""
    wz, wy, wx = window
    coords = np.stack(
        np.meshgrid(np.arange(wz), np.arange(wy), np.arange(wx), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    diff = coords[:, None, :] - coords[None, :, :]  # (T, T, 3)
    idx = (
        (diff[..., 0] + wz - 1) * (2 * wy - 1) * (2 * wx - 1)
        + (diff[..., 1] + wy - 1) * (2 * wx - 1)
        + (diff[..., 2] + wx - 1)
    ).reshape(-1)
    buckets = (2 * wz - 1) * (2 * wy - 1) * (2 * wx - 1)
    onehot = np.zeros((idx.size, buckets), dtype=dtype)
    onehot[np.arange(idx.size), idx] = 1.0
    return onehot


class PositionEncodings(Module):
    """Learned absolute tables for a fixed bottleneck grid plus the per-head
    relative bias shared by all window attentions on that grid."""

    def __init__(self, grid, cfg: AttentionConfig, rng, dtype=np.float32, branch_tables=True):
        d, w, h = grid
        c = cfg.dim
        self.embed_abs = Tensor(
            (0.02 * rng.standard_normal((d * w * h, c))).astype(dtype), requires_grad=True
        )
        self.axial_abs = self.planar_abs = self.window_rel_bias = self._onehot = None
        if branch_tables:
            self.axial_abs = Tensor(
                (0.02 * rng.standard_normal((d, c))).astype(dtype), requires_grad=True
            )
            self.planar_abs = Tensor(
                (0.02 * rng.standard_normal((w * h, c))).astype(dtype), requires_grad=True
            )
            buckets = (2 * cfg.window[0] - 1) * (2 * cfg.window[1] - 1) * (2 * cfg.window[2] - 1)
            self.window_rel_bias = Tensor(
                np.zeros((buckets, cfg.heads), dtype=dtype), requires_grad=True
            )
            # constant gather matrix; not a parameter
            self._onehot = Tensor(_relative_offset_onehot(cfg.window, dtype))
        self._window_tokens = cfg.window[0] * cfg.window[1] * cfg.window[2]
        self.grid = tuple(grid)

    def window_bias(self):
        """Per-head logit bias (heads, T, T) for one window."""
        t = self._window_tokens
        flat = ad.matmul(self._onehot, self.window_rel_bias)  # (T*T, heads)
        return ad.moveaxis(ad.reshape(flat, (t, t, flat.shape[1])), 2, 0)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with bias-free projections.

    Accepts (..., T, C) queries and (..., S, C) keys/values with matching
    leading extents; an optional (heads, T, S) logit bias is broadcast over
    the leading extents.
    """

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32):
        self.q = Linear(cfg.dim, cfg.qkv_dim, rng, dtype, bias=False)
        self.k = Linear(cfg.dim, cfg.qkv_dim, rng, dtype, bias=False)
        self.v = Linear(cfg.dim, cfg.qkv_dim, rng, dtype, bias=False)
        self.out = Linear(cfg.qkv_dim, cfg.dim, rng, dtype, bias=False)
        self.heads = cfg.heads
        self.dh = cfg.qkv_dim // cfg.heads

    def _split_heads(self, z):
        z = ad.reshape(z, z.shape[:-1] + (self.heads, self.dh))
        return ad.moveaxis(z, -2, -3)  # (..., heads, n, dh)

    def __call__(self, q_in, kv_in, bias=None):
        if q_in.shape[:-2] != kv_in.shape[:-2]:
            raise ShapeError(
                f"query lead {q_in.shape[:-2]} does not match key/value lead {kv_in.shape[:-2]}"
            )
        t, s = q_in.shape[-2], kv_in.shape[-2]
        groups = int(np.prod(q_in.shape[:-2], dtype=np.int64)) if q_in.ndim > 2 else 1

        q = self._split_heads(self.q(q_in))
        k = self._split_heads(self.k(kv_in))
        v = self._split_heads(self.v(kv_in))
        scores = ad.matmul(q, ad.moveaxis(k, -1, -2)) * (1.0 / np.sqrt(self.dh))
        pair_counter.add(groups * t * s)
        if bias is not None:
            scores = ad.add(scores, bias)
        ctx = ad.matmul(ad.softmax_last(scores), v)  # (..., heads, t, dh)
        ctx = ad.moveaxis(ctx, -3, -2)
        ctx = ad.reshape(ctx, ctx.shape[:-2] + (self.heads * self.dh,))
        return self.out(ctx)


class SpatialMixerLayer(Module):
    """Pre-norm transformer layer whose mixer is the sum of depth-axis,
    in-slice, and windowed self-attention."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32):
        c = cfg.dim
        self.norm1 = LayerNorm(c, dtype)
        self.axial = MultiHeadAttention(cfg, rng, dtype)
        self.planar = MultiHeadAttention(cfg, rng, dtype)
        self.window = MultiHeadAttention(cfg, rng, dtype)
        self.norm2 = LayerNorm(c, dtype)
        self.ffn = Mlp(c, cfg.ffn_ratio * c, rng, dtype)
        self.cfg = cfg

    def mix(self, tokens, grid, pos):
        """Sum of the three branch outputs for pre-normalized (N, C) tokens."""
        return ad.add(
            ad.add(
                self.axial_branch(tokens, grid, pos),
                self.planar_branch(tokens, grid, pos),
            ),
            self.window_branch(tokens, grid, pos),
        )

    def axial_branch(self, tokens, grid, pos):
        d, w, h = grid
        c = tokens.shape[-1]
        x = ad.reshape(tokens, (d, w * h, c))
        x = ad.add(x, ad.reshape(pos.axial_abs, (d, 1, c)))
        cols = ad.moveaxis(x, 0, 1)  # (w*h, d, c): one group per column
        out = self.axial(cols, cols)
        return ad.reshape(ad.moveaxis(out, 0, 1), (d * w * h, c))

    def planar_branch(self, tokens, grid, pos):
        d, w, h = grid
        c = tokens.shape[-1]
        x = ad.reshape(tokens, (d, w * h, c))  # one group per depth slice
        x = ad.add(x, pos.planar_abs)
        return ad.reshape(self.planar(x, x), (d * w * h, c))

    def window_branch(self, tokens, grid, pos):
        d, w, h = grid
        wz, wy, wx = self.cfg.window
        if d % wz or w % wy or h % wx:
            raise ShapeError(f"window {self.cfg.window} does not tile grid {grid}")
        c = tokens.shape[-1]
        nz, ny, nx = d // wz, w // wy, h // wx
        x = ad.reshape(tokens, (nz, wz, ny, wy, nx, wx, c))
        x = ad.moveaxis(x, (1, 3, 5), (3, 4, 5))  # (nz, ny, nx, wz, wy, wx, c)
        x = ad.reshape(x, (nz * ny * nx, wz * wy * wx, c))
        out = self.window(x, x, bias=pos.window_bias())
        out = ad.reshape(out, (nz, ny, nx, wz, wy, wx, c))
        out = ad.moveaxis(out, (3, 4, 5), (1, 3, 5))
        return ad.reshape(out, (d * w * h, c))

    def __call__(self, seq: TokenSeq, pos: PositionEncodings) -> TokenSeq:
        grid = seq.require_grid()
        z = seq.tokens
        z = ad.add(z, self.mix(self.norm1(z), grid, pos))
        z = ad.add(z, self.ffn(self.norm2(z)))
        return TokenSeq(z, seq.grid)


class TokenSummarizer(Module):
    """Condense a (d, w, h, C) feature volume into P tokens, each a softmax-
    weighted spatial average of the features."""

    def __init__(self, c, p, rng, dtype=np.float32):
        if p < 1:
            raise ConfigError(f"summary token count must be positive, got {p}")
        self.score = Mlp(c, c, rng, dtype, cout=p)
        self.p = p

    def __call__(self, feat):
        d, w, h, c = feat.shape
        n = d * w * h
        logits = ad.moveaxis(ad.reshape(self.score(feat), (n, self.p)), 0, 1)  # (P, N)
        weights = ad.softmax_last(logits)
        return ad.matmul(weights, ad.reshape(feat, (n, c)))  # (P, C)


def spatial_concat(summaries):
    """Stack per-modality (P, C) summaries into one (M*P, C) sequence,
    modality-major."""
    shapes = {s.shape for s in summaries}
    if len(shapes) != 1:
        raise ShapeError(f"summary shapes differ across modalities: {sorted(shapes)}")
    return TokenSeq(ad.concat(summaries, axis=0), grid=None)


class CrossModalityLayer(Module):
    """Pre-norm cross-attention: queries from the spatial token stream,
    keys/values from the concatenated modality summaries, then an FFN."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32):
        c = cfg.dim
        self.norm_q = LayerNorm(c, dtype)
        self.norm_kv = LayerNorm(c, dtype)
        self.attn = MultiHeadAttention(cfg, rng, dtype)
        self.norm2 = LayerNorm(c, dtype)
        self.ffn = Mlp(c, cfg.ffn_ratio * c, rng, dtype)

    def __call__(self, seq: TokenSeq, summary: TokenSeq, residual=None) -> TokenSeq:
        if seq.tokens.shape[-1] != summary.tokens.shape[-1]:
            raise ShapeError(
                f"channel mismatch: {seq.tokens.shape} vs {summary.tokens.shape}"
            )
        res = seq.tokens if residual is None else residual
        z = ad.add(res, self.attn(self.norm_q(seq.tokens), self.norm_kv(summary.tokens)))
        z = ad.add(z, self.ffn(self.norm2(z)))
        return TokenSeq(z, seq.grid)


class Fusion(Module):
    """Embed per-modality bottleneck features into one token stream, mix it
    spatially, and cross-attend it against learned modality summaries.

    `cross_residual` picks what the cross-attention residual adds to: the
    mixed query stream (default) or the raw embedded tokens.
    """

    def __init__(
        self,
        modalities,
        grid,
        cfg: AttentionConfig = None,
        rng=None,
        summary_tokens=32,
        spatial_layers=2,
        use_cross=True,
        cross_residual="query_stream",
        dtype=np.float32,
    ):
        cfg = cfg if cfg is not None else AttentionConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        if modalities < 1:
            raise ConfigError(f"need at least one modality, got {modalities}")
        if cross_residual not in ("query_stream", "embedded_tokens"):
            raise ConfigError(f"unknown cross_residual {cross_residual!r}")
        grid = tuple(int(g) for g in grid)
        if any(g % w for g, w in zip(grid, cfg.window)):
            raise ShapeError(f"window {cfg.window} does not tile bottleneck grid {grid}")

        c = cfg.dim
        self.embed = Linear(modalities * c, c, rng, dtype)
        self.pos = PositionEncodings(grid, cfg, rng, dtype, branch_tables=spatial_layers > 0)
        self.layers = [SpatialMixerLayer(cfg, rng, dtype) for _ in range(spatial_layers)]
        # disabled stages own no parameters at all
        self.summarize = TokenSummarizer(c, summary_tokens, rng, dtype) if use_cross else None
        self.cross = CrossModalityLayer(cfg, rng, dtype) if use_cross else None
        self.modalities = modalities
        self.grid = grid
        self.cfg = cfg
        self.cross_residual = cross_residual

    def _check_features(self, feats):
        if len(feats) != self.modalities:
            raise ShapeError(f"expected {self.modalities} modality features, got {len(feats)}")
        want = self.grid + (self.cfg.dim,)
        for i, f in enumerate(feats):
            if f.shape != want:
                raise ShapeError(f"modality {i} feature is {f.shape}, expected {want}")

    def embed_tokens(self, feats) -> TokenSeq:
        """Channel-concat all modalities, project to C, flatten, add the
        shared absolute position table."""
        self._check_features(feats)
        d, w, h = self.grid
        x = feats[0] if len(feats) == 1 else ad.concat(feats, axis=3)
        x = ad.reshape(self.embed(x), (d * w * h, self.cfg.dim))
        return TokenSeq(ad.add(x, self.pos.embed_abs), self.grid)

    def __call__(self, feats) -> TokenSeq:
        embedded = self.embed_tokens(feats)
        seq = embedded
        for layer in self.layers:
            seq = layer(seq, self.pos)
        if self.cross is None:
            return seq
        summary = spatial_concat([self.summarize(f) for f in feats])
        residual = embedded.tokens if self.cross_residual == "embedded_tokens" else None
        return self.cross(seq, summary, residual)
