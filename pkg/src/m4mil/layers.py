"""Differentiable building blocks for bag-level prediction.

Parameters are plain dataclasses of tensors; the forwards are pure
functions of (input, parameters) so separate bags can be evaluated
concurrently on independent graphs. Initialisation is uniform in
[-1/sqrt(fan_in), +1/sqrt(fan_in)] with zero biases, drawn from the
caller's generator in a fixed field order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, EmptyBagError

SEGMENTS = 4
BRANCH_KERNELS = (3, 5, 7)
# (pad, stride) per kernel size as printed in the multi-proxy recipe; the
# shrinking branches are upsampled back to the grid in literal mode.
LITERAL_CONV = {3: (1, 1), 5: (1, 2), 7: (1, 3)}
SHAPE_MODES = ("preserve", "literal")

NamedParams = Iterator[tuple[str, Tensor]]


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _require_bag(h: Tensor) -> int:
    if h.values.ndim != 2:
        raise ConfigError(f"bag features must be N x d, got shape {h.shape}")
    n = h.shape[0]
    if n < 1:
        raise EmptyBagError("bag has no instances")
    return n


@dataclass
class GatedAttentionParams:
    """Two projections gated against each other plus a scoring row."""

    tanh_w: Tensor   # L x d_f
    sig_w: Tensor    # L x d_f
    score_w: Tensor  # 1 x L

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.tanh_w", self.tanh_w
        yield f"{prefix}.sig_w", self.sig_w
        yield f"{prefix}.score_w", self.score_w


def init_gated_attention(rng: np.random.Generator, d_f: int, width: int) -> GatedAttentionParams:
    return GatedAttentionParams(
        tanh_w=_uniform(rng, (width, d_f), d_f),
        sig_w=_uniform(rng, (width, d_f), d_f),
        score_w=_uniform(rng, (1, width), width),
    )


def gated_attention_pool(h: Tensor, p: GatedAttentionParams) -> tuple[Tensor, Tensor]:
    """Pool N x d_f instances into 1 x d_f with a normalised attention row.

    Scores are score_w applied to tanh(h tanh_w') * sigmoid(h sig_w'),
    softmaxed over instances; the pooled vector is the attention-weighted
    sum of rows. The returned attention is 1 x N and sums to 1.
    """
    _require_bag(h)
    gated = ad.activation(ad.matmul(h, ad.transpose(p.tanh_w)), "tanh") * ad.activation(
        ad.matmul(h, ad.transpose(p.sig_w)), "sigmoid"
    )
    scores = ad.transpose(ad.matmul(gated, ad.transpose(p.score_w)))
    attention = ad.softmax(scores, axis=1)
    return ad.matmul(attention, h), attention


@dataclass
class AmilParams:
    """Embedding layer plus gated attention pooling."""

    embed_w: Tensor  # d x d_f
    embed_b: Tensor  # 1 x d_f
    attn: GatedAttentionParams

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.embed_w", self.embed_w
        yield f"{prefix}.embed_b", self.embed_b
        yield from self.attn.named_parameters(f"{prefix}.attn")


def init_amil(rng: np.random.Generator, d: int, d_f: int, attn_width: int) -> AmilParams:
    return AmilParams(
        embed_w=_uniform(rng, (d, d_f), d),
        embed_b=_zeros((1, d_f)),
        attn=init_gated_attention(rng, d_f, attn_width),
    )


def amil_forward(h: Tensor, p: AmilParams) -> tuple[Tensor, Tensor]:
    """FC + ReLU embedding followed by gated attention pooling."""
    _require_bag(h)
    embedded = ad.activation(ad.matmul(h, p.embed_w) + p.embed_b, "relu")
    return gated_attention_pool(embedded, p.attn)


@dataclass
class ConvBranchParams:
    depth_kernels: Tensor  # k x k x c
    point_weights: Tensor  # c x c

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.depth_kernels", self.depth_kernels
        yield f"{prefix}.point_weights", self.point_weights


def init_conv_branch(rng: np.random.Generator, k: int, channels: int) -> ConvBranchParams:
    return ConvBranchParams(
        depth_kernels=_uniform(rng, (k, k, channels), k * k),
        point_weights=_uniform(rng, (channels, channels), channels),
    )


def identity_branch(k: int, channels: int) -> ConvBranchParams:
    """Delta depthwise kernel and identity pointwise map: a conv no-op."""
    depth = np.zeros((k, k, channels))
    depth[k // 2, k // 2, :] = 1.0
    return ConvBranchParams(
        depth_kernels=Tensor(depth, requires_grad=True),
        point_weights=Tensor(np.eye(channels), requires_grad=True),
    )


@dataclass
class MPAmilParams:
    """Embedding, three conv branches (the fourth proxy is the identity), attention."""

    embed_w: Tensor
    embed_b: Tensor
    branches: tuple[ConvBranchParams, ConvBranchParams, ConvBranchParams]
    attn: GatedAttentionParams

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.embed_w", self.embed_w
        yield f"{prefix}.embed_b", self.embed_b
        for k, branch in zip(BRANCH_KERNELS, self.branches):
            yield from branch.named_parameters(f"{prefix}.branch_k{k}")
        yield from self.attn.named_parameters(f"{prefix}.attn")


def init_mp_amil(rng: np.random.Generator, d: int, d_f: int, attn_width: int) -> MPAmilParams:
    if d_f % SEGMENTS != 0:
        raise ConfigError(f"d_f must be divisible by {SEGMENTS}, got {d_f}")
    channels = d_f // SEGMENTS
    return MPAmilParams(
        embed_w=_uniform(rng, (d, d_f), d),
        embed_b=_zeros((1, d_f)),
        branches=tuple(init_conv_branch(rng, k, channels) for k in BRANCH_KERNELS),
        attn=init_gated_attention(rng, d_f, attn_width),
    )


def set_identity_branches(p: MPAmilParams) -> None:
    """Overwrite conv branch values in place so every proxy is a no-op."""
    channels = p.branches[0].point_weights.shape[0]
    for k, branch in zip(BRANCH_KERNELS, p.branches):
        ident = identity_branch(k, channels)
        branch.depth_kernels.values[...] = ident.depth_kernels.values
        branch.point_weights.values[...] = ident.point_weights.values


def mp_amil_forward(
    h: Tensor, p: MPAmilParams, shape_mode: str = "preserve"
) -> tuple[Tensor, Tensor]:
    """Multi-proxy expert: embed, grid, per-segment convs, flatten, pool.

    Tokens are embedded (FC + ReLU), laid on a square grid, and split
    into four channel segments. Segment 1 passes through unchanged;
    segments 2-4 go through depthwise separable convolutions with kernel
    sizes 3, 5 and 7. ``preserve`` keeps every branch at the grid size
    (pad k//2, stride 1); ``literal`` applies the printed (pad, stride)
    pairs and upsamples shrunken branches back to the grid. Segments are
    re-concatenated, the grid padding is dropped, and the result is
    attention-pooled.
    """
    if shape_mode not in SHAPE_MODES:
        raise ConfigError(f"shape_mode must be one of {SHAPE_MODES}, got {shape_mode!r}")
    n = _require_bag(h)
    embedded = ad.activation(ad.matmul(h, p.embed_w) + p.embed_b, "relu")
    grid, _ = ad.grid_restore(embedded)
    side = grid.shape[0]
    segments = ad.split_channels(grid, SEGMENTS)
    mixed = [segments[0]]
    for branch, k in zip(p.branches, BRANCH_KERNELS):
        if shape_mode == "preserve":
            pad, stride = k // 2, 1
        else:
            pad, stride = LITERAL_CONV[k]
        out = ad.depthwise_separable_conv2d(
            segments[len(mixed)], branch.depth_kernels, branch.point_weights, pad, stride
        )
        if out.shape[0] != side:
            out = ad.upsample_nearest(out, side)
        mixed.append(out)
    tokens = ad.grid_flatten(ad.concat_channels(mixed), n)
    return gated_attention_pool(tokens, p.attn)


@dataclass
class MPGateParams:
    """Reduction layer plus one expert-weight head per channel segment."""

    reduce_w: Tensor                 # d x d_1
    reduce_b: Tensor                 # 1 x d_1
    segment_w: tuple[Tensor, ...]    # four (d_1/4) x E
    segment_b: tuple[Tensor, ...]    # four 1 x E

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.reduce_w", self.reduce_w
        yield f"{prefix}.reduce_b", self.reduce_b
        for s in range(SEGMENTS):
            yield f"{prefix}.segment{s}_w", self.segment_w[s]
            yield f"{prefix}.segment{s}_b", self.segment_b[s]


def init_mp_gate(rng: np.random.Generator, d: int, d_1: int, experts: int) -> MPGateParams:
    if d_1 % SEGMENTS != 0:
        raise ConfigError(f"d_1 must be divisible by {SEGMENTS}, got {d_1}")
    seg_width = d_1 // SEGMENTS
    return MPGateParams(
        reduce_w=_uniform(rng, (d, d_1), d),
        reduce_b=_zeros((1, d_1)),
        segment_w=tuple(_uniform(rng, (seg_width, experts), seg_width) for _ in range(SEGMENTS)),
        segment_b=tuple(_zeros((1, experts)) for _ in range(SEGMENTS)),
    )


def mp_gate_forward(h: Tensor, p: MPGateParams) -> Tensor:
    """Per-segment expert weights from mean-pooled raw features.

    Mean-pools the bag, reduces it with FC + ReLU, splits the reduced
    vector into four segments, and maps each segment to a softmax row
    over experts. Returns a 4 x E tensor whose rows each sum to 1.
    """
    _require_bag(h)
    reduced = ad.activation(ad.matmul(ad.mean_rows(h), p.reduce_w) + p.reduce_b, "relu")
    segments = ad.split_channels(reduced, SEGMENTS)
    rows = [
        ad.softmax(ad.matmul(seg, w) + b, axis=1)
        for seg, w, b in zip(segments, p.segment_w, p.segment_b)
    ]
    return ad.concat_rows(rows)


def init_simple_gate(rng: np.random.Generator, d: int, experts: int) -> Tensor:
    return _uniform(rng, (d, experts), d)


def simple_gate_forward(h: Tensor, gate_w: Tensor) -> Tensor:
    """Single softmax over experts from the mean-pooled bag: 1 x E, sums to 1."""
    _require_bag(h)
    return ad.softmax(ad.matmul(ad.mean_rows(h), gate_w), axis=1)


@dataclass
class TowerParams:
    """Per-task head: hidden FC + ReLU, then a single output logit."""

    hidden_w: Tensor  # d_f x d_h
    hidden_b: Tensor  # 1 x d_h
    out_w: Tensor     # d_h x 1
    out_b: Tensor     # 1 x 1

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.hidden_w", self.hidden_w
        yield f"{prefix}.hidden_b", self.hidden_b
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b


def init_tower(rng: np.random.Generator, d_f: int, hidden: int) -> TowerParams:
    return TowerParams(
        hidden_w=_uniform(rng, (d_f, hidden), d_f),
        hidden_b=_zeros((1, hidden)),
        out_w=_uniform(rng, (hidden, 1), hidden),
        out_b=_zeros((1, 1)),
    )


def tower_forward(pooled: Tensor, p: TowerParams) -> Tensor:
    """Map a 1 x d_f bag vector to an unbounded 1 x 1 logit."""
    hidden = ad.activation(ad.matmul(pooled, p.hidden_w) + p.hidden_b, "relu")
    return ad.matmul(hidden, p.out_w) + p.out_b


def mean_pool_head(h: Tensor, towers: Sequence[TowerParams]) -> list[Tensor]:
    """Column-wise mean of the bag fed through each task tower."""
    _require_bag(h)
    pooled = ad.mean_rows(h)
    return [tower_forward(pooled, t) for t in towers]


def max_pool_head(h: Tensor, towers: Sequence[TowerParams]) -> list[Tensor]:
    """Column-wise max of the bag fed through each task tower."""
    _require_bag(h)
    pooled = ad.max_rows(h)
    return [tower_forward(pooled, t) for t in towers]
