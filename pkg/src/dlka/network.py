"""Segmentation networks: a 2D decoder-centric net and a full 3D U-shape.

Both produce full-resolution class logits. The 2D net pairs a plain
convolutional encoder (residual conv blocks) with a decoder of large-kernel
attention blocks; the 3D net uses attention blocks on both sides. Skips are
additive after a channel-matching convolution; skip_count keeps the k
highest-resolution skip sites and drops the rest, lowest resolution first.

Every residual branch ends in a zero-initialized projection and every offset
net starts at zero, so a freshly built net is a deep linear map along its
trunk: gradients reach all depths from step one, and the deformable net's
first forward pass equals its rigid twin's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import DlkaBlock2d, DlkaBlock3d, LkaSpec, gelu
from .layers import Conv, ConvTranspose, DepthwiseConv, LayerNorm, Module, ModuleList
from .tensor import Tensor, ValidationError


@dataclass(frozen=True)
class NetConfig:
    """Architecture description; (config, seed) fixes every parameter bit."""

    rank: int = 3
    in_channels: int = 1
    num_classes: int = 2
    base_channels: int = 16
    K: int = 21
    d: int = 3
    deformable: bool = True
    deform3d_kernel: int = 3
    skip_count: int | None = None  # None = all sites (2D: 3, 3D: 4)

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ValidationError(f"rank must be 2 or 3, got {self.rank}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValidationError("need in_channels >= 1 and num_classes >= 2")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ValidationError(
                f"base_channels must be a positive multiple of 4, got {self.base_channels}"
            )
        max_skips = self.max_skip_sites()
        if self.skip_count is not None and not (0 <= self.skip_count <= max_skips):
            raise ValidationError(
                f"skip_count must lie in [0, {max_skips}] for rank {self.rank}"
            )

    def max_skip_sites(self) -> int:
        return 3 if self.rank == 2 else 4

    def skips(self) -> int:
        return self.max_skip_sites() if self.skip_count is None else self.skip_count

    def lka(self, channels: int) -> LkaSpec:
        return LkaSpec(rank=self.rank, channels=channels, K=self.K, d=self.d,
                       deformable=self.deformable,
                       deform3d_kernel=self.deform3d_kernel)


# block counts are architectural constants, not tunables
ENC2D_STAGES = 4
DEC2D_BLOCKS = 2
ENC3D_STAGES = 3
ENC3D_BLOCKS = 3
BOTTLENECK3D_BLOCKS = 2
DEC3D_BLOCKS = 3


class ResConvBlock2d(Module):
    """Pre-norm residual pair of 3x3 convolutions with GELU between."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.ln = LayerNorm(channels)
        self.conv1 = Conv(2, channels, channels, 3, rng, bias=True)
        self.conv2 = Conv(2, channels, channels, 3, rng, bias=True, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(gelu(self.conv1(self.ln(x)))) + x


class PatchExpand(Module):
    """Doubles each spatial extent and halves channels.

    Both internal layers are bias-free so the expansion is linear: zero input
    maps to zero output.
    """

    def __init__(self, rank: int, channels: int, rng):
        super().__init__()
        if channels % 2:
            raise ValidationError(f"patch expand needs even channels, got {channels}")
        self.up = ConvTranspose(rank, channels, channels, 2, 2, rng, bias=False)
        self.proj = Conv(rank, channels, channels // 2, 1, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(self.up(x))


class PatchEmbed(Module):
    """Two stacked strided 3-tap convolutions that trade resolution for width.

    Rank 2 downsamples H and W by 4. Rank 3 downsamples H and W by 4 and the
    last axis by 2 (the strides are (2,2,1) then (2,2,2)), passing through an
    intermediate width of half the output channels. Both convolutions are
    bias-free, so zero input maps to zero output.
    """

    def __init__(self, rank: int, in_channels: int, out_channels: int, rng):
        super().__init__()
        self.rank = rank
        if rank == 2:
            self.factors = (4, 4)
            self.conv1 = Conv(2, in_channels, out_channels, 3, rng, stride=2, bias=False)
            self.conv2 = Conv(2, out_channels, out_channels, 3, rng, stride=2, bias=False)
        elif rank == 3:
            if out_channels % 2:
                raise ValidationError(
                    f"3D patch embed needs even output channels, got {out_channels}"
                )
            self.factors = (4, 4, 2)
            mid = out_channels // 2
            self.conv1 = Conv(3, in_channels, mid, 3, rng, stride=(2, 2, 1), bias=False)
            self.conv2 = Conv(3, mid, out_channels, 3, rng, stride=(2, 2, 2), bias=False)
        else:
            raise ValidationError(f"rank must be 2 or 3, got {rank}")

    def __call__(self, x: Tensor) -> Tensor:
        _check_divisible(x.shape[2:], self.factors, "patch embed")
        return self.conv2(self.conv1(x))


def _check_divisible(sp, factors, what):
    for n, f in zip(sp, factors):
        if n % f:
            raise ValidationError(
                f"{what} needs spatial extents divisible by {factors}, got {tuple(sp)}"
            )


class DlkaNet2d(Module):
    """Conv encoder, large-kernel-attention decoder, full-resolution logits."""

    def __init__(self, cfg: NetConfig, seed: int):
        super().__init__()
        if cfg.rank != 2:
            raise ValidationError("DlkaNet2d needs a rank-2 config")
        self.cfg = cfg
        rng = np.random.default_rng([int(seed), 2])
        c0 = cfg.base_channels
        self.patch_embed = PatchEmbed(2, cfg.in_channels, c0, rng)

        widths = [c0 * 2**i for i in range(ENC2D_STAGES)]  # at /4 /8 /16 /32
        self.enc_blocks = ModuleList(ResConvBlock2d(w, rng) for w in widths)
        self.downsamples = ModuleList(
            Conv(2, widths[i], widths[i + 1], 3, rng, stride=2, bias=True)
            for i in range(ENC2D_STAGES - 1)
        )

        self.dec_blocks = ModuleList()
        self.expands = ModuleList()
        self.skip_projs = ModuleList()
        # decoder works bottom-up: blocks at /32, /16, /8, /4
        for level in range(ENC2D_STAGES):
            w = widths[-1 - level]
            stage = ModuleList(
                DlkaBlock2d(cfg.lka(w), rng) for _ in range(DEC2D_BLOCKS)
            )
            self.dec_blocks.append(stage)
            if level < ENC2D_STAGES - 1:
                self.expands.append(PatchExpand(2, w, rng))
        # skip sites at /4, /8, /16 in resolution-descending order
        self.active_skips = cfg.skips()
        for i in range(self.active_skips):
            self.skip_projs.append(Conv(2, widths[i], widths[i], 1, rng, bias=True))
        self.final_expand1 = PatchExpand(2, c0, rng)
        self.final_expand2 = PatchExpand(2, c0 // 2, rng)
        self.head = Conv(2, c0 // 4, cfg.num_classes, 1, rng, bias=True)

    def __call__(self, x: Tensor, rigid: bool = False) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValidationError(f"expected (N, {self.cfg.in_channels}, H, W), got {x.shape}")
        _check_divisible(x.shape[2:], (32, 32), "the 2D net")
        h = self.patch_embed(x)
        feats = []
        for i, block in enumerate(self.enc_blocks):
            h = block(h)
            feats.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        # feats[i] lives at /(4 * 2^i); skip site i uses feats[i] for i < 3
        for level, stage in enumerate(self.dec_blocks):
            for block in stage:
                h = block(h, rigid=rigid)
            if level < len(self.expands):
                h = self.expands[level](h)
                site = ENC2D_STAGES - 2 - level  # /16 -> site 2, /8 -> 1, /4 -> 0
                if site < self.active_skips:
                    h = h + self.skip_projs[site](feats[site])
        h = self.final_expand2(self.final_expand1(h))
        return self.head(h)


class DlkaNet3d(Module):
    """Symmetric 3D encoder-decoder of attention blocks with additive skips."""

    def __init__(self, cfg: NetConfig, seed: int):
        super().__init__()
        if cfg.rank != 3:
            raise ValidationError("DlkaNet3d needs a rank-3 config")
        self.cfg = cfg
        rng = np.random.default_rng([int(seed), 3])
        c0 = cfg.base_channels
        self.patch_embed = PatchEmbed(3, cfg.in_channels, c0, rng)

        widths = [c0 * 2**i for i in range(ENC3D_STAGES + 1)]  # /4 /8 /16 /32
        self.enc_stages = ModuleList(
            ModuleList(DlkaBlock3d(cfg.lka(widths[i]), rng) for _ in range(ENC3D_BLOCKS))
            for i in range(ENC3D_STAGES)
        )
        self.downsamples = ModuleList(
            Conv(3, widths[i], widths[i + 1], 3, rng, stride=2, bias=True)
            for i in range(ENC3D_STAGES)
        )
        self.bottleneck = ModuleList(
            DlkaBlock3d(cfg.lka(widths[-1]), rng) for _ in range(BOTTLENECK3D_BLOCKS)
        )
        self.upsamples = ModuleList(
            ConvTranspose(3, widths[i + 1], widths[i], 2, 2, rng, bias=True)
            for i in reversed(range(ENC3D_STAGES))
        )
        self.dec_stages = ModuleList(
            ModuleList(DlkaBlock3d(cfg.lka(widths[i]), rng) for _ in range(DEC3D_BLOCKS))
            for i in reversed(range(ENC3D_STAGES))
        )
        # skip sites in resolution-descending order:
        # 0 input-level, then encoder stages at /4, /8, /16
        self.active_skips = cfg.skips()
        self.skip_projs = ModuleList(
            Conv(3, widths[i], widths[i], 1, rng, bias=True)
            for i in range(ENC3D_STAGES)
            if i + 1 < self.active_skips
        )
        self.final_expand1 = ConvTranspose(3, c0, c0 // 2, 2, 2, rng, bias=True)
        self.final_expand2 = ConvTranspose(3, c0 // 2, c0 // 4, (2, 2, 1), (2, 2, 1),
                                           rng, bias=True)
        if self.active_skips > 0:
            self.input_skip = Conv(3, cfg.in_channels, c0 // 4, 3, rng, bias=True)
        else:
            self.input_skip = None
        self.head_conv = Conv(3, c0 // 4, c0 // 4, 3, rng, bias=True)
        self.head = Conv(3, c0 // 4, cfg.num_classes, 1, rng, bias=True)

    def __call__(self, x: Tensor, rigid: bool = False) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValidationError(
                f"expected (N, {self.cfg.in_channels}, H, W, D), got {x.shape}"
            )
        _check_divisible(x.shape[2:], (32, 32, 16), "the 3D net")
        h = self.patch_embed(x)
        feats = []
        for i, stage in enumerate(self.enc_stages):
            for block in stage:
                h = block(h, rigid=rigid)
            feats.append(h)
            h = self.downsamples[i](h)
        for block in self.bottleneck:
            h = block(h, rigid=rigid)
        for di, stage in enumerate(self.dec_stages):
            h = self.upsamples[di](h)
            enc_i = ENC3D_STAGES - 1 - di  # encoder stage index this level mirrors
            if enc_i + 1 < self.active_skips:
                h = h + self.skip_projs[enc_i](feats[enc_i])
            for block in stage:
                h = block(h, rigid=rigid)
        h = self.final_expand2(self.final_expand1(h))
        if self.input_skip is not None:
            h = h + self.input_skip(x)
        return self.head(self.head_conv(h))


def build_net(cfg: NetConfig, seed: int):
    """Deterministic parameters for (cfg, seed); same inputs, same bits."""
    return DlkaNet2d(cfg, seed) if cfg.rank == 2 else DlkaNet3d(cfg, seed)


@dataclass(frozen=True)
class StageSupport:
    """Analytic receptive extent of one attention stage (chain taps only)."""

    stage: str
    downsample_factor: int
    blocks: int
    taps_per_block: int
    composed_taps: int
    input_extent: int


def receptive_field_report(cfg: NetConfig) -> list[StageSupport]:
    """Per-stage support of the DW then DW-D chain, scaled to input voxels.

    One block's chain spans S taps at its own resolution; n blocks at the
    same resolution compose to n*(S-1) + 1 taps. Input extent multiplies by
    the stage's downsampling factor (stem smoothing and MLP convs ignored).
    """
    s = LkaSpec(rank=cfg.rank, channels=cfg.base_channels, K=cfg.K, d=cfg.d).support
    rows = []

    def add(stage, factor, blocks):
        composed = blocks * (s - 1) + 1
        rows.append(StageSupport(stage, factor, blocks, s, composed, composed * factor))

    if cfg.rank == 2:
        for level in range(ENC2D_STAGES):
            factor = 4 * 2 ** (ENC2D_STAGES - 1 - level)
            add(f"decoder/{factor}x", factor, DEC2D_BLOCKS)
    else:
        for i in range(ENC3D_STAGES):
            add(f"encoder/{4 * 2**i}x", 4 * 2**i, ENC3D_BLOCKS)
        add(f"bottleneck/{4 * 2**ENC3D_STAGES}x", 4 * 2**ENC3D_STAGES,
            BOTTLENECK3D_BLOCKS)
        for i in reversed(range(ENC3D_STAGES)):
            add(f"decoder/{4 * 2**i}x", 4 * 2**i, DEC3D_BLOCKS)
    return rows
