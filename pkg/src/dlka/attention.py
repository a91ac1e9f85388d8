"""Large-kernel attention with optional deformable sampling, and its blocks.

The attention map comes from a depthwise conv, a depthwise dilated conv, and
a 1x1 mixing conv; it multiplies the projected features directly, with no
softmax or sigmoid. Rank 2 swaps both depthwise convs for deformable ones;
rank 3 keeps them rigid and inserts a single dense deformable 3x3x3 layer
after the depthwise chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .layers import Conv, DeformConv, DepthwiseConv, LayerNorm, Module
from .tensor import Tensor, ValidationError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi)

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return out._attach((x,), back)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the channel axis per spatial position, then apply affine."""
    from .tensor import reduce_moments

    if x.ndim < 2:
        raise ValidationError(f"layer_norm expects (N, C, ...) input, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValidationError(f"affine shapes {scale.shape}/{shift.shape} != ({c},)")
    m, v = reduce_moments(x, axes=(1,))
    shape = (1, c) + (1,) * (x.ndim - 2)
    norm = (x - m) / (v + eps).sqrt()
    return norm * scale.reshape(shape) + shift.reshape(shape)


@dataclass(frozen=True)
class LkaSpec:
    """Channel/kernel geometry of one large-kernel attention layer.

    The K-wide target kernel decomposes into a (2d-1)-wide depthwise conv and
    a ceil(K/d)-wide depthwise conv at dilation d; the composed one-axis
    support is (2d-1) + d*(ceil(K/d) - 1).
    """

    rank: int
    channels: int
    K: int = 21
    d: int = 3
    deformable: bool = True
    deform3d_kernel: int = 3

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ValidationError(f"rank must be 2 or 3, got {self.rank}")
        if self.channels <= 0:
            raise ValidationError(f"channels must be positive, got {self.channels}")
        if self.K < 1:
            raise ValidationError(f"K must be >= 1, got {self.K}")
        if self.d < 1:
            raise ValidationError(f"d must be >= 1, got {self.d}")
        if self.rank == 3 and self.deform3d_kernel < 1:
            raise ValidationError("deform3d_kernel must be >= 1")

    @property
    def dw_kernel(self) -> int:
        return 2 * self.d - 1

    @property
    def dwd_kernel(self) -> int:
        return -(-self.K // self.d)

    @property
    def support(self) -> int:
        return self.dw_kernel + self.d * (self.dwd_kernel - 1)


class LkaAttention(Module):
    """Gating by a large-kernel map: out = proj(map * features) + input.

    features = act(1x1(x)); map = 1x1(DWD(DW(features))), with the deformable
    substitutions described in the module docstring. The final projection is
    zero-initialized and bias-free, so the layer is the identity at init.
    The activation is GELU; "identity" exists for linearity probes in tests.
    """

    def __init__(self, spec: LkaSpec, rng, activation: str = "gelu"):
        super().__init__()
        if activation not in ("gelu", "identity"):
            raise ValidationError(f"unknown activation {activation!r}")
        self.spec = spec
        self.activation = activation
        r, c = spec.rank, spec.channels
        self.proj_in = Conv(r, c, c, 1, rng, bias=True)
        if spec.deformable and r == 2:
            self.dw = DeformConv(r, c, c, spec.dw_kernel, rng, dilation=1,
                                 bias=True, depthwise=True)
            self.dwd = DeformConv(r, c, c, spec.dwd_kernel, rng, dilation=spec.d,
                                  bias=True, depthwise=True)
        else:
            self.dw = DepthwiseConv(r, c, spec.dw_kernel, rng, dilation=1, bias=True)
            self.dwd = DepthwiseConv(r, c, spec.dwd_kernel, rng, dilation=spec.d,
                                     bias=True)
        if spec.deformable and r == 3:
            self.deform = DeformConv(r, c, c, spec.deform3d_kernel, rng,
                                     dilation=1, bias=True, depthwise=False)
        else:
            self.deform = None
        self.mix = Conv(r, c, c, 1, rng, bias=True)
        self.proj_out = Conv(r, c, c, 1, rng, bias=False, zero_init=True)

    def _act(self, x: Tensor) -> Tensor:
        return gelu(x) if self.activation == "gelu" else x

    def gate(self, x: Tensor, rigid: bool = False) -> Tensor:
        """The residual-free branch proj(map * features); blocks add their own
        skip around this, so the whole block is exactly x at zero init."""
        if x.shape[1] != self.spec.channels:
            raise ValidationError(
                f"expected {self.spec.channels} channels, got {x.shape[1]}"
            )
        feats = self._act(self.proj_in(x))
        a = self._apply_deformable(self.dw, feats, rigid)
        a = self._apply_deformable(self.dwd, a, rigid)
        if self.deform is not None:
            a = self.deform(a, rigid=rigid)
        a = self.mix(a)
        return self.proj_out(a * feats)

    def __call__(self, x: Tensor, rigid: bool = False) -> Tensor:
        return self.gate(x, rigid=rigid) + x

    @staticmethod
    def _apply_deformable(layer, x, rigid):
        if isinstance(layer, DeformConv):
            return layer(x, rigid=rigid)
        return layer(x)


class Mlp2d(Module):
    """Pointwise expand, depthwise 3x3 in the hidden space, GELU, contract."""

    def __init__(self, channels: int, rng, expansion: int = 4,
                 activation: str = "gelu"):
        super().__init__()
        hidden = channels * expansion
        self.activation = activation
        self.expand = Conv(2, channels, hidden, 1, rng, bias=True)
        self.dw = DepthwiseConv(2, hidden, 3, rng, bias=True)
        self.contract = Conv(2, hidden, channels, 1, rng, bias=True, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.dw(self.expand(x))
        h = gelu(h) if self.activation == "gelu" else h
        return self.contract(h)


class Ffn3d(Module):
    """Two convolutions, 3x3x3 then 1x1x1, with GELU between."""

    def __init__(self, channels: int, rng, activation: str = "gelu"):
        super().__init__()
        self.activation = activation
        self.conv = Conv(3, channels, channels, 3, rng, bias=True)
        self.proj = Conv(3, channels, channels, 1, rng, bias=True, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv(x)
        h = gelu(h) if self.activation == "gelu" else h
        return self.proj(h)


class DlkaBlock2d(Module):
    """Pre-norm attention residual followed by a pre-norm MLP residual."""

    def __init__(self, spec: LkaSpec, rng, activation: str = "gelu"):
        super().__init__()
        if spec.rank != 2:
            raise ValidationError("DlkaBlock2d needs a rank-2 spec")
        self.ln1 = LayerNorm(spec.channels)
        self.attn = LkaAttention(spec, rng, activation=activation)
        self.ln2 = LayerNorm(spec.channels)
        self.mlp = Mlp2d(spec.channels, rng, activation=activation)

    def __call__(self, x: Tensor, rigid: bool = False) -> Tensor:
        x1 = self.attn.gate(self.ln1(x), rigid=rigid) + x
        return self.mlp(self.ln2(x1)) + x1


class DlkaBlock3d(Module):
    """Pre-norm attention residual followed by a convolutional FFN residual."""

    def __init__(self, spec: LkaSpec, rng, activation: str = "gelu"):
        super().__init__()
        if spec.rank != 3:
            raise ValidationError("DlkaBlock3d needs a rank-3 spec")
        self.ln = LayerNorm(spec.channels)
        self.attn = LkaAttention(spec, rng, activation=activation)
        self.ffn = Ffn3d(spec.channels, rng, activation=activation)

    def __call__(self, x: Tensor, rigid: bool = False) -> Tensor:
        x1 = self.attn.gate(self.ln(x), rigid=rigid) + x
        return self.ffn(x1) + x1
