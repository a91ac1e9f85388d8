"""Rigid convolutions: dense, depthwise, and transposed, for 2D and 3D grids.

All ops take channels-first tensors (N, C, *spatial) and support per-axis
stride/dilation plus "same" or explicit (lo, hi) padding. Forward paths are
vectorized (strided windows + tensordot for dense, tap-wise fused adds for
depthwise); backward paths reuse the same kernels via the correlation
adjoint, so gradients are exact to rounding error for every stride/padding
combination, including ones where the output extent does not divide evenly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from functools import lru_cache
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, ValidationError


def _per_axis(v, rank: int, name: str) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * rank
    t = tuple(int(x) for x in v)
    if len(t) != rank:
        raise ValidationError(f"{name} needs {rank} entries, got {t}")
    return t


def kernel_span(k: int, d: int) -> int:
    """Extent touched by a k-tap kernel at dilation d."""
    return (k - 1) * d + 1


def output_extent(n: int, k: int, s: int, d: int, lo: int, hi: int) -> int:
    """Output length of a valid correlation over a padded axis."""
    span = kernel_span(k, d)
    if n + lo + hi < span:
        raise ValidationError(
            f"kernel span {span} exceeds padded extent {n + lo + hi}"
        )
    return (n + lo + hi - span) // s + 1


def same_padding(n: int, k: int, s: int, d: int) -> tuple[int, int]:
    """(lo, hi) pad so the output extent is ceil(n / s); extra goes high."""
    span = kernel_span(k, d)
    out = -(-n // s)
    total = max(0, (out - 1) * s + span - n)
    lo = total // 2
    return lo, total - lo


def resolve_padding(padding, spatial, kernel, stride, dilation) -> list[tuple[int, int]]:
    rank = len(spatial)
    if padding == "same":
        return [same_padding(n, k, s, d) for n, k, s, d in zip(spatial, kernel, stride, dilation)]
    if isinstance(padding, int):
        return [(padding, padding)] * rank
    pads = []
    for p in padding:
        if isinstance(p, int):
            pads.append((p, p))
        else:
            lo, hi = p
            pads.append((int(lo), int(hi)))
    if len(pads) != rank:
        raise ValidationError(f"padding needs {rank} entries, got {padding!r}")
    if any(lo < 0 or hi < 0 for lo, hi in pads):
        raise ValidationError(f"negative padding forbidden: {pads}")
    return pads


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer."""

    rank: int
    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...] = ()
    dilation: tuple[int, ...] = ()
    padding: object = "same"
    depthwise: bool = False
    bias: bool = True

    def __post_init__(self):
        if self.rank not in (1, 2, 3):
            raise ValidationError(f"rank must be 1, 2 or 3, got {self.rank}")
        object.__setattr__(self, "kernel", _per_axis(self.kernel, self.rank, "kernel"))
        object.__setattr__(self, "stride", _per_axis(self.stride or 1, self.rank, "stride"))
        object.__setattr__(self, "dilation", _per_axis(self.dilation or 1, self.rank, "dilation"))
        if any(k <= 0 for k in self.kernel):
            raise ValidationError(f"kernel taps must be positive: {self.kernel}")
        if any(s <= 0 for s in self.stride) or any(d <= 0 for d in self.dilation):
            raise ValidationError("stride and dilation must be positive")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValidationError("channel counts must be positive")
        if self.depthwise and self.in_channels != self.out_channels:
            raise ValidationError("depthwise conv needs in_channels == out_channels")

    def out_spatial(self, spatial: tuple[int, ...]) -> tuple[int, ...]:
        pads = resolve_padding(self.padding, spatial, self.kernel, self.stride, self.dilation)
        return tuple(
            output_extent(n, k, s, d, lo, hi)
            for n, k, s, d, (lo, hi) in zip(spatial, self.kernel, self.stride, self.dilation, pads)
        )

    def weight_shape(self) -> tuple[int, ...]:
        if self.depthwise:
            return (self.in_channels, *self.kernel)
        return (self.out_channels, self.in_channels, *self.kernel)


# -- numpy-level kernels -------------------------------------------------------


def _pad_spatial(x: np.ndarray, pads) -> np.ndarray:
    if all(lo == 0 and hi == 0 for lo, hi in pads):
        return x
    return np.pad(x, [(0, 0), (0, 0), *pads])


def _windows(xp: np.ndarray, kernel, stride, dilation, out_sp) -> np.ndarray:
    """Strided view (N, C, *out, *kernel) over the padded input; no copy."""
    n, c = xp.shape[:2]
    st = xp.strides
    shape = (n, c, *out_sp, *kernel)
    strides = (
        st[0],
        st[1],
        *[st[2 + a] * s for a, s in enumerate(stride)],
        *[st[2 + a] * d for a, d in enumerate(dilation)],
    )
    return as_strided(xp, shape=shape, strides=strides)


def _corr_dense(xp: np.ndarray, w: np.ndarray, stride, dilation) -> np.ndarray:
    """Valid dense correlation of padded input xp with kernel (Co, Ci, *k)."""
    rank = w.ndim - 2
    kernel = w.shape[2:]
    out_sp = tuple(
        output_extent(n, k, s, d, 0, 0)
        for n, k, s, d in zip(xp.shape[2:], kernel, stride, dilation)
    )
    if all(k == 1 for k in kernel) and all(s == 1 for s in stride):
        y = np.tensordot(w.reshape(w.shape[:2]), xp, axes=(1, 1))  # (Co, N, *sp)
        return np.ascontiguousarray(np.moveaxis(y, 0, 1))
    win = _windows(xp, kernel, stride, dilation, out_sp)
    ax_x = (1, *range(2 + rank, 2 + 2 * rank))
    ax_w = tuple(range(1, rank + 2))
    y = np.tensordot(win, w, axes=(ax_x, ax_w))  # (N, *out, Co)
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def _tap_slices(tap, out_sp, stride, dilation):
    return tuple(
        slice(t * d, t * d + (o - 1) * s + 1 if o > 0 else 0, s)
        for t, o, s, d in zip(tap, out_sp, stride, dilation)
    )


@lru_cache(maxsize=512)
def _dw_tap_ranges(sp, kernel, stride, dilation, pads, out_sp):
    """Per-tap (output window, input window) slice pairs on the unpadded input.

    Taps whose window lies entirely in the zero padding are dropped; they
    contribute nothing forward and receive zero weight gradient, so skipping
    them is exact and avoids materializing padded copies.
    """
    ranges = []
    for tap in np.ndindex(*kernel):
        osl, isl = [], []
        ok = True
        for t, nn, k, s, d, (lo, _), o in zip(tap, sp, kernel, stride, dilation, pads, out_sp):
            shift = t * d - lo  # input index at output 0
            o_min = 0 if shift >= 0 else -(shift // s)  # ceil(-shift / s)
            o_max = min(o - 1, (nn - 1 - shift) // s)
            if o_min > o_max or o == 0:
                ok = False
                break
            i_start = o_min * s + shift
            osl.append(slice(o_min, o_max + 1))
            isl.append(slice(i_start, i_start + (o_max - o_min) * s + 1, s))
        if ok:
            ranges.append((tap, tuple(osl), tuple(isl)))
    return ranges


def _dw_forward(x: np.ndarray, w: np.ndarray, ranges, out_sp) -> np.ndarray:
    n, c = x.shape[:2]
    y = np.zeros((n, c, *out_sp), dtype=x.dtype)
    cshape = (1, c) + (1,) * len(out_sp)
    pre = (slice(None), slice(None))
    for tap, osl, isl in ranges:
        y[pre + osl] += w[(slice(None), *tap)].reshape(cshape) * x[pre + isl]
    return y


def _dw_dx(g: np.ndarray, w: np.ndarray, ranges, in_sp) -> np.ndarray:
    n, c = g.shape[:2]
    dx = np.zeros((n, c, *in_sp), dtype=g.dtype)
    cshape = (1, c) + (1,) * len(in_sp)
    pre = (slice(None), slice(None))
    for tap, osl, isl in ranges:
        dx[pre + isl] += w[(slice(None), *tap)].reshape(cshape) * g[pre + osl]
    return dx


def _dw_dweight(x: np.ndarray, g: np.ndarray, kernel, ranges) -> np.ndarray:
    c = x.shape[1]
    dw = np.zeros((c, *kernel), dtype=g.dtype)
    red = (0, *range(2, 2 + len(kernel)))
    pre = (slice(None), slice(None))
    for tap, osl, isl in ranges:
        dw[(slice(None), *tap)] = (g[pre + osl] * x[pre + isl]).sum(axis=red)
    return dw


def _dilate(g: np.ndarray, stride) -> np.ndarray:
    """Insert stride-1 zeros between samples along each spatial axis."""
    if all(s == 1 for s in stride):
        return g
    sp = g.shape[2:]
    new_sp = tuple(max((n - 1) * s + 1, 0) for n, s in zip(sp, stride))
    out = np.zeros((*g.shape[:2], *new_sp), dtype=g.dtype)
    out[(slice(None), slice(None), *[slice(None, None, s) for s in stride])] = g
    return out


def _flip_spatial(w: np.ndarray) -> np.ndarray:
    return w[(slice(None), slice(None), *([slice(None, None, -1)] * (w.ndim - 2)))]


def _conv_dx(g, w, stride, dilation, padded_sp, pads):
    """Adjoint of the dense correlation with respect to the unpadded input."""
    rank = len(padded_sp)
    kernel = w.shape[2:]
    out_sp = g.shape[2:]
    if any(o == 0 for o in out_sp):
        inner = tuple(p - lo - hi for p, (lo, hi) in zip(padded_sp, pads))
        return np.zeros((g.shape[0], w.shape[1], *inner), dtype=g.dtype)
    gd = _dilate(g, stride)
    gpads = []
    for a in range(rank):
        span = kernel_span(kernel[a], dilation[a])
        left = (kernel[a] - 1) * dilation[a]
        rem = padded_sp[a] - ((out_sp[a] - 1) * stride[a] + span)
        gpads.append((left, left + rem))
    gdp = _pad_spatial(gd, gpads)
    ones = (1,) * rank
    wt = np.ascontiguousarray(_flip_spatial(w).swapaxes(0, 1))
    dxp = _corr_dense(gdp, wt, ones, dilation)
    sl = tuple(slice(lo, p - hi) for p, (lo, hi) in zip(padded_sp, pads))
    return dxp[(slice(None), slice(None), *sl)]


def _conv_dw_dense(xp, g, kernel, stride, dilation):
    """Adjoint w.r.t. a dense kernel: per-tap contraction over batch and space."""
    co, ci = g.shape[1], xp.shape[1]
    out_sp = g.shape[2:]
    dw = np.zeros((co, ci, *kernel), dtype=g.dtype)
    gf = g.reshape(g.shape[0], co, -1)
    for tap in np.ndindex(*kernel):
        sl = (slice(None), slice(None), *_tap_slices(tap, out_sp, stride, dilation))
        xs = np.ascontiguousarray(xp[sl]).reshape(g.shape[0], ci, -1)
        dw[(slice(None), slice(None), *tap)] = np.einsum("nov,niv->oi", gf, xs)
    return dw


def _check_input(x: Tensor, rank: int, channels: int, name: str):
    if x.ndim != 2 + rank:
        raise ValidationError(f"{name} expects rank {2 + rank} input, got shape {x.shape}")
    if x.shape[1] != channels:
        raise ValidationError(f"{name} expects {channels} channels, got {x.shape[1]}")


# -- tape operations ------------------------------------------------------------


def conv_dense(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, dilation=1,
            padding="same") -> Tensor:
    """Dense cross-correlation; w is (Co, Ci, *k), bias (Co,) optional."""
    rank = w.ndim - 2
    _check_input(x, rank, w.shape[1], "conv_dense")
    stride = _per_axis(stride, rank, "stride")
    dilation = _per_axis(dilation, rank, "dilation")
    kernel = w.shape[2:]
    pads = resolve_padding(padding, x.shape[2:], kernel, stride, dilation)
    xp = _pad_spatial(x.data, pads)
    y = _corr_dense(xp, w.data, stride, dilation)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ValidationError(f"bias shape {b.shape} != ({w.shape[0]},)")
        y = y + b.data.reshape(1, -1, *([1] * rank))
    out = Tensor(y)
    padded_sp = xp.shape[2:]

    def back(g):
        dx = dw = db = None
        if x.requires_grad or x._parents:
            dx = _conv_dx(g, w.data, stride, dilation, padded_sp, pads)
        if w.requires_grad or w._parents:
            dw = _conv_dw_dense(xp, g, kernel, stride, dilation)
        if b is not None and (b.requires_grad or b._parents):
            db = g.sum(axis=(0, *range(2, 2 + rank)))
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return out._attach(parents, back)


def conv_depthwise(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1,
                   dilation=1, padding="same") -> Tensor:
    """Per-channel cross-correlation; w is (C, *k), bias (C,) optional."""
    rank = w.ndim - 1
    _check_input(x, rank, w.shape[0], "conv_depthwise")
    stride = _per_axis(stride, rank, "stride")
    dilation = _per_axis(dilation, rank, "dilation")
    kernel = w.shape[1:]
    sp = x.shape[2:]
    pads = resolve_padding(padding, sp, kernel, stride, dilation)
    out_sp = tuple(
        output_extent(n, k, s, d, lo, hi)
        for n, k, s, d, (lo, hi) in zip(sp, kernel, stride, dilation, pads)
    )
    ranges = _dw_tap_ranges(tuple(sp), tuple(kernel), tuple(stride),
                            tuple(dilation), tuple(map(tuple, pads)),
                            tuple(out_sp))
    y = _dw_forward(x.data, w.data, ranges, out_sp)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ValidationError(f"bias shape {b.shape} != ({w.shape[0]},)")
        y = y + b.data.reshape(1, -1, *([1] * rank))
    out = Tensor(y)

    def back(g):
        dx = dw = db = None
        if x.requires_grad or x._parents:
            dx = _dw_dx(g, w.data, ranges, sp)
        if w.requires_grad or w._parents:
            dw = _dw_dweight(x.data, g, kernel, ranges)
        if b is not None and (b.requires_grad or b._parents):
            db = g.sum(axis=(0, *range(2, 2 + rank)))
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return out._attach(parents, back)


def conv_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1,
                      padding=0) -> Tensor:
    """Transposed convolution (adjoint of conv_dense); w is (Ci, Co, *k).

    Output extent per axis is (n - 1) * stride + k - lo - hi.
    """
    rank = w.ndim - 2
    _check_input(x, rank, w.shape[0], "conv_transpose")
    stride = _per_axis(stride, rank, "stride")
    kernel = w.shape[2:]
    ones = (1,) * rank
    pads = resolve_padding(padding, x.shape[2:], kernel, stride, ones)
    if padding == "same":
        raise ValidationError("conv_transpose needs explicit padding")
    for (lo, hi), n, k, s in zip(pads, x.shape[2:], kernel, stride):
        if (n - 1) * s + k - lo - hi <= 0:
            raise ValidationError("transposed conv output extent must be positive")

    xd = _dilate(x.data, stride)
    xdp = _pad_spatial(xd, [(k - 1, k - 1) for k in kernel])
    wt = np.ascontiguousarray(_flip_spatial(w.data).swapaxes(0, 1))  # (Co, Ci, *k)
    full = _corr_dense(xdp, wt, ones, ones)
    sl = tuple(slice(lo, full.shape[2 + a] - hi) for a, (lo, hi) in enumerate(pads))
    y = np.ascontiguousarray(full[(slice(None), slice(None), *sl)])
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValidationError(f"bias shape {b.shape} != ({w.shape[1]},)")
        y = y + b.data.reshape(1, -1, *([1] * rank))
    out = Tensor(y)

    def back(g):
        dx = dw = db = None
        gp = _pad_spatial(g, pads)
        if x.requires_grad or x._parents:
            # dx[o] contracts the padded gradient at o*s + t against w[:, co, t],
            # which is a plain correlation with w's (Ci, Co) layout as-is
            dx = _corr_dense(gp, w.data, stride, ones)
        if w.requires_grad or w._parents:
            dw = np.zeros_like(w.data)
            in_sp = x.shape[2:]
            xf = x.data.reshape(x.shape[0], x.shape[1], -1)
            for tap in np.ndindex(*kernel):
                slt = (slice(None), slice(None), *_tap_slices(tap, in_sp, stride, ones))
                gs = np.ascontiguousarray(gp[slt]).reshape(g.shape[0], g.shape[1], -1)
                dw[(slice(None), slice(None), *tap)] = np.einsum("niv,nov->io", xf, gs)
        if b is not None and (b.requires_grad or b._parents):
            db = g.sum(axis=(0, *range(2, 2 + rank)))
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return out._attach(parents, back)
