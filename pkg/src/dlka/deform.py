"""Deformable convolutions: kernel taps sample the input at learned offsets.

Offsets are a per-tap, per-axis displacement field shared across channels,
laid out as (N, taps * rank, *out_spatial) with channel index tap * rank + a
(axes ordered like the spatial axes). Each displaced tap reads the unpadded
input through multilinear interpolation; positions outside the grid read
zero, which keeps a zero-offset deformable conv bit-identical to its rigid
twin under zero padding. Fractional offsets are kept fractional.

Gathers and scatters are vectorized over flattened indices (take and
bincount) and iterate corners and taps in a fixed order, so forward and
backward are deterministic for a fixed thread count.
"""

from __future__ import annotations

import numpy as np

from functools import lru_cache

from .conv import _per_axis, resolve_padding
from .tensor import Tensor, ValidationError


def _spatial_strides(sp: tuple[int, ...]) -> tuple[int, ...]:
    strides = [1] * len(sp)
    for a in range(len(sp) - 2, -1, -1):
        strides[a] = strides[a + 1] * sp[a + 1]
    return tuple(strides)


def _corner_weight(frac: np.ndarray, corner: tuple[int, ...]) -> np.ndarray:
    # frac: (..., rank); weight = prod over axes of frac or (1 - frac)
    w = None
    for a, c in enumerate(corner):
        part = frac[..., a] if c else 1.0 - frac[..., a]
        w = part if w is None else w * part
    return w


def _corner_weight_grad(frac: np.ndarray, corner: tuple[int, ...], axis: int) -> np.ndarray:
    # d(weight)/d(frac[axis]): sign times the product over the other axes
    g = None
    for a, c in enumerate(corner):
        if a == axis:
            continue
        part = frac[..., a] if c else 1.0 - frac[..., a]
        g = part if g is None else g * part
    if g is None:
        g = np.ones(frac.shape[:-1], dtype=frac.dtype)
    return g if corner[axis] else -g


def _corner_index(fi: np.ndarray, corner, sp, strides):
    """Flat index and validity mask for one interpolation corner."""
    valid = None
    flat = None
    for a, c in enumerate(corner):
        idx = fi[..., a] + c
        ok = (idx >= 0) & (idx < sp[a])
        valid = ok if valid is None else (valid & ok)
        term = idx * strides[a]
        flat = term if flat is None else flat + term
    flat = np.where(valid, flat, 0)
    return flat, valid


def _multilinear_gather(xf: np.ndarray, q: np.ndarray, sp: tuple[int, ...]) -> np.ndarray:
    """Sample xf (N, C, V) at fractional positions q (N, M, rank) -> (N, C, M)."""
    fi = np.floor(q).astype(np.int64)
    frac = q - fi
    strides = _spatial_strides(sp)
    out = np.zeros((xf.shape[0], xf.shape[1], q.shape[1]), dtype=xf.dtype)
    for corner in np.ndindex(*((2,) * q.shape[-1])):
        flat, valid = _corner_index(fi, corner, sp, strides)
        w = _corner_weight(frac, corner) * valid
        vals = np.take_along_axis(xf, flat[:, None, :], axis=2)
        out += w[:, None, :] * vals
    return out


def grid_sample_linear(x: Tensor, coords: Tensor) -> Tensor:
    """Multilinear interpolation of x (N, C, *sp) at coords (N, *out, rank).

    The out dims may form any shape (a flat list of query points works).
    Coordinates are in voxel units on the unpadded grid; out-of-grid
    positions read zero.
    """
    rank = x.ndim - 2
    if coords.ndim < 2 or coords.shape[-1] != rank:
        raise ValidationError(
            f"coords shape {coords.shape} incompatible with input {x.shape}"
        )
    if coords.shape[0] != x.shape[0]:
        raise ValidationError("batch sizes differ between input and coords")
    if np.isnan(coords.data).any():
        raise ValidationError("sampling coordinates contain NaN")
    sp = x.shape[2:]
    out_sp = coords.shape[1:-1]
    n, c = x.shape[:2]
    xf = np.ascontiguousarray(x.data).reshape(n, c, -1)
    q = np.ascontiguousarray(coords.data).reshape(n, -1, rank)
    y = _multilinear_gather(xf, q, sp).reshape(n, c, *out_sp)
    out = Tensor(y)

    def back(g):
        gf = g.reshape(n, c, -1)
        dx, dq, _ = _sample_backward(xf, q, sp, gf,
                                     need_dx=x.requires_grad or x._parents,
                                     need_dq=coords.requires_grad or coords._parents)
        dxr = dx.reshape(x.shape) if dx is not None else None
        dqr = dq.reshape(coords.shape) if dq is not None else None
        return (dxr, dqr)

    return out._attach((x, coords), back)


def _sample_backward(xf, q, sp, ds, need_dx=True, need_dq=True,
                     need_samples=False):
    """Adjoints of the multilinear gather.

    ds: (N, C, M) upstream gradient of the samples. Returns (dx flat or None,
    dq (N, M, rank) or None, samples (N, C, M) or None); the forward samples
    fall out of the same per-corner gathers, so callers needing them for a
    weight gradient avoid a second full gather.
    """
    n, c, v = xf.shape
    rank = q.shape[-1]
    fi = np.floor(q).astype(np.int64)
    frac = q - fi
    strides = _spatial_strides(sp)
    dq = np.zeros_like(q) if need_dq else None
    samples = np.zeros_like(ds) if need_samples else None
    targets, contribs = [], []
    row = (np.arange(n * c, dtype=np.int64) * v).reshape(n, c, 1)
    for corner in np.ndindex(*((2,) * rank)):
        flat, valid = _corner_index(fi, corner, sp, strides)
        w = _corner_weight(frac, corner) * valid
        if need_dq or need_samples:
            vals = np.take_along_axis(xf, flat[:, None, :], axis=2)
            if need_samples:
                samples += w[:, None, :] * vals
            if need_dq:
                e = np.einsum("ncm,ncm->nm", ds, vals) * valid
                for a in range(rank):
                    dq[..., a] += e * _corner_weight_grad(frac, corner, a)
        if need_dx:
            targets.append((row + flat[:, None, :]).ravel())
            contribs.append((ds * w[:, None, :]).ravel())
    dx = None
    if need_dx:
        dx = np.bincount(np.concatenate(targets), weights=np.concatenate(contribs),
                         minlength=n * c * v).astype(xf.dtype, copy=False)
    return (dx.reshape(n, c, v) if need_dx else None), dq, samples


def offset_channel_count(rank: int, kernel: tuple[int, ...]) -> int:
    """Channels an offset field needs: one displacement per tap per axis."""
    return rank * int(np.prod(kernel))


@lru_cache(maxsize=256)
def _tap_positions(out_sp, kernel, stride, dilation, pads, dtype):
    """Rigid sampling positions (K, M, rank) on the unpadded grid (cached)."""
    rank = len(out_sp)
    k_total = int(np.prod(kernel))
    m = int(np.prod(out_sp))
    base = np.empty((k_total, m, rank), dtype=np.dtype(dtype))
    grids = np.meshgrid(*[np.arange(o) for o in out_sp], indexing="ij")
    taps = list(np.ndindex(*kernel))
    for ti, tap in enumerate(taps):
        for a in range(rank):
            pos = grids[a] * stride[a] - pads[a][0] + tap[a] * dilation[a]
            base[ti, :, a] = pos.reshape(-1)
    base.setflags(write=False)
    return base


def deform_conv(x: Tensor, w: Tensor, offsets: Tensor, b: Tensor | None = None,
                stride=1, dilation=1, padding="same", depthwise: bool = False) -> Tensor:
    """Convolution whose taps sample at rigid positions plus learned offsets.

    w is (C, *k) when depthwise else (Co, Ci, *k); offsets is
    (N, taps * rank, *out_spatial). With all-zero offsets the result matches
    the rigid convolution exactly.
    """
    rank = w.ndim - 1 if depthwise else w.ndim - 2
    kernel = w.shape[1:] if depthwise else w.shape[2:]
    cin = w.shape[0] if depthwise else w.shape[1]
    cout = w.shape[0]
    if x.ndim != 2 + rank:
        raise ValidationError(f"deform_conv expects rank {2 + rank} input, got {x.shape}")
    if x.shape[1] != cin:
        raise ValidationError(f"deform_conv expects {cin} channels, got {x.shape[1]}")
    stride = _per_axis(stride, rank, "stride")
    dilation = _per_axis(dilation, rank, "dilation")
    sp = x.shape[2:]
    pads = resolve_padding(padding, sp, kernel, stride, dilation)
    from .conv import output_extent
    out_sp = tuple(
        output_extent(nn, k, s, d, lo, hi)
        for nn, k, s, d, (lo, hi) in zip(sp, kernel, stride, dilation, pads)
    )
    k_total = int(np.prod(kernel))
    want = (x.shape[0], k_total * rank, *out_sp)
    if offsets.shape != want:
        raise ValidationError(f"offsets shape {offsets.shape} != expected {want}")

    n = x.shape[0]
    m = int(np.prod(out_sp))
    xf = np.ascontiguousarray(x.data).reshape(n, cin, -1)
    base = _tap_positions(tuple(out_sp), tuple(kernel), tuple(stride),
                          tuple(dilation), tuple(map(tuple, pads)),
                          x.data.dtype.name)
    # offsets channel t*rank + a -> (N, K, rank, M) -> positions (N, K*M, rank)
    off = offsets.data.reshape(n, k_total, rank, m)
    q = (base[None] + np.moveaxis(off, 2, 3)).reshape(n, k_total * m, rank)

    samples = _multilinear_gather(xf, q, sp).reshape(n, cin, k_total, m)
    if depthwise:
        y = np.einsum("nckm,ck->ncm", samples, w.data.reshape(cin, k_total))
    else:
        y = np.einsum("nikm,oik->nom", samples, w.data.reshape(cout, cin, k_total))
    y = y.reshape(n, cout, *out_sp)
    if b is not None:
        if b.shape != (cout,):
            raise ValidationError(f"bias shape {b.shape} != ({cout},)")
        y = y + b.data.reshape(1, -1, *([1] * rank))
    out = Tensor(y)

    def back(g):
        gm = g.reshape(n, cout, m)
        wk = w.data.reshape((cin, k_total) if depthwise else (cout, cin, k_total))
        if depthwise:
            ds = gm[:, :, None, :] * wk[None, :, :, None]  # (N, C, K, M)
        else:
            ds = np.einsum("nom,oik->nikm", gm, wk)
        ds_flat = ds.reshape(n, cin, k_total * m)
        need_dx = x.requires_grad or x._parents
        need_dq = offsets.requires_grad or offsets._parents
        need_dw = w.requires_grad or w._parents
        dx, dq, samp = _sample_backward(xf, q, sp, ds_flat, need_dx=need_dx,
                                        need_dq=need_dq, need_samples=need_dw)
        dxr = dx.reshape(x.shape) if dx is not None else None
        doff = None
        if dq is not None:
            doff = np.moveaxis(dq.reshape(n, k_total, m, rank), 3, 2).reshape(offsets.shape)
        dw = None
        if need_dw:
            samp = samp.reshape(n, cin, k_total, m)
            if depthwise:
                dw = np.einsum("ncm,nckm->ck", gm, samp).reshape(w.shape)
            else:
                dw = np.einsum("nom,nikm->oik", gm, samp).reshape(w.shape)
        db = None
        if b is not None and (b.requires_grad or b._parents):
            db = g.sum(axis=(0, *range(2, 2 + rank)))
        return (dxr, dw, doff, db) if b is not None else (dxr, dw, doff)

    parents = (x, w, offsets, b) if b is not None else (x, w, offsets)
    return out._attach(parents, back)
