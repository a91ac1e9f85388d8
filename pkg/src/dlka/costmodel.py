"""Closed-form parameter and FLOP accounting for large-kernel convolutions.

Counts cover three families: a standard dense KxK[xK] convolution, its
decomposition into depthwise + depthwise-dilated + pointwise convolutions,
and the deformable variant, which adds one dense offset-producing
convolution per deformable layer. FLOPs follow the convention
params x spatial volume, so they scale linearly in each spatial extent.

Two bias conventions exist because the closed form C(k_dwd^r + k_dw^r + 3 + C)
carries a +3 bias term that the reference parameter table omits; "table"
mode drops it, "eq3" mode keeps it. Instantiated attention layers in this
package carry all three biases, matching eq3 mode exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .tensor import ValidationError

BIAS_MODES = ("table", "eq3")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def dw_kernel(d: int) -> int:
    """Depthwise kernel width for dilation d."""
    return 2 * d - 1


def dwd_kernel(K: int, d: int) -> int:
    """Depthwise-dilated kernel width covering a K-wide target at dilation d."""
    return _ceil_div(K, d)


def axis_support(K: int, d: int) -> int:
    """One-axis receptive extent of the composed DW then DW-D chain."""
    return dw_kernel(d) + d * (dwd_kernel(K, d) - 1)


@dataclass(frozen=True)
class CostQuery:
    """One cost-model evaluation point."""

    rank: int
    C: int
    K: int = 21
    d: int = 3
    spatial: tuple[int, ...] = ()
    bias_mode: str = "table"
    deform_kernels: tuple[int, int] = (5, 7)

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ValidationError(f"rank must be 2 or 3, got {self.rank}")
        if self.C < 1 or self.K < 1 or self.d < 1:
            raise ValidationError("C, K and d must be >= 1")
        if self.bias_mode not in BIAS_MODES:
            raise ValidationError(f"bias_mode must be one of {BIAS_MODES}")
        if self.spatial and len(self.spatial) != self.rank:
            raise ValidationError(
                f"spatial needs {self.rank} extents, got {self.spatial}"
            )


def params_standard(C: int, K: int, rank: int) -> int:
    """Dense C-to-C convolution with a K-wide kernel, no bias."""
    return C * C * K**rank


def params_decomposed(q: CostQuery) -> int:
    """DW + DW-D + 1x1 chain; +3 bias vectors in eq3 mode only."""
    bias = 3 if q.bias_mode == "eq3" else 0
    return q.C * (dwd_kernel(q.K, q.d) ** q.rank + dw_kernel(q.d) ** q.rank + bias + q.C)


def params_offset_net(C_in: int, k: int, rank: int) -> int:
    """Dense conv with bias emitting rank displacements per tap: k-wide kernel."""
    out = rank * k**rank
    return C_in * out * k**rank + out


def params_deform_decomposed(q: CostQuery) -> int:
    """Decomposed chain plus one offset net per deformable depthwise layer."""
    k_dw, k_dwd = q.deform_kernels
    return (
        params_decomposed(q)
        + params_offset_net(q.C, k_dw, q.rank)
        + params_offset_net(q.C, k_dwd, q.rank)
    )


def flops(q: CostQuery) -> int:
    """Parameter count times spatial volume (decomposed chain)."""
    if not q.spatial:
        raise ValidationError("flops needs spatial extents")
    vol = 1
    for s in q.spatial:
        vol *= s
    return params_decomposed(q) * vol


def optimal_dilation(K: int) -> tuple[float, int]:
    """Stationary dilation of the smooth per-channel cost, and the best integer.

    The relaxed kernel-term cost (K/d)^2 + (2d-1)^2 is stationary where
    g(d) = 8d - 4 - 2K^2/d^3 vanishes; g is strictly increasing on d > 0, so
    bisection on [1, K] finds the unique positive root to 1e-9. The integer
    recommendation compares the exact decomposed count at floor and ceil and
    keeps the smaller d on ties.
    """
    if K < 2:
        raise ValidationError(f"optimal_dilation needs K >= 2, got {K}")

    def g(d: float) -> float:
        return 8.0 * d - 4.0 - 2.0 * K * K / d**3

    lo, hi = 1.0, float(K)
    if g(lo) > 0:
        d_star = lo
    else:
        while hi - lo > 1e-9:
            mid = 0.5 * (lo + hi)
            if g(mid) > 0:
                hi = mid
            else:
                lo = mid
        d_star = 0.5 * (lo + hi)

    def count(d: int) -> int:
        return params_decomposed(CostQuery(rank=2, C=1, K=K, d=d))

    floor_d = max(1, int(d_star))
    ceil_d = min(K, floor_d + 1)
    candidates = sorted({floor_d, ceil_d})
    d_int = min(candidates, key=lambda d: (count(d), d))
    return d_star, d_int


@dataclass(frozen=True)
class CostRow:
    """One channel width's parameter counts, in reference-table column order."""

    C: int
    std: int
    decomposed: int
    deform_decomposed: int
    offset_dw: int
    offset_dwd: int


@dataclass
class CostReport:
    """Full table plus the query that produced it."""

    K: int
    d: int
    rank: int
    bias_mode: str
    deform_kernels: tuple[int, int]
    rows: list[CostRow] = field(default_factory=list)


def cost_table(C_list, K: int = 21, d: int = 3, deform_kernels=(5, 7),
               rank: int = 2, bias_mode: str = "table") -> CostReport:
    """Parameter table over channel widths; five columns per row."""
    report = CostReport(K=K, d=d, rank=rank, bias_mode=bias_mode,
                        deform_kernels=tuple(deform_kernels))
    k_dw, k_dwd = report.deform_kernels
    for c in C_list:
        q = CostQuery(rank=rank, C=c, K=K, d=d, bias_mode=bias_mode,
                      deform_kernels=report.deform_kernels)
        report.rows.append(CostRow(
            C=c,
            std=params_standard(c, K, rank),
            decomposed=params_decomposed(q),
            deform_decomposed=params_deform_decomposed(q),
            offset_dw=params_offset_net(c, k_dw, rank),
            offset_dwd=params_offset_net(c, k_dwd, rank),
        ))
    return report
