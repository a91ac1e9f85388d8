"""N-dimensional float tensors with reverse-mode autodiff on a numpy buffer.

Tensors are immutable from the perspective of every operation: ops allocate
fresh outputs and record backward closures on a tape, so a value can be read
from many threads once constructed. Layout is row-major with channels before
spatial axes, i.e. (N, C, H[, W[, D]]).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)


class ValidationError(ValueError):
    """Raised when an operation's preconditions are violated."""


def set_default_dtype(dtype) -> None:
    """Switch the default scalar precision (float64 default, float32 fast mode)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ValidationError(f"unsupported default dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype():
    return _DEFAULT_DTYPE


@dataclass(frozen=True)
class SpatialShape:
    """A 2D or 3D spatial extent with a channel count.

    dims are (H, W) for rank 2 and (H, W, D) for rank 3, in voxels.
    """

    rank: int
    dims: tuple[int, ...]
    channels: int

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ValidationError(f"rank must be 2 or 3, got {self.rank}")
        if len(self.dims) != self.rank:
            raise ValidationError(f"rank {self.rank} needs {self.rank} dims, got {self.dims}")
        if any(d < 0 for d in self.dims):
            raise ValidationError(f"negative extents forbidden: {self.dims}")
        if self.channels <= 0:
            raise ValidationError(f"channels must be positive, got {self.channels}")

    @property
    def volume(self) -> int:
        return int(np.prod(self.dims))


class Tensor:
    """A strided float array plus the tape fields reverse-mode AD needs.

    Leaves created with ``requires_grad=True`` are parameters; ``backward``
    (see :mod:`dlka.autograd`) accumulates exactly one gradient per reachable
    parameter into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=None, name=None) -> "Tensor":
        _check_shape(shape)
        return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad, name=name)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=None, name=None) -> "Tensor":
        _check_shape(shape)
        return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad, name=name)

    @staticmethod
    def full(shape, value, requires_grad=False, dtype=None) -> "Tensor":
        _check_shape(shape)
        return Tensor(np.full(shape, value, dtype=dtype or _DEFAULT_DTYPE), requires_grad)

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def strides(self) -> tuple[int, ...]:
        # element offsets per axis, not bytes
        return tuple(s // self.data.itemsize for s in self.data.strides)

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's buffer, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- tape wiring ----------------------------------------------------------

    def _attach(self, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        if any(p.requires_grad or p._parents for p in parents):
            self.requires_grad = True
            self._parents = parents
            self._backward_fn = backward_fn
        return self

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return _binop(self, other, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return _binop(self, other, "sub")

    def __rsub__(self, other):
        return _binop(_wrap(other, self.dtype), self, "sub")

    def __mul__(self, other):
        return _binop(self, other, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binop(self, other, "div")

    def __rtruediv__(self, other):
        return _binop(_wrap(other, self.dtype), self, "div")

    def __neg__(self):
        out = Tensor(-self.data)
        return out._attach((self,), lambda g: (-g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ValidationError("only scalar exponents supported")
        out = Tensor(self.data ** p)
        return out._attach((self,), lambda g: (g * p * self.data ** (p - 1),))

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        shape = shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        out = Tensor(self.data.reshape(shape))
        src_shape = self.shape
        return out._attach((self,), lambda g: (g.reshape(src_shape),))

    def transpose(self, axes) -> "Tensor":
        axes = tuple(axes)
        out = Tensor(self.data.transpose(axes))
        inv = tuple(int(i) for i in np.argsort(axes))
        return out._attach((self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, key) -> "Tensor":
        # basic (slice/int) indexing only; gradient scatters back into place
        out = Tensor(self.data[key])
        src_shape = self.shape
        dt = self.data.dtype

        def back(g):
            full = np.zeros(src_shape, dtype=dt)
            full[key] = g
            return (full,)

        return out._attach((self,), back)

    # -- reductions -----------------------------------------------------------

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axes, self.ndim)
        out = Tensor(self.data.sum(axis=axes, keepdims=keepdims))
        src_shape = self.shape

        def back(g):
            if axes is None:
                return (np.broadcast_to(g, src_shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axes)
            return (np.broadcast_to(gg, src_shape).copy(),)

        return out._attach((self,), back)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axes, self.ndim)
        count = self.size if axes is None else int(np.prod([self.shape[a] for a in axes]))
        if count == 0:
            raise ValidationError("mean over zero elements")
        return self.sum(axes, keepdims) * (1.0 / count)

    # -- pointwise transcendentals ---------------------------------------------

    def exp(self) -> "Tensor":
        out = Tensor(np.exp(self.data))
        return out._attach((self,), lambda g: (g * out.data,))

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data))
        return out._attach((self,), lambda g: (g / self.data,))

    def sqrt(self) -> "Tensor":
        out = Tensor(np.sqrt(self.data))
        return out._attach((self,), lambda g: (g * (0.5 / out.data),))


def _check_shape(shape) -> None:
    if any(int(s) < 0 for s in shape):
        raise ValidationError(f"negative extents forbidden: {tuple(shape)}")


def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _broadcast_ok(a_shape, b_shape) -> bool:
    # singleton-axis broadcasting between equal-rank shapes; scalars always ok
    if a_shape == b_shape or a_shape == () or b_shape == ():
        return True
    if len(a_shape) != len(b_shape):
        return False
    return all(x == y or x == 1 or y == 1 for x, y in zip(a_shape, b_shape))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (the operand that was broadcast up)."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binop(a: Tensor, b, op: str) -> Tensor:
    a = _wrap(a, None)
    b = _wrap(b, a.dtype)
    if not _broadcast_ok(a.shape, b.shape):
        raise ValidationError(f"incompatible shapes for {op}: {a.shape} vs {b.shape}")
    if op == "add":
        data = a.data + b.data
        back = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    elif op == "sub":
        data = a.data - b.data
        back = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    elif op == "mul":
        data = a.data * b.data
        back = lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    elif op == "div":
        data = a.data / b.data
        back = lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )
    else:  # pragma: no cover
        raise ValidationError(f"unknown op {op!r}")
    return Tensor(data)._attach((a, b), back)


# -- named public operations ---------------------------------------------------


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Elementwise add/sub/mul with singleton-axis broadcasting of b."""
    if op not in ("add", "sub", "mul"):
        raise ValidationError(f"elementwise op must be add/sub/mul, got {op!r}")
    return _binop(a, b, op)


def pad_constant(t: Tensor, per_axis_pad: Sequence[tuple[int, int]], value: float = 0.0) -> Tensor:
    """Pad each axis by (lo, hi) elements of `value`."""
    pads = [(int(lo), int(hi)) for lo, hi in per_axis_pad]
    if len(pads) != t.ndim:
        raise ValidationError(f"pad list length {len(pads)} != tensor rank {t.ndim}")
    if any(lo < 0 or hi < 0 for lo, hi in pads):
        raise ValidationError(f"negative pad forbidden: {pads}")
    out = Tensor(np.pad(t.data, pads, mode="constant", constant_values=value))
    inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, t.shape))
    return out._attach((t,), lambda g: (g[inner],))


def crop(t: Tensor, per_axis_crop: Sequence[tuple[int, int]]) -> Tensor:
    """Inverse of pad_constant: drop (lo, hi) elements per axis."""
    if len(per_axis_crop) != t.ndim:
        raise ValidationError("crop list length != tensor rank")
    key = tuple(slice(lo, n - hi) for (lo, hi), n in zip(per_axis_crop, t.shape))
    return t[key]


def reduce_moments(t: Tensor, axes) -> tuple[Tensor, Tensor]:
    """Mean and population variance over `axes`, reduced axes kept as singletons.

    Two-pass form: var = mean((x - mean)**2), so results match a two-pass
    summation oracle to rounding error and stay differentiable end to end.
    """
    axes = _norm_axes(axes, t.ndim)
    if axes is not None and len(axes) == 0:
        raise ValidationError("empty reduction axis set")
    if axes is None:
        axes = tuple(range(t.ndim))
        if not axes:
            raise ValidationError("cannot reduce a 0-d tensor over all axes")
    m = t.mean(axes, keepdims=True)
    d = t - m
    v = (d * d).mean(axes, keepdims=True)
    return m, v
