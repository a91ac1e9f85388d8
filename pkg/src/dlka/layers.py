"""Parameterized layers: a small module system over the tensor ops.

Parameters register in insertion order, so named_parameters() is a stable,
deterministic enumeration for a given architecture; initialization draws from
a caller-supplied Generator in that same order, which makes (config, seed)
fully determine every weight.

Initialization policy: fan-in uniform bounds everywhere, except layers that
close a residual branch and offset-producing convolutions, which start at
exactly zero (weights and bias) so each block is the identity map and each
deformable layer equals its rigid twin at step 0.
"""

from __future__ import annotations

import numpy as np

from . import conv as C
from . import deform as D
from .tensor import Tensor, ValidationError, default_dtype


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Module:
    """Base class: tracks parameters and submodules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters by name; missing or extra names error."""
        mine = dict(self.named_parameters())
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise ValidationError(
                f"parameter name mismatch: missing {missing[:4]}, unexpected {extra[:4]}"
            )
        for name, p in mine.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValidationError(
                    f"shape mismatch for {name}: {arr.shape} != {p.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


class ModuleList:
    """Ordered container whose items participate in parameter enumeration."""

    def __init__(self, items=()):
        self._items = list(items)

    def append(self, m):
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")


class Conv(Module):
    """Dense convolution layer wrapping conv_dense."""

    def __init__(self, rank, in_channels, out_channels, kernel, rng,
                 stride=1, dilation=1, padding="same", bias=True, zero_init=False):
        super().__init__()
        spec = C.ConvSpec(rank, in_channels, out_channels, kernel,
                          stride, dilation, padding, depthwise=False, bias=bias)
        self.spec = spec
        wshape = spec.weight_shape()
        fan_in = in_channels * int(np.prod(spec.kernel))
        if zero_init:
            self.weight = Tensor(np.zeros(wshape, dtype=default_dtype()), requires_grad=True)
        else:
            self.weight = Tensor(fan_in_uniform(rng, wshape, fan_in), requires_grad=True)
        self.bias = (
            Tensor(np.zeros(out_channels, dtype=default_dtype()), requires_grad=True)
            if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return C.conv_dense(x, self.weight, self.bias, self.spec.stride,
                            self.spec.dilation, self.spec.padding)


class DepthwiseConv(Module):
    """Per-channel convolution layer wrapping conv_depthwise."""

    def __init__(self, rank, channels, kernel, rng, stride=1, dilation=1,
                 padding="same", bias=True, zero_init=False):
        super().__init__()
        spec = C.ConvSpec(rank, channels, channels, kernel, stride, dilation,
                          padding, depthwise=True, bias=bias)
        self.spec = spec
        wshape = spec.weight_shape()
        fan_in = int(np.prod(spec.kernel))
        if zero_init:
            self.weight = Tensor(np.zeros(wshape, dtype=default_dtype()), requires_grad=True)
        else:
            self.weight = Tensor(fan_in_uniform(rng, wshape, fan_in), requires_grad=True)
        self.bias = (
            Tensor(np.zeros(channels, dtype=default_dtype()), requires_grad=True)
            if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return C.conv_depthwise(x, self.weight, self.bias, self.spec.stride,
                                self.spec.dilation, self.spec.padding)


class ConvTranspose(Module):
    """Transposed convolution layer wrapping conv_transpose."""

    def __init__(self, rank, in_channels, out_channels, kernel, stride, rng,
                 padding=0, bias=True):
        super().__init__()
        self.rank = rank
        self.kernel = C._per_axis(kernel, rank, "kernel")
        self.stride = C._per_axis(stride, rank, "stride")
        self.padding = padding
        fan_in = in_channels * int(np.prod(self.kernel))
        wshape = (in_channels, out_channels, *self.kernel)
        self.weight = Tensor(fan_in_uniform(rng, wshape, fan_in), requires_grad=True)
        self.bias = (
            Tensor(np.zeros(out_channels, dtype=default_dtype()), requires_grad=True)
            if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return C.conv_transpose(x, self.weight, self.bias, self.stride, self.padding)


class DeformConv(Module):
    """Deformable convolution plus its zero-initialized offset network.

    The offset conv mirrors the main kernel and dilation ("follows the kernel
    size and dilation"), is dense with bias, and starts at zero so the layer
    is exactly its rigid twin until the offsets learn to move.
    """

    def __init__(self, rank, in_channels, out_channels, kernel, rng,
                 dilation=1, stride=1, padding="same", bias=True,
                 depthwise=False):
        super().__init__()
        if depthwise and in_channels != out_channels:
            raise ValidationError("depthwise deform conv needs matching channels")
        self.rank = rank
        self.depthwise = depthwise
        self.kernel = C._per_axis(kernel, rank, "kernel")
        self.stride = C._per_axis(stride, rank, "stride")
        self.dilation = C._per_axis(dilation, rank, "dilation")
        self.padding = padding
        taps = int(np.prod(self.kernel))
        if depthwise:
            wshape = (in_channels, *self.kernel)
            fan_in = taps
        else:
            wshape = (out_channels, in_channels, *self.kernel)
            fan_in = in_channels * taps
        self.weight = Tensor(fan_in_uniform(rng, wshape, fan_in), requires_grad=True)
        self.bias = (
            Tensor(np.zeros(out_channels, dtype=default_dtype()), requires_grad=True)
            if bias else None
        )
        self.offset_net = Conv(rank, in_channels, rank * taps, self.kernel, rng,
                               stride=stride, dilation=dilation, padding=padding,
                               bias=True, zero_init=True)

    def __call__(self, x: Tensor, rigid: bool = False) -> Tensor:
        if rigid:
            if self.depthwise:
                return C.conv_depthwise(x, self.weight, self.bias, self.stride,
                                        self.dilation, self.padding)
            return C.conv_dense(x, self.weight, self.bias, self.stride,
                                self.dilation, self.padding)
        offsets = self.offset_net(x)
        return D.deform_conv(x, self.weight, offsets, self.bias, self.stride,
                             self.dilation, self.padding, depthwise=self.depthwise)


class LayerNorm(Module):
    """Normalization over the channel axis, independently per spatial position."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        if eps <= 0:
            raise ValidationError(f"eps must be positive, got {eps}")
        self.channels = channels
        self.eps = eps
        self.scale = Tensor(np.ones(channels, dtype=default_dtype()), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=default_dtype()), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        from .attention import layer_norm
        return layer_norm(x, self.scale, self.shift, self.eps)
