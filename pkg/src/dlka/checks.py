"""Finite-difference gradient check suite over every differentiable operation.

Each case builds small random inputs, runs the operation inside a scalar
loss, and compares tape gradients against central differences.  Offset and
coordinate inputs are placed half a voxel away from integer grid lines so
the finite-difference step never crosses an interpolation kink; inside the
attention modules the offset networks are pinned to constant half-integer
offsets (zero weight, half-integer bias) for the same reason, which still
exercises the offset gradient path through the bias.
"""

from __future__ import annotations

import numpy as np

from .attention import DlkaBlock2d, DlkaBlock3d, LkaAttention, LkaSpec, gelu, layer_norm
from .autograd import GradReport, gradcheck
from .conv import conv_dense, conv_depthwise, conv_transpose
from .deform import deform_conv, grid_sample_linear, offset_channel_count
from .tensor import Tensor, ValidationError, crop, pad_constant, reduce_moments
from .training import dice_ce_loss

_SMALL_PARAM_LIMIT = 24


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _sq(t: Tensor) -> Tensor:
    return (t * t).sum()


def _safe_offsets(rng, *shape):
    # integer part + 0.5 +- 0.2 keeps every sample >= 0.3 from grid lines
    base = rng.integers(-2, 3, shape).astype(float)
    return Tensor(base + 0.5 + rng.uniform(-0.2, 0.2, shape), requires_grad=True)


def _pin_offset_nets(module, rng):
    # constant half-integer offsets: zero offset weights, half-integer biases
    for name, p in module.named_parameters():
        if "offset_net" not in name:
            p.data = p.data + rng.normal(0.0, 0.25, p.shape)
        elif name.endswith("bias"):
            sign = np.where(rng.random(p.shape) < 0.5, -1.0, 1.0)
            p.data = sign * (0.5 + rng.uniform(-0.2, 0.2, p.shape))
        else:
            p.data = np.zeros(p.shape)


def _module_inputs(module, x: Tensor) -> dict[str, Tensor]:
    inputs = {"x": x}
    for name, p in module.named_parameters():
        if p.size <= _SMALL_PARAM_LIMIT and "offset_net" not in name:
            p.requires_grad = True
            inputs[name] = p
        elif "offset_net" in name and name.endswith("bias") and p.size <= 32:
            p.requires_grad = True
            inputs[name] = p
    return inputs


# -- case builders: each returns (build, inputs) ------------------------------------


def _case_arithmetic(rng):
    a = _t(rng, 2, 3, 4)
    b = Tensor(rng.uniform(0.5, 1.5, (2, 1, 4)) * np.where(rng.random((2, 1, 4)) < 0.5, -1, 1),
               requires_grad=True)

    def build(inp):
        s = inp["a"] + inp["b"]
        d = inp["a"] - inp["b"]
        m = inp["a"] * inp["b"]
        q = inp["a"] / inp["b"]
        return _sq(s) + _sq(d) + _sq(m) + _sq(q) + _sq(inp["a"] ** 3) + _sq(-inp["a"])

    return build, {"a": a, "b": b}


def _case_unary(rng):
    a = _t(rng, 3, 4, lo=0.5, hi=2.0)

    def build(inp):
        return inp["a"].exp().sum() + inp["a"].log().sum() + inp["a"].sqrt().sum()

    return build, {"a": a}


def _case_shape_ops(rng):
    a = _t(rng, 2, 3, 4)

    def build(inp):
        y = inp["a"].transpose((1, 0, 2)).reshape((3, 8))
        return _sq(y[1:, 2:6]) + inp["a"].sum((1,)).mean() + _sq(inp["a"].mean((0, 2)))

    return build, {"a": a}


def _case_pad_crop(rng):
    a = _t(rng, 2, 3, 4)

    def build(inp):
        y = pad_constant(inp["a"], ((0, 0), (1, 2), (2, 1)), 0.5)
        return _sq(crop(y, ((0, 0), (2, 1), (1, 2))))

    return build, {"a": a}


def _case_reduce_moments(rng):
    a = _t(rng, 2, 4, 3)

    def build(inp):
        mean, var = reduce_moments(inp["a"], (1,))
        return _sq(mean) + (var * 3.0).sum()

    return build, {"a": a}


def _case_conv_dense_2d(rng):
    x, w, b = _t(rng, 2, 3, 6, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)

    def build(inp):
        return _sq(conv_dense(inp["x"], inp["w"], inp["b"], padding="same"))

    return build, {"x": x, "w": w, "b": b}


def _case_conv_dense_2d_strided(rng):
    x, w, b = _t(rng, 1, 2, 7, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3)

    def build(inp):
        return _sq(conv_dense(inp["x"], inp["w"], inp["b"], stride=2, dilation=2,
                              padding="same"))

    return build, {"x": x, "w": w, "b": b}


def _case_conv_dense_3d(rng):
    x, w = _t(rng, 1, 2, 4, 5, 3), _t(rng, 3, 2, 3, 3, 3)

    def build(inp):
        return _sq(conv_dense(inp["x"], inp["w"], None, padding="same"))

    return build, {"x": x, "w": w}


def _case_conv_depthwise_2d(rng):
    x, w, b = _t(rng, 2, 4, 6, 6), _t(rng, 4, 3, 3), _t(rng, 4)

    def build(inp):
        return _sq(conv_depthwise(inp["x"], inp["w"], inp["b"], dilation=2,
                                  padding="same"))

    return build, {"x": x, "w": w, "b": b}


def _case_conv_depthwise_3d(rng):
    x, w = _t(rng, 1, 3, 4, 4, 5), _t(rng, 3, 3, 3, 3)

    def build(inp):
        return _sq(conv_depthwise(inp["x"], inp["w"], None, padding="same"))

    return build, {"x": x, "w": w}


def _case_conv_transpose_2d(rng):
    x, w, b = _t(rng, 2, 3, 4, 4), _t(rng, 3, 2, 2, 2), _t(rng, 2)

    def build(inp):
        return _sq(conv_transpose(inp["x"], inp["w"], inp["b"], stride=2))

    return build, {"x": x, "w": w, "b": b}


def _case_conv_transpose_3d(rng):
    x, w = _t(rng, 1, 2, 3, 3, 2), _t(rng, 2, 2, 2, 2, 2)

    def build(inp):
        return _sq(conv_transpose(inp["x"], inp["w"], None, stride=2))

    return build, {"x": x, "w": w}


def _case_grid_sample_2d(rng):
    x = _t(rng, 2, 3, 5, 6)
    coords = _safe_offsets(rng, 2, 4, 4, 2)

    def build(inp):
        return _sq(grid_sample_linear(inp["x"], inp["coords"]))

    return build, {"x": x, "coords": coords}


def _case_grid_sample_3d(rng):
    x = _t(rng, 1, 2, 4, 4, 3)
    coords = _safe_offsets(rng, 1, 3, 3, 2, 3)

    def build(inp):
        return _sq(grid_sample_linear(inp["x"], inp["coords"]))

    return build, {"x": x, "coords": coords}


def _case_deform_conv_2d(rng):
    x, w, b = _t(rng, 1, 3, 6, 6), _t(rng, 2, 3, 3, 3), _t(rng, 2)
    off = _safe_offsets(rng, 1, offset_channel_count(2, (3, 3)), 6, 6)

    def build(inp):
        return _sq(deform_conv(inp["x"], inp["w"], inp["off"], inp["b"],
                               padding="same"))

    return build, {"x": x, "w": w, "b": b, "off": off}


def _case_deform_conv_2d_depthwise(rng):
    x, w = _t(rng, 1, 3, 6, 6), _t(rng, 3, 3, 3)
    off = _safe_offsets(rng, 1, offset_channel_count(2, (3, 3)), 3, 6)

    def build(inp):
        return _sq(deform_conv(inp["x"], inp["w"], inp["off"], None, stride=(2, 1),
                               dilation=2, padding="same", depthwise=True))

    return build, {"x": x, "w": w, "off": off}


def _case_deform_conv_3d(rng):
    x, w = _t(rng, 1, 2, 4, 4, 3), _t(rng, 2, 2, 2, 2, 2)
    off = _safe_offsets(rng, 1, offset_channel_count(3, (2, 2, 2)), 4, 4, 3)

    def build(inp):
        return _sq(deform_conv(inp["x"], inp["w"], inp["off"], None, padding="same"))

    return build, {"x": x, "w": w, "off": off}


def _case_gelu(rng):
    a = _t(rng, 3, 5, lo=-2.0, hi=2.0)

    def build(inp):
        return _sq(gelu(inp["a"]))

    return build, {"a": a}


def _case_layer_norm(rng):
    x = _t(rng, 2, 3, 4, 4)
    scale = _t(rng, 3, lo=0.5, hi=1.5)
    shift = _t(rng, 3)

    def build(inp):
        return _sq(layer_norm(inp["x"], inp["scale"], inp["shift"]))

    return build, {"x": x, "scale": scale, "shift": shift}


def _case_dice_ce_loss(rng):
    logits = _t(rng, 2, 3, 4, 4)
    labels = rng.integers(0, 3, (2, 4, 4))

    def build(inp):
        return dice_ce_loss(inp["logits"], labels)

    return build, {"logits": logits}


def _attention_case(rank):
    def make(rng):
        spec = LkaSpec(rank=rank, channels=4, K=5, d=2, deformable=True,
                       deform3d_kernel=3)
        mod = LkaAttention(spec, rng)
        _pin_offset_nets(mod, rng)
        x = _t(rng, 1, 4, *((7, 7) if rank == 2 else (4, 5, 4)))

        def build(inp):
            return _sq(mod(inp["x"]))

        return build, _module_inputs(mod, x)

    return make


def _block_case(rank):
    def make(rng):
        spec = LkaSpec(rank=rank, channels=4, K=5, d=2, deformable=True,
                       deform3d_kernel=3)
        mod = DlkaBlock2d(spec, rng) if rank == 2 else DlkaBlock3d(spec, rng)
        _pin_offset_nets(mod, rng)
        x = _t(rng, 1, 4, *((8, 8) if rank == 2 else (4, 4, 4)))

        def build(inp):
            return _sq(mod(inp["x"]))

        return build, _module_inputs(mod, x)

    return make


CASES = {
    "arithmetic": _case_arithmetic,
    "unary": _case_unary,
    "shape_ops": _case_shape_ops,
    "pad_crop": _case_pad_crop,
    "reduce_moments": _case_reduce_moments,
    "conv_dense_2d": _case_conv_dense_2d,
    "conv_dense_2d_strided": _case_conv_dense_2d_strided,
    "conv_dense_3d": _case_conv_dense_3d,
    "conv_depthwise_2d": _case_conv_depthwise_2d,
    "conv_depthwise_3d": _case_conv_depthwise_3d,
    "conv_transpose_2d": _case_conv_transpose_2d,
    "conv_transpose_3d": _case_conv_transpose_3d,
    "grid_sample_2d": _case_grid_sample_2d,
    "grid_sample_3d": _case_grid_sample_3d,
    "deform_conv_2d": _case_deform_conv_2d,
    "deform_conv_2d_depthwise": _case_deform_conv_2d_depthwise,
    "deform_conv_3d": _case_deform_conv_3d,
    "gelu": _case_gelu,
    "layer_norm": _case_layer_norm,
    "dice_ce_loss": _case_dice_ce_loss,
    "lka_attention_2d": _attention_case(2),
    "lka_attention_3d": _attention_case(3),
    "dlka_block_2d": _block_case(2),
    "dlka_block_3d": _block_case(3),
}


def run_case(name: str, seed: int, h: float = 1e-5,
             threshold: float = 1e-4) -> GradReport:
    if name not in CASES:
        raise ValidationError(f"unknown gradcheck case {name!r}")
    idx = list(CASES).index(name)
    rng = np.random.default_rng([seed, 91, idx])
    build, inputs = CASES[name](rng)
    return gradcheck(build, inputs, h=h, threshold=threshold)


def run_suite(names=None, seeds=(0,), h: float = 1e-5, threshold: float = 1e-4):
    """Run (case, seed) grid; yields (name, seed, GradReport)."""
    for name in names or CASES:
        for seed in seeds:
            yield name, seed, run_case(name, seed, h=h, threshold=threshold)
