"""Deformable large-kernel attention segmentation networks on plain numpy.

The package is organized as a small strided-tensor autograd core (tensor,
autograd), convolution and deformable-sampling operations (conv, deform),
module plumbing (layers), the gated attention blocks (attention), encoder/
decoder networks (network), losses, metrics, data synthesis and the training
loop (training), a closed-form parameter/FLOP cost model (costmodel), binary
file formats (fileio), config parsing (config), and a CLI (cli).
"""

from .attention import (
    DlkaBlock2d,
    DlkaBlock3d,
    Ffn3d,
    LkaAttention,
    LkaSpec,
    Mlp2d,
    gelu,
    layer_norm,
)
from .autograd import GradReport, backward, finite_diff, gradcheck
from .config import config_dump, config_parse
from .conv import (
    ConvSpec,
    conv_dense,
    conv_depthwise,
    conv_transpose,
    kernel_span,
    output_extent,
    same_padding,
)
from .costmodel import (
    CostQuery,
    CostReport,
    CostRow,
    axis_support,
    cost_table,
    dw_kernel,
    dwd_kernel,
    flops,
    optimal_dilation,
    params_decomposed,
    params_deform_decomposed,
    params_offset_net,
    params_standard,
)
from .deform import deform_conv, grid_sample_linear, offset_channel_count
from .fileio import (
    FileFormatError,
    checkpoint_load,
    checkpoint_save,
    read_raster,
    write_raster,
)
from .layers import (
    Conv,
    ConvTranspose,
    DeformConv,
    DepthwiseConv,
    LayerNorm,
    Module,
    ModuleList,
)
from .network import (
    DlkaNet2d,
    DlkaNet3d,
    NetConfig,
    PatchEmbed,
    PatchExpand,
    StageSupport,
    build_net,
    receptive_field_report,
)
from .tensor import (
    SpatialShape,
    Tensor,
    ValidationError,
    crop,
    default_dtype,
    elementwise,
    pad_constant,
    reduce_moments,
    set_default_dtype,
)
from .training import (
    DivergenceError,
    EpochLog,
    OptimState,
    Sample,
    TrainSettings,
    dice_ce_loss,
    dice_metric,
    evaluate,
    hd95_metric,
    one_hot,
    sgd_step,
    split_train_val,
    synth_generate,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "Conv",
    "ConvSpec",
    "ConvTranspose",
    "CostQuery",
    "CostReport",
    "CostRow",
    "DeformConv",
    "DepthwiseConv",
    "DivergenceError",
    "DlkaBlock2d",
    "DlkaBlock3d",
    "DlkaNet2d",
    "DlkaNet3d",
    "EpochLog",
    "Ffn3d",
    "FileFormatError",
    "GradReport",
    "LayerNorm",
    "LkaAttention",
    "LkaSpec",
    "Mlp2d",
    "Module",
    "ModuleList",
    "NetConfig",
    "OptimState",
    "PatchEmbed",
    "PatchExpand",
    "Sample",
    "SpatialShape",
    "StageSupport",
    "Tensor",
    "TrainSettings",
    "ValidationError",
    "axis_support",
    "backward",
    "build_net",
    "checkpoint_load",
    "checkpoint_save",
    "config_dump",
    "config_parse",
    "conv_dense",
    "conv_depthwise",
    "conv_transpose",
    "cost_table",
    "crop",
    "default_dtype",
    "deform_conv",
    "dice_ce_loss",
    "dice_metric",
    "dw_kernel",
    "dwd_kernel",
    "elementwise",
    "evaluate",
    "finite_diff",
    "flops",
    "gelu",
    "gradcheck",
    "grid_sample_linear",
    "hd95_metric",
    "kernel_span",
    "layer_norm",
    "offset_channel_count",
    "one_hot",
    "optimal_dilation",
    "output_extent",
    "pad_constant",
    "params_decomposed",
    "params_deform_decomposed",
    "params_offset_net",
    "params_standard",
    "read_raster",
    "receptive_field_report",
    "reduce_moments",
    "same_padding",
    "set_default_dtype",
    "sgd_step",
    "split_train_val",
    "synth_generate",
    "train_loop",
    "write_raster",
]
