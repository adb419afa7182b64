from . import ops
from .gradcheck import GradCheckReport, check_gradients
from .ops import (
    concat,
    conv2d,
    dw_conv2d,
    image_to_seq,
    layer_norm,
    linear,
    matmul,
    phi,
    pw_conv2d,
    relu,
    seq_to_image,
    softmax,
)
from .serialize import WeightsFormatError, load_weights, save_weights
from .tensor import ShapeError, Tensor, default_dtype, no_grad

row_softmax = softmax

__all__ = [
    "GradCheckReport",
    "ShapeError",
    "Tensor",
    "WeightsFormatError",
    "check_gradients",
    "concat",
    "conv2d",
    "default_dtype",
    "dw_conv2d",
    "image_to_seq",
    "layer_norm",
    "linear",
    "load_weights",
    "matmul",
    "no_grad",
    "ops",
    "phi",
    "pw_conv2d",
    "relu",
    "row_softmax",
    "save_weights",
    "seq_to_image",
    "softmax",
]
