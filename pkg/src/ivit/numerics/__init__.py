from . import ops
from .gradcheck import CheckRow, gradcheck, numerical_gradient, op_suite, relative_error
from .ops import (
    conv2d,
    cross_entropy,
    embedding_lookup,
    gelu,
    layer_norm,
    linear,
    matmul,
    softmax_rows,
)
from .serialize import decode as decode_tensor
from .serialize import encode as encode_tensor
from .tensor import ContractError, Tensor, backward, no_grad, topological_order

__all__ = [
    "CheckRow",
    "ContractError",
    "Tensor",
    "backward",
    "conv2d",
    "cross_entropy",
    "decode_tensor",
    "embedding_lookup",
    "encode_tensor",
    "gelu",
    "gradcheck",
    "layer_norm",
    "linear",
    "matmul",
    "no_grad",
    "numerical_gradient",
    "op_suite",
    "ops",
    "relative_error",
    "softmax_rows",
    "topological_order",
]
