from .kernels import BACKEND, use_backend
from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    BNCache,
    BNParams,
    ConvParams,
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    conv_output_hw,
    fc_backward,
    fc_forward,
    global_avgpool_backward,
    global_avgpool_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
    softmax_xent,
    softmax_xent_backward,
)
