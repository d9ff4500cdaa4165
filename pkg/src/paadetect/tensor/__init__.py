from .core import (
    ComputationTape,
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    Function,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    tensor,
    trace,
)
from .ops import (
    add, concat, div, dot, einsum, exp, getitem, log, matmul, max, mean, mul,
    neg, power, relu, reshape, sqrt, sub, sum, take, tanh, transpose, where,
)
from .nn import (
    BatchNormState, avg_pool2d, batch_norm, conv1d, conv2d, cross_entropy,
    global_avg_pool, l2_normalize, log_softmax, max_pool2d, rel_gather, rel_scatter, softmax_axis,
)
from .gradcheck import finite_diff_check
from .io import load_ten, parse_ten, save_ten, ten_bytes
