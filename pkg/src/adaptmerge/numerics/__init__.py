from .gradcheck import grad_check, numeric_grad
from .ops import (add, conv2d, cross_entropy, global_avg_pool, linear, log_softmax,
                  max_pool2d, mul, relu, tensor_sum)
from .optim import SGD, Adam, MissingGradientError, MultiStepLR, Optimizer
from .tensor import FrozenParameterError, Parameter, ShapeError, Tensor, as_tensor, no_grad

__all__ = [
    "Tensor", "Parameter", "ShapeError", "FrozenParameterError", "as_tensor", "no_grad",
    "add", "mul", "tensor_sum", "relu", "linear", "conv2d", "max_pool2d",
    "global_avg_pool", "cross_entropy", "log_softmax",
    "grad_check", "numeric_grad",
    "Optimizer", "SGD", "Adam", "MultiStepLR", "MissingGradientError",
]
