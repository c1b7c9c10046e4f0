"""Tensor math, reverse-mode differentiation and the optimizers."""
from .backend import available_backends, get_backend, set_backend
from .conv import ConvSpec, conv2d, effective_kernel_size
from .ops import (add, batch_norm, concat, cross_entropy, getitem, linear, mean, mse,
                  mul, prelu, relu, reshape, sigmoid, softmax, stack, sub, sum, tanh)
from .rnn import LstmParams, lstm_cell
from .optim import OptimizerState, adam_step, cosine_lr, optimizer_step, sgd_step
from .tensor import (NonFiniteError, Tensor, as_tensor, backward, default_dtype,
                     precision, set_default_dtype)
