"""LSTM cell built from differentiable primitives."""
from dataclasses import dataclass

from . import ops
from .tensor import Tensor

GATES = ("input", "forget", "cell", "output")


@dataclass
class LstmParams:
    """Gate weights stacked row-wise in ``GATES`` order.

    ``weight`` is ``(4*N_h, D_in + N_h)`` acting on ``[x, h]``; ``bias`` is ``(4*N_h,)``.
    """
    weight: Tensor
    bias: Tensor

    @property
    def hidden_size(self):
        return self.weight.shape[0] // 4

    @property
    def input_size(self):
        return self.weight.shape[1] - self.hidden_size

    def gate_block(self, gate):
        """Numpy view of one gate's ``(N_h, D_in + N_h)`` weight block."""
        k = GATES.index(gate)
        n = self.hidden_size
        return self.weight.data[k * n:(k + 1) * n]

    def gate_bias(self, gate):
        k = GATES.index(gate)
        n = self.hidden_size
        return self.bias.data[k * n:(k + 1) * n]


def lstm_cell(x, h, c, params):
    """One LSTM step; returns ``(h_next, c_next)``. Works batched over axis 0."""
    n = params.hidden_size
    if params.weight.shape[0] != 4 * n or params.bias.shape != (4 * n,):
        raise ValueError(f"lstm_cell: malformed params {params.weight.shape}/{params.bias.shape}")
    if x.shape[-1] != params.input_size:
        raise ValueError(f"lstm_cell: input dim {x.shape[-1]} != {params.input_size}")
    if h.shape[-1] != n or c.shape != h.shape:
        raise ValueError(f"lstm_cell: state shapes {h.shape}/{c.shape} do not match N_h={n}")
    z = ops.linear(ops.concat([x, h], axis=-1), params.weight, params.bias)
    i = ops.sigmoid(z[..., 0:n])
    f = ops.sigmoid(z[..., n:2 * n])
    g = ops.tanh(z[..., 2 * n:3 * n])
    o = ops.sigmoid(z[..., 3 * n:4 * n])
    c_next = f * c + i * g
    h_next = o * ops.tanh(c_next)
    return h_next, c_next
