"""Dilated 2-D convolution with zero "same" padding."""
from dataclasses import dataclass

import numpy as np

from .backend import kernels as _kernels
from .ops import reshape
from .tensor import make_result


def effective_kernel_size(k, d):
    """Span of a ``k``-tap kernel dilated by ``d``: ``k + (k - 1)(d - 1)``."""
    if k < 1 or d < 1:
        raise ValueError(f"kernel size and dilation must be >= 1, got k={k}, d={d}")
    return k + (k - 1) * (d - 1)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    dilation: int = 1

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel_h", "kernel_w", "dilation"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"ConvSpec.{field} must be a positive int, got {value!r}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def effective_kernel(self):
        return (effective_kernel_size(self.kernel_h, self.dilation),
                effective_kernel_size(self.kernel_w, self.dilation))

    @property
    def padding(self):
        """Leading zero padding per axis; trailing padding is ``k' - 1 - lead``."""
        kh, kw = self.effective_kernel
        return (kh - 1) // 2, (kw - 1) // 2

    def check_input(self, height, width):
        kh, kw = self.effective_kernel
        padded_h, padded_w = height + kh - 1, width + kw - 1
        if height < 1 or width < 1 or kh > padded_h or kw > padded_w:
            raise ValueError(
                f"effective kernel {kh}x{kw} exceeds padded input extent {padded_h}x{padded_w}")
        return self.padding


def conv2d(x, spec, weight, bias=None):
    """Batched dilated convolution, output spatial size equal to the input's.

    ``x`` is ``(B, C_in, H, W)`` or ``(C_in, H, W)``; the unbatched form returns
    ``(C_out, H, W)``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 3-D or 4-D input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, spec wants {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"conv2d: weight shape {weight.shape} != {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")
    if weight.dtype != x.dtype:
        raise TypeError(f"conv2d: dtype mismatch input {x.dtype} vs weight {weight.dtype}")
    B, _, H, W = x.shape
    ph, pw = spec.check_input(H, W)
    d = spec.dilation
    kernels = _kernels()

    out = np.zeros((B, spec.out_channels, H, W), dtype=x.dtype)
    kernels.conv2d_forward(x.data, weight.data, out, d, d, ph, pw)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def back(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            kernels.conv2d_backward_input(g, weight.data, gx, d, d, ph, pw)
        if weight.requires_grad:
            acc = np.zeros(weight.shape, dtype=np.float64)
            kernels.conv2d_backward_weight(g, x.data, acc, d, d, ph, pw)
            gw = acc.astype(weight.dtype)
        if bias is None:
            return gx, gw
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    result = make_result(out, parents, back)
    if squeeze:
        result = reshape(result, result.shape[1:])
    return result
