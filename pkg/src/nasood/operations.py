"""Candidate operations for the cell search space.

Index 0 of PRIMITIVES is always the zero operation; genotype derivation
relies on that ordering.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

PRIMITIVES = (
    "none",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)

NONE_OP = PRIMITIVES[0]


def op_index(name: str) -> int:
    return PRIMITIVES.index(name)


class _BatchStatNormFunction(torch.autograd.Function):
    """Batch-statistics normalization with a closed-form backward.

    Matches BatchNorm2d with track_running_stats=False (batch statistics in
    both train and eval mode) but sidesteps the native norm kernels, whose
    channels-last backward is an order of magnitude slower on CPU.
    """

    @staticmethod
    def forward(ctx, x, weight, bias, eps):
        dims = (0, 2, 3)
        mean = x.mean(dims, keepdim=True)
        var = (x * x).mean(dims, keepdim=True) - mean * mean
        inv = torch.rsqrt(var.clamp_min_(0.0) + eps)
        xhat = (x - mean) * inv
        if weight is not None:
            out = xhat * weight.view(1, -1, 1, 1) + bias.view(1, -1, 1, 1)
        else:
            out = xhat
        ctx.save_for_backward(xhat, inv, weight)
        return out

    @staticmethod
    def backward(ctx, grad):
        xhat, inv, weight = ctx.saved_tensors
        dims = (0, 2, 3)
        grad_weight = grad_bias = None
        if weight is not None:
            if ctx.needs_input_grad[1]:
                grad_weight = (grad * xhat).sum(dims)
            if ctx.needs_input_grad[2]:
                grad_bias = grad.sum(dims)
            g = grad * weight.view(1, -1, 1, 1)
        else:
            g = grad
        m1 = g.mean(dims, keepdim=True)
        m2 = (g * xhat).mean(dims, keepdim=True)
        return inv * (g - m1 - xhat * m2), grad_weight, grad_bias, None


def batch_stat_norm(x, weight=None, bias=None, eps=1e-5):
    """Normalizes each channel by the current batch's mean and variance."""
    return _BatchStatNormFunction.apply(x, weight, bias, eps)


class BatchStatNorm2d(nn.Module):
    """Drop-in for BatchNorm2d(C, track_running_stats=False).

    Keeps no running buffers, so evaluation mode also normalizes with batch
    statistics and the forward stays a pure function of (weights, input).
    """

    def __init__(self, num_features, affine=False, eps=1e-5):
        super().__init__()
        self.num_features = num_features
        self.affine = affine
        self.eps = eps
        if affine:
            self.weight = nn.Parameter(torch.ones(num_features))
            self.bias = nn.Parameter(torch.zeros(num_features))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)

    def forward(self, x):
        return batch_stat_norm(x, self.weight, self.bias, self.eps)

    def extra_repr(self):
        return f"{self.num_features}, affine={self.affine}"


def _norm(C, affine, track):
    if track:
        return nn.BatchNorm2d(C, affine=affine, track_running_stats=True)
    return BatchStatNorm2d(C, affine=affine)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def dilated_depthwise_conv2d(x, weight, stride=1, padding=0, dilation=2):
    """Depthwise convolution with dilation 2 via parity decomposition.

    The native backward for dilated depthwise convolutions is pathologically
    slow on CPU (tens of milliseconds per call at the sizes used here).  With
    even padding and even spatial extent, a dilation-2 kernel only ever mixes
    pixels of equal parity, so the same result comes from dense convolutions
    over the four even/odd subgrids; with stride 2 only the even subgrid
    contributes.  Falls back to the native op whenever the decomposition does
    not apply.
    """
    C = x.shape[1]
    s = _pair(stride)
    p = _pair(padding)
    d = _pair(dilation)
    B, _, H, W = x.shape
    decomposable = (
        d == (2, 2)
        and s[0] == s[1]
        and s[0] in (1, 2)
        and p[0] % 2 == 0 and p[1] % 2 == 0
        and H % 2 == 0 and W % 2 == 0
    )
    if not decomposable:
        return F.conv2d(x, weight, None, s, p, d, groups=C)
    half_pad = (p[0] // 2, p[1] // 2)
    if s[0] == 2:
        return F.conv2d(x[:, :, ::2, ::2], weight, None, 1, half_pad, 1, groups=C)
    subs = torch.cat([x[:, :, i::2, j::2] for i in (0, 1) for j in (0, 1)])
    out = F.conv2d(subs, weight, None, 1, half_pad, 1, groups=C)
    H2, W2 = out.shape[-2:]
    out = (out.view(2, 2, B, C, H2, W2)
           .permute(2, 3, 4, 0, 5, 1)
           .reshape(B, C, 2 * H2, 2 * W2))
    if x.is_contiguous(memory_format=torch.channels_last):
        out = out.contiguous(memory_format=torch.channels_last)
    return out


OPS = {
    "none": lambda C, stride, affine, track: Zero(stride),
    "max_pool_3x3": lambda C, stride, affine, track: nn.MaxPool2d(3, stride=stride, padding=1),
    "avg_pool_3x3": lambda C, stride, affine, track: nn.AvgPool2d(
        3, stride=stride, padding=1, count_include_pad=False),
    "skip_connect": lambda C, stride, affine, track: (
        Identity() if stride == 1 else FactorizedReduce(C, C, affine, track)),
    "sep_conv_3x3": lambda C, stride, affine, track: SepConv(C, C, 3, stride, 1, affine, track),
    "sep_conv_5x5": lambda C, stride, affine, track: SepConv(C, C, 5, stride, 2, affine, track),
    "dil_conv_3x3": lambda C, stride, affine, track: DilConv(C, C, 3, stride, 2, 2, affine, track),
    "dil_conv_5x5": lambda C, stride, affine, track: DilConv(C, C, 5, stride, 4, 2, affine, track),
}


def build_op(name, C, stride, affine=True, track=True):
    if name not in OPS:
        raise KeyError(f"unknown operation {name!r}")
    return OPS[name](C, stride, affine, track)


class ReLUConvBN(nn.Module):

    def __init__(self, C_in, C_out, kernel_size, stride, padding, affine=True, track=True):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.Conv2d(C_in, C_out, kernel_size, stride=stride, padding=padding, bias=False),
            _norm(C_out, affine, track),
        )

    def forward(self, x):
        return self.op(x)


class SepConv(nn.Module):
    """Depthwise separable convolution: ReLU, depthwise conv, pointwise conv, norm."""

    def __init__(self, C_in, C_out, kernel_size, stride, padding, affine=True, track=True):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.Conv2d(C_in, C_in, kernel_size, stride=stride, padding=padding,
                      groups=C_in, bias=False),
            nn.Conv2d(C_in, C_out, 1, bias=False),
            _norm(C_out, affine, track),
        )

    def forward(self, x):
        return self.op(x)


class DilConv(nn.Module):
    """Dilated depthwise separable convolution."""

    def __init__(self, C_in, C_out, kernel_size, stride, padding, dilation,
                 affine=True, track=True):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            nn.Conv2d(C_in, C_in, kernel_size, stride=stride, padding=padding,
                      dilation=dilation, groups=C_in, bias=False),
            nn.Conv2d(C_in, C_out, 1, bias=False),
            _norm(C_out, affine, track),
        )

    def forward(self, x):
        dw = self.op[1]
        h = dilated_depthwise_conv2d(self.op[0](x), dw.weight, dw.stride,
                                     dw.padding, dw.dilation)
        return self.op[3](self.op[2](h))


class Identity(nn.Module):

    def forward(self, x):
        return x


class Zero(nn.Module):
    """Multiplies by zero; with stride > 1 it also drops spatial positions."""

    def __init__(self, stride):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        if self.stride == 1:
            return x * 0.0
        return x[:, :, ::self.stride, ::self.stride] * 0.0


class FactorizedReduce(nn.Module):
    """Halves the spatial resolution with two offset 1x1 convolutions."""

    def __init__(self, C_in, C_out, affine=True, track=True):
        super().__init__()
        if C_out % 2 != 0:
            raise ValueError(f"C_out must be even, got {C_out}")
        self.relu = nn.ReLU(inplace=False)
        self.conv_1 = nn.Conv2d(C_in, C_out // 2, 1, stride=2, bias=False)
        self.conv_2 = nn.Conv2d(C_in, C_out // 2, 1, stride=2, bias=False)
        self.bn = _norm(C_out, affine, track)

    def forward(self, x):
        x = self.relu(x)
        out = torch.cat([self.conv_1(x), self.conv_2(x[:, :, 1:, 1:])], dim=1)
        return self.bn(out)
