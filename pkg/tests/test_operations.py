"""Candidate operations: shapes, the custom norm, and the dilated-conv
decomposition against the native kernels."""

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from nasood.operations import (
    NONE_OP,
    OPS,
    PRIMITIVES,
    BatchStatNorm2d,
    FactorizedReduce,
    Identity,
    SepConv,
    Zero,
    batch_stat_norm,
    build_op,
    dilated_depthwise_conv2d,
    op_index,
)


def test_primitive_table():
    assert len(PRIMITIVES) == 8
    assert len(set(PRIMITIVES)) == 8
    assert PRIMITIVES[0] == NONE_OP == "none"
    assert op_index("none") == 0
    assert set(OPS) == set(PRIMITIVES)


def test_build_op_unknown_name():
    with pytest.raises(KeyError):
        build_op("conv_9x9", 8, 1)


@pytest.mark.parametrize("name", PRIMITIVES)
@pytest.mark.parametrize("stride", [1, 2])
def test_op_output_shapes(name, stride):
    torch.manual_seed(0)
    op = build_op(name, 6, stride, affine=False, track=False)
    x = torch.randn(2, 6, 8, 8)
    out = op(x)
    expected_hw = 8 // stride
    assert out.shape == (2, 6, expected_hw, expected_hw)


def test_zero_output_is_zero():
    x = torch.randn(3, 4, 8, 8)
    assert torch.equal(Zero(1)(x), torch.zeros(3, 4, 8, 8))
    assert torch.equal(Zero(2)(x), torch.zeros(3, 4, 4, 4))


def test_identity_passthrough():
    x = torch.randn(2, 3, 5, 5)
    assert Identity()(x) is x


def test_factorized_reduce_shape_and_odd_channels():
    torch.manual_seed(0)
    fr = FactorizedReduce(6, 8, affine=False, track=False)
    assert fr(torch.randn(2, 6, 8, 8)).shape == (2, 8, 4, 4)
    with pytest.raises(ValueError):
        FactorizedReduce(6, 7)


def test_sep_conv_is_depthwise_then_pointwise():
    op = SepConv(6, 6, 3, 1, 1, affine=False, track=False)
    dw, pw = op.op[1], op.op[2]
    assert dw.groups == 6 and dw.weight.shape == (6, 1, 3, 3)
    assert pw.weight.shape == (6, 6, 1, 1)


def test_batch_stat_norm_matches_batchnorm():
    """The closed-form backward must agree with the native BatchNorm2d in
    track_running_stats=False mode, values and gradients alike."""
    torch.manual_seed(0)
    for affine in (False, True):
        x1 = torch.randn(5, 7, 6, 6, dtype=torch.float64, requires_grad=True)
        x2 = x1.detach().clone().requires_grad_(True)
        ours = BatchStatNorm2d(7, affine=affine).double()
        ref = nn.BatchNorm2d(7, affine=affine, track_running_stats=False).double()
        if affine:
            with torch.no_grad():
                ours.weight.copy_(torch.randn(7))
                ours.bias.copy_(torch.randn(7))
                ref.weight.copy_(ours.weight)
                ref.bias.copy_(ours.bias)
        out1, out2 = ours(x1), ref(x2)
        assert torch.allclose(out1, out2, atol=1e-10)
        grad = torch.randn_like(out1)
        out1.backward(grad)
        out2.backward(grad)
        assert torch.allclose(x1.grad, x2.grad, atol=1e-9)
        if affine:
            assert torch.allclose(ours.weight.grad, ref.weight.grad, atol=1e-9)
            assert torch.allclose(ours.bias.grad, ref.bias.grad, atol=1e-9)


def test_batch_stat_norm_ignores_eval_mode():
    torch.manual_seed(1)
    norm = BatchStatNorm2d(4)
    x = torch.randn(3, 4, 5, 5)
    train_out = norm(x)
    norm.eval()
    assert torch.equal(norm(x), train_out)


def test_batch_stat_norm_has_no_buffers():
    assert list(BatchStatNorm2d(4, affine=True).buffers()) == []


def test_batch_stat_norm_normalizes():
    torch.manual_seed(2)
    out = batch_stat_norm(torch.randn(8, 3, 10, 10) * 5 + 2)
    assert torch.allclose(out.mean(dim=(0, 2, 3)), torch.zeros(3), atol=1e-5)
    assert torch.allclose(out.std(dim=(0, 2, 3), unbiased=False),
                          torch.ones(3), atol=1e-3)


@pytest.mark.parametrize("kernel,padding", [(3, 2), (5, 4)])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("size", [8, 16])
def test_dilated_decomposition_matches_native(kernel, padding, stride, size):
    torch.manual_seed(0)
    C = 5
    x1 = torch.randn(3, C, size, size, dtype=torch.float64, requires_grad=True)
    x2 = x1.detach().clone().requires_grad_(True)
    w1 = torch.randn(C, 1, kernel, kernel, dtype=torch.float64, requires_grad=True)
    w2 = w1.detach().clone().requires_grad_(True)
    out1 = dilated_depthwise_conv2d(x1, w1, stride=stride, padding=padding)
    out2 = F.conv2d(x2, w2, stride=stride, padding=padding, dilation=2, groups=C)
    assert torch.allclose(out1, out2, atol=1e-12)
    grad = torch.randn_like(out1)
    out1.backward(grad)
    out2.backward(grad)
    assert torch.allclose(x1.grad, x2.grad, atol=1e-12)
    assert torch.allclose(w1.grad, w2.grad, atol=1e-12)


def test_dilated_decomposition_odd_size_fallback():
    torch.manual_seed(0)
    x = torch.randn(2, 4, 9, 9, dtype=torch.float64)
    w = torch.randn(4, 1, 3, 3, dtype=torch.float64)
    out = dilated_depthwise_conv2d(x, w, stride=1, padding=2)
    ref = F.conv2d(x, w, stride=1, padding=2, dilation=2, groups=4)
    assert torch.allclose(out, ref, atol=1e-12)


def test_dilated_decomposition_keeps_channels_last():
    torch.manual_seed(0)
    x = torch.randn(2, 4, 8, 8).contiguous(memory_format=torch.channels_last)
    w = torch.randn(4, 1, 3, 3)
    out = dilated_depthwise_conv2d(x, w, stride=1, padding=2)
    assert out.is_contiguous(memory_format=torch.channels_last)
    ref = F.conv2d(x, w, stride=1, padding=2, dilation=2, groups=4)
    assert torch.allclose(out, ref, atol=1e-6)
