"""Dense NCHW arrays: direct convolution with explicit backward, ReLU, SGD and a
central-difference gradient oracle.

Everything here works on plain ``numpy`` arrays of rank 4 (batch, channel,
height, width). Functions preserve the floating dtype of their inputs, so the
training path runs in float32 while gradient checks can run the same code in
float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def check_tensor4(x, name="tensor"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must have rank 4, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {x.shape}")
    return x


@dataclass
class ConvLayer:
    """Weights (out_c, in_c, k_h, k_w), bias (out_c,) and the sampling geometry."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be rank 4, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs"
            )
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")

    @classmethod
    def same(cls, weight, bias, stride=1, dilation=1):
        """Layer whose padding keeps the spatial size at stride 1 (odd kernels only)."""
        kh, kw = weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0 or kh != kw:
            raise ValueError("'same' padding needs square odd kernels")
        return cls(weight, bias, stride=stride, padding=dilation * (kh - 1) // 2, dilation=dilation)

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def output_hw(self, h, w):
        kh, kw = self.weight.shape[2:]
        p, s, d = self.padding, self.stride, self.dilation
        oh = (h + 2 * p - d * (kh - 1) - 1) // s + 1
        ow = (w + 2 * p - d * (kw - 1) - 1) // s + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"input {h}x{w} too small for kernel {kh}x{kw}")
        return oh, ow


def _columns(x, layer):
    n, c, h, w = x.shape
    kh, kw = layer.weight.shape[2:]
    oh, ow = layer.output_hw(h, w)
    p, s, d = layer.padding, layer.stride, layer.dilation
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * d : i * d + s * (oh - 1) + 1 : s,
                                  j * d : j * d + s * (ow - 1) + 1 : s]
    return cols


def conv2d_forward(x, layer):
    """Cross-correlation with zero padding; returns (n, out_c, oh, ow)."""
    x = check_tensor4(x, "input")
    if x.shape[1] != layer.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, layer expects {layer.in_channels}"
        )
    dtype = np.result_type(x, layer.weight)
    cols = _columns(x.astype(dtype, copy=False), layer)
    out = np.tensordot(cols, layer.weight.astype(dtype, copy=False), axes=([1, 2, 3], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + layer.bias.astype(dtype)[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, layer, upstream):
    """Gradients of ``sum(upstream * conv2d_forward(x, layer))``.

    Returns ``(grad_input, grad_weight, grad_bias)``.
    """
    x = check_tensor4(x, "input")
    if x.shape[1] != layer.in_channels:
        raise ValueError("input channels do not match the layer")
    n, c, h, w = x.shape
    oh, ow = layer.output_hw(h, w)
    if upstream.shape != (n, layer.out_channels, oh, ow):
        raise ValueError(
            f"upstream shape {upstream.shape} != forward output {(n, layer.out_channels, oh, ow)}"
        )
    dtype = np.result_type(x, layer.weight, upstream)
    x = x.astype(dtype, copy=False)
    weight = layer.weight.astype(dtype, copy=False)
    upstream = upstream.astype(dtype, copy=False)

    cols = _columns(x, layer)
    grad_weight = np.tensordot(upstream, cols, axes=([0, 2, 3], [0, 4, 5]))
    grad_bias = upstream.sum(axis=(0, 2, 3))

    # (c, kh, kw, n, oh, ow)
    grad_cols = np.tensordot(weight, upstream, axes=([0], [1]))
    kh, kw = weight.shape[2:]
    p, s, d = layer.padding, layer.stride, layer.dilation
    grad_xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, :, i * d : i * d + s * (oh - 1) + 1 : s,
                    j * d : j * d + s * (ow - 1) + 1 : s] += grad_cols[:, i, j].transpose(1, 0, 2, 3)
    grad_input = grad_xp[:, :, p : p + h, p : p + w] if p else grad_xp
    return np.ascontiguousarray(grad_input), grad_weight, grad_bias


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    # subgradient 0 at exactly 0
    return np.where(x > 0, upstream, 0).astype(np.result_type(upstream), copy=False)


def sgd_step(params, grads, lr, momentum_state, momentum=0.0):
    """One momentum-SGD update: v <- momentum*v + g ; p <- p - lr*v.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    """
    params = np.asarray(params)
    if np.shape(grads) != params.shape or np.shape(momentum_state) != params.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {np.shape(grads)}, "
            f"state {np.shape(momentum_state)}"
        )
    state = momentum * momentum_state + grads
    state = state.astype(params.dtype, copy=False)
    return (params - lr * state).astype(params.dtype, copy=False), state


def finite_difference_gradient(f, x, h=1e-3):
    """Central differences of a scalar function, one coordinate at a time.

    The evaluation is carried out in float64 whatever the dtype of ``x``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
