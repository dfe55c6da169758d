"""Per-pixel predictive filtering operators.

A kernel field assigns every pixel its own filter: for a (B, C, H, W) image
the field has shape (B, C*K*K, H, W), where channels [c*K*K : (c+1)*K*K] hold
the row-major K x K taps for image channel c. Weights are unconstrained reals
(no normalization, no sign restriction). All filtering uses replicate padding,
which keeps the center-delta kernel an exact identity up to the border.

``apply_kernel_field`` supports a dilation factor: taps are read at offsets
``dilation * t`` while the 9 (or K*K) weights stay shared, so the cost per
scale is K*K*H*W*C multiply-accumulates no matter how large the dilation is.
``dilate_kernel_field`` materializes the equivalent dense kernel (zeros in
the interpolated positions) and exists as the brute-force oracle for that
claim, not as a hot path.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError

_tls = threading.local()


def _counters():
    lst = getattr(_tls, "mac_counters", None)
    if lst is None:
        lst = []
        _tls.mac_counters = lst
    return lst


class MacCounter:
    """Counts multiply-accumulates performed by filtering forwards."""

    def __init__(self):
        self.macs = 0


@contextmanager
def count_macs():
    """Context manager yielding a MacCounter active for the block."""
    counter = MacCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().remove(counter)


def _add_macs(n):
    for counter in _counters():
        counter.macs += n


def _field_geometry(image, kernels):
    """Validate image/field shapes; return (C, K)."""
    if image.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(
            f"expected 4-D image and kernel field, got {image.shape} and {kernels.shape}"
        )
    if image.shape[0] != kernels.shape[0] or image.shape[2:] != kernels.shape[2:]:
        raise ShapeError(
            f"image {image.shape} and kernel field {kernels.shape} disagree on "
            "batch or spatial dims"
        )
    c = image.shape[1]
    kk, rem = divmod(kernels.shape[1], c)
    if rem:
        raise ShapeError(
            f"kernel field channels {kernels.shape[1]} not a multiple of image channels {c}"
        )
    k = math.isqrt(kk)
    if k * k != kk or k % 2 == 0:
        raise ShapeError(
            f"kernel field implies {kk} taps per channel, which is not an odd square"
        )
    return c, k


def apply_kernel_field(image, kernels, dilation=1):
    """Filter every pixel with its own kernel: out[p] = sum_t K_p[t] * I[p + d*t].

    ``image`` is (B, C, H, W) and ``kernels`` is (B, C*K*K, H, W); channels are
    filtered independently. Out-of-bounds neighbors replicate the border.
    Differentiable in both arguments.
    """
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    c, k = _field_geometry(image, kernels)
    b, _, h, w = image.shape
    pad = dilation * (k - 1) // 2

    xp = np.pad(image.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
    kview = kernels.data.reshape(b, c, k * k, h, w)
    out_data = np.zeros_like(image.data)
    for t in range(k * k):
        dy, dx = divmod(t, k)
        ys = slice(dy * dilation, dy * dilation + h)
        xs = slice(dx * dilation, dx * dilation + w)
        out_data += kview[:, :, t] * xp[:, :, ys, xs]
    _add_macs(b * c * k * k * h * w)

    out, tape = ag._make_output(out_data, (image, kernels))
    if tape is not None:

        def backward(g):
            g_k = np.empty_like(kview)
            g_xp = np.zeros_like(xp)
            for t in range(k * k):
                dy, dx = divmod(t, k)
                ys = slice(dy * dilation, dy * dilation + h)
                xs = slice(dx * dilation, dx * dilation + w)
                g_k[:, :, t] = g * xp[:, :, ys, xs]
                g_xp[:, :, ys, xs] += g * kview[:, :, t]
            return _fold_replicate_pad(g_xp, pad), g_k.reshape(kernels.shape)

        tape.record(out, (image, kernels), backward)
    return out


def _fold_replicate_pad(g_padded, pad):
    """Adjoint of edge padding: fold border-band gradients onto edge pixels."""
    if pad == 0:
        return g_padded
    g = g_padded
    g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
    g[:, :, -pad - 1, :] += g[:, :, -pad:, :].sum(axis=2)
    g = g[:, :, pad:-pad, :]
    g[:, :, :, pad] += g[:, :, :, :pad].sum(axis=3)
    g[:, :, :, -pad - 1] += g[:, :, :, -pad:].sum(axis=3)
    return np.ascontiguousarray(g[:, :, :, pad:-pad])


def dilate_kernel_field(kernels, dilation, channels=3):
    """Materialize the dense kernel equivalent to filtering at ``dilation``.

    The K*K weights land at offsets ``dilation * t`` of a kernel with side
    dilation*(K-1)+1; every interpolated position is zero, so the weight sum
    is preserved. For dilation 1 the input is returned unchanged.
    """
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    if dilation == 1:
        return kernels
    data = kernels.data if isinstance(kernels, Tensor) else np.asarray(kernels)
    b, ck2, h, w = data.shape
    kk, rem = divmod(ck2, channels)
    if rem:
        raise ShapeError(
            f"kernel field channels {ck2} not a multiple of image channels {channels}"
        )
    k = math.isqrt(kk)
    if k * k != kk:
        raise ShapeError(f"{kk} taps per channel is not a square")
    side = dilation * (k - 1) + 1
    dense = np.zeros((b, channels, side * side, h, w), dtype=data.dtype)
    src = data.reshape(b, channels, k * k, h, w)
    for t in range(k * k):
        dy, dx = divmod(t, k)
        dense[:, :, (dy * dilation) * side + dx * dilation] = src[:, :, t]
    dense = dense.reshape(b, channels * side * side, h, w)
    return Tensor(dense) if isinstance(kernels, Tensor) else dense


def uncertainty_map(kernels):
    """Per-pixel mean of all C*K*K kernel weights, shape (B, 1, H, W).

    Low values flag pixels whose predicted kernels lean on negative weights,
    i.e. pixels that were hard to reconstruct. Differentiable.
    """
    if kernels.ndim != 4:
        raise ShapeError(f"expected a 4-D kernel field, got {kernels.shape}")
    return ag.channel_mean(kernels)


def averaging_fusion(n_inputs, channels=3, kernel_size=3, dtype=np.float32):
    """3x3 fusion conv parameters that initially average their inputs.

    Returns (weight, bias) tensors for fusing ``n_inputs`` images of
    ``channels`` channels each; at step 0 the fused output equals the mean of
    the inputs, which keeps an untrained fusion layer sane.
    """
    if n_inputs < 1:
        raise ShapeError("fusion needs at least one input")
    weight = np.zeros(
        (channels, n_inputs * channels, kernel_size, kernel_size), dtype=dtype
    )
    center = kernel_size // 2
    for c in range(channels):
        for i in range(n_inputs):
            weight[c, i * channels + c, center, center] = 1.0 / n_inputs
    return ag.parameter(weight, dtype=dtype), ag.parameter(
        np.zeros(channels, dtype=dtype), dtype=dtype
    )


def fuse(images, weight, bias):
    """Fuse same-shape images with a 3x3 conv over their channel concatenation."""
    if not images:
        raise ShapeError("fuse needs at least one input image")
    stacked = ag.concat_channels(images) if len(images) > 1 else images[0]
    return ag.conv2d(stacked, weight, bias, stride=1, padding=weight.shape[2] // 2)


def filtering_macs(height, width, channels, kernel_size, scales, strategy):
    """Analytic multiply-accumulate count of one multi-scale filtering pass.

    ``weight-sharing`` applies the same K x K kernel at every dilation:
    scales * K^2 * H * W * C. ``multi-head`` predicts a dense kernel of side
    2s+1 per scale: C * H * W * sum_s (2s+1)^2.
    """
    if min(height, width, channels, kernel_size, scales) < 1:
        raise ShapeError("all benchmark dimensions must be positive")
    if strategy == "weight-sharing":
        return scales * kernel_size * kernel_size * height * width * channels
    if strategy == "multi-head":
        total = sum((2 * s + 1) ** 2 for s in range(1, scales + 1))
        return channels * height * width * total
    raise ShapeError(f"unknown strategy {strategy!r}")
