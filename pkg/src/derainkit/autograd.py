"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operations the deraining model needs are provided: 2-D convolution,
batch normalization, ReLU, 2x average pooling, 2x bilinear upsampling,
channel concatenation, reshape, and the elementwise/reduction arithmetic the
loss functions are built from.

Gradients are recorded on an explicit :class:`Tape`. While a tape is active
every operation whose inputs require gradients appends one entry; calling
``tape.backward(loss)`` replays the entries once, in reverse execution order,
and populates ``.grad`` on every tensor that requires a gradient. Without an
active tape the same functions run as plain (and cheaper) numpy code.

Values default to float32; gradient checks and test oracles should build
float64 tensors instead.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

BN_EPS = 1e-5


class Tensor:
    """A dense array plus gradient bookkeeping.

    ``data`` is always a numpy array. ``grad`` stays ``None`` until a tape
    backward pass fills it in.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data, dtype=np.float32):
    """A trainable tensor (requires_grad set)."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable operations.

    Backward is a single linear pass over the recorded entries; no entry is
    visited twice. Each tape may be replayed backward once.
    """

    def __init__(self):
        self._entries = []
        self._used = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, output, inputs, backward):
        """Append an entry. ``backward(grad_out)`` must return one gradient
        (or None) per input, in order."""
        self._entries.append((output, tuple(inputs), backward))

    def backward(self, loss, params=None):
        """Accumulate d(loss)/d(tensor) for every recorded tensor.

        ``loss`` must be a scalar tensor produced under this tape. ``.grad``
        is overwritten (not accumulated across calls) on every tensor that
        requires a gradient; tensors in ``params`` that the graph never
        touched receive zeros.
        """
        if self._used:
            raise RuntimeError("tape has already been replayed backward")
        self._used = True
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads = {id(loss): np.ones((), dtype=loss.dtype)}
        seen = {id(loss): loss}
        for output, inputs, backward in reversed(self._entries):
            g_out = grads.pop(id(output), None)
            if g_out is None:
                continue
            for tensor, g in zip(inputs, backward(g_out)):
                if g is None:
                    continue
                key = id(tensor)
                seen[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        for key, tensor in seen.items():
            if tensor.requires_grad and key in grads:
                tensor.grad = grads[key]
        if params is not None:
            for p in params:
                if p.grad is None or id(p) not in grads:
                    p.grad = np.zeros_like(p.data)


def _make_output(data, inputs):
    """Wrap ``data``; mark it differentiable if recording would happen."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=needs), tape if needs else None


# --------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# --------------------------------------------------------------------------


def _binary_args(a, b, op_name):
    if not isinstance(b, Tensor):
        return b  # plain scalar
    if a.shape != b.shape:
        raise ShapeError(f"{op_name}: shapes {a.shape} and {b.shape} differ")
    return b


def add(a, b):
    """Elementwise a + b; b may be a scalar."""
    b = _binary_args(a, b, "add")
    if isinstance(b, Tensor):
        out, tape = _make_output(a.data + b.data, (a, b))
        if tape is not None:
            tape.record(out, (a, b), lambda g: (g, g))
    else:
        out, tape = _make_output(a.data + b, (a,))
        if tape is not None:
            tape.record(out, (a,), lambda g: (g,))
    return out


def sub(a, b):
    """Elementwise a - b; b may be a scalar."""
    b = _binary_args(a, b, "sub")
    if isinstance(b, Tensor):
        out, tape = _make_output(a.data - b.data, (a, b))
        if tape is not None:
            tape.record(out, (a, b), lambda g: (g, -g))
    else:
        out, tape = _make_output(a.data - b, (a,))
        if tape is not None:
            tape.record(out, (a,), lambda g: (g,))
    return out


def mul(a, b):
    """Elementwise a * b; b may be a scalar."""
    b = _binary_args(a, b, "mul")
    if isinstance(b, Tensor):
        out, tape = _make_output(a.data * b.data, (a, b))
        if tape is not None:
            ad, bd = a.data, b.data
            tape.record(out, (a, b), lambda g: (g * bd, g * ad))
    else:
        out, tape = _make_output(a.data * b, (a,))
        if tape is not None:
            tape.record(out, (a,), lambda g: (g * b,))
    return out


def div(a, b):
    """Elementwise a / b; b may be a scalar."""
    b = _binary_args(a, b, "div")
    if isinstance(b, Tensor):
        out, tape = _make_output(a.data / b.data, (a, b))
        if tape is not None:
            ad, bd = a.data, b.data
            tape.record(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))
    else:
        out, tape = _make_output(a.data / b, (a,))
        if tape is not None:
            tape.record(out, (a,), lambda g: (g / b,))
    return out


def absolute(a):
    """Elementwise |a|; subgradient 0 at 0."""
    out, tape = _make_output(np.abs(a.data), (a,))
    if tape is not None:
        sign = np.sign(a.data)
        tape.record(out, (a,), lambda g: (g * sign,))
    return out


def relu(a):
    """Elementwise max(0, a)."""
    out, tape = _make_output(np.maximum(a.data, 0), (a,))
    if tape is not None:
        mask = a.data > 0
        tape.record(out, (a,), lambda g: (g * mask,))
    return out


def mean_all(a):
    """Mean over all elements, as a scalar tensor."""
    out, tape = _make_output(np.mean(a.data), (a,))
    if tape is not None:
        n = a.data.size
        shape, dtype = a.data.shape, a.data.dtype

        def backward(g):
            return (np.broadcast_to(np.asarray(g, dtype=dtype) / n, shape),)

        tape.record(out, (a,), backward)
    return out


def sum_all(a):
    """Sum over all elements, as a scalar tensor."""
    out, tape = _make_output(np.sum(a.data), (a,))
    if tape is not None:
        shape, dtype = a.data.shape, a.data.dtype

        def backward(g):
            return (np.broadcast_to(np.asarray(g, dtype=dtype), shape),)

        tape.record(out, (a,), backward)
    return out


def channel_mean(a):
    """Mean over the channel axis of a (B, C, H, W) tensor, keeping the axis."""
    if a.ndim != 4:
        raise ShapeError(f"channel_mean expects a 4-D tensor, got {a.shape}")
    out, tape = _make_output(np.mean(a.data, axis=1, keepdims=True), (a,))
    if tape is not None:
        c = a.shape[1]

        def backward(g):
            return (np.broadcast_to(g / c, a.shape).copy(),)

        tape.record(out, (a,), backward)
    return out


def reshape(a, shape):
    """View a with a new shape (same element count)."""
    out, tape = _make_output(a.data.reshape(shape), (a,))
    if tape is not None:
        old = a.data.shape
        tape.record(out, (a,), lambda g: (g.reshape(old),))
    return out


def concat_channels(tensors):
    """Concatenate (B, C_i, H, W) tensors along the channel axis."""
    if not tensors:
        raise ShapeError("concat_channels needs at least one input")
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != 4 or first.ndim != 4:
            raise ShapeError("concat_channels expects 4-D tensors")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: non-channel dims differ ({first.shape} vs {t.shape})"
            )
    out, tape = _make_output(
        np.concatenate([t.data for t in tensors], axis=1), tuple(tensors)
    )
    if tape is not None:
        sizes = [t.shape[1] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

        tape.record(out, tuple(tensors), backward)
    return out


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


def _zero_pad_cbhw(x, padding):
    """Transpose (B, C, H, W) to zero-padded (C, B, H+2p, W+2p)."""
    b, c, h, w = x.shape
    xp = np.zeros((c, b, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x.transpose(1, 0, 2, 3)
    return xp


def _im2col(x, kh, kw, stride, padding):
    """Lower (B, C, H, W) to columns of shape (C*kh*kw, B*OH*OW).

    Columns are gathered tap by tap from a channel-major padded copy, so each
    copy runs along contiguous image rows instead of a 6-D strided gather.
    """
    b, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    xp = _zero_pad_cbhw(x, padding)
    cols = np.empty((c, kh * kw, b, oh, ow), dtype=x.dtype)
    for dy in range(kh):
        ys = slice(dy, dy + stride * oh, stride)
        for dx in range(kw):
            cols[:, dy * kw + dx] = xp[:, :, ys, dx : dx + stride * ow : stride]
    return cols.reshape(c * kh * kw, b * oh * ow), oh, ow


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of (B, C, H, W) with (OC, C, kh, kw) weights.

    Output spatial size is floor((H + 2*padding - kh) / stride) + 1 per axis.
    Differentiable in ``x``, ``weight``, and ``bias``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}"
        )
    b, c, h, w = x.shape
    oc, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(
            f"conv2d: weight expects {wc} input channels but input has {c}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({oc},)")

    w2 = weight.data.reshape(oc, c * kh * kw)
    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        oh, ow = xs.shape[2], xs.shape[3]
        cols = np.ascontiguousarray(xs.transpose(1, 0, 2, 3)).reshape(c, b * oh * ow)
    else:
        cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    y2 = w2 @ cols
    if bias is not None:
        y2 += bias.data[:, None]
    out_data = np.ascontiguousarray(
        y2.reshape(oc, b, oh, ow).transpose(1, 0, 2, 3)
    )

    inputs = (x, weight) if bias is None else (x, weight, bias)
    out, tape = _make_output(out_data, inputs)
    if tape is not None:

        def backward(g):
            gy2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, b * oh * ow)
            g_weight = (gy2 @ cols.T).reshape(weight.shape)
            g_bias = gy2.sum(axis=1) if bias is not None else None
            gcols = w2.T @ gy2
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = (
                    gcols.reshape(c, b, oh, ow).transpose(1, 0, 2, 3)
                )
            else:
                gx = _col2im(gcols, (b, c, h, w), kh, kw, stride, padding, oh, ow)
            if bias is None:
                return gx, g_weight
            return gx, g_weight, g_bias

        tape.record(out, inputs, backward)
    return out


def _col2im(gcols, x_shape, kh, kw, stride, padding, oh, ow):
    """Adjoint of _im2col: scatter column gradients back onto the input."""
    b, c, h, w = x_shape
    g6 = gcols.reshape(c, kh, kw, b, oh, ow)
    gxp = np.zeros((c, b, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    for dy in range(kh):
        ys = slice(dy, dy + stride * oh, stride)
        for dx in range(kw):
            gxp[:, :, ys, dx : dx + stride * ow : stride] += g6[:, dy, dx]
    if padding:
        gxp = gxp[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))


# --------------------------------------------------------------------------
# Batch normalization
# --------------------------------------------------------------------------


class BatchNormState:
    """Running statistics for one batch-norm layer (momentum 0.1)."""

    def __init__(self, channels, dtype=np.float32, momentum=0.1):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batch_norm(x, gamma, beta, state, training):
    """Per-channel normalization of a (B, C, H, W) tensor.

    Training mode normalizes with batch statistics and updates the running
    averages; eval mode uses the stored running statistics. Epsilon is fixed
    at 1e-5, so a zero-variance channel never divides by zero.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4-D tensor, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)"
        )

    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // c
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean.astype(
            state.running_mean.dtype
        )
        unbiased = var * (n / max(n - 1, 1))
        state.running_var = (1 - m) * state.running_var + m * unbiased.astype(
            state.running_var.dtype
        )
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
    out_data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    out, tape = _make_output(out_data, (x, gamma, beta))
    if tape is not None:
        n = x.data.size // c

        def backward(g):
            g_beta = g.sum(axis=axes)
            g_gamma = (g * xhat).sum(axis=axes)
            g_xhat = g * gamma.data[:, None, None]
            if training:
                s1 = g_xhat.sum(axis=axes)[:, None, None]
                s2 = (g_xhat * xhat).sum(axis=axes)[:, None, None]
                gx = (inv_std[:, None, None] / n) * (n * g_xhat - s1 - xhat * s2)
            else:
                gx = g_xhat * inv_std[:, None, None]
            return gx, g_gamma, g_beta

        tape.record(out, (x, gamma, beta), backward)
    return out


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------


def avg_pool2(x):
    """Halve H and W of a (B, C, H, W) tensor by 2x2 mean pooling."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2 expects a 4-D tensor, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out_data = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out, tape = _make_output(out_data, (x,))
    if tape is not None:

        def backward(g):
            g4 = (g / 4.0)[:, :, :, None, :, None]
            return (np.broadcast_to(g4, (b, c, h // 2, 2, w // 2, 2)).reshape(b, c, h, w).copy(),)

        tape.record(out, (x,), backward)
    return out


def _up2_rows(x):
    """Double axis 2 with 2x bilinear weights (align-corners false).

    Even output rows blend 0.25*previous + 0.75*current source row, odd rows
    0.75*current + 0.25*next, with edge rows clamped.
    """
    b, c, h, w = x.shape
    out = np.empty((b, c, 2 * h, w), dtype=x.dtype)
    even = out[:, :, 0::2]
    odd = out[:, :, 1::2]
    np.multiply(x, x.dtype.type(0.75), out=even)
    even[:, :, 1:] += 0.25 * x[:, :, :-1]
    even[:, :, 0] += 0.25 * x[:, :, 0]
    np.multiply(x, x.dtype.type(0.75), out=odd)
    odd[:, :, :-1] += 0.25 * x[:, :, 1:]
    odd[:, :, -1] += 0.25 * x[:, :, -1]
    return out


def _up2_rows_grad(g):
    """Adjoint of _up2_rows."""
    ge = g[:, :, 0::2]
    go = g[:, :, 1::2]
    gx = 0.75 * (ge + go)
    gx[:, :, :-1] += 0.25 * ge[:, :, 1:]
    gx[:, :, 0] += 0.25 * ge[:, :, 0]
    gx[:, :, 1:] += 0.25 * go[:, :, :-1]
    gx[:, :, -1] += 0.25 * go[:, :, -1]
    return gx


def _swap_hw(x):
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2))


def bilinear_upsample2(x):
    """Double H and W of a (B, C, H, W) tensor by bilinear interpolation.

    Uses the align-corners=false convention: output pixel j samples source
    coordinate (j + 0.5)/2 - 0.5 with edge clamping.
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample2 expects a 4-D tensor, got {x.shape}")
    b, c, h, w = x.shape
    out_data = _up2_axis_data(_up2_axis_data(x.data, 2), 3)
    out, tape = _make_output(out_data, (x,))
    if tape is not None:

        def backward(g):
            return (_up2_axis_grad(_up2_axis_grad(g, 3, w), 2, h),)

        tape.record(out, (x,), backward)
    return out


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


def finite_difference_check(f, x, eps=1e-5, max_coords=64, rng=None):
    """Compare analytic and central-difference gradients of a scalar function.

    ``f`` maps a tensor to a scalar tensor and must be deterministic. Returns
    the max over sampled coordinates of |analytic - numeric| / max(1, |numeric|);
    non-finite values anywhere make the check fail by returning inf.
    """
    x = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
               requires_grad=True)
    with Tape() as tape:
        y = f(x)
        tape.backward(y, params=[x])
    analytic = x.grad
    if analytic is None or not np.all(np.isfinite(analytic)):
        return math.inf

    coords = np.arange(x.data.size)
    if coords.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(coords, size=max_coords, replace=False)

    flat = x.data.reshape(-1)
    worst = 0.0
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = f(x).item()
        flat[idx] = orig - eps
        f_minus = f(x).item()
        flat[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            return math.inf
        numeric = (f_plus - f_minus) / (2 * eps)
        err = abs(analytic.reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def finite_difference_check_params(f, params, coords_per_param=5, eps=1e-5, rng=None):
    """Spot-check d f() / d param against central differences.

    ``f`` takes no arguments and evaluates the scalar loss from the current
    parameter values; ``params`` are float64 tensors. Returns the max relative
    error over the sampled coordinates.
    """
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        y = f()
        tape.backward(y, params=params)
    worst = 0.0
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            return math.inf
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        k = min(coords_per_param, flat.size)
        for idx in rng.choice(flat.size, size=k, replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = f().item()
            flat[idx] = orig - eps
            f_minus = f().item()
            flat[idx] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                return math.inf
            numeric = (f_plus - f_minus) / (2 * eps)
            err = abs(gflat[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
