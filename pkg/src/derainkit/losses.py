"""Training losses and image-quality metrics (L1 - SSIM loss, PSNR, SSIM).

The structural similarity index follows the standard single-scale
formulation: an 11x11 Gaussian window with sigma 1.5, stability constants
C1 = 0.01^2 and C2 = 0.03^2 on a [0, 1] dynamic range, local statistics
taken over valid window positions only, computed per channel and averaged.
The same differentiable code path serves both training and evaluation, so
metric reports and loss values can never drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError

PSNR_CAP_DB = 100.0
_PSNR_MSE_FLOOR = 1e-10


@dataclass
class LossConfig:
    ssim_weight: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if self.ssim_weight < 0:
            raise ShapeError("ssim_weight must be >= 0")


DEFAULT_LOSS = LossConfig()


def gaussian_window(size, sigma, dtype=np.float64):
    """Normalized 1-D Gaussian window."""
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return (w / w.sum()).astype(dtype)


def _blur(x, window):
    """Per-channel valid-mode Gaussian blur of a (B, C, H, W) tensor."""
    b, c, h, w = x.shape
    n = window.shape[0]
    flat = ag.reshape(x, (b * c, 1, h, w))
    kv = Tensor(window.reshape(1, 1, n, 1).astype(x.dtype))
    kh = Tensor(window.reshape(1, 1, 1, n).astype(x.dtype))
    blurred = ag.conv2d(ag.conv2d(flat, kv), kh)
    return ag.reshape(blurred, (b, c, h - n + 1, w - n + 1))


def _check_pair(a, b, op_name):
    if a.shape != b.shape:
        raise ShapeError(f"{op_name}: shapes {a.shape} and {b.shape} differ")
    if a.ndim != 4:
        raise ShapeError(f"{op_name}: expected (B, C, H, W), got {a.shape}")


def ssim_map(a, b, cfg=DEFAULT_LOSS):
    """Local SSIM index map over valid window positions, differentiable."""
    _check_pair(a, b, "ssim_map")
    n = cfg.ssim_window
    if a.shape[2] < n or a.shape[3] < n:
        raise ShapeError(
            f"ssim needs spatial dims >= {n}, got {a.shape[2]}x{a.shape[3]}"
        )
    window = gaussian_window(n, cfg.ssim_sigma, dtype=a.dtype)
    mu_a = _blur(a, window)
    mu_b = _blur(b, window)
    mu_aa = ag.mul(mu_a, mu_a)
    mu_bb = ag.mul(mu_b, mu_b)
    mu_ab = ag.mul(mu_a, mu_b)
    var_a = ag.sub(_blur(ag.mul(a, a), window), mu_aa)
    var_b = ag.sub(_blur(ag.mul(b, b), window), mu_bb)
    cov = ag.sub(_blur(ag.mul(a, b), window), mu_ab)

    num = ag.mul(
        ag.add(ag.mul(mu_ab, 2.0), cfg.c1), ag.add(ag.mul(cov, 2.0), cfg.c2)
    )
    den = ag.mul(
        ag.add(ag.add(mu_aa, mu_bb), cfg.c1), ag.add(ag.add(var_a, var_b), cfg.c2)
    )
    return ag.div(num, den)


def ssim_index(a, b, cfg=DEFAULT_LOSS):
    """Mean SSIM between two [0, 1] images or batches, as a float."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b))
    return ag.mean_all(ssim_map(a, b, cfg)).item()


def l1_ssim_loss(pred, target, cfg=DEFAULT_LOSS):
    """Mean absolute error minus ssim_weight times mean SSIM (differentiable).

    Equal images give exactly -ssim_weight; with ssim_weight 0 this reduces
    to the plain mean L1 distance.
    """
    _check_pair(pred, target, "l1_ssim_loss")
    l1 = ag.mean_all(ag.absolute(ag.sub(pred, target)))
    if cfg.ssim_weight == 0:
        return l1
    ssim = ag.mean_all(ssim_map(pred, target, cfg))
    return ag.sub(l1, ag.mul(ssim, cfg.ssim_weight))


def cascade_loss(final, first, second, target, cfg=DEFAULT_LOSS):
    """Sum of the l1_ssim_loss of all three predicted images against target."""
    total = ag.add(
        l1_ssim_loss(final, target, cfg), l1_ssim_loss(first, target, cfg)
    )
    return ag.add(total, l1_ssim_loss(second, target, cfg))


def psnr(pred, target):
    """Peak signal-to-noise ratio in dB for [0, 1] data, capped at 100 dB."""
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"psnr: shapes {pred.shape} and {target.shape} differ")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse < _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return -10.0 * math.log10(mse)
