"""Kernel-prediction networks and the single-stage / cascaded deraining models.

The predictive network is an 8-block encoder-decoder with skip
concatenations and a linear 1x1 head that emits one 3x3 kernel per pixel and
color channel (27 output channels). Depth variants 49/33/17 use 3/2/1
convolutions per block; every convolution except the head is followed by
batch normalization and ReLU. Spatial size halves through blocks 2-5
(average pooling) and doubles through blocks 6-8 and the head (bilinear
upsampling before the convolutions), so inputs must be multiples of 16.

The cascade runs a first prediction stage, derives a per-pixel uncertainty
map from the mean of the predicted kernel weights, feeds the first output
and that map to a second predictive network, and fuses both derained images
with a 3x3 convolution. Each stage can filter at several dilations
(weight-sharing multi-scale) and fuse the per-scale outputs with its own
3x3 convolution initialized to plain averaging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .errors import ShapeError
from .filtering import apply_kernel_field, averaging_fusion, fuse, uncertainty_map

BASE_WIDTHS = (64, 128, 256, 512, 512, 512, 256)
_CONVS_PER_BLOCK = {49: 3, 33: 2, 17: 1}
SPATIAL_MULTIPLE = 16  # four 2x poolings


@dataclass(frozen=True)
class NetConfig:
    """Structure of one predictive network."""

    depth: int = 17
    width_scale: float = 1.0
    in_channels: int = 3
    out_channels: int = 27

    def __post_init__(self):
        if self.depth not in _CONVS_PER_BLOCK:
            raise ShapeError(f"depth must be one of {sorted(_CONVS_PER_BLOCK)}")
        if min(self.block_channels) < 1:
            raise ShapeError(
                f"width_scale {self.width_scale} yields a zero-channel block"
            )

    @classmethod
    def tiny(cls, in_channels=3):
        """17-layer structure at 1/8 width; the desk-scale default."""
        return cls(depth=17, width_scale=0.125, in_channels=in_channels)

    @property
    def convs_per_block(self):
        return _CONVS_PER_BLOCK[self.depth]

    @property
    def block_channels(self):
        """Output channels of blocks 1-8 (block 8 emits the kernel channels)."""
        scaled = [int(round(w * self.width_scale)) for w in BASE_WIDTHS]
        return tuple(scaled) + (self.out_channels,)


class _ConvUnit:
    """conv 3x3 -> batch norm -> ReLU."""

    def __init__(self, name, in_ch, out_ch, rng, dtype):
        self.name = name
        self.weight = _he_uniform(rng, (out_ch, in_ch, 3, 3), dtype)
        self.bias = ag.parameter(np.zeros(out_ch), dtype=dtype)
        self.gamma = ag.parameter(np.ones(out_ch), dtype=dtype)
        self.beta = ag.parameter(np.zeros(out_ch), dtype=dtype)
        self.bn_state = BatchNormState(out_ch, dtype=dtype)

    def forward(self, x, training):
        x = ag.conv2d(x, self.weight, self.bias, stride=1, padding=1)
        x = ag.batch_norm(x, self.gamma, self.beta, self.bn_state, training)
        return ag.relu(x)

    def parameters(self):
        return [
            (f"{self.name}.weight", self.weight),
            (f"{self.name}.bias", self.bias),
            (f"{self.name}.gamma", self.gamma),
            (f"{self.name}.beta", self.beta),
        ]


def _he_uniform(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    return ag.parameter(rng.uniform(-limit, limit, size=shape), dtype=dtype)


class PredictiveNet:
    """Encoder-decoder network mapping an image to per-pixel kernel fields.

    ``head_channels`` normally is (out_channels,); the multi-head benchmark
    variant passes one entry per scale and gets one kernel field per head.
    """

    def __init__(self, cfg, seed=0, dtype=np.float32, head_channels=None):
        self.cfg = cfg
        self.dtype = dtype
        self.head_channels = tuple(head_channels or (cfg.out_channels,))
        rng = np.random.default_rng(seed)
        widths = cfg.block_channels

        self.blocks = []
        in_ch = cfg.in_channels
        # Decoder blocks consume the concatenation of the previous output and
        # an encoder skip: block7 <- [x6, x4], block8 <- [x7, x3].
        skip_of = {7: 4, 8: 3}
        for i in range(1, 9):
            block_in = in_ch + (widths[skip_of[i] - 1] if i in skip_of else 0)
            convs = []
            for j in range(cfg.convs_per_block):
                convs.append(
                    _ConvUnit(
                        f"block{i}.conv{j}",
                        block_in if j == 0 else widths[i - 1],
                        widths[i - 1],
                        rng,
                        dtype,
                    )
                )
            self.blocks.append(convs)
            in_ch = widths[i - 1]

        head_in = widths[7] + widths[1]  # [x8, x2]
        self.heads = []
        for h, oc in enumerate(self.head_channels):
            weight = _he_uniform(rng, (oc, head_in, 1, 1), dtype)
            bias = ag.parameter(np.zeros(oc), dtype=dtype)
            self.heads.append((f"head{h}.weight", weight, f"head{h}.bias", bias))

    def forward(self, x, training=False):
        """Return one kernel field per head at the input resolution."""
        if x.ndim != 4:
            raise ShapeError(f"expected a (B, C, H, W) input, got {x.shape}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"network expects {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        h, w = x.shape[2], x.shape[3]
        if h % SPATIAL_MULTIPLE or w % SPATIAL_MULTIPLE:
            raise ShapeError(
                f"input spatial dims must be multiples of {SPATIAL_MULTIPLE}, got {h}x{w}"
            )

        feats = []
        out = x
        for i, convs in enumerate(self.blocks, start=1):
            if 2 <= i <= 5:
                out = ag.avg_pool2(out)
            elif i >= 6:
                if i == 7:
                    out = ag.concat_channels([out, feats[3]])
                elif i == 8:
                    out = ag.concat_channels([out, feats[2]])
                out = ag.bilinear_upsample2(out)
            for conv in convs:
                out = conv.forward(out, training)
            feats.append(out)

        out = ag.concat_channels([feats[7], feats[1]])
        out = ag.bilinear_upsample2(out)
        return [
            ag.conv2d(out, weight, bias)
            for (_, weight, _, bias) in self.heads
        ]

    def predict_kernels(self, x, training=False):
        """Single-head convenience: the (B, 27, H, W) kernel field for x."""
        return self.forward(x, training)[0]

    def parameters(self):
        params = []
        for convs in self.blocks:
            for conv in convs:
                params.extend(conv.parameters())
        for wname, weight, bname, bias in self.heads:
            params.append((wname, weight))
            params.append((bname, bias))
        return params

    def bn_states(self):
        return [
            (f"{conv.name}.bn", conv.bn_state)
            for convs in self.blocks
            for conv in convs
        ]

    def force_identity_kernels(self):
        """Make every head emit constant center-delta kernels (debug aid)."""
        for _, weight, _, bias in self.heads:
            weight.data[:] = 0
            taps = bias.shape[0] // 3
            bias.data[:] = 0
            for c in range(3):
                bias.data[c * taps + taps // 2] = 1.0


def num_parameters(obj):
    """Total trainable scalar count of anything exposing .parameters()."""
    return sum(int(np.prod(t.shape)) for _, t in obj.parameters())


def _multi_scale_filter(image, kernels, scales, fusion):
    outs = [
        apply_kernel_field(image, kernels, dilation=s) for s in range(1, scales + 1)
    ]
    if scales == 1:
        return outs[0]
    return fuse(outs, fusion[0], fusion[1])


@dataclass
class CascadeResult:
    final: Tensor
    first: Tensor
    second: Tensor
    uncertainty: Tensor


class SingleStageModel:
    """One predictive network plus (optional) multi-scale filtering."""

    def __init__(self, net, scales=1):
        self.net = net
        self.scales = scales
        self.ms_fusion = (
            averaging_fusion(scales, dtype=net.dtype) if scales > 1 else None
        )

    def derain(self, image, training=False):
        kernels = self.net.predict_kernels(image, training)
        out = _multi_scale_filter(image, kernels, self.scales, self.ms_fusion)
        return out, kernels

    def parameters(self):
        params = [("net." + n, t) for n, t in self.net.parameters()]
        if self.ms_fusion is not None:
            params.append(("ms_fusion.weight", self.ms_fusion[0]))
            params.append(("ms_fusion.bias", self.ms_fusion[1]))
        return params

    def bn_states(self):
        return [("net." + n, s) for n, s in self.net.bn_states()]


class CascadeModel:
    """Two-stage predictive filtering with uncertainty-guided refinement.

    Stage one filters the input with kernels from ``phi1``. Stage two sees the
    stage-one output plus (when ``use_uncertainty``) the per-pixel mean of the
    stage-one kernel weights, predicts refinement kernels with ``phi2``, and
    filters again. A 3x3 convolution fuses both derained images.
    """

    def __init__(self, phi1, phi2, scales=1, use_uncertainty=True):
        expected = 3 + (1 if use_uncertainty else 0)
        if phi2.cfg.in_channels != expected:
            raise ShapeError(
                f"phi2 must take {expected} input channels, got {phi2.cfg.in_channels}"
            )
        self.phi1 = phi1
        self.phi2 = phi2
        self.scales = scales
        self.use_uncertainty = use_uncertainty
        dtype = phi1.dtype
        self.ms_fusion1 = averaging_fusion(scales, dtype=dtype) if scales > 1 else None
        self.ms_fusion2 = averaging_fusion(scales, dtype=dtype) if scales > 1 else None
        self.fusion = averaging_fusion(2, dtype=dtype)

    def derain(self, image, training=False):
        kernels1 = self.phi1.predict_kernels(image, training)
        first = _multi_scale_filter(image, kernels1, self.scales, self.ms_fusion1)
        umap = uncertainty_map(kernels1)
        if self.use_uncertainty:
            second_in = ag.concat_channels([first, umap])
        else:
            second_in = first
        kernels2 = self.phi2.predict_kernels(second_in, training)
        second = _multi_scale_filter(first, kernels2, self.scales, self.ms_fusion2)
        final = fuse([first, second], self.fusion[0], self.fusion[1])
        return CascadeResult(final=final, first=first, second=second, uncertainty=umap)

    def first_stage_parameters(self):
        params = [("phi1." + n, t) for n, t in self.phi1.parameters()]
        if self.ms_fusion1 is not None:
            params.append(("ms_fusion1.weight", self.ms_fusion1[0]))
            params.append(("ms_fusion1.bias", self.ms_fusion1[1]))
        return params

    def parameters(self):
        params = self.first_stage_parameters()
        params.extend(("phi2." + n, t) for n, t in self.phi2.parameters())
        if self.ms_fusion2 is not None:
            params.append(("ms_fusion2.weight", self.ms_fusion2[0]))
            params.append(("ms_fusion2.bias", self.ms_fusion2[1]))
        params.append(("fusion.weight", self.fusion[0]))
        params.append(("fusion.bias", self.fusion[1]))
        return params

    def bn_states(self):
        states = [("phi1." + n, s) for n, s in self.phi1.bn_states()]
        states.extend(("phi2." + n, s) for n, s in self.phi2.bn_states())
        return states


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a model deterministically."""

    cascade: bool = True
    use_uncertainty: bool = True
    depth_first: int = 17
    depth_second: int = 17
    width_scale: float = 0.125
    scales: int = 4

    @classmethod
    def tiny(cls, **overrides):
        """Desk-scale default: tiny nets in both stages, 4 scales."""
        return cls(**overrides)

    @classmethod
    def full_scale(cls):
        """The selected large configuration: 49-layer first stage, 17-layer
        second stage, full width, 4 scales."""
        return cls(depth_first=49, depth_second=17, width_scale=1.0, scales=4)

    def build(self, seed=0, dtype=np.float32):
        ss = np.random.SeedSequence(seed)
        seeds = ss.spawn(2)
        cfg1 = NetConfig(
            depth=self.depth_first, width_scale=self.width_scale, in_channels=3
        )
        phi1 = PredictiveNet(cfg1, seed=seeds[0], dtype=dtype)
        if not self.cascade:
            return SingleStageModel(phi1, scales=self.scales)
        cfg2 = NetConfig(
            depth=self.depth_second,
            width_scale=self.width_scale,
            in_channels=4 if self.use_uncertainty else 3,
        )
        phi2 = PredictiveNet(cfg2, seed=seeds[1], dtype=dtype)
        return CascadeModel(
            phi1, phi2, scales=self.scales, use_uncertainty=self.use_uncertainty
        )

    def to_dict(self):
        return {
            "cascade": self.cascade,
            "use_uncertainty": self.use_uncertainty,
            "depth_first": self.depth_first,
            "depth_second": self.depth_second,
            "width_scale": self.width_scale,
            "scales": self.scales,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            cascade=_as_bool(d["cascade"]),
            use_uncertainty=_as_bool(d["use_uncertainty"]),
            depth_first=int(d["depth_first"]),
            depth_second=int(d["depth_second"]),
            width_scale=float(d["width_scale"]),
            scales=int(d["scales"]),
        )


def _as_bool(v):
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")
