"""Trainable layers built on :mod:`instabnn.autograd`.

Activation modules record their last input/output into ``_capture`` when a
dict is installed there (see :mod:`instabnn.diagnostics`).
"""
from __future__ import annotations

import math

import numpy as np

from .. import autograd as ag
from ..autograd import Parameter, Var
from ..bitops import pack, xnor_popcount_conv2d
from ..stats import NormStats
from .module import Module

__all__ = [
    "Conv2d", "BinaryConv2d", "BatchNorm2d", "Normalize", "Linear", "AvgPool", "MaxPool",
    "RSign", "RPReLU", "SEGate", "InstaTh", "InstaPReLU", "prelu",
]


def _ch(p: Var) -> Var:
    return ag.reshape(p, (1, -1, 1, 1))


def prelu(u, slope) -> Var:
    """``u`` where ``u >= 0`` else ``slope * u``; ``slope`` broadcasts per channel."""
    return ag.relu(u) - slope * ag.relu(-u)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, dtype=np.float32):
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = Parameter(np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype), decay=True)

    def reset_parameters(self, rng):
        fan_in = self.in_ch * self.kernel * self.kernel
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), self.weight.shape)
        self.weight.data = w.astype(self.weight.dtype)

    def forward(self, x):
        return ag.conv2d(x, self.weight, self.stride, self.padding)


class BinaryConv2d(Conv2d):
    """3×3 convolution over ±1 inputs.

    Stage 1 keeps real weights; stage 2 binarizes them (``mean|w| * sign(w)``)
    with latent weights clipped to [-1, 1] by the optimizer.  With
    ``use_bitops`` set, eval-mode forwards run the packed XNOR kernel.
    """

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, binary_weights=True,
                 weight_scale=True, dtype=np.float32):
        super().__init__(in_ch, out_ch, kernel, stride, padding, dtype)
        self.binary_weights = binary_weights
        self.weight_scale = weight_scale
        self.use_bitops = False
        self.weight.clip = 1.0 if binary_weights else None

    def reset_parameters(self, rng):
        fan_in = self.in_ch * self.kernel * self.kernel
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), self.weight.shape)
        self.weight.data = np.clip(w, -1, 1).astype(self.weight.dtype)

    def effective_weight(self) -> Var:
        if self.binary_weights:
            return ag.binarize_weights(self.weight, self.weight_scale)
        return self.weight

    def forward(self, x):
        if self.use_bitops and self.binary_weights and not self.training and not ag.surrogate_enabled():
            return self._forward_packed(ag.as_var(x))
        return ag.conv2d(x, self.effective_weight(), self.stride, self.padding)

    def _forward_packed(self, x: Var) -> Var:
        w = self.weight.data
        w_sign = np.where(w >= 0, 1, -1).astype(np.float32)
        scale = (np.abs(w).reshape(w.shape[0], -1).mean(axis=1)
                 if self.weight_scale else np.ones(w.shape[0]))
        out = xnor_popcount_conv2d(pack(x.data), pack(w_sign), None, scale.astype(np.float32),
                                   stride=self.stride, padding=self.padding)
        return Var(out.astype(x.dtype))


class BatchNorm2d(Module):
    def __init__(self, channels, affine=True, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.stats = NormStats.create(channels, dtype=dtype, momentum=momentum, eps=eps)
        self.affine = affine
        if affine:
            self.weight = Parameter(np.ones(channels, dtype=dtype))
            self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def normalize(self, x) -> Var:
        x = ag.as_var(x)
        st = self.stats
        if self.training:
            xhat, mu, var = ag.batch_norm_train(x, st.eps)
            st.update(mu, var)
            return xhat
        if not st.initialized:
            raise RuntimeError("eval-mode normalization needs running stats "
                               "(run a train-mode pass or load a checkpoint first)")
        inv = (1.0 / np.sqrt(st.running_var.astype(np.float64) + st.eps)).astype(x.dtype)
        return (x - st.running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)

    def forward(self, x):
        out = self.normalize(x)
        if self.affine:
            out = out * _ch(self.weight) + _ch(self.bias)
        return out


class Normalize(BatchNorm2d):
    """Batch normalization without affine terms."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__(channels, affine=False, momentum=momentum, eps=eps, dtype=dtype)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, dtype=np.float32):
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(np.zeros((out_features, in_features), dtype=dtype), decay=True)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def reset_parameters(self, rng):
        bound = 1.0 / math.sqrt(self.in_features)
        self.weight.data = rng.uniform(-bound, bound, self.weight.shape).astype(self.weight.dtype)

    def forward(self, x):
        out = ag.matmul(x, ag.transpose(self.weight))
        return out + self.bias if self.bias is not None else out


class AvgPool(Module):
    def __init__(self, k=2):
        self.k = k

    def forward(self, x):
        return ag.avg_pool2d(x, self.k)


class MaxPool(Module):
    def __init__(self, k=3, stride=2, padding=1):
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, x):
        return ag.max_pool2d(x, self.k, self.stride, self.padding)


class _Captures(Module):
    _capture = None

    def _record(self, **tensors):
        if self._capture is not None:
            self._capture.update({k: (v.data if isinstance(v, Var) else v) for k, v in tensors.items()})


class RSign(_Captures):
    """Sign with a learnable per-channel threshold; optional no-affine normalization first."""

    kind = "rsign"

    def __init__(self, channels, ste="clip1", normalize=False, dtype=np.float32):
        self.channels, self.ste = channels, ste
        self.norm = Normalize(channels, dtype=dtype) if normalize else None
        self.alpha = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        xt = self.norm(x) if self.norm is not None else ag.as_var(x)
        th = _ch(self.alpha)
        out = ag.sign_ste(xt - th, self.ste)
        self._record(input=x, compared=xt, threshold=np.broadcast_to(th.data, (xt.shape[0], self.channels, 1, 1)),
                     output=out)
        return out


class RPReLU(_Captures):
    """PReLU with learnable x- and y-shifts; optional no-affine normalization first."""

    kind = "rprelu"

    def __init__(self, channels, slope_init=0.25, normalize=False, dtype=np.float32):
        self.channels = channels
        self.norm = Normalize(channels, dtype=dtype) if normalize else None
        self.x_shift = Parameter(np.zeros(channels, dtype=dtype))
        self.slope = Parameter(np.full(channels, slope_init, dtype=dtype))
        self.y_shift = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        xt = self.norm(x) if self.norm is not None else ag.as_var(x)
        out = prelu(xt - _ch(self.x_shift), _ch(self.slope)) + _ch(self.y_shift)
        self._record(input=x, compared=xt, output=out)
        return out


class SEGate(Module):
    """Squeeze-excitation gate producing a bounded per-(n, c) value.

    ``bound(W2 @ relu(W1 @ GAP(x)))`` with hidden width ``ceil(C / r)``.
    """

    def __init__(self, channels, ratio=16, bound="tanh3", dtype=np.float32):
        if bound not in ("sigmoid", "tanh", "tanh3"):
            raise ValueError(f"SE bound must be sigmoid, tanh or tanh3, got {bound!r}")
        self.channels, self.ratio, self.bound = channels, ratio, bound
        self.hidden = max(1, -(-channels // ratio))
        self.w1 = Parameter(np.zeros((self.hidden, channels), dtype=dtype), decay=True)
        self.w2 = Parameter(np.zeros((channels, self.hidden), dtype=dtype), decay=True)
        self.w1_quant = None
        self.w2_quant = None

    def reset_parameters(self, rng):
        for p, fan_in in ((self.w1, self.channels), (self.w2, self.hidden)):
            bound = 1.0 / math.sqrt(fan_in)
            p.data = rng.uniform(-bound, bound, p.shape).astype(p.dtype)

    def weights(self) -> tuple[Var, Var]:
        w1 = self.w1_quant(self.w1) if self.w1_quant is not None else self.w1
        w2 = self.w2_quant(self.w2) if self.w2_quant is not None else self.w2
        return w1, w2

    def forward(self, x) -> Var:
        x = ag.as_var(x)
        n, c = x.shape[:2]
        w1, w2 = self.weights()
        squeezed = ag.reshape(ag.mean(x, axis=(2, 3)), (n, c))
        hidden = ag.relu(ag.matmul(squeezed, ag.transpose(w1)))
        return ag.bounded(ag.matmul(hidden, ag.transpose(w2)), self.bound)


class _InstaBase(_Captures):
    def __init__(self, channels, gate, beta_init, dtype):
        self.channels = channels
        self.norm = Normalize(channels, dtype=dtype)
        self.gate = gate
        if gate is None:
            self.alpha = Parameter(np.zeros(channels, dtype=dtype))
        self.beta = Parameter(np.full(channels, beta_init, dtype=dtype))
        self.cube_quant = None

    def _alpha_term(self, x) -> Var:
        if self.gate is None:
            return _ch(self.alpha)
        a = self.gate(x)
        return ag.reshape(a, (a.shape[0], a.shape[1], 1, 1))

    def _stat_input(self, xt) -> Var:
        return self.cube_quant(xt) if self.cube_quant is not None else xt


class InstaTh(_InstaBase):
    """Binary activation with an instance-aware threshold on normalized input.

    For the default ``cube`` variant: ``TH = alpha + beta * E[x~^3]`` per
    (instance, channel), output ``+1`` where ``x~ - TH >= 0``.  With a
    ``gate`` the alpha term comes from an :class:`SEGate` on the raw input.
    """

    kind = "insta_th"

    def __init__(self, channels, variant="cube", ste="clip1", gate=None, beta_init=0.0,
                 dtype=np.float32):
        super().__init__(channels, gate, beta_init, dtype)
        from ..stats import THRESHOLD_VARIANTS
        if variant not in THRESHOLD_VARIANTS:
            raise ValueError(f"unknown threshold variant {variant!r}; expected one of {THRESHOLD_VARIANTS}")
        self.variant, self.ste = variant, ste
        if variant in ("mean_skew", "mean_skew_var"):
            self.gamma = Parameter(np.zeros(channels, dtype=dtype))

    def threshold(self, x, xt) -> Var:
        q = self._stat_input(xt)
        alpha = self._alpha_term(x)
        beta = _ch(self.beta)
        v = self.variant
        if v == "cube":
            return alpha + beta * ag.mean(q ** 3, axis=(2, 3), keepdims=True)
        m1 = ag.mean(q, axis=(2, 3), keepdims=True)
        if v == "mean":
            return alpha + beta * m1
        var = ag.mean((q - m1) ** 2, axis=(2, 3), keepdims=True)
        if v == "mean_var":
            return alpha + beta * m1 * var
        skew = ag.skewness(q)
        if v == "mean_skew":
            return alpha + beta * m1 + _ch(self.gamma) * skew
        return alpha + (beta * m1 + _ch(self.gamma) * skew) * var

    def forward(self, x):
        xt = self.norm(x)
        th = self.threshold(x, xt)
        # x~ + TH' >= 0 with TH' = -TH
        out = ag.sign_ste(xt + (-th), self.ste)
        self._record(input=x, compared=xt, threshold=th, output=out)
        return out


class InstaPReLU(_InstaBase):
    """PReLU whose x-shift is ``alpha + bound(beta * E[x~^3])`` on normalized input.

    The per-channel y-shift of RPReLU is kept and added after the PReLU.
    """

    kind = "insta_prelu"

    def __init__(self, channels, bound="tanh3", gate=None, beta_init=0.0, slope_init=0.25,
                 dtype=np.float32):
        super().__init__(channels, gate, beta_init, dtype)
        if bound not in ("sigmoid", "tanh", "tanh3"):
            raise ValueError(f"INSTA-PReLU bound must be sigmoid, tanh or tanh3, got {bound!r}")
        self.bound = bound
        self.slope = Parameter(np.full(channels, slope_init, dtype=dtype))
        self.y_shift = Parameter(np.zeros(channels, dtype=dtype))

    def threshold(self, x, xt) -> Var:
        q = self._stat_input(xt)
        m3 = ag.mean(q ** 3, axis=(2, 3), keepdims=True)
        return self._alpha_term(x) + ag.bounded(_ch(self.beta) * m3, self.bound)

    def forward(self, x):
        xt = self.norm(x)
        th = self.threshold(x, xt)
        out = prelu(xt - th, _ch(self.slope)) + _ch(self.y_shift)
        self._record(input=x, compared=xt, threshold=th, output=out)
        return out
