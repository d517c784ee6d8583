"""Learned-step-size quantization (symmetric, signed codes).

``code = clamp(round(x / s), -Q_N, Q_P)`` with ``Q_N = 2**(b-1)`` and
``Q_P = 2**(b-1) - 1``; the dequantized value is ``code * s``.  The step
gradient follows LSQ: ``round(v) - v`` inside the range, ``-Q_N`` / ``Q_P`` at
the clamped ends, scaled by ``1 / sqrt(count * Q_P)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Var
from .nn.module import Module

__all__ = [
    "LsqParams", "lsq_quantize", "lsq_grads", "grad_scale", "lsq", "init_step",
    "LsqQuantizer", "attach_quantizers", "quantizers",
]


@dataclass
class LsqParams:
    step: np.ndarray
    bits: int = 4

    def __post_init__(self):
        self.step = np.asarray(self.step, dtype=np.float64)
        if self.bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {self.bits}")
        if not np.all(self.step > 0):
            raise ValueError("LSQ step size must be > 0")

    @property
    def q_n(self) -> int:
        return 2 ** (self.bits - 1)

    @property
    def q_p(self) -> int:
        return 2 ** (self.bits - 1) - 1


def _b(step: np.ndarray, ndim: int) -> np.ndarray:
    """Step broadcast over axis 0 when per-channel."""
    step = np.asarray(step)
    if step.ndim == 0 or step.size == 1:
        return step.reshape(())
    return step.reshape((-1,) + (1,) * (ndim - 1))


def lsq_quantize(x, params: LsqParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dequantized, integer codes)``."""
    x = np.asarray(x)
    s = _b(params.step, x.ndim)
    codes = np.clip(np.round(x / s), -params.q_n, params.q_p)
    dtype = np.result_type(x.dtype, np.float32)
    return (codes * s).astype(dtype), codes.astype(np.int32)


def grad_scale(count: int, bits: int) -> float:
    return 1.0 / math.sqrt(count * (2 ** (bits - 1) - 1))


def _step_terms(v: np.ndarray, q_n: int, q_p: int):
    low = v <= -q_n
    high = v >= q_p
    inside = ~(low | high)
    return inside, low, high, np.where(inside, np.round(v) - v, np.where(low, -q_n, q_p))


def lsq_grads(x, params: LsqParams, upstream, count: int | None = None):
    """``(grad_x, grad_s)`` for a scalar loss with ``d loss / d out = upstream``.

    ``count`` is the number of elements sharing one step (defaults to all of
    them for a per-tensor step, or the per-channel slice size).
    """
    x = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    s = _b(params.step, x.ndim)
    inside, _, _, ds = _step_terms(x / s, params.q_n, params.q_p)
    per_channel = params.step.size > 1
    if count is None:
        count = x[0].size if per_channel else x.size
    g = grad_scale(count, params.bits)
    grad_x = up * inside
    contrib = up * ds * g
    grad_s = contrib.reshape(x.shape[0], -1).sum(axis=1) if per_channel else np.asarray(contrib.sum())
    return grad_x, grad_s.reshape(params.step.shape)


def lsq(x, step, bits: int, count: int, frozen=None) -> Var:
    """Autograd LSQ op on ``x`` with step Var ``step`` (scalar or per axis-0 channel).

    Inside :func:`~instabnn.autograd.surrogate` and with ``frozen`` given as
    ``(inside, low, high, residual)``, the forward is ``x + s * residual`` inside
    the range and ``-Q_N * s`` / ``Q_P * s`` at the ends, which is the function
    whose step derivative LSQ uses (before gradient scaling).
    """
    x = ag.as_var(x)
    step = ag.as_var(step, x.dtype)
    q_n, q_p = 2 ** (bits - 1), 2 ** (bits - 1) - 1
    s = _b(step.data, x.ndim)
    v = x.data / s
    terms = _step_terms(v, q_n, q_p) if frozen is None else frozen
    inside, _, _, ds = terms
    if ag.surrogate_enabled() and frozen is not None:
        out = np.where(inside, x.data + s * ds, ds * s)
    else:
        out = np.clip(np.round(v), -q_n, q_p) * s
    g = grad_scale(count, bits)
    per_channel = step.size > 1

    def grad_fn(up):
        gs = up * ds * g
        gs = gs.reshape(x.shape[0], -1).sum(axis=1) if per_channel else gs.sum()
        return up * inside, np.asarray(gs).reshape(step.shape)
    return ag.make_op(out.astype(x.dtype), (x, step), grad_fn)


def init_step(x: np.ndarray, bits: int, per_channel: bool) -> np.ndarray:
    """``2 * mean|x| / sqrt(Q_P)``, per axis-0 channel or per tensor."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    m = a.reshape(a.shape[0], -1).mean(axis=1) if per_channel else np.asarray(a.mean())
    s = 2.0 * m / math.sqrt(2 ** (bits - 1) - 1)
    return np.maximum(s, 1e-8)


class LsqQuantizer(Module):
    """Quantizer with a learnable step, calibrated from the first tensor it sees.

    ``channels=None`` gives one step per tensor (activations, counted per
    sample); otherwise one step per axis-0 slice (weights).
    """

    _buffers = ("calibrated",)

    def __init__(self, bits: int = 4, channels: int | None = None, dtype=np.float32):
        if bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {bits}")
        self.bits = bits
        self.channels = channels
        shape = () if channels is None else (channels,)
        self.step = Parameter(np.ones(shape, dtype=dtype), floor=1e-8)
        self.calibrated = np.zeros(1, dtype=np.int32)
        self.enabled = True
        self.freeze = False
        self._frozen = None

    @property
    def params(self) -> LsqParams:
        return LsqParams(self.step.data.copy(), self.bits)

    def count(self, x) -> int:
        return int(np.prod(x.shape[1:]))

    def forward(self, x):
        x = ag.as_var(x)
        if not self.enabled:
            return x
        if not self.calibrated[0]:
            s = init_step(x.data, self.bits, self.channels is not None)
            self.step.data = np.asarray(s, dtype=self.step.dtype).reshape(self.step.shape)
            self.calibrated[0] = 1
        frozen = None
        if self.freeze:
            if self._frozen is None:
                s = _b(self.step.data, x.ndim)
                self._frozen = _step_terms(x.data / s, 2 ** (self.bits - 1), 2 ** (self.bits - 1) - 1)
            frozen = self._frozen
        return lsq(x, self.step, self.bits, self.count(x), frozen)


def attach_quantizers(model: Module, act_bits: int = 4, weight_bits: int = 8) -> int:
    """Put an activation quantizer in front of every cube and weight quantizers on SE FCs.

    Returns the number of quantizers inserted; nothing else in the model changes.
    """
    from .nn.layers import InstaPReLU, InstaTh, SEGate

    n = 0
    for m in list(model.modules()):
        if isinstance(m, (InstaTh, InstaPReLU)):
            m.cube_quant = LsqQuantizer(act_bits, dtype=m.beta.dtype)
            n += 1
        elif isinstance(m, SEGate):
            m.w1_quant = LsqQuantizer(weight_bits, m.hidden, m.w1.dtype)
            m.w2_quant = LsqQuantizer(weight_bits, m.channels, m.w1.dtype)
            n += 2
    return n


def quantizers(model: Module) -> list[tuple[str, LsqQuantizer]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, LsqQuantizer)]
