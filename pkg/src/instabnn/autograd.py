"""Small reverse-mode autodiff over numpy arrays.

Every op returns a :class:`Var`.  When any input requires a gradient the new
node records its parents and a closure mapping the upstream gradient to one
gradient per parent; together these links form the recorded graph that
:func:`backward` walks once and then releases.

Sign-type ops use straight-through estimators in the backward pass.  Inside
:func:`surrogate` their forward output is replaced by the smooth function
whose derivative the estimator is, which lets finite differences check the
gradient of everything upstream of a binarization.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .tensor_core import conv_output_size, im2col

__all__ = [
    "Var", "Parameter", "backward", "no_grad", "grad_enabled", "surrogate", "surrogate_enabled",
    "make_op", "as_var", "add", "sub", "mul", "div", "neg", "power", "exp", "log", "tanh",
    "sigmoid", "relu", "bounded", "transpose", "matmul", "sum", "mean", "reshape", "concat", "conv2d",
    "avg_pool2d", "max_pool2d", "global_avg_pool", "batch_norm_train", "sign_ste", "binarize_weights",
    "cross_entropy", "skewness", "STE_MODES", "BOUNDS",
]

STE_MODES = ("clip1", "bireal_poly")
BOUNDS = ("sigmoid", "tanh", "tanh3", "none")

_state = {"grad": True, "surrogate": False}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def surrogate():
    """Replace STE forwards by their smooth surrogates (gradient checking only)."""
    prev = _state["surrogate"]
    _state["surrogate"] = True
    try:
        yield
    finally:
        _state["surrogate"] = prev


def surrogate_enabled() -> bool:
    return _state["surrogate"]


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._grad_fn = None
        self._consumed = False
        self.name = name

    shape = property(lambda self: self.data.shape)
    dtype = property(lambda self: self.data.dtype)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self, grad=None):
        backward(self, grad)


class Parameter(Var):
    """Trainable leaf.

    ``decay`` marks weights subject to weight decay; ``clip`` and ``floor`` are
    applied by the optimizer after each step.
    """

    __slots__ = ("decay", "clip", "floor")

    def __init__(self, data, name: str | None = None, decay: bool = False, clip: float | None = None,
                 floor: float | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)
        self.decay = decay
        self.clip = clip
        self.floor = floor


def as_var(x, dtype=None) -> Var:
    if isinstance(x, Var):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Var(arr)


def _dtype_of(*xs):
    for x in xs:
        if isinstance(x, Var) and np.issubdtype(x.dtype, np.floating):
            return x.dtype
    return None


def _coerce(a, b):
    dt = _dtype_of(a, b)
    return as_var(a, dt), as_var(b, dt)


def make_op(data, parents: Sequence[Var], grad_fn: Callable) -> Var:
    """Wrap ``data`` as the output of an op over ``parents``.

    ``grad_fn(g)`` returns one gradient (or ``None``) per parent.
    """
    out = Var(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Var, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The graph is released afterwards; a second call on the same output raises.
    """
    if not isinstance(loss, Var):
        raise TypeError("backward expects a Var")
    if loss._consumed or (loss._grad_fn is None and not loss.requires_grad):
        raise RuntimeError("backward called without a recorded forward pass "
                           "(or the graph was already consumed)")
    if grad is None:
        if loss.size != 1:
            raise ValueError("backward on a non-scalar output needs an explicit gradient")
        grad = np.ones_like(loss.data)
    grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)

    order: list[Var] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._grad_fn is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            pgrads = node._grad_fn(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg, dtype=p.dtype), p.shape)
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
        node._parents = ()
        node._grad_fn = None
        node._consumed = True


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Var:
    a, b = _coerce(a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    a, b = _coerce(a, b)
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Var:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Var:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return make_op(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a) -> Var:
    a = as_var(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Var:
    a = as_var(a)
    d = a.data
    if p == 3:
        out = d * d * d
        return make_op(out, (a,), lambda g: (g * 3 * d * d,))
    if p == 2:
        return make_op(d * d, (a,), lambda g: (g * 2 * d,))
    out = d ** p
    return make_op(out, (a,), lambda g: (g * p * d ** (p - 1),))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = as_var(a)
    d = a.data
    return make_op(np.log(d), (a,), lambda g: (g / d,))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a) -> Var:
    a = as_var(a)
    d = a.data
    out = np.where(d >= 0, 1 / (1 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1 + np.exp(-np.abs(d))))
    out = out.astype(d.dtype, copy=False)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def bounded(a, kind: str) -> Var:
    """Bounded nonlinearity: ``sigmoid``, ``tanh``, ``tanh3`` = 3*tanh(x/3), or ``none``."""
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "tanh3":
        return tanh(a * (1 / 3)) * 3
    if kind == "none":
        return as_var(a)
    raise ValueError(f"unknown bound {kind!r}; expected one of {BOUNDS}")


# ---------------------------------------------------------------- reductions / shape

def sum(a, axis=None, keepdims=False) -> Var:  # noqa: A001 - mirrors numpy
    a = as_var(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return make_op(out, (a,), grad_fn)


def mean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    n = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Var:
    a = as_var(a)
    orig = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(xs: Sequence[Var], axis: int = 1) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return make_op(np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def transpose(a) -> Var:
    a = as_var(a)
    return make_op(a.data.T, (a,), lambda g: (g.T,))


def matmul(a, b) -> Var:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------- conv / pooling

def _col2im(dcols: np.ndarray, x_shape, kh, kw, stride, padding) -> np.ndarray:
    n, c, h, w = x_shape
    _, ho, wo = dcols.shape[:3]
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    dct = dcols.transpose(0, 3, 4, 5, 1, 2)  # N, C, kh, kw, Ho, Wo
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dct[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def _conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    """Input gradient as a stride-1 correlation of the dilated, padded upstream
    gradient with the flipped, channel-swapped kernel."""
    n, c, h, wd = x_shape
    _, o, ho, wo = g.shape
    kh, kw = w.shape[2:]
    if stride > 1:
        gd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    # rows/cols of the input that no output window reached
    rh = h + 2 * padding - kh - (ho - 1) * stride
    rw = wd + 2 * padding - kw - (wo - 1) * stride
    ph, pw = kh - 1 - padding, kw - 1 - padding
    gd = np.pad(gd, ((0, 0), (0, 0), (ph, ph + rh), (pw, pw + rw)))
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, -1)
    cols = im2col(gd, kh, kw, 1, 0).reshape(n * h * wd, o * kh * kw)
    return (cols @ wt.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Var:
    x, w = _coerce(x, w)
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {cw}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols2 = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    else:
        cols2 = im2col(x.data, kh, kw, stride, padding).reshape(n * ho * wo, c * kh * kw)
    w2 = w.data.reshape(o, -1)
    out = (cols2 @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if kh == kw == 1 and stride == 1 and padding == 0:
                gx = (g2 @ w2).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
            elif padding <= min(kh, kw) - 1:
                gx = _conv_input_grad(g, w.data, x.shape, stride, padding)
            else:
                dcols = g2 @ w2
                gx = _col2im(dcols.reshape(n, ho, wo, c, kh, kw), x.shape, kh, kw, stride, padding)
        return gx, gw
    return make_op(out, (x, w), grad_fn)


def avg_pool2d(x, k: int) -> Var:
    """Non-overlapping ``k``×``k`` average pooling; ragged edges average the valid part."""
    x = as_var(x)
    n, c, h, w = x.shape
    ho, wo = -(-h // k), -(-w // k)
    ph, pw = ho * k - h, wo * k - w
    d = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw))) if (ph or pw) else x.data
    count = np.full((ho, wo), k * k, dtype=x.dtype)
    if ph or pw:
        ones = np.pad(np.ones((h, w), dtype=x.dtype), ((0, ph), (0, pw)))
        count = ones.reshape(ho, k, wo, k).sum(axis=(1, 3))
    out = d.reshape(n, c, ho, k, wo, k).sum(axis=(3, 5)) / count

    def grad_fn(g):
        gg = (g / count)[:, :, :, None, :, None]
        gx = np.broadcast_to(gg, (n, c, ho, k, wo, k)).reshape(n, c, ho * k, wo * k)
        return (np.ascontiguousarray(gx[:, :, :h, :w]),)
    return make_op(out.astype(x.dtype, copy=False), (x,), grad_fn)


def max_pool2d(x, k: int = 3, stride: int = 2, padding: int = 1) -> Var:
    x = as_var(x)
    n, c, h, w = x.shape
    cols = im2col(x.data, k, k, stride, padding, pad_value=-np.inf)  # N,Ho,Wo,C,k,k
    _, ho, wo = cols.shape[:3]
    flat = cols.reshape(n, ho, wo, c, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0].transpose(0, 3, 1, 2)

    def grad_fn(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g.transpose(0, 2, 3, 1)[..., None], axis=-1)
        return (_col2im(dflat.reshape(n, ho, wo, c, k, k), x.shape, k, k, stride, padding),)
    return make_op(np.ascontiguousarray(out), (x,), grad_fn)


def global_avg_pool(x) -> Var:
    return mean(x, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------- normalization

def batch_norm_train(x, eps: float):
    """Per-channel batch normalization without affine terms.

    Returns ``(normalized Var, batch_mean, batch_var)``; the batch statistics
    are population statistics over N*H*W, returned as float64 arrays.
    """
    x = as_var(x)
    d = x.data
    axes = (0, 2, 3)
    mu = d.mean(axis=axes, dtype=np.float64)
    var = d.var(axis=axes, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).reshape(1, -1, 1, 1)
    xhat = ((d - mu.reshape(1, -1, 1, 1)) * inv).astype(d.dtype)
    m = d.size // d.shape[1]

    inv_d = inv.astype(d.dtype)

    def grad_fn(g):
        gs = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(d.dtype)
        gxs = (g * xhat).sum(axis=axes, keepdims=True, dtype=np.float64).astype(d.dtype)
        return ((inv_d / m) * (m * g - gs - xhat * gxs),)
    return make_op(xhat, (x,), grad_fn), mu, var


# ---------------------------------------------------------------- binarization

def sign_ste(u, mode: str = "clip1") -> Var:
    """+1 where ``u >= 0`` else -1, with a straight-through gradient.

    ``clip1`` passes the gradient where ``|u| <= 1``; ``bireal_poly`` scales it
    by ``2 - 2|u|`` on the same interval.
    """
    u = as_var(u)
    d = u.data
    inside = np.abs(d) <= 1
    if mode == "clip1":
        local = inside.astype(d.dtype)
    elif mode == "bireal_poly":
        local = np.where(inside, 2 - 2 * np.abs(d), 0).astype(d.dtype)
    else:
        raise ValueError(f"unknown STE mode {mode!r}; expected one of {STE_MODES}")
    if _state["surrogate"]:
        if mode == "clip1":
            out = np.clip(d, -1, 1)
        else:
            out = np.where(d < -1, -1, np.where(d < 0, 2 * d + d * d,
                                                np.where(d < 1, 2 * d - d * d, 1)))
        out = out.astype(d.dtype)
    else:
        out = np.where(d >= 0, 1, -1).astype(d.dtype)
    return make_op(out, (u,), lambda g: (g * local,))


def binarize_weights(w, scale: bool = True) -> Var:
    """``mean|w|`` (per output channel, not differentiated) times ``sign(w)``.

    The gradient passes straight through where ``|w| <= 1``.
    """
    w = as_var(w)
    d = w.data
    sgn = np.where(d >= 0, 1, -1).astype(d.dtype)
    if scale:
        s = np.abs(d).reshape(d.shape[0], -1).mean(axis=1).astype(d.dtype)
        out = sgn * s.reshape((-1,) + (1,) * (d.ndim - 1))
    else:
        out = sgn
    mask = (np.abs(d) <= 1).astype(d.dtype)
    return make_op(out, (w,), lambda g: (g * mask,))


# ---------------------------------------------------------------- statistics

def skewness(x, axis=(2, 3)) -> Var:
    """Fisher skewness over ``axis`` (kept as size-1 dims); 0 where the variance is 0."""
    x = as_var(x)
    d64 = x.data.astype(np.float64)
    m = np.prod([x.shape[a] for a in axis])
    dev = d64 - d64.mean(axis=axis, keepdims=True)
    v = (dev * dev).mean(axis=axis, keepdims=True)
    c3 = (dev * dev * dev).mean(axis=axis, keepdims=True)
    ok = v > 0
    vs = np.where(ok, v, 1.0)
    out = np.where(ok, c3 / vs ** 1.5, 0.0)

    def grad_fn(g):
        gx = (3.0 / m) * ((dev * dev - v) / vs ** 1.5 - c3 * dev / vs ** 2.5)
        return (np.where(ok, g * gx, 0.0),)
    return make_op(out.astype(x.dtype), (x,), grad_fn)


# ---------------------------------------------------------------- loss

def cross_entropy(logits, labels) -> Var:
    """Mean softmax cross-entropy of ``logits`` (N, K) against integer labels."""
    logits = as_var(logits)
    z = logits.data.astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= z.shape[1])):
        raise ValueError(f"labels must be {n} class indices in [0, {z.shape[1]})")
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).mean()
    probs = np.exp(z - lse[:, None])

    def grad_fn(g):
        p = probs.copy()
        p[np.arange(n), labels] -= 1
        return ((g * p / n).astype(logits.dtype),)
    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn)
