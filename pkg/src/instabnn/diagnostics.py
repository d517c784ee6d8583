"""Sign-consistency and instance-statistics instruments."""
from __future__ import annotations

import contextlib
import csv
import fnmatch
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .bitops import BitTensor, pack, sign_binarize, unpack, xnor_popcount_conv2d
from .stats import fisher_skewness
from .tensor_core import Shape2dConv, dense_conv2d

__all__ = [
    "inconsistent_sign_ratio", "plus_ratio", "LayerConsistency", "SignConsistencyReport",
    "sign_consistency", "InstanceStatRecord", "instance_stats_dump", "write_stats_csv",
    "beta_zeroed", "select_layers", "DIAG_MODES",
]

DIAG_MODES = ("full", "beta_zero")


def _pm1(x) -> np.ndarray:
    if isinstance(x, BitTensor):
        return unpack(x)
    x = np.asarray(x)
    if not np.all((x == 1) | (x == -1)):
        x = np.where(x >= 0, 1.0, -1.0)
    return x.astype(np.float32)


def _sign_counts(real_acts, real_weights, bin_acts, bin_weights, cfg: Shape2dConv | None,
                 stride=1, padding=0) -> tuple[int, int]:
    if cfg is not None:
        stride, padding = cfg.stride, cfg.padding
    real = dense_conv2d(np.asarray(real_acts, dtype=np.float64), np.asarray(real_weights, dtype=np.float64),
                        stride=stride, padding=padding)
    a = bin_acts if isinstance(bin_acts, BitTensor) else pack(_pm1(bin_acts))
    w = bin_weights if isinstance(bin_weights, BitTensor) else pack(_pm1(bin_weights))
    binary = xnor_popcount_conv2d(a, w, stride=stride, padding=padding)
    if real.shape != binary.shape:
        raise ValueError(f"real output {real.shape} and binary output {binary.shape} disagree")
    # zero counts as positive on both sides
    diff = (real >= 0) != (binary >= 0)
    return int(diff.sum()), int(diff.size)


def inconsistent_sign_ratio(real_acts, real_weights, bin_acts, bin_weights,
                            cfg: Shape2dConv | None = None, *, stride: int = 1, padding: int = 0) -> float:
    """Fraction of output pixels where ``sign(W_r * A_r) != sign(W_b * A_b)``.

    Binary operands may be BitTensors or arrays (non-±1 arrays are binarized
    with ties to +1).  Zero outputs count as positive.
    """
    bad, total = _sign_counts(real_acts, real_weights, bin_acts, bin_weights, cfg, stride, padding)
    return bad / total


def plus_ratio(bits: BitTensor) -> np.ndarray:
    """Per-(n, c) fraction of +1 bits."""
    if not isinstance(bits, BitTensor):
        raise TypeError("plus_ratio expects a BitTensor")
    hw = bits.shape[2] * bits.shape[3]
    return bits.popcount() / hw


@contextlib.contextmanager
def beta_zeroed(model):
    """Temporarily force every instance-statistic coefficient to 0 (alpha kept)."""
    from .nn.layers import InstaPReLU, InstaTh

    saved = []
    for m in model.modules():
        if isinstance(m, (InstaTh, InstaPReLU)):
            for name in ("beta", "gamma"):
                p = getattr(m, name, None)
                if p is not None:
                    saved.append((p, p.data.copy()))
                    p.data = np.zeros_like(p.data)
    try:
        yield model
    finally:
        for p, d in saved:
            p.data = d


@contextlib.contextmanager
def _capturing(modules):
    for m in modules:
        m._capture = {}
    try:
        yield
    finally:
        for m in modules:
            m._capture = None


@dataclass
class LayerConsistency:
    name: str
    inconsistent: int
    total: int

    @property
    def ratio(self) -> float:
        return self.inconsistent / self.total if self.total else 0.0


@dataclass
class SignConsistencyReport:
    mode: str
    samples: int
    layers: list[LayerConsistency] = field(default_factory=list)

    def mean_ratio(self) -> float:
        return float(np.mean([la.ratio for la in self.layers])) if self.layers else 0.0

    def to_csv_rows(self) -> list[list]:
        return [[self.mode, la.name, la.inconsistent, la.total, f"{la.ratio:.6f}"] for la in self.layers]


def _weights(conv) -> tuple[np.ndarray, np.ndarray]:
    w = conv.weight.data
    return w, np.where(w >= 0, 1.0, -1.0).astype(np.float32)


def sign_consistency(model, dataset, mode: str = "full", batch_size: int = 64,
                     max_samples: int | None = None) -> SignConsistencyReport:
    """Per binary convolution: real conv on the real pre-activation and latent weights
    versus binary conv on the produced bits and signed weights.

    ``mode="beta_zero"`` evaluates the same checkpoint with instance terms off.
    Runs over the whole dataset unless ``max_samples`` is given.
    """
    if mode not in DIAG_MODES:
        raise ValueError(f"mode must be one of {DIAG_MODES}, got {mode!r}")
    units = list(model.units)
    acts = [u.act for u in units]
    counts = [[0, 0] for _ in units]
    seen = 0
    was_training = model.training
    model.eval()
    ctx = beta_zeroed(model) if mode == "beta_zero" else contextlib.nullcontext()
    try:
        with ctx, _capturing(acts), ag.no_grad():
            for x, _ in dataset.batches(batch_size, shuffle=False, augment=False):
                if max_samples is not None:
                    x = x[:max_samples - seen]
                    if len(x) == 0:
                        break
                model(x)
                for i, u in enumerate(units):
                    cap = u.act._capture
                    w_real, w_bin = _weights(u.conv)
                    bad, tot = _sign_counts(cap["input"], w_real, cap["output"], w_bin, None,
                                            u.conv.stride, u.conv.padding)
                    counts[i][0] += bad
                    counts[i][1] += tot
                seen += len(x)
    finally:
        model.train(was_training)
    layers = [LayerConsistency(f"units.{i}.conv", b, t) for i, (b, t) in enumerate(counts)]
    return SignConsistencyReport(mode, seen, layers)


@dataclass(frozen=True)
class InstanceStatRecord:
    instance: int
    layer: str
    channel: int
    mean: float
    std: float
    skewness: float
    plus_ratio: float

    HEADER = ("instance", "layer", "channel", "mean", "std", "skewness", "plus_ratio")

    def row(self) -> list:
        return [self.instance, self.layer, self.channel, f"{self.mean:.8g}", f"{self.std:.8g}",
                f"{self.skewness:.8g}", f"{self.plus_ratio:.8g}"]


def select_layers(names: list[str], selector) -> list[int]:
    """Indices of sign-family layers picked by ``all``, ``"0,2"``, a list of ints, or a glob."""
    if selector is None or selector == "all":
        return list(range(len(names)))
    if isinstance(selector, str):
        parts = [p.strip() for p in selector.split(",") if p.strip()]
        if parts and all(p.lstrip("-").isdigit() for p in parts):
            selector = [int(p) for p in parts]
        else:
            idx = [i for i, n in enumerate(names) if any(fnmatch.fnmatchcase(n, p) for p in parts)]
            if not idx:
                raise ValueError(f"layer selector {selector!r} matches no sign-family layer")
            return idx
    idx = list(selector)
    for i in idx:
        if not isinstance(i, (int, np.integer)) or not 0 <= i < len(names):
            raise ValueError(f"layer index {i!r} out of range (0..{len(names) - 1})")
    return idx


def instance_stats_dump(model, batch, selector="all", channels=None,
                        source: str = "input") -> list[InstanceStatRecord]:
    """Per (instance, layer, channel) statistics at the selected sign-family layers.

    ``source="input"`` describes the raw pre-activation; ``"normalized"`` the
    value actually compared with the threshold.  Order: instance, layer, channel.
    """
    if source not in ("input", "normalized"):
        raise ValueError(f"source must be 'input' or 'normalized', got {source!r}")
    named = model.activation_modules()
    idx = select_layers([n for n, _ in named], selector)
    chosen = [named[i] for i in idx]
    was_training = model.training
    model.eval()
    try:
        with _capturing([m for _, m in chosen]), ag.no_grad():
            model(batch)
            per_layer = []
            for name, m in chosen:
                cap = m._capture
                x = np.asarray(cap["input" if source == "input" else "compared"], dtype=np.float64)
                bits = sign_binarize(cap["output"], 0.0)
                per_layer.append((name, x.mean(axis=(2, 3)), x.std(axis=(2, 3)), fisher_skewness(x),
                                  plus_ratio(bits)))
    finally:
        model.train(was_training)
    records = []
    n = np.asarray(batch).shape[0]
    for i in range(n):
        for name, mu, sd, sk, pr in per_layer:
            cs = range(mu.shape[1]) if channels is None else range(min(int(channels), mu.shape[1]))
            for c in cs:
                records.append(InstanceStatRecord(i, name, c, float(mu[i, c]), float(sd[i, c]),
                                                  float(sk[i, c]), float(pr[i, c])))
    return records


def write_stats_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(InstanceStatRecord.HEADER)
        for r in records:
            w.writerow(r.row())
