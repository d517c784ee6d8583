"""Operation and parameter accounting for binary networks.

Counting rules:

* one multiply-accumulate is one FLOP (real) or one BOP (binary);
* BN costs H*W*C FLOPs and 2C parameters, or nothing but C parameters when a
  sign function directly follows it;
* the per-output-channel weight scale costs Ho*Wo*Co FLOPs unless a BN right
  after the convolution absorbs it;
* PReLU compute and pooling are free;
* INSTA modules cost H*W*C FLOPs for normalization, 3*H*W*C int4 ops for the
  cube, plus 2C (threshold) or 3C (PReLU) FLOPs; they store 4C and 5C values,
  and the PReLU keeps its y-shift as one more C;
* an SE gate stores 2*C*h 8-bit weights plus C + h 32-bit step sizes and
  costs its FC MACs plus C + h FLOPs, with h = ceil(C / r).

``OPs = FLOPs + BOPs / 64 + int4_OPs / 16``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .arch import ArchSpec, ModelOptions, resolve_arch
from .tensor_core import conv_output_size

__all__ = [
    "LAYER_KINDS", "LayerDesc", "LayerCost", "CostReport", "count_layer", "total_ops",
    "describe_arch", "cost_of_arch", "fmt3",
]

LAYER_KINDS = ("binary_conv", "real_conv", "bn", "rsign", "rprelu", "prelu", "insta_th",
               "insta_prelu", "se_gate", "linear", "pool")
FP_BITS = 32
SE_BITS = 8


@dataclass(frozen=True)
class LayerDesc:
    """One costed layer.  ``h``/``w`` are input spatial dims, ``c_in`` input channels."""

    kind: str
    h: int
    w: int
    c_in: int
    c_out: int | None = None
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    sign_follows: bool = False
    scale_merged: bool = True
    weight_scale: bool = True
    y_shift: bool = True
    se_ratio: int = 16
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if min(self.h, self.w, self.c_in, self.kernel, self.stride) < 1 or self.padding < 0:
            raise ValueError(f"invalid geometry for {self.name or self.kind}: {self}")

    @property
    def out_channels(self) -> int:
        return self.c_out if self.c_out is not None else self.c_in

    @property
    def out_hw(self) -> tuple[int, int]:
        if self.kind in ("binary_conv", "real_conv"):
            return (conv_output_size(self.h, self.kernel, self.stride, self.padding),
                    conv_output_size(self.w, self.kernel, self.stride, self.padding))
        return self.h, self.w


@dataclass
class LayerCost:
    name: str
    kind: str
    flops: int = 0
    bops: int = 0
    int4_ops: int = 0
    param_bits: int = 0
    param_elems: int = 0

    @property
    def ops(self) -> float:
        return total_ops(flops=self.flops, bops=self.bops, int4_ops=self.int4_ops)


def count_layer(d: LayerDesc) -> LayerCost:
    c = d.c_in
    hwc = d.h * d.w * c
    out = LayerCost(d.name or d.kind, d.kind)

    def params(n, bits=FP_BITS):
        out.param_elems += n
        out.param_bits += n * bits

    if d.kind in ("binary_conv", "real_conv"):
        ho, wo = d.out_hw
        co = d.out_channels
        macs = ho * wo * co * c * d.kernel * d.kernel
        weights = co * c * d.kernel * d.kernel
        if d.kind == "binary_conv":
            out.bops = macs
            params(weights, 1)
            if d.weight_scale and not d.scale_merged:
                out.flops += ho * wo * co
                params(co)
        else:
            out.flops = macs
            params(weights)
    elif d.kind == "bn":
        if d.sign_follows:
            params(c)
        else:
            out.flops = hwc
            params(2 * c)
    elif d.kind == "rsign":
        params(c)
    elif d.kind == "prelu":
        params(c)
    elif d.kind == "rprelu":
        params(3 * c)
    elif d.kind == "insta_th":
        out.flops = hwc + 2 * c
        out.int4_ops = 3 * hwc
        params(4 * c)
    elif d.kind == "insta_prelu":
        out.flops = hwc + 3 * c
        out.int4_ops = 3 * hwc
        params(5 * c + (c if d.y_shift else 0))
    elif d.kind == "se_gate":
        hid = max(1, -(-c // d.se_ratio))
        out.flops = 2 * c * hid + c + hid
        params(2 * c * hid, SE_BITS)
        params(c + hid)
    elif d.kind == "linear":
        co = d.out_channels
        out.flops = c * co
        params(c * co + co)
    return out


def total_ops(report=None, *, flops: float = 0, bops: float = 0, int4_ops: float = 0) -> float:
    """``FLOPs + BOPs / 64 + int4_OPs / 16`` of a report or of explicit totals."""
    if report is not None:
        flops, bops, int4_ops = report.flops, report.bops, report.int4_ops
    return flops + bops / 64 + int4_ops / 16


def fmt3(x: float) -> str:
    """Three significant figures in scientific notation."""
    return f"{x:.2e}"


@dataclass
class CostReport:
    arch: str
    variant: str
    layers: list[LayerCost] = field(default_factory=list)

    def _sum(self, attr) -> int:
        return int(sum(getattr(layer, attr) for layer in self.layers))

    @property
    def flops(self) -> int:
        return self._sum("flops")

    @property
    def bops(self) -> int:
        return self._sum("bops")

    @property
    def int4_ops(self) -> int:
        return self._sum("int4_ops")

    @property
    def param_bits(self) -> int:
        return self._sum("param_bits")

    @property
    def param_elems(self) -> int:
        return self._sum("param_elems")

    @property
    def ops(self) -> float:
        return total_ops(self)

    def totals(self) -> dict:
        return {"flops": self.flops, "bops": self.bops, "int4_ops": self.int4_ops,
                "param_bits": self.param_bits, "ops": self.ops}

    def by_kind(self) -> dict:
        out: dict[str, dict] = {}
        for layer in self.layers:
            agg = out.setdefault(layer.kind, {"flops": 0, "bops": 0, "int4_ops": 0, "param_bits": 0})
            for k in agg:
                agg[k] += getattr(layer, k)
        return out

    def to_text(self) -> str:
        """Machine-readable ``key=value`` lines: one per layer, then totals."""
        lines = [f"arch={self.arch} variant={self.variant}"]
        for layer in self.layers:
            lines.append(f"layer name={layer.name} kind={layer.kind} flops={layer.flops} "
                         f"bops={layer.bops} int4_ops={layer.int4_ops} param_bits={layer.param_bits}")
        t = self.totals()
        lines.append(f"total flops={t['flops']} bops={t['bops']} int4_ops={t['int4_ops']} "
                     f"param_bits={t['param_bits']} ops={t['ops']:.1f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"arch": self.arch, "variant": self.variant, "totals": self.totals(),
                           "layers": [asdict(la) for la in self.layers]}, indent=1)

    def table(self, per_layer: bool = False) -> str:
        rows = []
        if per_layer:
            rows.append(f"{'layer':<28}{'kind':<12}{'FLOPs':>12}{'BOPs':>12}{'int4':>12}{'bits':>12}")
            for la in self.layers:
                rows.append(f"{la.name:<28}{la.kind:<12}{la.flops:>12}{la.bops:>12}"
                            f"{la.int4_ops:>12}{la.param_bits:>12}")
        rows.append(f"{self.arch} ({self.variant})")
        rows.append(f"  BOPs       {fmt3(self.bops)}")
        rows.append(f"  FLOPs      {fmt3(self.flops)}  (int4 {fmt3(self.int4_ops)})")
        rows.append(f"  OPs        {fmt3(self.ops)}")
        rows.append(f"  params     {self.param_bits / 1e6:.1f} Mbit")
        return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- descriptors

class _Walker:
    def __init__(self, opts: ModelOptions):
        self.opts = opts
        self.descs: list[LayerDesc] = []

    def add(self, kind, h, w, c, name, **kw):
        self.descs.append(LayerDesc(kind, h, w, c, name=name, se_ratio=self.opts.se_ratio, **kw))

    def activation(self, h, w, c, name, merged: bool):
        kind = self.opts.th_kind
        if kind == "rsign":
            if merged or self.opts.variant == "baseline_norm":
                # normalization and learned shift fold into one per-channel threshold
                self.add("bn", h, w, c, f"{name}.norm", sign_follows=True)
            else:
                self.add("rsign", h, w, c, name)
            return
        self.add("insta_th", h, w, c, name)
        if kind == "insta_th_plus":
            self.add("se_gate", h, w, c, f"{name}.gate")

    def prelu(self, h, w, c, name):
        kind = self.opts.prelu_kind
        if kind == "rprelu":
            if self.opts.variant == "baseline_norm" and self.opts.ordering == "sign_conv_bn":
                self.add("bn", h, w, c, f"{name}.norm")
            self.add("rprelu", h, w, c, name)
            return
        self.add("insta_prelu", h, w, c, name)
        if kind == "insta_prelu_plus":
            self.add("se_gate", h, w, c, f"{name}.gate")

    def binary_conv(self, h, w, ci, co, k, s, name, merged_scale):
        self.add("binary_conv", h, w, ci, name, c_out=co, kernel=k, stride=s, padding=k // 2,
                 scale_merged=merged_scale, weight_scale=self.opts.weight_scale)
        return (conv_output_size(h, k, s, k // 2), conv_output_size(w, k, s, k // 2))

    def downsample(self, h, w, ci, co, s, name):
        """Option B: average pool, real 1×1 convolution, BN."""
        if s > 1:
            self.add("pool", h, w, ci, f"{name}.pool")
            h, w = -(-h // s), -(-w // s)
        self.add("real_conv", h, w, ci, f"{name}.conv", c_out=co)
        self.add("bn", h, w, co, f"{name}.bn")


def describe_arch(arch: ArchSpec, options: ModelOptions | None = None) -> list[LayerDesc]:
    """Flatten a descriptor into costed layers."""
    opts = options or ModelOptions()
    wk = _Walker(opts)
    c, h, w = arch.input_shape
    for i, op in enumerate(arch.stem):
        kind = op["op"]
        name = f"stem.{i}"
        if kind == "conv":
            k, s = op["kernel"], op.get("stride", 1)
            p = op.get("padding", k // 2)
            wk.add("real_conv", h, w, c, name, c_out=op["out"], kernel=k, stride=s, padding=p)
            h, w, c = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p), op["out"]
        elif kind == "bn":
            wk.add("bn", h, w, c, name)
        elif kind == "maxpool":
            wk.add("pool", h, w, c, name)
            k, s, p = op.get("kernel", 3), op.get("stride", 2), op.get("padding", 1)
            h, w = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
        else:
            wk.add("prelu", h, w, c, name)
    merged = opts.ordering == "bn_sign_conv_merged"
    for i, u in enumerate(arch.units):
        name = f"units.{i}"
        if u.kind == "bireal":
            wk.activation(h, w, u.in_ch, f"{name}.act", merged)
            ho, wo = wk.binary_conv(h, w, u.in_ch, u.out_ch, 3, u.stride, f"{name}.conv", not merged)
            if not merged:
                wk.add("bn", ho, wo, u.out_ch, f"{name}.bn")
            if u.stride != 1 or u.in_ch != u.out_ch:
                wk.downsample(h, w, u.in_ch, u.out_ch, u.stride, f"{name}.downsample")
            wk.prelu(ho, wo, u.out_ch, f"{name}.prelu")
            h, w = ho, wo
        else:
            # depthwise-style pair: 3×3 (C->C) then 1×1 (C->Co), each act-conv-BN-add-PReLU;
            # shortcuts are a pool (stride 2) and channel duplication, no extra convs
            wk.activation(h, w, u.in_ch, f"{name}.act3", merged)
            ho, wo = wk.binary_conv(h, w, u.in_ch, u.in_ch, 3, u.stride, f"{name}.conv3", not merged)
            if not merged:
                wk.add("bn", ho, wo, u.in_ch, f"{name}.bn3")
            if u.stride > 1:
                wk.add("pool", h, w, u.in_ch, f"{name}.pool")
            wk.prelu(ho, wo, u.in_ch, f"{name}.prelu3")
            wk.activation(ho, wo, u.in_ch, f"{name}.act1", merged)
            wk.binary_conv(ho, wo, u.in_ch, u.out_ch, 1, 1, f"{name}.conv1", not merged)
            if not merged:
                wk.add("bn", ho, wo, u.out_ch, f"{name}.bn1")
            wk.prelu(ho, wo, u.out_ch, f"{name}.prelu1")
            h, w = ho, wo
        c = u.out_ch
    wk.add("pool", h, w, c, "head.pool")
    wk.add("linear", 1, 1, c, "head.fc", c_out=arch.num_classes)
    return wk.descs


def cost_of_arch(arch, options: ModelOptions | str | None = None, **option_kw) -> CostReport:
    """Per-layer cost of ``arch`` (an ArchSpec or built-in name / descriptor path).

    ``options`` may be a :class:`ModelOptions` or just a variant name; extra
    keyword arguments override option fields.
    """
    if isinstance(arch, str):
        arch = resolve_arch(arch)
    if options is None or isinstance(options, str):
        options = ModelOptions(variant=options or "baseline", **option_kw)
    elif option_kw:
        options = options.replace(**option_kw)
    layers = [count_layer(d) for d in describe_arch(arch, options)]
    return CostReport(arch.name, options.variant, layers)
