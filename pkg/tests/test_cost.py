import json

import pytest
from hypothesis import given, settings, strategies as st

from instabnn.arch import ModelOptions, builtin_arch
from instabnn.cost import (CostReport, LayerDesc, cost_of_arch, count_layer, describe_arch,
                           fmt3, total_ops)


def test_binary_conv_bops():
    c = count_layer(LayerDesc("binary_conv", 14, 14, 256, 256, kernel=3, padding=1))
    assert c.bops == 196 * 256 * 256 * 9 == 115_605_504
    assert c.flops == 0 and c.param_bits == 256 * 256 * 9


def test_weight_scale_cost_unless_merged():
    merged = count_layer(LayerDesc("binary_conv", 14, 14, 64, 64, kernel=3, padding=1))
    loose = count_layer(LayerDesc("binary_conv", 14, 14, 64, 64, kernel=3, padding=1, scale_merged=False))
    assert loose.flops - merged.flops == 14 * 14 * 64
    assert loose.param_bits - merged.param_bits == 64 * 32


def test_insta_th_params():
    c = count_layer(LayerDesc("insta_th", 7, 7, 512))
    assert c.param_bits == 4 * 512 * 32 == 65_536
    assert c.int4_ops == 3 * 7 * 7 * 512
    assert c.flops == 7 * 7 * 512 + 2 * 512


def test_insta_prelu_params():
    c = count_layer(LayerDesc("insta_prelu", 7, 7, 64))
    assert c.param_bits == (5 + 1) * 64 * 32  # five per channel plus the kept y-shift
    assert count_layer(LayerDesc("insta_prelu", 7, 7, 64, y_shift=False)).param_bits == 5 * 64 * 32
    assert c.flops == 7 * 7 * 64 + 3 * 64


def test_bn_rules():
    sign_next = count_layer(LayerDesc("bn", 14, 14, 256, sign_follows=True))
    assert sign_next.flops == 0 and sign_next.param_bits == 256 * 32
    plain = count_layer(LayerDesc("bn", 14, 14, 256))
    assert plain.flops == 14 * 14 * 256 and plain.param_bits == 2 * 256 * 32


def test_se_gate():
    c = count_layer(LayerDesc("se_gate", 7, 7, 512, se_ratio=16))
    assert c.param_bits == 2 * 512 * 512 // 16 * 8 + (512 + 32) * 32
    assert c.flops == 2 * 512 * 32 + 512 + 32


def test_unknown_kind_and_geometry():
    with pytest.raises(ValueError, match="unknown layer kind"):
        LayerDesc("lstm", 1, 1, 1)
    with pytest.raises(ValueError):
        LayerDesc("bn", 0, 1, 1)


@pytest.mark.parametrize("bops,flops,int4,want,digits", [
    (4.82e9, 0.12e8, 0, 0.87e8, 0.01e8),
    (1.68e9, 1.40e8, 0, 1.66e8, 0.01e8),
    (1.68e9, 1.44e8, 0.10e8, 1.709e8, 0.001e8),
])
def test_total_ops_table_rows(bops, flops, int4, want, digits):
    got = total_ops(flops=flops, bops=bops, int4_ops=int4)
    assert abs(got - want) <= digits / 2 + 1e-6 * want


def test_total_ops_exact():
    assert total_ops(flops=0.12e8, bops=4.82e9) == pytest.approx(87_312_500)
    assert total_ops(flops=10, bops=64, int4_ops=16) == 12


def test_resnet18_goldens_exact():
    base = cost_of_arch("resnet18_reactnet", "baseline")
    assert (base.flops, base.bops, base.param_bits) == (140_277_248, 1_676_279_808, 33_991_936)
    assert base.ops == 166_469_120
    ins = cost_of_arch("resnet18_reactnet", "insta")
    assert (ins.flops, ins.int4_ops, ins.param_bits) == (143_481_728, 9_558_528, 34_686_208)
    assert ins.ops == pytest.approx(170_271_008)
    plus = cost_of_arch("resnet18_reactnet", "insta_plus", se_ratio=16)
    assert plus.param_bits == 37_459_328
    assert plus.ops == pytest.approx(170_594_596)


def test_resnet18_within_two_percent_of_reported():
    for variant, ops, mbit in [("baseline", 1.67e8, 34.0), ("insta", 1.70e8, 34.7), ("insta_plus", None, 37.4)]:
        r = cost_of_arch("resnet18_reactnet", variant)
        assert abs(r.param_bits / 1e6 - mbit) / mbit <= 0.02
        if ops:
            assert abs(r.ops - ops) / ops <= 0.02


def test_reactnet_a_descriptor():
    r = cost_of_arch("reactnet_a", "baseline")
    assert r.bops == 4_816_896_000
    assert r.param_bits == 63_146_240


def test_insta_add_exactly_4c_and_3hwc():
    arch = builtin_arch("resnet20_bireal_cifar")
    base = describe_arch(arch, ModelOptions(variant="baseline"))
    ins = describe_arch(arch, ModelOptions(variant="insta"))
    # per activation slot the report swaps rsign (C params) for insta_th (4C params, 3HWC int4)
    for b, i in zip([d for d in base if d.kind == "rsign"], [d for d in ins if d.kind == "insta_th"]):
        cb, ci = count_layer(b), count_layer(i)
        assert ci.param_bits - cb.param_bits == 3 * b.c_in * 32
        assert ci.int4_ops - cb.int4_ops == 3 * b.h * b.w * b.c_in
    # adding a module to a report adds exactly its own counts
    report = cost_of_arch(arch, "baseline")
    extra = count_layer(LayerDesc("insta_th", 8, 8, 64))
    grown = CostReport(report.arch, "x", report.layers + [extra])
    assert grown.param_bits - report.param_bits == 4 * 64 * 32
    assert grown.int4_ops - report.int4_ops == 3 * 8 * 8 * 64


def test_totals_are_layer_sums():
    r = cost_of_arch("resnet18_reactnet", "insta_plus")
    for k in ("flops", "bops", "int4_ops", "param_bits"):
        assert getattr(r, k) == sum(getattr(la, k) for la in r.layers)
        assert getattr(r, k) == sum(v[k] for v in r.by_kind().values())


def test_merged_ordering_costs():
    a = cost_of_arch("resnet18_reactnet", "insta")
    m = cost_of_arch("resnet18_reactnet", ModelOptions(variant="insta", ordering="bn_sign_conv_merged"))
    assert m.bops == a.bops
    # INSTA-Th takes over the BN slot, so no INSTA-PReLU cube and no per-conv BN
    assert "insta_prelu" not in m.by_kind()
    assert m.int4_ops < a.int4_ops and m.param_bits < a.param_bits


def test_text_and_json_outputs():
    r = cost_of_arch("toy_cnn", "insta")
    text = r.to_text()
    last = text.strip().splitlines()[-1]
    fields = dict(kv.split("=") for kv in last.split()[1:])
    assert int(fields["flops"]) == r.flops and int(fields["param_bits"]) == r.param_bits
    assert float(fields["ops"]) == pytest.approx(r.ops, abs=0.05)
    assert len(text.strip().splitlines()) == len(r.layers) + 2
    j = json.loads(r.to_json())
    assert j["totals"]["bops"] == r.bops and len(j["layers"]) == len(r.layers)
    assert "Mbit" in r.table() and "layer" in r.table(per_layer=True)
    assert fmt3(1.66469e8) == "1.66e+08"


def test_incomplete_descriptor():
    with pytest.raises(ValueError):
        cost_of_arch("not_an_arch")


@settings(max_examples=100, deadline=None)
@given(f=st.floats(0, 1e10), b=st.floats(0, 1e11), i=st.floats(0, 1e10), d=st.floats(0, 1e9),
       which=st.sampled_from(["flops", "bops", "int4_ops"]))
def test_ops_monotone(f, b, i, d, which):
    base = dict(flops=f, bops=b, int4_ops=i)
    more = dict(base)
    more[which] += d
    assert total_ops(**more) >= total_ops(**base)


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 32), c=st.integers(1, 256), co=st.integers(1, 64), k=st.sampled_from([1, 3]),
       s=st.integers(1, 2), kind=st.sampled_from(["binary_conv", "real_conv", "bn", "insta_th", "insta_prelu",
                                                   "se_gate", "rsign", "rprelu", "linear", "pool"]))
def test_counts_nonnegative(h, c, co, k, s, kind):
    lc = count_layer(LayerDesc(kind, h, h, c, co, kernel=k, stride=s, padding=k // 2))
    assert min(lc.flops, lc.bops, lc.int4_ops, lc.param_bits) >= 0
    assert lc.ops == total_ops(flops=lc.flops, bops=lc.bops, int4_ops=lc.int4_ops)
