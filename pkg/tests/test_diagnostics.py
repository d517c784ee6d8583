import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instabnn import autograd as ag
from instabnn.arch import ModelOptions
from instabnn.bitops import pack, sign_binarize, unpack
from instabnn.data import synth_dataset
from instabnn.diagnostics import (InstanceStatRecord, beta_zeroed, inconsistent_sign_ratio,
                                  instance_stats_dump, plus_ratio, select_layers, sign_consistency,
                                  write_stats_csv)
from instabnn.nn import build_model
from instabnn.tensor_core import Shape2dConv

from conftest import naive_conv2d, pm1


def _warm(model, seed=0, n=16, size=8):
    x = np.random.default_rng(seed).normal(size=(n, 3, size, size)).astype(np.float32)
    with ag.no_grad():
        model(x)
    return x


def test_single_pixel_consistent():
    r = inconsistent_sign_ratio(np.full((1, 1, 1, 1), -0.2), np.full((1, 1, 1, 1), 0.5),
                                np.full((1, 1, 1, 1), -1.0), np.full((1, 1, 1, 1), 1.0))
    assert r == 0.0


def test_tie_counts_positive():
    a = np.array([0.1, 0.2]).reshape(1, 2, 1, 1)
    w = np.array([0.9, -0.8]).reshape(1, 2, 1, 1)
    # real 0.09 - 0.16 < 0; binary (+1)(+1) + (+1)(-1) = 0 reads as +
    assert inconsistent_sign_ratio(a, w, a, w) == 1.0


def _brute(ra, rw, stride, padding):
    real = naive_conv2d(ra, rw, stride, padding)
    ba = np.where(ra >= 0, 1.0, -1.0)
    bw = np.where(rw >= 0, 1.0, -1.0)
    binary = naive_conv2d(ba, bw, stride, padding)
    return float(np.mean((real >= 0) != (binary >= 0)))


@pytest.mark.parametrize("case", range(50))
def test_matches_brute_force(case):
    rng = np.random.default_rng([11, case])
    n, c, h, o = rng.integers(1, 3), rng.integers(1, 6), rng.integers(3, 8), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
    ra = rng.normal(size=(n, c, h, h))
    rw = rng.normal(size=(o, c, k, k))
    got = inconsistent_sign_ratio(ra, rw, ra, rw, stride=s, padding=p)
    assert got == _brute(ra, rw, s, p)
    # packed operands and a conv config give the same answer
    cfg = Shape2dConv(int(c), int(o), k, k, s, p)
    assert inconsistent_sign_ratio(ra, rw, sign_binarize(ra), pack(np.where(rw >= 0, 1.0, -1.0)), cfg) == got


def test_zero_when_already_binary(rng):
    a, w = pm1(rng, (2, 4, 6, 6)), pm1(rng, (3, 4, 3, 3))
    assert inconsistent_sign_ratio(a, w, a, w, padding=1) == 0.0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 10))
def test_ratio_in_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    ra, rw = scale * rng.normal(size=(1, 3, 5, 5)), rng.normal(size=(2, 3, 3, 3))
    r = inconsistent_sign_ratio(ra, rw, ra, rw, padding=1)
    assert 0.0 <= r <= 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        inconsistent_sign_ratio(np.ones((1, 2, 4, 4)), np.ones((1, 2, 3, 3)),
                                np.ones((1, 2, 5, 5)), np.ones((1, 2, 3, 3)))


def test_plus_ratio_examples():
    assert np.all(plus_ratio(pack(np.ones((2, 3, 5, 5)))) == 1.0)
    alt = np.where(np.arange(16).reshape(1, 1, 4, 4) % 2 == 0, 1.0, -1.0)
    assert plus_ratio(pack(alt))[0, 0] == 0.5
    with pytest.raises(TypeError):
        plus_ratio(np.ones((1, 1, 2, 2)))


def test_plus_ratio_unpack_count(rng):
    x = pm1(rng, (3, 4, 7, 9))
    assert np.array_equal(plus_ratio(pack(x)), (unpack(pack(x)) > 0).mean(axis=(2, 3)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(-3, 3), dt=st.floats(0, 3))
def test_plus_ratio_falls_with_threshold(seed, t, dt):
    x = np.random.default_rng(seed).normal(size=(2, 3, 6, 6))
    assert np.all(plus_ratio(sign_binarize(x, t + dt)) <= plus_ratio(sign_binarize(x, t)))


def test_constant_image_gives_flat_stats():
    m = build_model("toy_cnn", ModelOptions(variant="insta"), seed=0)
    _warm(m)
    # zero padding in the stem keeps only the all-zero image flat at the first sign layer
    recs = instance_stats_dump(m, np.zeros((2, 3, 8, 8), np.float32), selector="0")
    assert recs and all(r.std == 0.0 and r.skewness == 0.0 for r in recs)
    assert all(r.plus_ratio in (0.0, 1.0) for r in recs)


def test_dump_matches_recomputed_moments():
    m = build_model("toy_cnn", ModelOptions(variant="insta"), seed=3)
    x = _warm(m, seed=1, n=4)
    recs = instance_stats_dump(m, x, selector="all")
    names = [n for n, _ in m.activation_modules()]
    assert len(recs) == 4 * sum(mod.channels for _, mod in m.activation_modules())
    # capture independently and recompute with plain loops
    mods = dict(m.activation_modules())
    for mod in mods.values():
        mod._capture = {}
    m.eval()
    with ag.no_grad():
        m(x)
    m.train()
    for r in recs[::7]:
        v = np.asarray(mods[r.layer]._capture["input"], dtype=np.float64)[r.instance, r.channel].ravel()
        mu = sum(v) / len(v)
        var = sum((e - mu) ** 2 for e in v) / len(v)
        m3 = sum((e - mu) ** 3 for e in v) / len(v)
        assert r.mean == pytest.approx(mu, abs=1e-9)
        assert r.std == pytest.approx(var ** 0.5, abs=1e-9)
        assert r.skewness == pytest.approx(m3 / var ** 1.5 if var > 0 else 0.0, rel=1e-7, abs=1e-9)
        out = np.asarray(mods[r.layer]._capture["output"])[r.instance, r.channel]
        assert r.plus_ratio == pytest.approx((out > 0).mean())
    for mod in mods.values():
        mod._capture = None
    # ordering is instance, then layer, then channel
    keys = [(r.instance, names.index(r.layer), r.channel) for r in recs]
    assert keys == sorted(keys)


def test_two_images_differ_somewhere():
    m = build_model("toy_cnn", ModelOptions(variant="insta"), seed=0)
    x = _warm(m, n=2)
    recs = instance_stats_dump(m, x)
    a = [r.mean for r in recs if r.instance == 0]
    b = [r.mean for r in recs if r.instance == 1]
    assert a != b


def test_selector_and_channels(tmp_path):
    m = build_model("toy_cnn", ModelOptions(variant="insta"), seed=0)
    x = _warm(m, n=3)
    recs = instance_stats_dump(m, x, selector="units.1.*", channels=2)
    assert {r.layer for r in recs} == {"units.1.act"} and len(recs) == 3 * 2
    p = tmp_path / "s.csv"
    write_stats_csv(recs, p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == list(InstanceStatRecord.HEADER) and len(rows) == 7
    names = ["a.act", "b.act"]
    assert select_layers(names, "all") == [0, 1] and select_layers(names, "1") == [1]
    for bad in ("5", "nomatch*", [-1]):
        with pytest.raises(ValueError):
            select_layers(names, bad)
    with pytest.raises(ValueError):
        instance_stats_dump(m, x, source="output")


def test_beta_zeroed_restores():
    m = build_model("toy_cnn", ModelOptions(variant="insta"), seed=0)
    before = {k: v.copy() for k, v in m.state_dict().items()}
    for p in m.parameters():
        p.data = p.data + 0.1
    saved = {k: v.copy() for k, v in m.state_dict().items()}
    with beta_zeroed(m):
        betas = [mod.beta.data for mod in m.insta_modules()]
        assert all(np.all(b == 0) for b in betas)
    assert all(np.array_equal(saved[k], v) for k, v in m.state_dict().items())
    assert before.keys() == saved.keys()


def test_sign_consistency_report():
    m = build_model("toy_cnn", ModelOptions(variant="insta"), seed=0)
    _warm(m)
    ds = synth_dataset("blobs10", 40, seed=0)
    full = sign_consistency(m, ds, "full", batch_size=16)
    zero = sign_consistency(m, ds, "beta_zero", batch_size=16, max_samples=20)
    assert full.samples == 40 and zero.samples == 20
    assert len(full.layers) == len(m.units)
    for la in full.layers + zero.layers:
        assert 0.0 <= la.ratio <= 1.0 and la.total > 0
    assert full.layers[0].total == 2 * zero.layers[0].total
    assert full.to_csv_rows()[0][0] == "full"
    assert 0.0 <= full.mean_ratio() <= 1.0
    with pytest.raises(ValueError):
        sign_consistency(m, ds, "rsign")
