import numpy as np
import pytest

from instabnn import autograd as ag
from instabnn.arch import ModelOptions
from instabnn.bitops import pack, unpack
from instabnn.checkpoint import load_model, save_model
from instabnn.data import (CheckpointError, Dataset, load_checkpoint, load_cifar10, load_data,
                           read_cifar_records, save_checkpoint, synth_dataset, synth_splits)
from instabnn.nn import build_model
from instabnn.train import OptimState, optimizer_step


def test_synth_deterministic():
    a, b = synth_dataset("separable2", 64, seed=3), synth_dataset("separable2", 64, seed=3)
    assert a.raw.tobytes() == b.raw.tobytes() and np.array_equal(a.labels, b.labels)
    assert synth_dataset("separable2", 64, seed=4).raw.tobytes() != a.raw.tobytes()


def test_separable2_closed_form_rule():
    ds = synth_dataset("separable2", 500, seed=0)
    score = ds.raw[:, 0].mean(axis=(1, 2)) - ds.raw[:, 2].mean(axis=(1, 2))
    assert np.all((score > 0) == (ds.labels == 1))
    assert np.min(np.abs(score)) > 0.29


def test_blobs10_balanced():
    ds = synth_dataset("blobs10", 200, seed=1)
    assert np.array_equal(np.bincount(ds.labels), np.full(10, 20))
    assert ds.raw.min() >= 0 and ds.raw.max() <= 1


def test_synth_errors():
    with pytest.raises(ValueError):
        synth_dataset("blobs10", 9, seed=0)
    with pytest.raises(ValueError):
        synth_dataset("mnist", 10, seed=0)


def test_batches_deterministic_by_seed_and_epoch():
    tr, _ = synth_splits("blobs10", seed=0, n_train=50, n_test=20)
    tr.augment = True
    run = lambda s, e: [y.tolist() for _, y in tr.batches(8, seed=s, epoch=e)]
    assert run(1, 0) == run(1, 0)
    assert run(1, 0) != run(1, 1)
    x1 = next(tr.batches(8, seed=1, epoch=2))[0]
    x2 = next(tr.batches(8, seed=1, epoch=2))[0]
    assert np.array_equal(x1, x2)
    assert sum(len(y) for _, y in tr.batches(8, seed=0)) == 50


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 4, 4)), np.array([0, 5]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 4, 4)), np.array([0]), 2)


def _record(label, fill):
    return bytes([label]) + bytes([fill]) * 3072


def test_cifar_records(tmp_path):
    p = tmp_path / "b.bin"
    body = bytearray(_record(7, 255) + _record(2, 0))
    body[1 + 1024] = 128  # first green pixel of record 0
    p.write_bytes(bytes(body))
    x, y = read_cifar_records(p)
    assert x.shape == (2, 3, 32, 32) and y.tolist() == [7, 2]
    assert x[0, 1, 0, 0] == 128 and x[0, 0, 0, 0] == 255


def test_cifar_errors(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(_record(1, 0)[:-1])
    with pytest.raises(ValueError, match="truncated"):
        read_cifar_records(p)
    p.write_bytes(_record(10, 0))
    with pytest.raises(ValueError, match="label"):
        read_cifar_records(p)


def test_load_cifar_dir(tmp_path):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    (d / "data_batch_1.bin").write_bytes(b"".join(_record(i % 10, 255) for i in range(20)))
    (d / "test_batch.bin").write_bytes(b"".join(_record(i % 10, 0) for i in range(10)))
    tr, te = load_cifar10(tmp_path, train_subset=10)
    assert len(tr) == 10 and len(te) == 10
    assert np.all(tr.raw == 1.0) and np.all(te.raw == 0.0)
    assert sorted(tr.labels.tolist()) == list(range(10))
    assert not te.augment
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path / "nothing")
    with pytest.raises(FileNotFoundError):
        load_data("cifar10")
    tr2, _ = load_data("cifar10:10", data_dir=tmp_path)
    assert len(tr2) == 10


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    bits = pack(np.where(rng.random((2, 3, 5, 7)) < 0.5, -1.0, 1.0))
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(6, dtype=np.int32).reshape(2, 3),
               "c": rng.normal(size=5), "s": np.float32(2.5), "bits": bits}
    save_checkpoint(tmp_path / "x.ckpt", tensors, {"k": [1, 2]})
    ck = load_checkpoint(tmp_path / "x.ckpt")
    assert ck.meta == {"k": [1, 2]} and list(ck.tensors) == list(tensors)
    for k in ("a", "b", "c", "s"):
        assert ck.tensors[k].dtype == np.asarray(tensors[k]).dtype
        assert ck.tensors[k].tobytes() == np.asarray(tensors[k]).tobytes()
    assert np.array_equal(unpack(ck.tensors["bits"]), unpack(bits))


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, {"a": np.ones(4, np.float32)}, {})
    good = p.read_bytes()
    cases = {
        "bad magic": b"NOTABNN!" + good[8:],
        "version": good[:8] + (2).to_bytes(4, "little") + good[12:],
        "truncated": good[:-3],
        "trailing": good + b"\0",
    }
    for what, data in cases.items():
        p.write_bytes(data)
        with pytest.raises(CheckpointError, match=what):
            load_checkpoint(p)
    # payload size that disagrees with the shape
    i = good.index(b"a") + 1 + 2
    p.write_bytes(good[:i] + (5).to_bytes(4, "little") + good[i + 4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_duplicate_names_rejected(tmp_path):
    p = tmp_path / "d.ckpt"
    save_checkpoint(p, {"a": np.ones(1, np.float32), "b": np.ones(1, np.float32)}, {})
    raw = p.read_bytes()
    i = raw.rindex(b"\x01\x00b")
    p.write_bytes(raw[:i] + b"\x01\x00a" + raw[i + 3:])
    with pytest.raises(CheckpointError, match="duplicate"):
        load_checkpoint(p)


def _warm(model, x):
    with ag.no_grad():
        model(x)


def test_model_roundtrip_with_optimizer(tmp_path, rng):
    m = build_model("toy_cnn", ModelOptions(variant="insta_plus", se_ratio=4), seed=0)
    x = rng.normal(size=(4, 3, 8, 8)).astype(np.float32)
    loss = ag.mean(m(x))
    loss.backward()
    state = OptimState()
    optimizer_step("adam", state, dict(m.named_parameters()), lr=1e-3)
    save_model(tmp_path / "m.ckpt", m, {"note": "x"}, state, packed_weights=True)
    m2, ck = load_model(tmp_path / "m.ckpt")
    for k, v in m.state_dict().items():
        assert m2.state_dict()[k].tobytes() == v.tobytes(), k
    assert ck.meta["note"] == "x"
    st2 = OptimState.from_tensors(ck.optim_state())
    assert st2.step == state.step and st2.m.keys() == state.m.keys()
    assert all(np.array_equal(st2.v[k], state.v[k]) for k in state.v)
    assert "units.0.conv.weight.bits" in ck.tensors
    m.eval(), m2.eval()
    with ag.no_grad():
        assert np.array_equal(m(x).data, m2(x).data)


def test_stage2_carry_over(tmp_path, rng):
    x = rng.normal(size=(4, 3, 8, 8)).astype(np.float32)
    s1 = build_model("toy_cnn", ModelOptions(variant="insta", beta_init=0.0), seed=2)
    _warm(s1, x)
    save_model(tmp_path / "s1.ckpt", s1)
    s1_loaded, _ = load_model(tmp_path / "s1.ckpt")
    s2 = build_model("toy_cnn", ModelOptions(variant="insta", beta_init=0.0, stage=2), seed=9)
    s2.load_state_dict(s1_loaded.state_dict())
    for (_, c1), (_, c2) in zip(s1.binary_convs(), s2.binary_convs()):
        assert np.array_equal(c1.weight.data, c2.weight.data)
    # oracle: the stage-1 net with each conv weight replaced by mean|w| * sign(w)
    ref = build_model("toy_cnn", ModelOptions(variant="insta", beta_init=0.0), seed=2)
    ref.load_state_dict(s1.state_dict())
    for _, c in ref.binary_convs():
        w = c.weight.data
        c.weight.data = (np.where(w >= 0, 1.0, -1.0) * np.abs(w).mean(axis=(1, 2, 3), keepdims=True)).astype(w.dtype)
    base = build_model("toy_cnn", ModelOptions(variant="baseline_norm", stage=2), seed=0)
    base.load_state_dict({k: v for k, v in s2.state_dict().items() if k in base.state_dict()}, strict=False)
    for m in (s2, ref, base):
        m.eval()
    with ag.no_grad():
        got, want = s2(x).data, ref(x).data
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(got, base(x).data, rtol=1e-5, atol=1e-5)


def test_model_checkpoint_mismatch(tmp_path):
    m = build_model("toy_cnn", seed=0)
    save_model(tmp_path / "m.ckpt", m)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    del ck.tensors[next(iter(ck.tensors))]
    save_checkpoint(tmp_path / "bad.ckpt", ck.tensors, ck.meta)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "bad.ckpt")
    save_checkpoint(tmp_path / "nometa.ckpt", {}, {})
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "nometa.ckpt")
