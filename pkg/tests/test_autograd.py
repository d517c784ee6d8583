import numpy as np
import pytest

from instabnn import autograd as ag
from instabnn.nn import Linear
from instabnn.quant import quantizers
from instabnn.train import OptimState, optimizer_step

from conftest import central_diff
from gradcheck import CASES, _grad_check, _model, _prime_quantizers


def _check_op(fn, *shapes, seed=0, positive=False, h=1e-6, tol=1e-6):
    r = np.random.default_rng(seed)
    arrays = [r.uniform(0.5, 2.0, s) if positive else r.normal(size=s) for s in shapes]
    vars_ = [ag.Var(a.copy(), requires_grad=True) for a in arrays]
    weights = r.normal(size=np.shape(fn(*[ag.Var(a) for a in arrays]).data))
    loss = ag.sum(fn(*vars_) * weights)
    loss.backward()
    for v, a in zip(vars_, arrays):
        f = lambda: float(np.sum(fn(*[ag.Var(b) for b in arrays]).data * weights))
        for idx in list(np.ndindex(a.shape))[:: max(1, a.size // 12)]:
            fd = central_diff(f, a, idx, h)
            assert abs(fd - v.grad[idx]) <= tol * max(1.0, abs(fd)), (idx, fd, v.grad[idx])


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "div": (lambda a, b: a / b, [(2, 3), (2, 3)]),
    "power": (lambda a: a ** 3, [(2, 5)]),
    "exp": (ag.exp, [(3, 3)]),
    "tanh": (ag.tanh, [(3, 3)]),
    "sigmoid": (ag.sigmoid, [(3, 3)]),
    "relu": (ag.relu, [(4, 4)]),
    "tanh3": (lambda a: ag.bounded(a * 4, "tanh3"), [(3, 3)]),
    "matmul": (ag.matmul, [(3, 4), (4, 2)]),
    "transpose": (ag.transpose, [(3, 4)]),
    "sum_axis": (lambda a: ag.sum(a, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: ag.mean(a, axis=(2, 3)), [(2, 3, 3, 3)]),
    "reshape": (lambda a: ag.reshape(a, (6, 2)), [(3, 4)]),
    "concat": (lambda a, b: ag.concat([a, b], axis=1), [(2, 3, 2, 2), (2, 1, 2, 2)]),
    "conv": (lambda x, w: ag.conv2d(x, w, 1, 1), [(2, 3, 5, 5), (4, 3, 3, 3)]),
    "conv_s2": (lambda x, w: ag.conv2d(x, w, 2, 1), [(2, 3, 6, 6), (4, 3, 3, 3)]),
    "conv_1x1": (lambda x, w: ag.conv2d(x, w, 1, 0), [(2, 3, 4, 4), (2, 3, 1, 1)]),
    "conv_big_pad": (lambda x, w: ag.conv2d(x, w, 1, 3), [(1, 2, 3, 3), (2, 2, 3, 3)]),
    "avg_pool": (lambda x: ag.avg_pool2d(x, 2), [(2, 3, 4, 4)]),
    "max_pool": (lambda x: ag.max_pool2d(x, 3, 2, 1), [(2, 2, 6, 6)]),
    "gap": (ag.global_avg_pool, [(2, 3, 4, 4)]),
    "batch_norm": (lambda x: ag.batch_norm_train(x, 1e-5)[0], [(4, 3, 3, 3)]),
    "skewness": (ag.skewness, [(2, 3, 4, 4)]),
    "cross_entropy": (lambda z: ag.cross_entropy(z, np.array([0, 2, 1])), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, shapes = OPS[name]
    _check_op(fn, *shapes)


def test_log_gradient():
    _check_op(ag.log, (3, 3), positive=True)


def test_linear_closed_form(rng):
    lin = Linear(5, 3, bias=True, dtype=np.float64)
    lin.reset_parameters(rng)
    x = ag.Var(rng.normal(size=(4, 5)), requires_grad=True)
    up = rng.normal(size=(4, 3))
    ag.sum(lin(x) * up).backward()
    np.testing.assert_allclose(x.grad, up @ lin.weight.data, atol=1e-6)
    np.testing.assert_allclose(lin.weight.grad, up.T @ x.data, atol=1e-6)
    np.testing.assert_allclose(lin.bias.grad, up.sum(axis=0), atol=1e-6)


def test_ste_examples():
    for u, mode, want in [(0.5, "clip1", 1.0), (1.5, "clip1", 0.0), (0.5, "bireal_poly", 1.0),
                          (-0.25, "bireal_poly", 1.5), (1.0, "clip1", 1.0)]:
        v = ag.Var(np.array([u]), requires_grad=True)
        out = ag.sign_ste(v, mode)
        out.backward(np.ones(1))
        assert v.grad[0] == pytest.approx(want)
        assert out.data[0] == (1.0 if u >= 0 else -1.0)
    with pytest.raises(ValueError):
        ag.sign_ste(ag.Var(np.zeros(1)), "tanh")


def test_ste_is_derivative_of_surrogate():
    u = np.linspace(-1.9, 1.9, 76)  # avoids the kinks at +-1
    for mode in ag.STE_MODES:
        v = ag.Var(u.copy(), requires_grad=True)
        ag.sign_ste(v, mode).backward(np.ones_like(u))
        with ag.surrogate():
            fd = (ag.sign_ste(ag.Var(u + 1e-6), mode).data - ag.sign_ste(ag.Var(u - 1e-6), mode).data) / 2e-6
        np.testing.assert_allclose(v.grad, fd, atol=1e-6)


def test_binarize_weights_forward_and_masked_grad():
    w = ag.Var(np.array([[0.5, -1.5, 0.25, -0.0]]).reshape(1, 4, 1, 1), requires_grad=True)
    out = ag.binarize_weights(w)
    np.testing.assert_allclose(out.data.ravel(), np.array([1, -1, 1, 1]) * 0.5625)
    out.backward(np.ones_like(out.data))
    np.testing.assert_array_equal(w.grad.ravel(), [1, 0, 1, 1])


def test_moment3_gradient_closed_form(rng):
    x = ag.Var(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    ag.sum(ag.mean(x ** 3, axis=(2, 3))).backward()
    np.testing.assert_allclose(x.grad, 3 * x.data ** 2 / 16, rtol=1e-12)


def test_no_grad_records_nothing():
    p = ag.Parameter(np.ones(3))
    with ag.no_grad():
        y = p * 2
    assert not y.requires_grad


def test_backward_requires_tracked_scalar():
    with pytest.raises((ValueError, RuntimeError)):
        ag.backward(ag.Var(np.ones(3)))


# ---------------------------------------------------------------- model-level finite differences



@pytest.mark.parametrize("case", sorted(CASES))
def test_model_gradients_float64(case):
    variant, kw, patterns = CASES[case]
    m = _model(variant, np.float64, **kw)
    worst, checked = _grad_check(m, patterns, h=1e-6)
    assert checked
    assert worst <= 1e-5, checked


@pytest.mark.parametrize("case", sorted(CASES))
def test_model_gradients_float32(case):
    variant, kw, patterns = CASES[case]
    m = _model(variant, np.float32, **kw)
    worst, checked = _grad_check(m, patterns, h=1e-6)
    assert checked
    assert worst <= 1e-3, checked


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-5), (np.float32, 1e-3)])
def test_lsq_step_gradients_in_model(dtype, tol):
    m = _model("insta_plus", dtype)
    _prime_quantizers(m)
    worst, checked = _grad_check(m, ("step",), h=1e-6)
    assert len(checked) == len(quantizers(m)) == 12
    assert worst <= tol, checked


def test_bireal_surrogate_gradients():
    m = _model("insta", np.float64, ste="bireal_poly")
    worst, checked = _grad_check(m, ("alpha", "beta"), h=1e-6)
    assert worst <= 1e-5, checked


def test_channel_shifts_before_normalization_are_inert():
    # a per-channel constant feeding only normalizing layers cannot change the loss
    m = _model("insta", np.float64)
    x = np.random.default_rng(3).normal(size=(4, 3, 8, 8))
    m.zero_grad()
    with ag.surrogate():
        ag.cross_entropy(m(x), np.array([0, 1, 1, 0])).backward()
    for name, p in m.named_parameters():
        if (name.endswith("bn.bias") and name.startswith("units")) or name == "units.0.prelu.y_shift":
            assert np.max(np.abs(p.grad)) < 1e-12, name


def test_optimizer_first_adam_step():
    p = ag.Parameter(np.array([0.3]))
    p.grad = np.array([1.0])
    optimizer_step("adam", OptimState(), {"p": p}, 1e-3)
    assert p.data[0] - 0.3 == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-9)
    assert p.data[0] - 0.3 == pytest.approx(-9.99999e-4, rel=1e-5)


def test_optimizer_zero_grad_and_adamw_decay():
    p = ag.Parameter(np.array([0.5, -2.0]))
    p.grad = np.zeros(2)
    optimizer_step("adam", OptimState(), {"p": p}, 1e-3)
    np.testing.assert_array_equal(p.data, [0.5, -2.0])
    q = ag.Parameter(np.array([0.5, -2.0]), decay=True)
    q.grad = np.zeros(2)
    optimizer_step("adamw", OptimState(), {"q": q}, 1e-3, wd=1e-4)
    np.testing.assert_allclose(q.data, np.array([0.5, -2.0]) * (1 - 1e-3 * 1e-4), rtol=1e-15)
    nodecay = ag.Parameter(np.array([0.5]))
    nodecay.grad = np.zeros(1)
    optimizer_step("adamw", OptimState(), {"n": nodecay}, 1e-3, wd=1e-4)
    assert nodecay.data[0] == 0.5


def test_optimizer_clip_floor_and_errors():
    w = ag.Parameter(np.array([0.9995]), clip=1.0)
    w.grad = np.array([-1.0])
    optimizer_step("adam", OptimState(), {"w": w}, 1e-2)
    assert w.data[0] == 1.0
    s = ag.Parameter(np.array([1e-6]), floor=1e-8)
    s.grad = np.array([1.0])
    optimizer_step("adam", OptimState(), {"s": s}, 1e-2)
    assert s.data[0] == 1e-8
    with pytest.raises(ValueError):
        optimizer_step("adam", OptimState(), {}, 0.0)
    with pytest.raises(ValueError):
        optimizer_step("sgd", OptimState(), {}, 1e-3)


def test_adam_second_moment_nonnegative(rng):
    st = OptimState()
    p = ag.Parameter(rng.normal(size=5))
    for _ in range(5):
        p.grad = rng.normal(size=5)
        optimizer_step("adam", st, {"p": p}, 1e-3)
    assert np.all(st.v["p"] >= 0) and st.step == 5
