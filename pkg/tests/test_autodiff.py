"""Engine-level checks: every primitive's reverse pass against central
differences, graph traversal corner cases, optimizer arithmetic, and the
checkpoint container format."""

import numpy as np
import pytest

from dgfnet.autodiff import ops
from dgfnet.autodiff.checkpoint import load_checkpoint, save_checkpoint
from dgfnet.autodiff.gradcheck import finite_diff_check
from dgfnet.autodiff.nn import BatchNorm2d, ChannelNorm, Conv2d, LayerNorm, Linear
from dgfnet.autodiff.optim import Adam
from dgfnet.autodiff.tensor import Tensor, backward, no_grad
from dgfnet.errors import CheckpointFormatError, ContractError, NumericError

GRAD_TOL = 1e-5


def _param(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def test_elementwise_gradients():
    rng = np.random.default_rng(20)
    cases = [
        ("exp", lambda x: ops.exp(x), (-1.0, 1.0)),
        ("log", lambda x: ops.log(x), (0.5, 2.0)),
        ("sqrt", lambda x: ops.sqrt(x), (0.5, 2.0)),
        ("sigmoid", lambda x: ops.sigmoid(x), (-2.0, 2.0)),
        ("tanh", lambda x: ops.tanh(x), (-2.0, 2.0)),
        ("neg", lambda x: -x, (-1.0, 1.0)),
        ("pow3", lambda x: x ** 3, (0.5, 1.5)),
        ("affine", lambda x: ops.affine(x, 1.7, -0.3), (-1.0, 1.0)),
    ]
    for name, fn, (lo, hi) in cases:
        x = _param(rng, (3, 4), lo, hi)
        err = finite_diff_check(lambda: fn(x).sum(), x, rng=rng)
        assert err < GRAD_TOL, f"{name}: finite-diff mismatch {err:.3e}"


def test_binary_broadcast_gradients():
    rng = np.random.default_rng(21)
    a = _param(rng, (2, 3, 4))
    b = _param(rng, (3, 1), 0.5, 1.5)  # broadcasts against a
    for name, fn in [("add", lambda: (a + b).sum()),
                     ("sub", lambda: (a - b).sum()),
                     ("mul", lambda: (a * b).sum()),
                     ("div", lambda: (a / b).sum())]:
        for p in (a, b):
            err = finite_diff_check(fn, p, rng=rng)
            assert err < GRAD_TOL, f"{name} wrt {p.shape}: {err:.3e}"


def test_relu_and_abs_gradients_away_from_kink():
    # keep all coordinates at least 0.1 from the non-differentiable point
    rng = np.random.default_rng(22)
    x = Tensor(np.concatenate([rng.uniform(0.1, 1.0, 8),
                               rng.uniform(-1.0, -0.1, 8)]),
               requires_grad=True)
    for name, fn in [("relu", ops.relu), ("abs", ops.abs)]:
        err = finite_diff_check(lambda: fn(x).sum(), x, epsilon=1e-6,
                                max_coords=16, rng=rng)
        assert err < 1e-4, f"{name}: {err:.3e}"


def test_softmax_gradient_and_rows_sum_to_one():
    rng = np.random.default_rng(23)
    x = _param(rng, (4, 5), -2.0, 2.0)
    w = Tensor(rng.normal(size=(4, 5)))
    y = ops.softmax(x, axis=1)
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, rtol=1e-12)
    err = finite_diff_check(lambda: (ops.softmax(x, axis=1) * w).sum(), x, rng=rng)
    assert err < GRAD_TOL


def test_matmul_gradients_batched_and_broadcast():
    rng = np.random.default_rng(24)
    # plain 2-D
    a = _param(rng, (3, 4))
    b = _param(rng, (4, 2))
    for p in (a, b):
        err = finite_diff_check(lambda: ops.matmul(a, b).sum(), p, rng=rng)
        assert err < GRAD_TOL
    # batched lhs with shared rhs
    ab = _param(rng, (5, 3, 4))
    for p in (ab, b):
        err = finite_diff_check(lambda: ops.matmul(ab, b).sum(), p, rng=rng)
        assert err < GRAD_TOL, f"broadcast rhs: {err:.3e}"
    # fully batched
    bb = _param(rng, (5, 4, 2))
    err = finite_diff_check(lambda: ops.matmul(ab, bb).sum(), bb, rng=rng)
    assert err < GRAD_TOL


def test_shape_op_gradients():
    rng = np.random.default_rng(25)
    x = _param(rng, (2, 3, 4))
    w = Tensor(rng.normal(size=(4, 3, 2)))
    err = finite_diff_check(
        lambda: (x.transpose(2, 1, 0) * w).sum(), x, rng=rng)
    assert err < GRAD_TOL, "transpose"
    err = finite_diff_check(
        lambda: (x.reshape(6, 4) * Tensor(w.data.reshape(6, 4))).sum(), x, rng=rng)
    assert err < GRAD_TOL, "reshape"
    y = _param(rng, (2, 1, 4))
    err = finite_diff_check(
        lambda: (ops.broadcast_to(y, (2, 3, 4)) * w.transpose(2, 1, 0)).sum(),
        y, rng=rng)
    assert err < GRAD_TOL, "broadcast_to"
    err = finite_diff_check(
        lambda: ops.concat([x, x * x], axis=1).sum(), x, rng=rng)
    assert err < GRAD_TOL, "concat"
    err = finite_diff_check(
        lambda: (ops.slice_axis(x, 2, 1, 3) ** 2).sum(), x, rng=rng)
    assert err < GRAD_TOL, "slice"


def test_reduction_gradients_int_and_tuple_axes():
    rng = np.random.default_rng(26)
    x = _param(rng, (3, 4, 5))
    w2 = Tensor(rng.normal(size=(3, 5)))
    w1 = Tensor(rng.normal(size=(4,)))
    cases = [
        ("sum axis=1", lambda: (ops.sum(x, axis=1) * w2).sum()),
        ("mean axis=1", lambda: (ops.mean(x, axis=1) * w2).sum()),
        ("sum axis=(0,2)", lambda: (ops.sum(x, axis=(0, 2)) * w1).sum()),
        ("mean axis=(0,2)", lambda: (ops.mean(x, axis=(0, 2)) * w1).sum()),
        ("sum keepdims", lambda: (ops.sum(x, axis=2, keepdims=True) * x).sum()),
        ("mean all", lambda: ops.mean(x) * Tensor(3.0)),
    ]
    for name, fn in cases:
        err = finite_diff_check(fn, x, rng=rng)
        assert err < GRAD_TOL, f"{name}: {err:.3e}"


def test_conv_pool_upsample_gradients():
    rng = np.random.default_rng(27)
    x = _param(rng, (2, 3, 6, 6))
    w = _param(rng, (4, 3, 3, 3), -0.5, 0.5)
    b = _param(rng, (4,), -0.2, 0.2)
    s = Tensor(rng.normal(size=(2, 4, 6, 6)))
    for p in (x, w, b):
        err = finite_diff_check(
            lambda: (ops.conv2d(x, w, b) * s).sum(), p, rng=rng)
        assert err < GRAD_TOL, f"conv2d wrt {p.shape}: {err:.3e}"
    err = finite_diff_check(lambda: (ops.avgpool2x(x) ** 2).sum(), x, rng=rng)
    assert err < GRAD_TOL, "avgpool2x"
    err = finite_diff_check(lambda: (ops.upsample2x(x) ** 2).sum(), x, rng=rng)
    assert err < GRAD_TOL, "upsample2x"
    # maxpool: make entries well separated so the argmax never flips
    xm = Tensor(rng.permutation(144).astype(float).reshape(2, 2, 6, 6) * 0.1,
                requires_grad=True)
    err = finite_diff_check(lambda: (ops.maxpool2x(xm) ** 2).sum(), xm,
                            epsilon=1e-4, rng=rng)
    assert err < 1e-4, "maxpool2x"


def test_upsample_then_avgpool_is_identity():
    rng = np.random.default_rng(28)
    x = rng.normal(size=(1, 2, 4, 4))
    y = ops.avgpool2x(ops.upsample2x(Tensor(x)))
    np.testing.assert_array_equal(y.data, x)


def test_diamond_graph_accumulates_both_paths():
    # d(x*x + x*x)/dx = 4x: the same tensor feeds two branches
    x = Tensor(np.array([1.5, -2.0, 3.0]), requires_grad=True)
    y = x * x
    z = (y + y).sum()
    backward(z)
    np.testing.assert_allclose(x.grad, 4.0 * x.data, rtol=1e-12)


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * x).sum()
    assert y._node is None and y._parents == ()
    backward(y)  # constant scalar: nothing reachable, silently a no-op
    assert x.grad is None


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * x)


def test_non_finite_construction_rejected():
    with pytest.raises(NumericError):
        Tensor(np.array([1.0, np.inf]))


def test_layer_gradients():
    rng = np.random.default_rng(29)
    layers = {
        "linear": (Linear(5, 3, rng), (2, 5)),
        "conv": (Conv2d(2, 3, 3, rng), (2, 2, 4, 4)),
        "channelnorm": (ChannelNorm(4), (2, 4, 3, 3)),
        "layernorm": (LayerNorm(6), (2, 6)),
    }
    for name, (layer, in_shape) in layers.items():
        x = Tensor(rng.normal(size=in_shape))
        target = Tensor(rng.normal(size=layer.forward(x).shape))

        def loss():
            d = layer.forward(x) - target
            return (d * d).mean()

        for pname, p in layer.named_parameters():
            err = finite_diff_check(loss, p, rng=rng)
            assert err < 1e-4, f"{name}.{pname}: {err:.3e}"


def test_batchnorm_train_vs_eval():
    rng = np.random.default_rng(30)
    bn = BatchNorm2d(3)
    x = rng.normal(loc=2.0, scale=3.0, size=(4, 3, 5, 5))
    bn.train()
    y = bn.forward(Tensor(x))
    # train mode normalizes with batch statistics
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.data.std(axis=(0, 2, 3)), 1.0, atol=1e-3)
    bn.eval()
    y1 = bn.forward(Tensor(x)).data
    y2 = bn.forward(Tensor(x)).data
    # eval mode is frozen: repeated passes do not drift
    np.testing.assert_array_equal(y1, y2)


def test_adam_single_step_matches_reference():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([{"name": "g", "params": {"p": p}, "lr": 0.1,
                 "decoupled_decay": 0.0}], betas=(0.9, 0.999))
    g = np.array([0.5, -1.0])
    p.grad = g.copy()
    opt.step()
    # bias-corrected first step reduces to p - lr * g / (|g| + eps)
    expect = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-10)


def test_decoupled_decay_shrinks_without_gradient():
    p = Tensor(np.array([2.0]), requires_grad=True)
    q = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam([
        {"name": "decayed", "params": {"p": p}, "lr": 0.5, "decoupled_decay": 0.1},
        {"name": "plain", "params": {"q": q}, "lr": 0.5, "decoupled_decay": 0.0},
    ])
    p.grad = np.zeros(1)
    q.grad = np.zeros(1)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.5 * 0.1)], rtol=1e-12)
    np.testing.assert_allclose(q.data, [2.0], rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([{"name": "g", "params": {"p": p}, "lr": 0.1}])
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError):
        opt.step()


def test_optimizer_state_round_trip(tmp_path):
    rng = np.random.default_rng(31)
    p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    opt = Adam([{"name": "g", "params": {"p": p}, "lr": 0.01}])
    for _ in range(3):
        p.grad = rng.normal(size=(3, 2))
        opt.step()
    path = tmp_path / "opt.dgfn"
    save_checkpoint(path, opt.state_arrays())
    p2 = Tensor(p.data.copy(), requires_grad=True)
    opt2 = Adam([{"name": "g", "params": {"p": p2}, "lr": 0.01}])
    opt2.load_state_arrays(load_checkpoint(path))
    assert opt2.step_count == opt.step_count
    g = rng.normal(size=(3, 2))
    p.grad = g.copy()
    p2.grad = g.copy()
    opt.step()
    opt2.step()
    np.testing.assert_array_equal(p.data, p2.data)


def test_checkpoint_bit_exact_round_trip(tmp_path):
    rng = np.random.default_rng(32)
    arrays = {
        "a.weight": rng.normal(size=(4, 3)),
        "b.bias": rng.normal(size=(7,)).astype(np.float32),
        "scalar": np.array([3.25]),
        "empty_axis": np.zeros((0, 5)),
    }
    path = tmp_path / "state.dgfn"
    save_checkpoint(path, arrays)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype, k
        np.testing.assert_array_equal(loaded[k], arrays[k])
    # same content twice -> identical bytes (sorted record order)
    path2 = tmp_path / "state2.dgfn"
    save_checkpoint(path2, dict(reversed(list(arrays.items()))))
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "state.dgfn"
    save_checkpoint(path, {"w": np.arange(6.0).reshape(2, 3)})
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.dgfn"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "trunc.dgfn"
    truncated.write_bytes(bytes(raw[:-8]))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(truncated)

    bad_version = tmp_path / "ver.dgfn"
    v = bytearray(raw)
    v[4] = 0xEE
    bad_version.write_bytes(bytes(v))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad_version)
