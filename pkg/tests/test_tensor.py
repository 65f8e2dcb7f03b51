import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradsuite
from voxgrasp import tensor as T
from voxgrasp.errors import DomainError, FormatError, ShapeError, UsageError
from voxgrasp.tensor import ParamStore, Tensor


def naive_conv(x, w, b, stride=1):
    cout, cin, k = w.shape[:3]
    pad = k // 2
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
    d = x.shape[1] // stride
    out = np.zeros((cout, d, d, d))
    for o in range(cout):
        for i in range(d):
            for j in range(d):
                for l in range(d):
                    s = b[o]
                    for c in range(cin):
                        for a in range(k):
                            for bb in range(k):
                                for cc in range(k):
                                    s += w[o, c, a, bb, cc] * xp[c, i * stride + a, j * stride + bb, l * stride + cc]
                    out[o, i, j, l] = s
    return out


@pytest.mark.parametrize("name,build,arrays", gradsuite.op_cases(), ids=lambda v: v if isinstance(v, str) else "")
def test_gradient_matches_finite_differences(name, build, arrays):
    assert gradsuite.check(build, arrays) <= 1e-5


def test_conv_identity_and_bias(rng):
    x = rng.normal(size=(3, 4, 4, 4))
    w = np.eye(3).reshape(3, 3, 1, 1, 1)
    assert np.array_equal(T.conv3(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data, x)
    out = T.conv3(Tensor(x), Tensor(np.zeros((2, 3, 3, 3, 3))), Tensor(np.array([1.5, -2.0])))
    assert np.all(out.data[0] == 1.5) and np.all(out.data[1] == -2.0)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_six_loop_reference(rng, stride):
    x = rng.normal(size=(1, 4, 4, 4))
    w = rng.normal(size=(2, 1, 3, 3, 3))
    b = rng.normal(size=2)
    got = T.conv3(Tensor(x), Tensor(w), Tensor(b), stride).data
    assert np.abs(got - naive_conv(x, w, b, stride)).max() < 1e-12


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError):
        T.conv3(Tensor(rng.normal(size=(1, 3, 4, 4))), Tensor(rng.normal(size=(1, 1, 3, 3, 3))), stride=2)
    with pytest.raises(ShapeError):
        T.conv3(Tensor(rng.normal(size=(2, 4, 4, 4))), Tensor(rng.normal(size=(1, 1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv3(Tensor(rng.normal(size=(1, 4, 4, 4))), Tensor(rng.normal(size=(1, 1, 2, 2, 2))))


def test_sparse_conv_equals_dense(rng):
    x, w, b = rng.normal(size=(2, 5, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    sites = np.array([[0, 0, 0], [4, 4, 4], [2, 1, 3]])
    dense = T.conv3(Tensor(x), Tensor(w), Tensor(b)).data
    sparse = T.conv3_at(Tensor(x), Tensor(w), Tensor(b), sites).data
    assert np.abs(sparse - dense[:, sites[:, 0], sites[:, 1], sites[:, 2]]).max() < 1e-12


def test_stride_then_upsample_restores_extent(rng):
    x = Tensor(rng.normal(size=(2, 6, 4, 8)))
    down = T.conv3(x, Tensor(rng.normal(size=(2, 2, 3, 3, 3))), stride=2)
    assert T.upsample_x2(down).shape == x.shape


def test_global_avg_pool(rng):
    assert np.allclose(T.global_avg_pool(Tensor(np.full((2, 3, 3, 3), 0.7))).data, 0.7)
    one = np.zeros((1, 2, 3, 4))
    one[0, 1, 2, 3] = 5.0
    assert T.global_avg_pool(Tensor(one)).data[0] == pytest.approx(5.0 / 24, abs=1e-15)
    x = rng.normal(size=(3, 4, 4, 4))
    assert np.abs(T.global_avg_pool(Tensor(x)).data - x.reshape(3, -1).sum(1) / 64).max() < 1e-12


def test_mlp2(rng):
    z = [np.zeros((2, 8)), np.zeros(2), np.zeros((8, 2)), np.zeros(8)]
    assert np.all(T.mlp2(Tensor(rng.normal(size=8)), *map(Tensor, z)).data == 0.5)
    prev = 0.0
    for bias in (1.0, 5.0, 20.0):
        out = T.mlp2(Tensor(rng.normal(size=8)), *map(Tensor, z[:3]), Tensor(np.full(8, bias))).data
        assert np.all(out > prev)
        prev = out.min()
    x, w1, b1, w2, b2 = rng.normal(size=8), rng.normal(size=(2, 8)), rng.normal(size=2), rng.normal(size=(8, 2)), rng.normal(size=8)
    ref = 1 / (1 + np.exp(-(w2 @ np.maximum(w1 @ x + b1, 0) + b2)))
    assert np.abs(T.mlp2(*map(Tensor, (x, w1, b1, w2, b2))).data - ref).max() < 1e-12


def test_softmax_examples():
    assert np.allclose(T.softmax_rows(Tensor(np.zeros((3, 4)))).data, 0.25)
    assert np.allclose(T.softmax_rows(Tensor(np.array([[0.0, math.log(3.0)]]))).data, [[0.25, 0.75]], atol=1e-15)
    big = T.softmax_rows(Tensor(np.array([[1000.0, 1000.0]]))).data
    assert np.allclose(big, 0.5)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-100, 100))
def test_softmax_shift_invariant(row, c):
    s = np.array([row])
    assert np.allclose(T.softmax_rows(Tensor(s + c)).data, T.softmax_rows(Tensor(s)).data, atol=1e-12)
    assert T.softmax_rows(Tensor(s)).data.sum() == pytest.approx(1.0, abs=1e-12)


def test_upsample_constant_and_ramp(rng):
    assert np.allclose(T.upsample_x2(Tensor(np.full((1, 2, 3, 2), 4.2))).data, 4.2, atol=1e-14)
    ramp = np.broadcast_to(np.arange(4.0)[:, None, None], (4, 4, 4))[None]
    up = T.upsample_x2(Tensor(ramp)).data
    # output center (i + 0.5) / 2 - 0.5 in input voxel units, exact away from the clamped border
    expect = (np.arange(8) + 0.5) / 2 - 0.5
    assert np.abs(up[0, 1:-1, 3, 3] - expect[1:-1]).max() < 1e-12


def test_upsample_matches_corner_oracle(rng):
    x = rng.normal(size=(1, 3, 3, 3))
    up = T.upsample_x2(Tensor(x)).data
    for idx in [(0, 0, 0), (1, 2, 3), (5, 5, 5), (2, 4, 1)]:
        u = np.clip((np.array(idx) + 0.5) / 2 - 0.5, 0, 2)
        i0 = np.minimum(np.floor(u).astype(int), 1)
        f = u - i0
        ref = 0.0
        for corner in np.ndindex(2, 2, 2):
            wgt = np.prod([f[a] if corner[a] else 1 - f[a] for a in range(3)])
            ref += wgt * x[(0,) + tuple(i0 + corner)]
        assert up[(0,) + idx] == pytest.approx(ref, abs=1e-12)


def test_backward_identity_and_constant():
    x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2), requires_grad=True)
    out = T.conv3(x, Tensor(np.ones((1, 1, 1, 1, 1))))
    g = np.linspace(-1, 1, 8).reshape(out.shape)
    out.backward(g)
    assert np.array_equal(x.grad, g)
    y = Tensor(np.ones(3), requires_grad=True)
    T.total(T.mul(y, np.zeros(3))).backward()
    assert np.all(y.grad == 0)


def test_backward_without_record_is_usage_error():
    with pytest.raises(UsageError):
        Tensor(np.ones(2)).backward()
    with pytest.raises(UsageError):
        T.add(Tensor(np.ones(2), requires_grad=True), 1.0).backward()


def test_adam_zero_gradient_keeps_params():
    s = ParamStore()
    s.add("w", np.array([1.0, -2.0]))
    T.adam_step(s, 0.1)
    assert np.array_equal(s.params["w"], [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    s = ParamStore()
    s.add("w", np.array([1.0, -2.0, 0.5]))
    s.grads["w"][...] = [3.0, -0.5, 100.0]
    T.adam_step(s, 0.01)
    assert np.allclose(s.params["w"], [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], atol=1e-9)
    assert np.all(s.grads["w"] == 0)


def test_adam_decreases_quadratic():
    s = ParamStore()
    s.add("x", np.array([3.0]))
    losses = []
    for _ in range(100):
        x = s["x"]
        loss = T.total(T.square(T.sub(x, 1.0)))
        losses.append(loss.item())
        loss.backward()
        s.collect()
        T.adam_step(s, 0.01)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_one_cycle_endpoints():
    assert T.one_cycle_lr(0, 1000) == pytest.approx(4e-5)
    assert T.one_cycle_lr(300, 1000) == pytest.approx(4e-4)
    assert T.one_cycle_lr(1000, 1000) == pytest.approx(4e-5 / 25)
    lrs = [T.one_cycle_lr(i, 1000) for i in range(1001)]
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) <= (4e-4 - 4e-5) / 10
    with pytest.raises(DomainError):
        T.one_cycle_lr(1001, 1000)
    with pytest.raises(DomainError):
        T.one_cycle_lr(0, 10, 1e-3, 1e-4)


def test_param_store_rules():
    s = ParamStore()
    s.add("a", np.zeros((2, 3)))
    assert s.grads["a"].shape == (2, 3) and np.all(s.m["a"] == 0) and np.all(s.v["a"] == 0)
    with pytest.raises(DomainError):
        s.add("a", np.zeros(1))
    assert s.count() == 6


def test_checkpoint_round_trip(tmp_path, rng):
    recs = [("a.w", rng.normal(size=(2, 3))), ("b", rng.normal(size=4).astype(np.float32)), ("s", np.array([7.0]))]
    T.write_checkpoint(recs, tmp_path / "c.vgck")
    back = T.read_checkpoint(tmp_path / "c.vgck")
    assert [n for n, _ in back] == ["a.w", "b", "s"]
    for (_, a), (_, b) in zip(recs, back):
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    raw = (tmp_path / "c.vgck").read_bytes()
    for bad in (b"ABCD" + raw[4:], raw[:4] + b"\x02" + raw[5:], raw[:-1], raw[:8], raw + b"\x00"):
        with pytest.raises(FormatError):
            T.checkpoint_from_bytes(bad)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_non_finite(monkeypatch):
    monkeypatch.setattr(T, "DEBUG", True)
    with pytest.raises(FloatingPointError):
        T.mul(Tensor(np.array([np.inf])), Tensor(np.array([0.0])))


def test_ops_deterministic(rng):
    x = rng.normal(size=(4, 4, 4, 4))
    w = rng.normal(size=(3, 4, 3, 3, 3))
    a = T.conv3(Tensor(x), Tensor(w)).data
    b = T.conv3(Tensor(x.copy()), Tensor(w.copy())).data
    assert a.tobytes() == b.tobytes()
