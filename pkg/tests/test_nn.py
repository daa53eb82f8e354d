"""Layer forward/backward oracles, Adam trace, schedules, gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthrl import nn


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------- references

def naive_dense(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]), dtype=np.float64)
    for i in range(x.shape[0]):
        for o in range(w.shape[0]):
            acc = 0.0
            for j in range(x.shape[1]):
                acc += x[i, j] * w[o, j]
            out[i, o] = acc + b[o]
    return out


def naive_conv(x, w, b, stride):
    """Reference NHWC convolution; kernels stored (out_ch, in_ch, kh, kw)."""
    bsz, h, wd, cin = x.shape
    cout, _, k, _ = w.shape
    oh = (h - k) // stride + 1
    ow = (wd - k) // stride + 1
    out = np.zeros((bsz, oh, ow, cout), dtype=np.float64)
    for n in range(bsz):
        for o in range(cout):
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for dy in range(k):
                            for dz in range(k):
                                acc += x[n, y * stride + dy, z * stride + dz, c] * w[o, c, dy, dz]
                    out[n, y, z, o] = acc + b[o]
    return out


# ------------------------------------------------------------------- forward

def test_dense_matches_naive_matmul():
    r = rng(1)
    layer = nn.Dense("d", 5, 4, rng=r, dtype=np.float64)
    x = r.standard_normal((3, 5))
    got = layer.forward(x)
    want = naive_dense(x, layer.w.value, layer.b.value)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_dense_matches_naive_f32():
    r = rng(2)
    layer = nn.Dense("d", 8, 6, rng=r, dtype=np.float32)
    x = r.standard_normal((4, 8)).astype(np.float32)
    want = naive_dense(x.astype(np.float64), layer.w.value.astype(np.float64),
                       layer.b.value.astype(np.float64))
    np.testing.assert_allclose(layer.forward(x), want, atol=1e-6)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_naive(stride):
    r = rng(3)
    layer = nn.Conv2d("c", 2, 3, ksize=3, stride=stride, rng=r, dtype=np.float64)
    x = r.standard_normal((2, 7, 7, 2))
    got = layer.forward(x)
    want = naive_conv(x, layer.w.value, layer.b.value, stride)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_residual_block_zero_weights_is_identity():
    r = rng(4)
    block = nn.ResidualBlock("rb", 6, rng=r, dtype=np.float64)
    block.dense.w.value[...] = 0.0
    block.dense.b.value[...] = 0.0
    x = r.standard_normal((3, 6))
    np.testing.assert_array_equal(block.forward(x), x)


def test_residual_block_zero_input_gives_bias():
    r = rng(5)
    block = nn.ResidualBlock("rb", 6, rng=r, dtype=np.float64)
    x = np.zeros((2, 6))
    np.testing.assert_allclose(block.forward(x), np.broadcast_to(block.dense.b.value, (2, 6)))


def test_residual_block_matches_matmul_oracle():
    r = rng(6)
    block = nn.ResidualBlock("rb", 4, rng=r, dtype=np.float64)
    x = r.standard_normal((2, 4))
    want = naive_dense(np.maximum(x, 0.0), block.dense.w.value, block.dense.b.value) + x
    np.testing.assert_allclose(block.forward(x), want, atol=1e-6)


def test_residual_block_rejects_width_mismatch():
    block = nn.ResidualBlock("rb", 4, rng=rng(7), dtype=np.float64)
    with pytest.raises(ValueError):
        block.forward(np.zeros((1, 5)))


# ----------------------------------------------------------------------- rff

def test_rff_embedding_range_and_dim():
    freqs = nn.rff_frequencies(rng(8), dim=16)
    emb = nn.rff_embed(0.37, freqs)
    assert emb.shape == (32,)
    assert np.all(emb >= -1.0) and np.all(emb <= 1.0)


def test_rff_embedding_deterministic_and_pythagorean():
    freqs = nn.rff_frequencies(rng(9), dim=16)
    a = nn.rff_embed(2.5, freqs)
    b = nn.rff_embed(2.5, freqs)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a[:16] ** 2 + a[16:] ** 2, np.ones(16), atol=1e-6)


def test_rff_embedding_rejects_nonpositive_sigma():
    freqs = nn.rff_frequencies(rng(10))
    with pytest.raises(ValueError):
        nn.rff_embed(0.0, freqs)
    with pytest.raises(ValueError):
        nn.rff_embed(np.array([1.0, -2.0]), freqs)


# ---------------------------------------------------------------------- adam

def test_adam_zero_gradient_keeps_params():
    p = nn.Param("p", np.array([1.0, -2.0], dtype=np.float64))
    opt = nn.Adam([p])
    opt.step(0.1)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_constant_gradient_step_approaches_lr():
    p = nn.Param("p", np.array([0.0], dtype=np.float64))
    opt = nn.Adam([p])
    prev = p.value.copy()
    for _ in range(500):
        p.grad[...] = 3.7
        prev = p.value.copy()
        opt.step(0.01)
    # with constant gradients m_hat/sqrt(v_hat) -> 1, so |step| -> lr
    assert abs(abs(float(p.value[0] - prev[0])) - 0.01) < 1e-4


def test_adam_two_step_trace_matches_hand_computation():
    # independent scalar trace of two bias-corrected Adam updates
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta, m, v = 1.0, 0.0, 0.0
    for g in (0.5, -0.25):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        t = 1 if g == 0.5 else 2
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

    p = nn.Param("p", np.array([1.0], dtype=np.float64))
    opt = nn.Adam([p])
    p.grad[...] = 0.5
    opt.step(lr)
    p.zero_grad()
    p.grad[...] = -0.25
    opt.step(lr)
    assert abs(float(p.value[0]) - theta) < 1e-10


def test_adam_aborts_on_nan_gradient():
    p = nn.Param("p", np.zeros(2))
    opt = nn.Adam([p])
    p.grad[...] = np.nan
    with pytest.raises(nn.TrainingDiverged):
        opt.step(0.1)


# ------------------------------------------------------------------ schedule

def test_cosine_lr_endpoints_and_midpoint():
    sched = nn.LRSchedule(3e-4, 1000, kind="cosine")
    assert nn.cosine_lr(0, sched) == pytest.approx(3e-4)
    assert nn.cosine_lr(1000, sched) == pytest.approx(0.0, abs=1e-12)
    assert nn.cosine_lr(500, sched) == pytest.approx(1.5e-4)
    assert nn.cosine_lr(2000, sched) == pytest.approx(0.0, abs=1e-12)


def test_cosine_lr_monotone_nonincreasing():
    sched = nn.LRSchedule(1e-3, 257, kind="cosine")
    values = [nn.cosine_lr(s, sched) for s in range(258)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(v > 0 for v in values[:-1])


def test_constant_schedule():
    sched = nn.LRSchedule(5e-4, 100, kind="constant")
    assert nn.cosine_lr(99, sched) == 5e-4


# ------------------------------------------------------------ gradient check

def test_gradient_check_linear_quadratic_is_exact():
    r = rng(11)
    layer = nn.Dense("d", 6, 3, rng=r, dtype=np.float64)
    x = r.standard_normal((4, 6))
    y = r.standard_normal((4, 3))

    def loss_and_grad():
        out = layer.forward(x)
        diff = out - y
        layer.backward(2.0 * diff / diff.size)
        return float(np.mean(diff ** 2))

    err = nn.gradient_check(loss_and_grad, layer.params(), rng(12), num_coords=18)
    assert err <= 1e-8


def test_gradient_check_residual_mlp():
    r = rng(13)
    net = nn.Sequential([
        nn.Dense("in", 5, 16, rng=r, dtype=np.float64),
        nn.ResidualBlock("rb0", 16, rng=r, dtype=np.float64),
        nn.ResidualBlock("rb1", 16, rng=r, dtype=np.float64),
        nn.Dense("out", 16, 5, rng=r, dtype=np.float64),
    ])
    x = r.standard_normal((3, 5))

    def loss_and_grad():
        out = net.forward(x)
        net.backward(2.0 * out / out.size)
        return float(np.mean(out ** 2))

    err = nn.gradient_check(loss_and_grad, net.params(), rng(14), num_coords=64)
    assert err <= 1e-4


def test_gradient_check_conv_plus_head():
    r = rng(15)
    conv = nn.Sequential([
        nn.Conv2d("c0", 3, 4, ksize=3, stride=2, rng=r, dtype=np.float64),
        nn.ReLU(),
        nn.Flatten(),
        nn.Dense("head", 4 * 5 * 5, 7, rng=r, dtype=np.float64),
        nn.Tanh(),
    ])
    x = r.standard_normal((2, 11, 11, 3))

    def loss_and_grad():
        out = conv.forward(x)
        conv.backward(np.ones_like(out) / out.size)
        return float(np.mean(out))

    err = nn.gradient_check(loss_and_grad, conv.params(), rng(16), num_coords=64)
    assert err <= 1e-4


# --------------------------------------------------------------- determinism

def test_seeded_init_and_training_bit_reproducible():
    def build_and_train():
        r = rng(77)
        net = nn.Sequential([nn.Dense("a", 4, 8, rng=r), nn.ReLU(), nn.Dense("b", 8, 1, rng=r)])
        opt = nn.Adam(net.params())
        data_rng = rng(78)
        x = data_rng.standard_normal((16, 4)).astype(np.float32)
        y = data_rng.standard_normal((16, 1)).astype(np.float32)
        for step in range(20):
            opt.zero_grad()
            out = net.forward(x)
            net.backward(2.0 * (out - y) / out.size)
            opt.step(1e-3)
        return [p.value.copy() for p in net.params()]

    first = build_and_train()
    second = build_and_train()
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------- property checks

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dense_forward_property_matches_einsum(seed):
    r = rng(seed)
    din = int(r.integers(1, 9))
    dout = int(r.integers(1, 9))
    layer = nn.Dense("d", din, dout, rng=r, dtype=np.float64)
    x = r.standard_normal((2, din))
    want = np.einsum("bi,oi->bo", x, layer.w.value) + layer.b.value
    np.testing.assert_allclose(layer.forward(x), want, atol=1e-12)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    r = rng(20)
    net = nn.Sequential([nn.Dense("enc.fc0", 3, 5, rng=r), nn.Conv2d("enc.c", 2, 2, rng=r)])
    path = tmp_path / "net.srnn"
    nn.save_params(path, net.params())
    stored = nn.read_params(path)
    assert set(stored) == {p.name for p in net.params()}
    for p in net.params():
        np.testing.assert_array_equal(stored[p.name], p.value)
    # loading into a differently initialized clone restores identical bytes
    r2 = rng(21)
    clone = nn.Sequential([nn.Dense("enc.fc0", 3, 5, rng=r2), nn.Conv2d("enc.c", 2, 2, rng=r2)])
    nn.load_params(path, clone.params())
    assert nn.params_sha256(clone.params()) == nn.params_sha256(net.params())


def test_checkpoint_shape_mismatch_raises(tmp_path):
    r = rng(22)
    net = nn.Dense("x", 3, 3, rng=r)
    path = tmp_path / "net.srnn"
    nn.save_params(path, net.params())
    other = nn.Dense("x", 3, 4, rng=r)
    with pytest.raises(nn.CheckpointError):
        nn.load_params(path, other.params())


def test_checkpoint_magic_validation(tmp_path):
    path = tmp_path / "bogus.srnn"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(nn.CheckpointError) as exc:
        nn.read_params(path)
    assert exc.value.field == "magic"
