import math

import numpy as np
import pytest

from drivebench import nn
from drivebench.errors import DimMismatch
from drivebench.nn import AdamW, ParamSet, Tensor, backward, finite_diff_check, tensor


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def test_affine_identity():
    x = tensor(np.arange(6.0).reshape(2, 3))
    w = tensor(np.eye(3))
    b = tensor(np.zeros(3))
    y = nn.affine(x, w, b)
    assert np.array_equal(y.data, x.data)


def test_relu_values():
    y = nn.relu(tensor([-1.0, 2.0]))
    assert np.array_equal(y.data, [0.0, 2.0])


def test_layer_norm_constant_vector_returns_beta():
    x = tensor(np.full((4,), 3.7))
    gamma = tensor(np.ones(4) * 2.0)
    beta = tensor(np.array([1.0, -1.0, 0.5, 0.0]))
    y = nn.layer_norm(x, gamma, beta)
    assert np.allclose(y.data, beta.data, atol=1e-9)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def test_attention_single_kv_repeats_value_row():
    q = tensor(np.random.default_rng(0).normal(size=(3, 4)))
    k = tensor(np.random.default_rng(1).normal(size=(1, 4)))
    v = tensor(np.array([[5.0, -2.0, 0.0, 1.0]]))
    y = nn.softmax_attention(q, k, v)
    assert np.allclose(y.data, np.tile(v.data, (3, 1)), atol=1e-12)


def test_attention_orthogonal_keys_limit():
    k = tensor(np.eye(4))
    v = tensor(np.diag([1.0, 2.0, 3.0, 4.0]))
    q = tensor(50.0 * np.eye(4)[2][None, :])
    y = nn.softmax_attention(q, k, v)
    assert np.allclose(y.data[0], v.data[2], atol=1e-6)


def test_attention_matches_explicit_softmax_arithmetic():
    rng = np.random.default_rng(7)
    q = rng.normal(size=(3, 4))
    k = rng.normal(size=(3, 4))
    v = rng.normal(size=(3, 4))
    # step-by-step reference computed with explicit arithmetic
    expected = np.empty((3, 4))
    for i in range(3):
        logits = [sum(q[i][m] * k[j][m] for m in range(4)) / math.sqrt(4) for j in range(3)]
        mx = max(logits)
        exps = [math.exp(l - mx) for l in logits]
        total = sum(exps)
        weights = [e / total for e in exps]
        for m in range(4):
            expected[i, m] = sum(weights[j] * v[j][m] for j in range(3))
    y = nn.softmax_attention(tensor(q), tensor(k), tensor(v))
    assert np.allclose(y.data, expected, atol=1e-12)


def test_attention_rows_are_convex_combinations():
    rng = np.random.default_rng(8)
    q = tensor(rng.normal(size=(5, 6)))
    k = tensor(rng.normal(size=(7, 6)))
    v = tensor(rng.normal(size=(7, 3)))
    y, w = nn.softmax_attention(q, k, v, return_weights=True)
    assert np.all(w.data >= 0)
    assert np.max(np.abs(w.data.sum(axis=-1) - 1.0)) < 1e-12
    assert np.allclose(y.data, w.data @ v.data, atol=1e-12)


# ---------------------------------------------------------------------------
# grid ops
# ---------------------------------------------------------------------------

def naive_conv3x3(x, k):
    b, h, w, cin = x.shape
    cout = k.shape[3]
    out = np.zeros((b, h, w, cout))
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            out[bi, i, j] += x[bi, ii, jj] @ k[di, dj]
    return out


def test_conv_identity_kernel():
    rng = np.random.default_rng(9)
    x = tensor(rng.normal(size=(2, 5, 5, 3)))
    k = tensor(nn.identity_kernel(3))
    y = nn.conv3x3(x, k)
    assert np.allclose(y.data, x.data, atol=1e-12)


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 4, 6, 3))
    k = rng.normal(size=(3, 3, 3, 5))
    y = nn.conv3x3(tensor(x), tensor(k))
    assert np.allclose(y.data, naive_conv3x3(x, k), atol=1e-10)


def test_upsample_then_downsample_identity():
    rng = np.random.default_rng(11)
    x = tensor(rng.normal(size=(1, 4, 4, 2)))
    k = tensor(nn.identity_kernel(2))
    y = nn.downsample2(nn.conv3x3(nn.upsample2(x), k))
    assert np.allclose(y.data, x.data, atol=1e-12)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_linear_case():
    ps = ParamSet(seed=0)
    w = ps.set("w", np.zeros((3, 2)))
    x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    loss = nn.sum_all(nn.matmul(tensor(x), w))
    backward(loss)
    # d/dW sum(XW) = X^T @ ones
    assert np.allclose(w.grad, x.T @ np.ones((2, 2)), atol=1e-12)


def test_backward_unreached_parameter_has_zero_grad():
    ps = ParamSet(seed=0)
    used = ps.add("used", (2, 2))
    unused = ps.add("unused", (2, 2))
    ps.zero_grad()
    loss = nn.sum_all(nn.matmul(tensor(np.ones((1, 2))), used))
    backward(loss)
    assert np.any(used.grad != 0)
    assert np.all(unused.grad == 0)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def test_finite_diff_quadratic_is_exact():
    ps = ParamSet(seed=1)
    ps.add("w", (5,))

    def f(p):
        return nn.sum_all(nn.mul(p["w"], p["w"]))

    assert finite_diff_check(f, ps) < 1e-8


def test_finite_diff_composite_network():
    ps = ParamSet(seed=2)
    ps.add("w1", (6, 8))
    ps.add("b1", (8,), init="zeros")
    ps.add("w2", (8, 4))
    ps.add("b2", (4,), init="zeros")
    ps.add("q", (1, 4))
    ps.add("gamma", (4,))
    ps.add("beta", (4,), init="zeros")
    x = np.random.default_rng(3).normal(size=(5, 6))
    target = np.random.default_rng(4).normal(size=(1, 4))

    def f(p):
        h = nn.relu(nn.affine(tensor(x), p["w1"], p["b1"]))
        kv = nn.layer_norm(nn.affine(h, p["w2"], p["b2"]), p["gamma"], p["beta"])
        y = nn.softmax_attention(p["q"], kv, kv)
        return nn.mse_loss(y, target)

    assert finite_diff_check(f, ps, n_coords=60) < 1e-4


def test_finite_diff_conv_path():
    ps = ParamSet(seed=5)
    ps.add("k1", (3, 3, 2, 2))
    ps.add("k2", (3, 3, 2, 2))
    x = np.random.default_rng(6).normal(size=(1, 4, 4, 2))

    def f(p):
        y = nn.downsample2(nn.conv3x3(nn.upsample2(tensor(x)), p["k1"]))
        y = nn.conv3x3(y, p["k2"])
        return nn.mean_all(nn.mul(y, y))

    assert finite_diff_check(f, ps, n_coords=60) < 1e-4


def test_finite_diff_losses():
    ps = ParamSet(seed=7)
    ps.add("w", (4, 3))
    x = np.random.default_rng(8).normal(size=(2, 4))

    def f_bce(p):
        return nn.bce_with_logits(nn.matmul(tensor(x), p["w"]), np.array([[0.0, 1.0, 0.3], [0.9, 0.2, 1.0]]))

    def f_ce(p):
        return nn.cross_entropy_logits(nn.matmul(tensor(x), p["w"]), np.array([2, 0]))

    assert finite_diff_check(f_bce, ps) < 1e-4
    assert finite_diff_check(f_ce, ps) < 1e-4


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_optimizer_zero_gradient_leaves_params():
    ps = ParamSet(seed=0)
    w = ps.add("w", (3,))
    before = w.data.copy()
    ps.zero_grad()
    opt = AdamW(ps, lr=0.1, weight_decay=0.0)
    opt.step()
    assert np.array_equal(w.data, before)


def test_optimizer_matches_scalar_recurrence():
    ps = ParamSet(seed=0)
    w = ps.set("w", np.array([1.0]))
    opt = AdamW(ps, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    g = 0.3
    for _ in range(10):
        w.grad = np.array([g])
        opt.step()
    # independent scalar recurrence
    p, m, v = 1.0, 0.0, 0.0
    for t in range(1, 11):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        p -= 0.01 * mhat / (math.sqrt(vhat) + 1e-8)
    assert abs(w.data[0] - p) < 1e-12


def test_optimizer_weight_decay_only_shrinks_geometrically():
    ps = ParamSet(seed=0)
    w = ps.set("w", np.array([2.0]))
    opt = AdamW(ps, lr=0.1, weight_decay=0.5)
    for _ in range(3):
        w.grad = np.zeros(1)
        opt.step()
    assert abs(w.data[0] - 2.0 * (1 - 0.1 * 0.5) ** 3) < 1e-12


def test_training_determinism_bitwise():
    def run():
        ps = ParamSet(seed=42)
        ps.add("w", (4, 4))
        ps.add("b", (4,), init="zeros")
        opt = AdamW(ps, lr=0.01)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(size=(3, 4))
            t = rng.normal(size=(3, 4))
            ps.zero_grad()
            loss = nn.mse_loss(nn.affine(tensor(x), ps["w"], ps["b"]), t)
            backward(loss)
            opt.step()
        return ps.checksum()

    assert run() == run()


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_exact(tmp_path):
    ps = ParamSet(seed=3)
    ps.add("layer.w", (4, 5))
    ps.add("layer.b", (5,), init="zeros")
    path = tmp_path / "ckpt.json"
    ps.save(path)
    loaded = ParamSet.load(path)
    assert loaded.checksum() == ps.checksum()
    for name in ps.names():
        assert np.array_equal(loaded[name].data, ps[name].data)


def test_checkpoint_version_mismatch(tmp_path):
    ps = ParamSet(seed=3)
    ps.add("w", (2,))
    state = ps.state_dict()
    state["format_version"] = 999
    with pytest.raises(ValueError):
        ParamSet.from_state_dict(state)


def test_matmul_dim_mismatch():
    with pytest.raises(DimMismatch):
        nn.matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((4, 2))))
