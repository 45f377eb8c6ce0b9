import numpy as np
import pytest

from tab2img import nn, tensor as T
from tab2img.errors import ConfigError, DataError, ShapeError, TrainingDiverged
from tab2img.tensor import Tensor

from fd import numeric_grad, relative_error


def rng(seed=0):
    return np.random.default_rng(seed)


# ---- affine ------------------------------------------------------------

def test_affine_zero_input_returns_bias():
    lin = nn.Linear(5, 3, rng())
    lin.bias.data[:] = [1.0, 2.0, 3.0]
    out = lin(Tensor(np.zeros((2, 5), dtype=np.float32)))
    assert np.allclose(out.data, [[1, 2, 3], [1, 2, 3]])


def test_affine_embed_layer_shape():
    lin = nn.Linear(78, 82, rng())
    out = lin(Tensor(np.zeros((1, 78), dtype=np.float32)))
    assert out.shape == (1, 82)


def test_affine_matches_matmul_plus_add():
    r = rng(3)
    x = r.normal(size=(4, 6)).astype(np.float32)
    w = r.normal(size=(6, 2)).astype(np.float32)
    b = r.normal(size=2).astype(np.float32)
    out = nn.affine(Tensor(x), Tensor(w), Tensor(b))
    assert np.allclose(out.data, x @ w + b, atol=1e-6)


def test_affine_shape_error():
    with pytest.raises(ShapeError):
        nn.affine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))


# ---- conv2d ------------------------------------------------------------

def conv_loop_oracle(x, k, b, padding=1):
    """Direct nested-loop cross-correlation, float64."""
    co, ci, kh, kw = k.shape
    bs, _, h, w = x.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((bs, co, h, w))
    for n in range(bs):
        for o in range(co):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for c in range(ci):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[n, c, i + di, j + dj] * k[o, c, di, dj]
                    out[n, o, i, j] = acc + b[o]
    return out


def test_conv2d_28x28_shape():
    conv = nn.Conv2d(1, 32, rng())
    out = conv(Tensor(np.zeros((2, 1, 28, 28), dtype=np.float32)))
    assert out.shape == (2, 32, 28, 28)


def test_conv2d_delta_kernel_is_identity():
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    k[0, 0, 1, 1] = 1.0
    x = rng(1).normal(size=(1, 1, 6, 6)).astype(np.float32)
    out = nn.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1, dtype=np.float32)))
    assert np.allclose(out.data, x, atol=1e-7)


def test_conv2d_matches_loop_oracle():
    r = rng(2)
    x = r.normal(size=(1, 1, 5, 5)).astype(np.float32)
    k = r.normal(size=(2, 1, 3, 3)).astype(np.float32)
    b = r.normal(size=2).astype(np.float32)
    out = nn.conv2d(Tensor(x), Tensor(k), Tensor(b))
    assert np.abs(out.data - conv_loop_oracle(x, k, b)).max() < 1e-6


def test_conv2d_multichannel_matches_loop_oracle():
    r = rng(9)
    x = r.normal(size=(2, 3, 4, 4)).astype(np.float32)
    k = r.normal(size=(5, 3, 3, 3)).astype(np.float32)
    b = r.normal(size=5).astype(np.float32)
    out = nn.conv2d(Tensor(x), Tensor(k), Tensor(b))
    assert np.abs(out.data - conv_loop_oracle(x, k, b)).max() < 1e-5


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        nn.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))),
                  Tensor(np.zeros(1)))


def test_conv2d_gradients_match_finite_differences():
    r = rng(5)
    x0 = r.normal(size=(1, 2, 4, 4))
    k0 = r.normal(size=(3, 2, 3, 3))
    b0 = r.normal(size=3)

    x = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    k = Tensor(k0.copy(), requires_grad=True, dtype=np.float64)
    b = Tensor(b0.copy(), requires_grad=True, dtype=np.float64)
    (nn.conv2d(x, k, b) ** 2).sum().backward()

    def loss_x(v):
        return float((nn.conv2d_forward(v, k0, b0) ** 2).sum())

    def loss_k(v):
        return float((nn.conv2d_forward(x0, v, b0) ** 2).sum())

    def loss_b(v):
        return float((nn.conv2d_forward(x0, k0, v) ** 2).sum())

    assert relative_error(x.grad, numeric_grad(loss_x, x0)) < 1e-4
    assert relative_error(k.grad, numeric_grad(loss_k, k0)) < 1e-4
    assert relative_error(b.grad, numeric_grad(loss_b, b0)) < 1e-4


# ---- maxpool -----------------------------------------------------------

def test_maxpool_constant():
    out = nn.maxpool2d(Tensor(np.full((1, 1, 4, 4), 2.5, dtype=np.float32)))
    assert np.array_equal(out.data, np.full((1, 1, 2, 2), 2.5))


def test_maxpool_window_max():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
    assert nn.maxpool2d(Tensor(x)).data[0, 0, 0, 0] == 4.0


def test_maxpool_shape_chain_to_7x7():
    out = nn.maxpool2d(Tensor(np.zeros((1, 64, 14, 14), dtype=np.float32)))
    assert out.shape == (1, 64, 7, 7)


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ShapeError):
        nn.maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))


def test_maxpool_backward_routes_to_first_argmax_on_tie():
    x = Tensor(np.array([[[[7.0, 7.0], [7.0, 7.0]]]]), requires_grad=True)
    nn.maxpool2d(x).sum().backward()
    assert np.array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_gradient_matches_finite_differences():
    r = rng(6)
    x0 = r.normal(size=(1, 2, 4, 4))  # distinct values, no ties

    def loss(v):
        return float((nn.maxpool2d_forward(v) ** 2).sum())

    x = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    (nn.maxpool2d(x) ** 2).sum().backward()
    assert relative_error(x.grad, numeric_grad(loss, x0)) < 1e-4


# ---- shape chain -------------------------------------------------------

def test_conv_pool_chain_yields_64x7x7():
    r = rng(8)
    x = Tensor(np.zeros((1, 1, 28, 28), dtype=np.float32))
    h = nn.maxpool2d(T.relu(nn.Conv2d(1, 32, r)(x)))
    assert h.shape == (1, 32, 14, 14)
    z = nn.maxpool2d(T.relu(nn.Conv2d(32, 64, r)(h)))
    assert z.shape == (1, 64, 7, 7)


# ---- dropout -----------------------------------------------------------

def test_dropout_identity_cases():
    x = Tensor(np.ones((3, 3)))
    assert nn.dropout(x, 0.0, True, rng()) is x
    assert nn.dropout(x, 0.5, False, rng()) is x


def test_dropout_survivor_fraction():
    x = Tensor(np.ones(200_000, dtype=np.float32))
    out = nn.dropout(x, 0.5, True, rng(42))
    survived = (out.data != 0).mean()
    assert abs(survived - 0.5) < 0.05
    # survivors are scaled by 1/(1-p)
    assert np.allclose(out.data[out.data != 0], 2.0)


def test_dropout_rejects_p_ge_1():
    with pytest.raises(ConfigError):
        nn.dropout(Tensor(np.ones(3)), 1.0, True, rng())


# ---- losses ------------------------------------------------------------

def test_cross_entropy_one_hot_correct():
    probs = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32))
    loss = nn.cross_entropy(probs, np.array([0, 1]))
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_uniform_is_log_n():
    n = 5
    probs = Tensor(np.full((3, n), 1.0 / n, dtype=np.float32))
    loss = nn.cross_entropy(probs, np.array([0, 2, 4]))
    assert loss.item() == pytest.approx(np.log(n), rel=1e-5)


def test_cross_entropy_hand_computed_batch():
    probs = Tensor(np.array([[0.7, 0.3], [0.2, 0.8]], dtype=np.float32))
    loss = nn.cross_entropy(probs, np.array([0, 0]))
    expected = -(np.log(0.7) + np.log(0.2)) / 2.0
    assert loss.item() == pytest.approx(expected, rel=1e-5)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(DataError):
        nn.cross_entropy(Tensor(np.full((1, 2), 0.5)), np.array([2]))


def test_mse_trivials():
    a = Tensor(np.array([1.0, 1.0]))
    assert nn.mse(a, a).item() == 0.0
    assert nn.mse(a, Tensor(np.array([0.0, 0.0]))).item() == pytest.approx(1.0)


def test_mse_matches_loop_oracle():
    r = rng(12)
    a = r.normal(size=(5, 7))
    b = r.normal(size=(5, 7))
    expected = sum((float(x) - float(y)) ** 2 for x, y in zip(a.flat, b.flat)) / a.size
    got = nn.mse(Tensor(a), Tensor(b)).item()
    assert got == pytest.approx(expected, abs=1e-7)


def test_mse_shape_error():
    with pytest.raises(ShapeError):
        nn.mse(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# ---- AdamW -------------------------------------------------------------

def test_adamw_zero_grad_zero_decay_keeps_params():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = nn.AdamW([p], weight_decay=0.0)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_single_step_matches_hand_rule():
    # one step, g=1, defaults: m=0.1, v=0.001, m_hat=1, v_hat=1
    theta0 = 0.5
    p = Tensor(np.array([theta0], dtype=np.float64), requires_grad=True)
    opt = nn.AdamW([p])
    p.grad = np.ones(1)
    opt.step()
    expected = theta0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 1e-2 * theta0)
    assert p.data[0] == pytest.approx(expected, rel=1e-12)


def test_adamw_decoupled_decay_with_zero_grad():
    theta0 = np.array([2.0, -4.0])
    p = Tensor(theta0.copy(), requires_grad=True, dtype=np.float64)
    opt = nn.AdamW([p], lr=1e-3, weight_decay=1e-2)
    p.grad = np.zeros(2)
    opt.step()
    assert np.allclose(p.data, theta0 - 1e-3 * 1e-2 * theta0, rtol=1e-12)


def test_adamw_aborts_on_nan_gradient():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = nn.AdamW([p])
    p.grad = np.array([np.nan, 0.0], dtype=np.float32)
    with pytest.raises(TrainingDiverged):
        opt.step()


def test_adamw_bit_reproducible():
    def run():
        r = rng(77)
        p = Tensor(r.normal(size=8).astype(np.float32), requires_grad=True)
        opt = nn.AdamW([p])
        for _ in range(5):
            p.grad = r.normal(size=8).astype(np.float32)
            opt.step()
        return p.data.copy()

    assert np.array_equal(run(), run())


# ---- param_count -------------------------------------------------------

def test_param_count_single_affine():
    lin = nn.Linear(78, 82, rng())
    assert nn.param_count(lin) == 78 * 82 + 82


def test_param_count_empty():
    assert nn.param_count([]) == 0
