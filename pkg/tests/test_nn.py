import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weakclick.nn import Adam, AdamState, Conv1d, Linear, Tensor, adam_step, gradcheck, no_grad
from weakclick.nn import functional as F
from weakclick.nn.checkpoint import decode_params, encode_params, load_checkpoint, save_checkpoint
from weakclick.fileio import FormatError

EPS = 1e-3
TOL = 1e-3


def _param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


# Every op is checked through a random projection so the scalar loss
# touches every output element.
def _op_cases(rng):
    x3 = _param(rng, 2, 9, 3)
    w1 = _param(rng, 4, 3, 3)
    b1 = _param(rng, 4)
    x4 = _param(rng, 2, 6, 5, 2)
    w2 = _param(rng, 3, 2, 3, 3)
    b2 = _param(rng, 3)
    a = _param(rng, 3, 4)
    b = _param(rng, 4, 5)
    lw = _param(rng, 5, 4)
    lb = _param(rng, 5)
    mask = np.ones((2, 9))
    mask[1, 6:] = 0
    cat2 = _param(rng, 2, 9, 2)

    def proj(shape, seed):
        return np.random.default_rng(seed).standard_normal(shape)

    return {
        "matmul": ([a, b], lambda: ((a @ b) * proj((3, 5), 1)).sum()),
        "linear": ([a, lw, lb], lambda: (F.linear(a, lw, lb) * proj((3, 5), 2)).sum()),
        "conv1d_causal": ([x3, w1, b1], lambda: (F.conv1d(x3, w1, b1, dilation=2, pad_left=4) * proj((2, 9, 4), 3)).sum()),
        "conv1d_strided": ([x3, w1, b1], lambda: (F.conv1d(x3, w1, b1, stride=2, pad_left=1, pad_right=1) * proj((2, 5, 4), 4)).sum()),
        "conv2d": ([x4, w2, b2], lambda: (F.conv2d(x4, w2, b2, stride=2, padding=1) * proj((2, 3, 3, 3), 5)).sum()),
        "relu": ([a], lambda: (F.relu(a) * proj((3, 4), 6)).sum()),
        "dropout": ([a], lambda: (F.dropout(a, 0.4, np.random.default_rng(11), True) * proj((3, 4), 7)).sum()),
        "log_softmax": ([a], lambda: (F.log_softmax(a) * proj((3, 4), 8)).sum()),
        "mean_pool_time": ([x3], lambda: (F.mean_pool_time(x3, mask) * proj((2, 3), 9)).sum()),
        "reshape_concat": ([x3, cat2], lambda: (F.concat([x3, cat2], axis=-1).reshape(2, -1) * proj((2, 45), 10)).sum()),
        "upsample1d": ([x3], lambda: (F.upsample_nearest1d(x3, 20) * proj((2, 20, 3), 12)).sum()),
        "upsample2d": ([x4], lambda: (F.upsample_nearest2d(x4, (12, 10)) * proj((2, 12, 10, 2), 13)).sum()),
        "nll_loss": ([a], lambda: F.nll_loss(F.log_softmax(a), [0, 3, 1])),
        "exp_log_div": ([a, lw], lambda: ((a * a + 1.0).log().exp() / (lw[:3, :] * lw[:3, :] + 2.0)).sum()),
        "gaussian_kl": ([a, lw], lambda: F.gaussian_kl(a, lw[:3, :])),
        "mse_sum": ([a], lambda: F.mse_sum(a, proj((3, 4), 14))),
    }


@pytest.mark.parametrize("seed", range(20))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, (params, loss) in _op_cases(rng).items():
        res = gradcheck(loss, params, eps=EPS)
        assert res.passed(TOL), f"{name}: rel error {res.rel_error:.2e} ({res.n_checked} coords)"


def _direct_conv1d(x, w, b, dilation, pad_left, stride=1):
    bsz, t, c = x.shape
    o, _, k = w.shape
    xp = np.pad(x, ((0, 0), (pad_left, 0), (0, 0)))
    t_out = (xp.shape[1] - (k - 1) * dilation - 1) // stride + 1
    out = np.zeros((bsz, t_out, o))
    for bi in range(bsz):
        for ti in range(t_out):
            for oi in range(o):
                acc = b[oi]
                for j in range(k):
                    acc += w[oi, :, j] @ xp[bi, ti * stride + j * dilation, :]
                out[bi, ti, oi] = acc
    return out


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 11, 3))
    w = rng.standard_normal((4, 3, 3))
    b = rng.standard_normal(4)
    got = F.conv1d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                   dilation=2, pad_left=4).data
    np.testing.assert_allclose(got, _direct_conv1d(x, w, b, 2, 4), atol=1e-12)
    got = F.conv1d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                   stride=3).data
    np.testing.assert_allclose(got, _direct_conv1d(x, w, b, 1, 0, stride=3), atol=1e-12)


def test_causal_conv_impulse_support_starts_at_impulse():
    rng = np.random.default_rng(1)
    conv = Conv1d(1, 1, 3, rng, dilation=2, causal=True, dtype=np.float64)
    conv.bias.data[:] = 0
    conv.weight.data[:] = 1.0
    x = np.zeros((1, 20, 1))
    x[0, 7, 0] = 1.0
    y = conv(Tensor(x, dtype=np.float64)).data[0, :, 0]
    assert y.shape == (20,)
    assert np.all(y[:7] == 0)
    assert np.flatnonzero(y).tolist() == [7, 9, 11]


def test_conv_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ValueError, match=r"conv1d.*\(2, 5, 3\)"):
        F.conv1d(Tensor(np.zeros((2, 5, 3))), Tensor(np.zeros((4, 2, 3))))


def test_log_softmax_rows_normalise():
    x = Tensor(np.random.default_rng(2).standard_normal((6, 4)) * 10)
    out = F.log_softmax(x).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-6)


def test_nll_loss_values():
    perfect = Tensor(np.log(np.array([[1.0, 1e-30], [1e-30, 1.0]])), dtype=np.float64)
    assert F.nll_loss(perfect, [0, 1]).item() == pytest.approx(0.0, abs=1e-12)
    uniform = Tensor(np.log(np.full((3, 2), 0.5)))
    assert F.nll_loss(uniform, [0, 1, 1]).item() == pytest.approx(math.log(2), abs=1e-6)


def test_dropout_train_scales_and_eval_is_identity():
    x = Tensor(np.ones((200, 500)))
    y = F.dropout(x, 0.4, np.random.default_rng(0), training=True).data
    kept = y[y > 0]
    np.testing.assert_allclose(kept, 1.0 / 0.6, rtol=1e-6)
    assert abs(y.mean() - 1.0) < 0.01
    assert F.dropout(x, 0.4, None, training=False) is x


def test_adam_zero_gradient_leaves_parameters():
    p = np.array([1.0, -2.0, 3.0])
    state = AdamState()
    out = adam_step([p], [np.zeros(3)], state)
    np.testing.assert_array_equal(out[0], p)


def test_adam_first_step_moves_by_lr():
    p = np.array([0.5, -0.5])
    state = AdamState(lr=0.001)
    out = adam_step([p], [np.array([3.0, -7.0])], state)
    np.testing.assert_allclose(np.abs(out[0] - p), 0.001, rtol=1e-4)


def _reference_adam_on_square(steps, lr=0.01):
    # straight transcription of the update rule, scalar floats only
    x, m, v = 1.0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= lr * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    return x


def test_adam_quadratic_bowl():
    x = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([x], lr=0.01)
    for _ in range(200):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
    ref = _reference_adam_on_square(200)
    assert abs(x.data[0]) < 0.05
    assert x.data[0] == pytest.approx(ref, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(4, 12), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 10_000))
def test_conv1d_gradcheck_random_shapes(batch, channels, length, k, dilation, seed):
    rng = np.random.default_rng(seed)
    x = _param(rng, batch, length, channels)
    w = _param(rng, 2, channels, k)
    proj = rng.standard_normal((batch, length, 2))
    res = gradcheck(lambda: (F.conv1d(x, w, pad_left=(k - 1) * dilation, dilation=dilation) * proj).sum(),
                    [x, w], eps=EPS)
    assert res.passed(TOL)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    layer = Linear(3, 2, rng)
    save_checkpoint(tmp_path / "m", {"kind": "linear", "in": 3}, layer.state_dict())
    arch, state = load_checkpoint(tmp_path / "m")
    assert arch == {"kind": "linear", "in": 3}
    for k, v in layer.state_dict().items():
        np.testing.assert_array_equal(state[k], v)
    blob = encode_params(layer.state_dict())
    assert blob[:4] == b"MDL1"
    with pytest.raises(FormatError):
        decode_params(blob[:-3])
