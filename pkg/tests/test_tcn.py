import math

import numpy as np
import pytest

from weakclick import tcn
from weakclick.nn import Tensor, gradcheck, no_grad
from weakclick.nn import functional as F
from weakclick.tcn import Standardiser, TcnConfig, TcnModel

PAPER_WIDTHS = [1, 3, 4, 5, 7] + [2 * n for n in (8, 16, 24, 32, 64, 128)]


@pytest.mark.parametrize("m", PAPER_WIDTHS)
def test_layer_parameter_counts_match_table(m):
    counts = TcnModel(m).layer_parameter_counts()
    assert counts.pop("blocks.0.conv1.conv") == 500 * m + 25
    assert counts.pop("blocks.0.downsample") == 25 * (m + 1)
    assert counts.pop("fc") == 52
    assert len(counts) == 15
    assert set(counts.values()) == {12_525}


def test_receptive_field_formula():
    assert tcn.receptive_field(TcnConfig()) == 9_691
    assert tcn.receptive_field(TcnConfig(kernel=2, blocks=1)) == 3
    assert tcn.receptive_field(TcnConfig(kernel=3, blocks=2)) == 13


def _positive_model(m, cfg, seed=0):
    model = TcnModel(m, cfg, seed=seed, dtype=np.float64)
    for p in model.parameters():
        p.data = np.abs(p.data) + 0.01  # no ReLU ever switches off
    return model.eval()


@pytest.mark.parametrize("kernel,blocks", [(2, 1), (3, 2), (4, 3)])
def test_receptive_field_matches_impulse_response(kernel, blocks):
    cfg = TcnConfig(channels=3, blocks=blocks, kernel=kernel, dropout=0.0)
    model = _positive_model(2, cfg)
    t = 80
    x = Tensor(np.ones((1, t, 2)), requires_grad=True, dtype=np.float64)
    out = model.features(x)
    out[:, t - 1, :].sum().backward()
    support = np.flatnonzero(np.abs(x.grad[0]).sum(axis=1) > 0)
    assert support[-1] == t - 1
    assert len(support) == tcn.receptive_field(cfg)


def test_conv_stack_is_causal():
    cfg = TcnConfig(channels=4, blocks=3, kernel=3, dropout=0.0)
    model = TcnModel(3, cfg, seed=1, dtype=np.float64).eval()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 60, 3))
    base = model.features(Tensor(x)).data
    for t in (0, 17, 59):
        y = x.copy()
        y[0, t] += 5.0
        changed = np.flatnonzero(np.abs(model.features(Tensor(y)).data - base).sum(axis=(0, 2)) > 0)
        assert changed.size and changed.min() >= t


def test_output_is_normalised_and_inference_is_deterministic():
    model = TcnModel(4, TcnConfig(blocks=2, kernel=3)).eval()
    x = Tensor(np.random.default_rng(0).standard_normal((3, 50, 4)).astype(np.float32))
    with no_grad():
        a, b = model(x).data, model(x).data
    np.testing.assert_allclose(np.exp(a).sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(a, b)


def test_channel_mismatch_is_rejected():
    with pytest.raises(ValueError, match="channels"):
        TcnModel(4)(Tensor(np.zeros((1, 10, 5))))


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("weight_norm", [False, True])
def test_shrunken_tcn_gradcheck(seed, weight_norm):
    cfg = TcnConfig(channels=4, blocks=2, kernel=3, dropout=0.3, weight_norm=weight_norm)
    model = TcnModel(3, cfg, seed=seed, dtype=np.float64).train()
    rng = np.random.default_rng(seed + 100)
    x = Tensor(rng.standard_normal((2, 12, 3)), dtype=np.float64)
    mask = np.ones((2, 12))
    mask[1, 9:] = 0
    loss = lambda: F.nll_loss(model(x, mask, np.random.default_rng(7)), [0, 1])
    res = gradcheck(loss, model.parameters(), eps=1e-3)
    assert res.passed(1e-3), res


def test_last_step_readout_uses_mask():
    cfg = TcnConfig(channels=4, blocks=2, kernel=3, readout="last", dropout=0.0)
    model = TcnModel(2, cfg, seed=0, dtype=np.float64).eval()
    x = np.random.default_rng(0).standard_normal((1, 20, 2))
    full = model(Tensor(x[:, :15])).data
    padded = np.concatenate([x[:, :15], np.zeros((1, 5, 2))], axis=1)
    mask = np.zeros((1, 20))
    mask[0, :15] = 1
    np.testing.assert_allclose(model(Tensor(padded), mask).data, full, atol=1e-12)


def test_standardiser_examples():
    s = Standardiser(np.array([2.0]), np.array([0.5]))
    assert s.apply(np.array([[3.0]]))[0, 0] == pytest.approx(2.0)
    vals = np.random.default_rng(0).standard_normal((3, 501)) * [[1.0], [5.0], [0.1]] + [[0.0], [3.0], [-2.0]]
    fitted = Standardiser.fit(vals)
    np.testing.assert_allclose(np.median(fitted.apply(vals), axis=1), 0.0, atol=1e-6)
    with pytest.raises(ValueError, match="channel pkf"):
        Standardiser.fit(np.vstack([vals[:1], np.full((1, 501), 4.0)]), names=["rms", "pkf"])
    back = Standardiser.from_json(fitted.to_json())
    np.testing.assert_array_equal(back.median, fitted.median)


def test_standardisation_absorbs_positive_affine_rescaling():
    rng = np.random.default_rng(3)
    clips = rng.standard_normal((3, 400))
    seq = rng.standard_normal((3, 40))
    scale = np.array([[2.0], [0.01], [300.0]])
    shift = np.array([[5.0], [-1.0], [0.3]])
    a = Standardiser.fit(clips).apply(seq)
    b = Standardiser.fit(clips * scale + shift).apply(seq * scale + shift)
    np.testing.assert_allclose(a, b, atol=1e-4)
    model = TcnModel(3, TcnConfig(blocks=2, kernel=3)).eval()
    pa = tcn.predict_log_probs(model, [a])
    pb = tcn.predict_log_probs(model, [b])
    assert pa.argmax() == pb.argmax()


def _separable(n, t=40, seed=0):
    rng = np.random.default_rng(seed)
    seqs, labels = [], []
    for i in range(n):
        y = i % 2
        s = rng.standard_normal((2, t)).astype(np.float32)
        if y:
            s[0, ::5] += 3.0  # periodic spikes only in positives
        seqs.append(s)
        labels.append(y)
    return seqs, labels


def test_initial_loss_near_ln2():
    seqs, labels = _separable(16, seed=1)
    model = TcnModel(2, TcnConfig(), seed=0)
    x, mask = tcn.pad_batch(seqs[:8])
    with no_grad():
        loss = F.nll_loss(model.eval()(Tensor(x), mask), labels[:8]).item()
    assert abs(loss - math.log(2)) < 0.15


def test_overfits_separable_sequences():
    seqs, labels = _separable(20, seed=2)
    cfg = TcnConfig(channels=8, blocks=3, kernel=3, dropout=0.0, lr=0.01, patience=100)
    model = TcnModel(2, cfg, seed=0)
    result = tcn.train(model, seqs, labels, seqs, labels, epochs=50, seed=0)
    pred = tcn.predict_log_probs(model, seqs).argmax(axis=1)
    assert (pred == np.asarray(labels)).all()
    assert result.trace[-1].train_loss < result.trace[0].train_loss


def test_training_is_bit_deterministic(tmp_path):
    seqs, labels = _separable(12, seed=3)
    cfg = TcnConfig(channels=4, blocks=2, kernel=3, patience=100)
    runs = []
    for k in range(2):
        model = TcnModel(2, cfg, seed=5)
        res = tcn.train(model, seqs[:8], labels[:8], seqs[8:], labels[8:], epochs=4, seed=9)
        tcn.save_tcn(tmp_path / f"m{k}", model)
        runs.append(res.trace)
    assert runs[0] == runs[1]
    assert (tmp_path / "m0.mdl").read_bytes() == (tmp_path / "m1.mdl").read_bytes()
    loaded, arch = tcn.load_tcn(tmp_path / "m0")
    assert arch["m"] == 2
    np.testing.assert_array_equal(tcn.predict_log_probs(loaded, seqs), tcn.predict_log_probs(model, seqs))


def test_train_rejects_empty_splits():
    model = TcnModel(2, TcnConfig(blocks=1, kernel=2))
    with pytest.raises(ValueError, match="empty training"):
        tcn.train(model, [], [], [np.zeros((2, 5))], [0])
    with pytest.raises(ValueError, match="empty validation"):
        tcn.train(model, [np.zeros((2, 5))], [0], [], [])


def test_nan_input_raises_numeric_error():
    model = TcnModel(2, TcnConfig(blocks=1, kernel=2))
    bad = [np.full((2, 5), np.nan, dtype=np.float32)] * 2
    with pytest.raises(tcn.NumericError):
        tcn.train(model, bad, [0, 1], bad, [0, 1], epochs=1)
