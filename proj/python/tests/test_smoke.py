import itertools
import math

import numpy as np
import pytest

import cmam


def log_softmax(x):
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def brute_force_nll(logits, label):
    """Sum over every frame path that collapses to the label."""
    lp = log_softmax(logits)
    T, C = logits.shape
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if cmam.collapse_path(list(path)) == list(label):
            total += math.exp(sum(lp[t, c] for t, c in enumerate(path)))
    return -math.log(total)


def test_ctc_matches_enumeration():
    rng = np.random.default_rng(0)
    for T, C, label in [(1, 2, [1]), (3, 3, [1, 2]), (4, 3, [2, 2]), (5, 4, [3, 1, 3])]:
        x = rng.normal(size=(T, C))
        assert cmam.ctc_loss(x, label) == pytest.approx(brute_force_nll(x, label), abs=1e-10)
        assert cmam.ctc_brute_force(x, label) == pytest.approx(brute_force_nll(x, label), abs=1e-10)


def test_ctc_gradient_rows_sum_to_zero():
    x = np.random.default_rng(1).normal(size=(6, 4))
    loss, grad = cmam.ctc_loss_grad(x, [1, 3, 3])
    assert loss == pytest.approx(cmam.ctc_loss(x, [1, 3, 3]))
    assert grad.shape == (6, 4)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_ctc_infeasible():
    with pytest.raises(cmam.InfeasibleAlignment):
        cmam.ctc_loss(np.zeros((2, 3)), [1, 1])
    assert cmam.ctc_min_frames([1, 1, 2]) == 4


def test_decoding_and_metrics():
    logits = np.full((6, 3), -5.0)
    for t, c in enumerate([1, 1, 0, 1, 2, 2]):
        logits[t, c] = 5.0
    assert cmam.greedy_decode(logits) == [1, 1, 2]
    assert cmam.edit_ops([1, 2, 3], [1, 3, 3, 4]) == (1, 0, 1)
    r = cmam.report([[1, 2, 3, 4, 5]], [[]])
    assert r["cer"] == 1.0 and r["deletions"] == 5


def test_generator_and_dataset_roundtrip(tmp_path):
    a = cmam.generate(seed=4, vocab_size=10, lines=5)
    b = cmam.generate(seed=4, vocab_size=10, lines=5)
    assert [s[0] for s in a] == [s[0] for s in b]
    for (_, ia, la), (_, ib, lb) in zip(a, b):
        assert la == lb
        np.testing.assert_array_equal(ia, ib)
        assert ia.shape[0] == 32
        assert ia.min() >= 0.0 and ia.max() <= 1.0
        assert all(1 <= c <= 10 for c in la)
    vocab = cmam.glyph_names(10)
    cmam.emit_dataset(a, vocab, tmp_path / "d")
    samples, vocab_back = cmam.load_dataset(tmp_path / "d")
    assert vocab_back == vocab
    for (_, img, label), (_, img_back, label_back) in zip(a, samples):
        assert label_back == label
        np.testing.assert_array_equal(img_back, np.round(255 * img) / 255)


def test_model_shapes():
    m = cmam.Model(kind="cmam", profile="tiny", vocab_size=7, seed=3)
    image = np.random.default_rng(2).uniform(size=(32, 40))
    logits = m.logits(image)
    assert logits.shape == (m.frames(40), 8)
    assert m.frames(40) == 10
    np.testing.assert_array_equal(logits, m.logits(image))
    assert isinstance(m.decode(image), list)
    assert m.loss(image, [1, 2]) > 0.0
    assert m.loss(image, list(range(1, 8)) * 2) is None  # 14 labels, 10 frames
    crnn = cmam.Model(kind="crnn", profile="tiny", vocab_size=7)
    assert crnn.logits(image).shape == logits.shape
    with pytest.raises(cmam.ConfigError):
        cmam.Model(profile="huge")


def test_train_evaluate_load(tmp_path):
    samples = cmam.generate(seed=5, vocab_size=4, lines=4, min_length=1, max_length=3)
    cmam.emit_dataset(samples, cmam.glyph_names(4), tmp_path / "d")
    config = f"""
profile = tiny
hidden = 8
feature_width = 6
conv_channels = 2,3,3,4
vocab_size = 4
max_epochs = 2
batch_size = 2
learning_rate = 0.003
train_data = {tmp_path / "d"}
valid_data = {tmp_path / "d"}
checkpoint = {tmp_path / "m.ckpt"}
"""
    out = cmam.train(config)
    assert [e["epoch"] for e in out["epochs"]] == [1, 2]
    assert out["log"].splitlines()[0].startswith("epoch 1 loss ")
    report = cmam.evaluate(tmp_path / "m.ckpt", tmp_path / "d")
    assert report["cer"] == pytest.approx(out["best_valid_cer"])
    assert "worst" in report["report"]
    model = cmam.Model.load(tmp_path / "m.ckpt")
    assert model.logits(samples[0][1]).shape[1] == 5
    with pytest.raises(cmam.ConfigError):
        cmam.parse_config("no_such_key = 1")


def test_gradcheck_suite_tiny():
    cases = cmam.gradcheck_suite("tiny")
    assert len(cases) > 20
    assert all(c["passed"] for c in cases), [c for c in cases if not c["passed"]]
