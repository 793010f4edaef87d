import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import fd_check
from opendx.casesim import ClinicalCase, Dataset
from opendx.openset import (
    BG,
    CE,
    EOS,
    EXTRA_TARGET,
    NOTA_ID,
    MlpModel,
    ModelError,
    OptState,
    TrainConfig,
    adam_step,
    backward,
    batch_losses,
    decide,
    encode,
    forward,
    init_model,
    load_model,
    loss_and_grads,
    loss_ce,
    loss_eos,
    predict_open_set,
    save_model,
    targets_for,
    train,
)


def test_encode_examples():
    np.testing.assert_array_equal(encode(ClinicalCase(0, (0, 3)), 5), [1, 0, 0, 1, 0])
    np.testing.assert_array_equal(encode(ClinicalCase(0, ()), 5), np.zeros(5))
    with pytest.raises(ModelError):
        encode(ClinicalCase(0, (5,)), 5)


def test_encode_injective_on_all_subsets():
    subsets = [s for r in range(5) for s in itertools.combinations(range(4), r)]
    codes = {tuple(encode(ClinicalCase(0, s), 4)) for s in subsets}
    assert len(codes) == len(subsets) == 16


def test_forward_hand_example():
    m = MlpModel(np.array([[1.0], [1.0]]), np.zeros(1), np.array([[1.0, -1.0]]), CE, (0, 1))
    fw = forward(m, [1.0, 1.0])
    np.testing.assert_allclose(fw.logits, [2, -2])
    np.testing.assert_allclose(fw.probs, [0.98201, 0.01799], atol=5e-6)
    assert fw.probs[0] == pytest.approx(1 / (1 + math.exp(-4)), abs=1e-15)


def test_forward_zero_weights_uniform():
    m = MlpModel(np.zeros((4, 3)), np.zeros(3), np.zeros((3, 5)), EOS, range(5))
    np.testing.assert_allclose(forward(m, np.ones(4)).probs, 0.2)


def test_forward_matches_naive_composition(rng):
    m = init_model(7, range(4), CE, hidden=6, seed=3)
    m.b1[:] = rng.normal(size=6)
    x = rng.integers(0, 2, size=7).astype(float)
    h = [max(0.0, sum(x[i] * m.w1[i, j] for i in range(7)) + m.b1[j]) for j in range(6)]
    z = [sum(h[j] * m.w2[j, k] for j in range(6)) for k in range(4)]
    e = [math.exp(v - max(z)) for v in z]
    np.testing.assert_allclose(forward(m, x).probs, [v / sum(e) for v in e], atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ModelError):
        forward(init_model(4, [0, 1], CE, 3), np.ones(5))


def test_output_dims():
    assert init_model(6, range(5), CE, 3).n_outputs == 5
    assert init_model(6, range(5), EOS, 3).n_outputs == 5
    bg = init_model(6, range(5), BG, 3)
    assert bg.n_outputs == 6 and bg.class_ids[-1] == NOTA_ID and bg.bg_index == 5


def test_model_invariants_enforced():
    with pytest.raises(ModelError):
        MlpModel(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)), BG, (0, 1))
    with pytest.raises(ModelError):
        MlpModel(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 3)), CE, (0, 1))
    with pytest.raises(ModelError):
        MlpModel(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)), "OS", (0, 1))


def test_losses():
    assert loss_ce([0.7, 0.3], 0) == pytest.approx(0.356675, abs=1e-6)
    assert loss_ce(np.full(6, 1 / 6), 4) == pytest.approx(math.log(6), abs=1e-12)
    assert loss_ce([0.0, 1.0], 1) == 0.0
    assert loss_ce([0.0, 1.0], 0) == pytest.approx(-math.log(1e-12))
    assert loss_eos([0.9, 0.1], "extra") == pytest.approx(1.20397, abs=1e-5)
    assert loss_eos(np.full(7, 1 / 7), "extra") == pytest.approx(math.log(7), abs=1e-12)
    assert loss_eos([0.6, 0.4], 1) == loss_ce([0.6, 0.4], 1)
    with pytest.raises(ModelError):
        loss_ce([0.5, 0.5], 2)


@settings(max_examples=50)
@given(st.lists(st.floats(-8, 8), min_size=2, max_size=10))
def test_eos_extra_minimised_by_uniform(logits):
    z = np.array(logits)
    p = np.exp(z - z.max())
    p /= p.sum()
    c = z.size
    if np.ptp(p) > 1e-6:
        assert loss_eos(p, "extra") > math.log(c)


def test_batch_losses_match_scalar_losses(rng):
    z = rng.normal(size=(5, 4))
    t = np.array([0, 3, EXTRA_TARGET, 1, EXTRA_TARGET])
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    expect = [loss_eos(p[i], int(t[i])) for i in range(5)]
    np.testing.assert_allclose(batch_losses(z, t), expect, atol=1e-12)


def test_eos_uniform_gives_zero_gradient():
    m = MlpModel(np.ones((3, 2)), np.zeros(2), np.zeros((2, 4)), EOS, range(4))
    g = backward(m, np.ones(3), EXTRA_TARGET)
    for v in g.values():
        assert np.abs(v).max() == 0.0


def test_ce_onehot_gives_zero_gradient():
    w2 = np.array([[800.0, -800.0]])
    m = MlpModel(np.ones((1, 1)), np.zeros(1), w2, CE, (0, 1))
    g = backward(m, np.ones(1), 0)
    assert all(np.abs(v).max() == 0.0 for v in g.values())


def test_extra_branch_only_for_eos():
    with pytest.raises(ModelError):
        backward(init_model(3, [0, 1], CE, 2), np.ones(3), EXTRA_TARGET)


@pytest.mark.parametrize("mode", [CE, BG, EOS])
def test_finite_difference_gradients(mode):
    rng = np.random.default_rng({CE: 1, BG: 2, EOS: 3}[mode])
    worst = 0.0
    for trial in range(50):
        d, h, c = rng.integers(2, 7), rng.integers(2, 6), rng.integers(2, 5)
        m = init_model(d, range(c), mode, hidden=h, seed=int(rng.integers(1 << 30)))
        m.b1[:] = rng.normal(scale=0.5, size=h)
        x = rng.integers(0, 2, size=d).astype(float)
        x[0] = 1.0
        if mode == EOS and trial % 2:
            target = EXTRA_TARGET
        else:
            target = int(rng.integers(m.n_outputs))
        params = m.params()
        g = backward(m, x, target)
        worst = max(worst, fd_check(lambda: loss_and_grads(m, x, np.array([target]))[0], params, g))
    assert worst <= 1.0


def test_adam_scalar_first_step():
    p = {"w": np.array([0.0])}
    st_ = OptState.zeros_like(p)
    adam_step(p, st_, {"w": np.array([0.3])}, 1e-3)
    oracle = -1e-3 * 0.3 / (0.3 + 1e-8)
    assert p["w"][0] == pytest.approx(oracle, rel=1e-12)
    assert p["w"][0] == pytest.approx(-9.99997e-4, rel=5e-6)


def _adam_oracle(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


@settings(max_examples=30)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(-2, 2))
def test_adam_matches_scalar_oracle(gs, theta0):
    p = {"w": np.array([theta0])}
    s = OptState.zeros_like(p)
    for g in gs:
        adam_step(p, s, {"w": np.array([g])}, 1e-3)
    assert p["w"][0] == pytest.approx(_adam_oracle(theta0, gs, 1e-3), abs=1e-12)


def test_adam_zero_gradient_noop():
    p = {"w": np.arange(4.0)}
    s = OptState.zeros_like(p)
    for _ in range(3):
        adam_step(p, s, {"w": np.zeros(4)}, 1e-3)
    np.testing.assert_array_equal(p["w"], np.arange(4.0))


def _toy(n=200, seed=0):
    """Two classes with disjoint finding sets {0..4} and {5..9}."""
    rng = np.random.default_rng(seed)
    labels, cases = [], []
    for i in range(n):
        c = i % 2
        present = sorted(rng.choice(5, size=3, replace=False) + 5 * c)
        labels.append(c)
        cases.append(present)
    indptr = np.cumsum([0] + [len(x) for x in cases])
    return Dataset(labels, indptr, np.concatenate(cases), vocab_size=10)


def test_toy_task_learned():
    tr, va = _toy(200, 0), _toy(40, 1)
    m0 = init_model(10, [0, 1], CE, hidden=8, seed=0)
    m, hist = train(m0, tr, va, TrainConfig(max_epochs=50, patience=50, batch_size=16))
    pred = forward(m, tr.to_dense()).probs.argmax(1)
    assert (pred == tr.labels).mean() >= 0.99
    assert len(hist) == 50


def test_patience_zero_runs_one_epoch():
    _, hist = train(init_model(10, [0, 1], CE, 4), _toy(20), _toy(10, 2), TrainConfig(patience=0))
    assert len(hist) == 1


def test_training_deterministic():
    cfg = TrainConfig(max_epochs=5, patience=5, seed=9, batch_size=8)
    a, ha = train(init_model(10, [0, 1], EOS, 4, seed=1), _toy(30), _toy(10, 2), cfg)
    b, hb = train(init_model(10, [0, 1], EOS, 4, seed=1), _toy(30), _toy(10, 2), cfg)
    assert ha == hb and a.param_hash() == b.param_hash()


def test_train_errors():
    m = init_model(10, [0], CE, 4)
    with pytest.raises(ModelError):
        train(m, _toy(10), _toy(4), TrainConfig())  # label 1 outside class_ids
    with pytest.raises(ModelError):
        train(m, Dataset.empty(10), _toy(4), TrainConfig())
    with pytest.raises(ModelError):
        TrainConfig(patience=300).validate()


def test_targets_for_modes():
    labels = [4, 9, 7]
    assert targets_for(init_model(3, [4, 7], BG, 2), labels).tolist() == [0, 2, 1]
    assert targets_for(init_model(3, [4, 7], EOS, 2), labels).tolist() == [0, EXTRA_TARGET, 1]
    with pytest.raises(ModelError):
        targets_for(init_model(3, [4, 7], CE, 2), labels)


def test_decide_rules():
    ids = (10, 11, NOTA_ID)
    assert decide([0.2, 0.1, 0.7], ids, 0.0, bg_index=2)[0] is None
    assert decide([0.6, 0.3, 0.1], ids, 0.5, bg_index=2) == (10, 0.6)
    assert decide([0.6, 0.4], (10, 11), 0.0)[0] == 10
    assert decide([0.6, 0.4], (10, 11), 1.0 + 1e-12)[0] is None


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.sampled_from([CE, BG, EOS]), st.floats(0, 1), st.floats(0, 1))
def test_predict_monotone_in_theta(seed, mode, t1, t2):
    lo, hi = sorted((t1, t2))
    m = init_model(5, range(3), mode, hidden=4, seed=seed)
    x = np.random.default_rng(seed).integers(0, 2, 5)
    p_lo, p_hi = predict_open_set(m, x, lo), predict_open_set(m, x, hi)
    if p_lo.is_nota:
        assert p_hi.is_nota
    if not p_hi.is_nota:
        assert p_hi.label == p_lo.label
    if not p_lo.is_nota:
        assert p_lo.label != NOTA_ID and p_lo.confidence == p_lo.probs[:3].max()


def test_model_roundtrip(tmp_path):
    m = init_model(6, [3, 5], BG, 4, seed=2)
    save_model(m, tmp_path / "m.json", seed=2)
    back = load_model(tmp_path / "m.json")
    assert back.param_hash() == m.param_hash() and back.class_ids == m.class_ids
