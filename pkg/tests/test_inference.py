import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ehwsn import inference as inf
from ehwsn.dataio import ConfigError, SensorWindow, gen_synthetic, window_stream


def _split(seed, per_class=50):
    s = gen_synthetic(4, per_class, 3, 60, 0.1, 13 + seed)
    w = window_stream(s, 60, 30)
    r = np.random.default_rng(seed)
    idx = r.permutation(len(w))
    cut = int(0.7 * len(w))
    return [w[i] for i in idx[:cut]], [w[i] for i in idx[cut:]], s.channel_ranges


@pytest.fixture(scope="module")
def trained():
    out = []
    for seed in range(5):
        tr, te, ranges = _split(seed)
        m = inf.train(tr, inf.Hyper(epochs=30, seed=seed), inf.window_bounds(ranges, 60), n_classes=4)
        y = np.array([w.label for w in te])
        calib = (inf.as_matrix(tr), np.array([w.label for w in tr]))
        out.append((m, inf.quantize(m, 16, calib), inf.quantize(m, 12, calib), te, y))
    return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def finite_difference_check(seed=0, eps=1e-6):
    r = np.random.default_rng(seed)
    p = inf.init_params(7, 5, 3, r)
    p = {k: v + r.normal(0, 0.1, v.shape) for k, v in p.items()}
    X, y = r.normal(size=(11, 7)), r.integers(0, 3, 11)
    _, g = inf.loss_and_grads(p, X, y, 1e-3)
    worst = 0.0
    for name, arr in p.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = inf.loss_and_grads(p, X, y, 1e-3)[0]
            arr[idx] = old - eps
            down = inf.loss_and_grads(p, X, y, 1e-3)[0]
            arr[idx] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(num - g[name][idx]) / max(1e-8, abs(num) + abs(g[name][idx])))
    return worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    assert finite_difference_check(seed) <= 1e-4


def test_softmax_rows_sum_to_one(rng):
    p = inf.softmax(rng.normal(0, 50, size=(20, 6)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert np.all(p >= 0)


def test_separable_problem_is_learned():
    s = gen_synthetic(4, 30, 1, 60, 0.0, 5)
    w = window_stream(s, 60, 30)
    m = inf.train(w, inf.Hyper(epochs=50), inf.window_bounds(s.channel_ranges, 60), n_classes=4)
    assert inf.accuracy(m, w, [x.label for x in w]) == 1.0


def test_held_out_accuracy(trained):
    for m, _, _, te, y in trained:
        assert inf.accuracy(m, te, y) >= 0.95


def test_train_deterministic():
    tr, _, ranges = _split(0, per_class=10)
    a = inf.train(tr, inf.Hyper(epochs=3, seed=2), inf.window_bounds(ranges, 60))
    b = inf.train(tr, inf.Hyper(epochs=3, seed=2), inf.window_bounds(ranges, 60))
    assert a.w1.tobytes() == b.w1.tobytes() and a.b2.tobytes() == b.b2.tobytes()


def test_train_needs_two_classes():
    with pytest.raises(ConfigError):
        inf.train(np.zeros((4, 3)), labels=[1, 1, 1, 1])


# --------------------------------------------------------------------------
# quantization
# --------------------------------------------------------------------------


@pytest.mark.parametrize("bits", [16, 12])
def test_weight_round_trip_within_half_scale(trained, bits):
    m = trained[0][0]
    q = inf.quantize(m, bits)
    for name in ("w1", "w2"):
        scale = q.scales[name]
        assert np.max(np.abs(getattr(q, name) - getattr(m, name))) <= scale / 2 + 1e-15
        assert np.max(np.abs(getattr(q, name + "q"))) <= q.qmax


def test_16_bit_accuracy_within_one_point(trained):
    for m, q16, _, te, y in trained:
        assert inf.accuracy(q16, te, y) >= inf.accuracy(m, te, y) - 0.01


def test_12_bit_mean_loss_small(trained):
    a16 = np.mean([inf.accuracy(q16, te, y) for _, q16, _, te, y in trained])
    a12 = np.mean([inf.accuracy(q12, te, y) for _, _, q12, te, y in trained])
    assert a12 >= a16 - 0.005


def test_16_bit_argmax_agreement(trained):
    for m, q16, _, te, _ in trained:
        agree = np.mean(inf.logits(m, te).argmax(1) == inf.logits(q16, te).argmax(1))
        assert agree >= 0.98


def test_fixed_point_logits_are_integer_multiples(trained):
    q = trained[0][1]
    z = inf.logits(q, trained[0][3][:5])
    sc = q.scales
    unit = sc["w2"] * sc["h"] * (1 << (q.bits - 1))
    np.testing.assert_allclose(z / unit, np.round(z / unit), atol=1e-6)


@pytest.mark.parametrize("bits", [8, 32])
def test_quantize_rejects_bits(trained, bits):
    with pytest.raises(ConfigError):
        inf.quantize(trained[0][0], bits)


def test_shape_error(trained):
    m = trained[0][0]
    with pytest.raises(inf.ShapeError):
        inf.infer(m, SensorWindow(np.zeros((60, 2))))


@pytest.mark.parametrize("which", [0, 1, 2])
def test_save_load_round_trip(tmp_path, trained, which):
    m, te = trained[1][which], trained[1][3]
    path = tmp_path / "m.ehqm"
    inf.save_model(path, m)
    back = inf.load_model(path)
    assert back.bits == m.bits
    np.testing.assert_array_equal(inf.logits(back, te), inf.logits(m, te))


def test_load_model_rejects_garbage(tmp_path, trained):
    p = tmp_path / "bad.ehqm"
    p.write_bytes(b"EHQM" + b"\x00" * 10)
    with pytest.raises(inf.ShapeError):
        inf.load_model(p)
    inf.save_model(p, trained[0][1])
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(inf.ShapeError):
        inf.load_model(p)


def test_infer_returns_confidence(trained):
    m, _, _, te, _ = trained[0]
    c, conf = inf.infer(m, te[0])
    assert 0 <= c < 4 and 0.25 <= conf <= 1.0


# --------------------------------------------------------------------------
# memoization and voting
# --------------------------------------------------------------------------


def _bank(rng):
    T = rng.normal(size=(3, 60, 2))
    return inf.TemplateBank(T, np.full(2, 1e-3)), T


def test_correlate_self_and_negated(rng):
    bank, T = _bank(rng)
    c, r = inf.correlate(SensorWindow(T[1]), bank)
    assert c == 1 and r == pytest.approx(1.0)
    bank2 = inf.TemplateBank(T[:1], bank.quant_step)
    assert inf.correlate(SensorWindow(-T[0]), bank2)[1] == pytest.approx(-1.0)


def test_correlate_noisy_copy(rng):
    bank, T = _bank(rng)
    T = T / T.std(axis=1, keepdims=True)
    bank = inf.TemplateBank(T, bank.quant_step)
    c, r = inf.correlate(SensorWindow(T[2] + rng.normal(0, 0.01, T[2].shape)), bank)
    assert c == 2 and r >= 0.95


@given(st.floats(0.01, 100), st.floats(-100, 100))
def test_correlate_affine_invariant(a, b):
    r = np.random.default_rng(0)
    T = r.normal(size=(2, 60, 1))
    bank = inf.TemplateBank(T, np.full(1, 1e-3))
    assert inf.correlate(SensorWindow(a * T[0] + b), bank) == (0, pytest.approx(1.0))


def test_correlate_constant_windows():
    T = np.stack([np.full((60, 1), 0.5), np.linspace(0, 1, 60)[:, None]])
    bank = inf.TemplateBank(T, np.full(1, 1e-3))
    assert inf.correlate(SensorWindow(np.full(60, 0.5)), bank) == (0, 1.0)
    assert inf.correlate(SensorWindow(np.full(60, 0.9)), bank)[1] == 0.0


def test_template_bank_from_windows():
    s = gen_synthetic(3, 10, 2, 60, 0.05, 1)
    w = window_stream(s, 60, 30)
    bank = inf.build_template_bank(w, 3, s.channel_ranges)
    assert bank.templates.shape == (3, 60, 2)
    for c in range(3):
        assert any(np.array_equal(bank.templates[c], x.values) for x in w if x.label == c)


@pytest.mark.parametrize(
    "results,expected",
    [
        ([(1, 0.9)], 1),
        ([(1, 0.6), (2, 0.5), (2, 0.4)], 2),
        ([(0, 0.5), (3, 0.5)], 0),
        ([None, (2, 0.1), None], 2),
        ([(3, 0.7), (1, 0.3), (1, 0.3)], 3),
    ],
)
def test_ensemble(results, expected):
    assert inf.ensemble(results) == expected


def test_ensemble_empty():
    with pytest.raises(ValueError):
        inf.ensemble([None, None])
